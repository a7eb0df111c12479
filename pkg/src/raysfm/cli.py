"""Command-line surface: gen, train, infer, eval, export-ply.

Every command is reproducible from (config, seed) alone; each output directory
receives config.json, the exact resolved configuration that produced it.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import denoiser as dn
from . import diffusion, metrics, synthdata
from .errors import ConfigError, DataError, NumericError, RaySfmError
from .export import export_ply, load_raymap, raymap_point_cloud, save_raymap, write_json
from .geometry import PinholeCamera, RayMap, camera_center, patch_center_grid, rays_to_camera


def _load_config_file(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    try:
        with open(p, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e


def _resolve(args: argparse.Namespace, section: dict, defaults: dict) -> dict:
    """Flag > config-file section > default, for every known key."""
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in section:
            out[key] = section[key]
        else:
            out[key] = default
    return out


def _snapshot(out_dir, command: str, cfg: dict) -> None:
    write_json(Path(out_dir) / "config.json", {"command": command, **cfg})


# -- gen ------------------------------------------------------------------------

GEN_DEFAULTS = dict(
    out="dataset",
    records=20,
    seed=0,
    views_min=2,
    views_max=4,
    grid=16,
    image_size=32,
    dropout=0.15,
    symmetric=False,
)


def cmd_gen(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config).get("gen", {}), GEN_DEFAULTS)
    if cfg["records"] < 0:
        raise ConfigError("--records must be >= 0")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, "gen", cfg)
    if cfg["records"] == 0:
        write_json(out / "index.json", {"n_records": 0, "base_seed": cfg["seed"], "records": []})
        print("warning: --records 0, wrote an empty index", file=sys.stderr)
        return 0
    index = synthdata.generate_dataset(
        out,
        n_records=cfg["records"],
        base_seed=cfg["seed"],
        views=(cfg["views_min"], cfg["views_max"]),
        image_size=cfg["image_size"],
        grid_hw=(cfg["grid"], cfg["grid"]),
        dropout_rate=cfg["dropout"],
        symmetric=cfg["symmetric"],
    )
    n_train = sum(1 for r in index["records"] if r["split"] == "train")
    print(f"wrote {index['n_records']} records to {out} (train={n_train}, heldout={index['n_records'] - n_train})")
    return 0


# -- train ----------------------------------------------------------------------

TRAIN_DEFAULTS = dict(
    dataset="dataset",
    out="run",
    iterations=2000,
    batch_size=4,
    lr=1e-3,
    seed=0,
    c1=64,
    c2=64,
    layers=4,
    heads=4,
    log_every=100,
    checkpoint_every=0,
    resume=None,
    overfit_record=None,
)


class RecordCache:
    """Train-split records preloaded as float32 arrays, grouped by view count."""

    def __init__(self, dataset_dir, split="train", only_record=None):
        index = synthdata.load_index(dataset_dir)
        ids = [r["id"] for r in index["records"] if r["split"] == split]
        if only_record is not None:
            if only_record not in [r["id"] for r in index["records"]]:
                raise DataError(f"record {only_record} not in dataset index")
            ids = [only_record]
        if not ids:
            raise DataError(f"dataset {dataset_dir} has no '{split}' records")
        self.index = index
        self.entries = []
        for rid in ids:
            rec = synthdata.load_record(dataset_dir, rid)
            self.entries.append(
                dict(
                    id=rid,
                    images=rec.images.astype(np.float32),
                    rays=rec.ray_tensor().astype(np.float32),
                    masks=rec.masks,
                )
            )
        self.groups = {}
        for i, e in enumerate(self.entries):
            self.groups.setdefault(e["images"].shape[0], []).append(i)

    def sample_batch(self, rng: np.random.Generator, batch_size: int):
        counts = sorted(self.groups)
        weights = np.array([len(self.groups[c]) for c in counts], dtype=np.float64)
        n = counts[rng.choice(len(counts), p=weights / weights.sum())]
        idx = rng.choice(self.groups[n], size=min(batch_size, len(self.groups[n])), replace=True)
        images = np.stack([self.entries[i]["images"] for i in idx])
        rays = np.stack([self.entries[i]["rays"] for i in idx])
        masks = np.stack([self.entries[i]["masks"] for i in idx])
        return images, rays, masks


def cmd_train(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config).get("train", {}), TRAIN_DEFAULTS)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, "train", cfg)

    cache = RecordCache(cfg["dataset"], split="train", only_record=cfg["overfit_record"])
    grid = cache.index["grid"]
    image_size = cache.index["image_size"]

    if cfg["resume"]:
        params, opt, start_iter, rng = dn.load_checkpoint(cfg["resume"])
        if params.config.grid_h != grid[0] or params.config.image_size != image_size:
            raise ConfigError("checkpoint config does not match the dataset geometry")
        if opt is None or rng is None:
            raise ConfigError("checkpoint lacks optimizer/rng state; cannot resume")
    else:
        model_cfg = dn.TrainConfig(
            grid_h=grid[0],
            grid_w=grid[1],
            image_size=image_size,
            c1=cfg["c1"],
            c2=cfg["c2"],
            layers=cfg["layers"],
            heads=cfg["heads"],
            lr=cfg["lr"],
            batch_size=cfg["batch_size"],
            iterations=cfg["iterations"],
            seed=cfg["seed"],
        )
        params = dn.init_params(model_cfg)
        opt = dn.Adam(params)
        rng = np.random.default_rng(model_cfg.seed)
        start_iter = 0

    sched = diffusion.make_schedule()
    log_path = out / "train_log.jsonl"
    window = []
    with open(log_path, "a", encoding="utf-8") as log:
        for it in range(start_iter, cfg["iterations"]):
            batch = cache.sample_batch(rng, cfg["batch_size"])
            loss, _ = dn.train_step(params, batch, sched, rng, opt=opt)
            window.append(loss)
            step = it + 1
            if step % cfg["log_every"] == 0 or step == cfg["iterations"]:
                log.write(json.dumps({"iteration": step, "loss": float(np.mean(window))}) + "\n")
                log.flush()
                window = []
            if cfg["checkpoint_every"] and step % cfg["checkpoint_every"] == 0:
                dn.save_checkpoint(out / f"checkpoint_{step:06d}", params, opt, step, rng)
    dn.save_checkpoint(out / "checkpoint_final", params, opt, cfg["iterations"], rng)
    print(f"trained {cfg['iterations'] - start_iter} steps; checkpoint at {out / 'checkpoint_final'}")
    return 0


# -- infer ----------------------------------------------------------------------

INFER_DEFAULTS = dict(
    checkpoint=None,
    dataset="dataset",
    record=None,
    out="predictions",
    seeds=[0],
    num_steps=10,
    stop_frac=0.9,
)


def write_prediction(out_dir, record_id: str, seed: int, raymaps: list[RayMap], images=None, pixel_grid=None):
    """Persist one inference output set: raymaps, recovered cameras, PLY cloud."""
    pdir = Path(out_dir) / record_id / f"seed{seed:04d}"
    pdir.mkdir(parents=True, exist_ok=True)
    cameras = []
    pts_all, col_all = [], []
    for i, rm in enumerate(raymaps):
        save_raymap(rm, pdir / f"rays_view{i}.f32")
        try:
            cam = rays_to_camera(rm, pixel_grid=pixel_grid)
            cameras.append(
                {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                 "R": cam.R.ravel().tolist(), "t": cam.t.tolist(), "recovered": True}
            )
        except RaySfmError:
            cameras.append(
                {"fx": 1.0, "fy": 1.0, "cx": 0.0, "cy": 0.0,
                 "R": np.eye(3).ravel().tolist(), "t": [0.0, 0.0, 0.0], "recovered": False}
            )
        image = None if images is None else images[i]
        pts, col = raymap_point_cloud(rm, image)
        pts_all.append(pts)
        col_all.append(col)
    write_json(pdir / "cameras.json", {"record_id": record_id, "seed": seed, "cameras": cameras})
    export_ply(pdir / "cloud.ply", np.concatenate(pts_all), np.concatenate(col_all))
    return pdir


def cmd_infer(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config).get("infer", {}), INFER_DEFAULTS)
    if cfg["checkpoint"] is None:
        raise ConfigError("--checkpoint is required")
    if cfg["record"] is None:
        raise ConfigError("--record is required")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, "infer", cfg)

    params, _, _, _ = dn.load_checkpoint(cfg["checkpoint"])
    rec = synthdata.load_record(cfg["dataset"], cfg["record"])
    mc = params.config
    if rec.grid_hw != (mc.grid_h, mc.grid_w) or rec.image_size != mc.image_size:
        raise ConfigError(
            f"checkpoint geometry {(mc.grid_h, mc.grid_w, mc.image_size)} does not match "
            f"record {(rec.grid_hw, rec.image_size)}"
        )
    sched = diffusion.make_schedule()
    grid = patch_center_grid(mc.grid_h, mc.grid_w, mc.patch_h)
    for seed in cfg["seeds"]:
        raymaps = diffusion.reverse_sample(
            params, rec.images, sched, num_steps=cfg["num_steps"], stop_frac=cfg["stop_frac"], seed=seed
        )
        pdir = write_prediction(out, rec.record_id, seed, raymaps, images=rec.images, pixel_grid=grid)
        print(f"seed {seed}: wrote {pdir}")
    return 0


# -- eval -----------------------------------------------------------------------

EVAL_DEFAULTS = dict(
    pred="predictions",
    dataset="dataset",
    out="evalout",
    rot_thresh=15.0,
    center_thresh=0.1,
)


def _load_pred_cameras(path) -> list[PinholeCamera]:
    with open(path, "r", encoding="utf-8") as f:
        obj = json.load(f)
    cams = []
    for c in obj["cameras"]:
        cams.append(PinholeCamera(c["fx"], c["fy"], c["cx"], c["cy"], np.array(c["R"]).reshape(3, 3), np.array(c["t"])))
    return cams


def evaluate_prediction(pred_dir, rec: synthdata.DatasetRecord, rot_thresh=15.0, center_thresh=0.1) -> metrics.MetricReport:
    """Compare one seed's prediction directory against its GT record."""
    pred_dir = Path(pred_dir)
    pred_cams = _load_pred_cameras(pred_dir / "cameras.json")
    if len(pred_cams) != rec.n_views:
        raise DataError(f"{pred_dir}: {len(pred_cams)} predicted cameras vs {rec.n_views} views")
    pred_maps = [load_raymap(pred_dir / f"rays_view{i}.f32") for i in range(rec.n_views)]

    fg = rec.foreground()
    gt_pts, pred_pts_all, pred_pts_fg = [], [], []
    for i, rm in enumerate(pred_maps):
        pts_all, _ = raymap_point_cloud(rm)
        pred_pts_all.append(pts_all)
        fg_map = RayMap(origins=rm.origins, endpoints=rm.endpoints, valid=fg[i])
        pts_fg, _ = raymap_point_cloud(fg_map)
        pred_pts_fg.append(pts_fg)
        gt_map = rec.raymaps[i]
        gt_pts.append(raymap_point_cloud(gt_map)[0])
    gt_cloud = np.concatenate(gt_pts)
    pred_cloud = np.concatenate(pred_pts_all)
    pred_cloud_fg = np.concatenate(pred_pts_fg)

    return metrics.MetricReport(
        rotation_accuracy=metrics.rotation_accuracy(pred_cams, rec.cameras, rot_thresh),
        center_accuracy=metrics.center_accuracy(pred_cams, rec.cameras, center_thresh),
        chamfer=metrics.chamfer(metrics.normalize_cloud(pred_cloud), metrics.normalize_cloud(gt_cloud)),
        chamfer_fg=metrics.chamfer(metrics.normalize_cloud(pred_cloud_fg), metrics.normalize_cloud(gt_cloud)),
        rotation_thresh_deg=rot_thresh,
        center_thresh=center_thresh,
        record_id=rec.record_id,
    )


def cmd_eval(args) -> int:
    cfg = _resolve(args, _load_config_file(args.config).get("eval", {}), EVAL_DEFAULTS)
    pred_root = Path(cfg["pred"])
    if not pred_root.is_dir():
        raise DataError(f"prediction directory {pred_root} does not exist")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _snapshot(out, "eval", cfg)

    record_dirs = sorted(d for d in pred_root.iterdir() if d.is_dir())
    if not record_dirs:
        raise DataError(f"no prediction records under {pred_root}")
    lines = []
    reports = []
    for rdir in record_dirs:
        rec = synthdata.load_record(cfg["dataset"], rdir.name)
        for sdir in sorted(d for d in rdir.iterdir() if d.is_dir()):
            rep = evaluate_prediction(sdir, rec, cfg["rot_thresh"], cfg["center_thresh"])
            rep.record_id = f"{rdir.name}/{sdir.name}"
            reports.append(rep)
            lines.append(rep.to_json())

    agg = {
        "aggregate": True,
        "n": len(reports),
        "rotation_accuracy": float(np.mean([r.rotation_accuracy for r in reports])),
        "center_accuracy": float(np.mean([r.center_accuracy for r in reports])),
        "chamfer": float(np.mean([r.chamfer for r in reports])),
        "chamfer_fg": float(np.mean([r.chamfer_fg for r in reports])),
    }
    lines.append(json.dumps(agg, sort_keys=True))
    (out / "metrics.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(json.dumps(agg, sort_keys=True))
    return 0


# -- export-ply -------------------------------------------------------------------

def cmd_export_ply(args) -> int:
    cfg = _resolve(
        args,
        _load_config_file(args.config).get("export_ply", {}),
        dict(dataset="dataset", record=None, out="cloud.ply", binary=False),
    )
    if cfg["record"] is None:
        raise ConfigError("--record is required")
    rec = synthdata.load_record(cfg["dataset"], cfg["record"])
    pts, cols = [], []
    for i, rm in enumerate(rec.raymaps):
        p, c = raymap_point_cloud(rm, rec.images[i])
        pts.append(p)
        cols.append(c)
    export_ply(cfg["out"], np.concatenate(pts), np.concatenate(cols), binary=cfg["binary"])
    print(f"wrote {sum(len(p) for p in pts)} points to {cfg['out']}")
    return 0


# -- entry ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="raysfm", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--records", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--views-min", dest="views_min", type=int)
    g.add_argument("--views-max", dest="views_max", type=int)
    g.add_argument("--grid", type=int)
    g.add_argument("--image-size", dest="image_size", type=int)
    g.add_argument("--dropout", type=float)
    g.add_argument("--symmetric", action="store_const", const=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train the denoiser")
    t.add_argument("--config")
    t.add_argument("--dataset")
    t.add_argument("--out")
    t.add_argument("--iterations", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--c1", type=int)
    t.add_argument("--c2", type=int)
    t.add_argument("--layers", type=int)
    t.add_argument("--heads", type=int)
    t.add_argument("--log-every", dest="log_every", type=int)
    t.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    t.add_argument("--resume")
    t.add_argument("--overfit-record", dest="overfit_record")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="sample raymaps and recover cameras")
    i.add_argument("--config")
    i.add_argument("--checkpoint")
    i.add_argument("--dataset")
    i.add_argument("--record")
    i.add_argument("--out")
    i.add_argument("--seeds", type=int, nargs="+")
    i.add_argument("--num-steps", dest="num_steps", type=int)
    i.add_argument("--stop-frac", dest="stop_frac", type=float)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="evaluate predictions against ground truth")
    e.add_argument("--config")
    e.add_argument("--pred")
    e.add_argument("--dataset")
    e.add_argument("--out")
    e.add_argument("--rot-thresh", dest="rot_thresh", type=float)
    e.add_argument("--center-thresh", dest="center_thresh", type=float)
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-ply", help="export a record's endpoint cloud as PLY")
    x.add_argument("--config")
    x.add_argument("--dataset")
    x.add_argument("--record")
    x.add_argument("--out")
    x.add_argument("--binary", action="store_const", const=True)
    x.set_defaults(func=cmd_export_ply)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except RaySfmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
