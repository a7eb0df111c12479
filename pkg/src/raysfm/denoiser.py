"""Toy multi-view transformer denoiser with its own gradient tape.

The model predicts clean per-pixel ray origin/endpoint tensors from noisy
ones, conditioned on image features: a small learned patch encoder stands in
for a pretrained backbone, a per-cell affine map embeds the masked noisy rays,
and a stack of pre-norm self-attention blocks (time-conditioned via learned
scale/shift) attends across all views' cells jointly. Everything runs on the
reverse-mode engine in `autodiff`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule
from .errors import ConfigError, InvalidInputError, InvalidModelError, NumericError
from .export import atomic_write_bytes, write_json


@dataclass(frozen=True)
class TrainConfig:
    grid_h: int = 16
    grid_w: int = 16
    image_size: int = 32
    c1: int = 64  # image feature channels
    c2: int = 64  # ray embedding channels
    layers: int = 4
    heads: int = 4
    time_dim: int = 64
    lr: float = 1e-3
    batch_size: int = 4
    iterations: int = 20000
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size % self.grid_h or self.image_size % self.grid_w:
            raise ConfigError(f"grid {self.grid_h}x{self.grid_w} must divide image size {self.image_size}")
        d = self.c1 + self.c2
        if d % self.heads:
            raise ConfigError(f"token dim {d} not divisible by {self.heads} heads")
        if d % 4:
            raise ConfigError(f"token dim {d} must be divisible by 4 for positional encoding halves")
        if self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @property
    def patch_h(self) -> int:
        return self.image_size // self.grid_h

    @property
    def patch_w(self) -> int:
        return self.image_size // self.grid_w

    @property
    def token_dim(self) -> int:
        return self.c1 + self.c2


class DenoiserParams:
    """Named parameter tensors plus their gradient buffers."""

    def __init__(self, config: TrainConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def count(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _tensor_shapes(cfg: TrainConfig) -> dict[str, tuple]:
    """Parameter name -> shape; a pure function of the config."""
    d = cfg.token_dim
    p = cfg.patch_h * cfg.patch_w * 3
    shapes = {
        "enc.embed.w": (p, cfg.c1),
        "enc.embed.b": (cfg.c1,),
        "enc.mix1.w": (cfg.c1, cfg.c1),
        "enc.mix1.b": (cfg.c1,),
        "enc.mix2.w": (cfg.c1, cfg.c1),
        "enc.mix2.b": (cfg.c1,),
        "ray_embed.w": (9, cfg.c2),
        "ray_embed.b": (cfg.c2,),
    }
    for i in range(cfg.layers):
        pre = f"blocks.{i}"
        shapes[f"{pre}.mod.w"] = (cfg.time_dim, 4 * d)
        shapes[f"{pre}.mod.b"] = (4 * d,)
        for name in ("q", "k", "v", "o"):
            shapes[f"{pre}.attn.{name}.w"] = (d, d)
            shapes[f"{pre}.attn.{name}.b"] = (d,)
        shapes[f"{pre}.mlp.fc1.w"] = (d, 4 * d)
        shapes[f"{pre}.mlp.fc1.b"] = (4 * d,)
        shapes[f"{pre}.mlp.fc2.w"] = (4 * d, d)
        shapes[f"{pre}.mlp.fc2.b"] = (d,)
    shapes["head.w"] = (d, 8)
    shapes["head.b"] = (8,)
    return shapes


def param_count(cfg: TrainConfig) -> int:
    return sum(int(np.prod(s)) for s in _tensor_shapes(cfg).values())


def init_params(cfg: TrainConfig, seed: int | None = None) -> DenoiserParams:
    """Gaussian init scaled by fan-in; modulation maps start at zero so every
    block begins as a plain pre-norm transformer."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    dtype = np.dtype(cfg.dtype)
    tensors: dict[str, Tensor] = {}
    for name, shape in _tensor_shapes(cfg).items():
        if name.endswith(".b") or ".mod." in name:
            data = np.zeros(shape, dtype=dtype)
        elif name == "head.w":
            data = (0.02 * rng.standard_normal(shape)).astype(dtype)
        else:
            fan_in = shape[0]
            data = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
        tensors[name] = Tensor(data, requires_grad=True)
    return DenoiserParams(cfg, tensors)


def params_finite(params: DenoiserParams) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in params.tensors.values())


# -- positional encodings -----------------------------------------------------

def _sinusoid(pos: np.ndarray, dim: int) -> np.ndarray:
    """Classic sin/cos interleaved encoding of integer positions, shape (..., dim)."""
    pos = np.asarray(pos, dtype=np.float64)
    half = dim // 2
    freqs = 1.0 / (10000.0 ** (np.arange(half) / half))
    ang = pos[..., None] * freqs
    out = np.empty(pos.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def positional_encoding(view_index: int, cell_index: tuple, grid_hw: tuple, dim: int) -> np.ndarray:
    """Parameter-free token encoding: view-index half and flat-cell-index half."""
    h, w = grid_hw
    i, j = cell_index
    if not (0 <= i < h and 0 <= j < w):
        raise InvalidInputError(f"cell index {cell_index} outside grid {grid_hw}")
    half = dim // 2
    return np.concatenate([_sinusoid(np.array(view_index), half), _sinusoid(np.array(i * w + j), half)])


def _posenc_grid(view_indices: np.ndarray, h: int, w: int, dim: int) -> np.ndarray:
    """(N, h, w, dim) positional grid for the given per-view indices."""
    half = dim // 2
    view = _sinusoid(np.asarray(view_indices), half)  # (N, half)
    cells = _sinusoid(np.arange(h * w), half).reshape(h, w, half)
    n = len(view_indices)
    out = np.empty((n, h, w, dim))
    out[..., :half] = view[:, None, None, :]
    out[..., half:] = cells[None]
    return out


# -- forward -------------------------------------------------------------------

def _encode(params: DenoiserParams, images: np.ndarray) -> Tensor:
    """(V, S, S, 3) images -> (V, h, w, c1) feature tensor (tape-connected)."""
    cfg = params.config
    v = images.shape[0]
    dtype = np.dtype(cfg.dtype)
    patches = (
        images.reshape(v, cfg.grid_h, cfg.patch_h, cfg.grid_w, cfg.patch_w, 3)
        .transpose(0, 1, 3, 2, 4, 5)
        .reshape(v, cfg.grid_h, cfg.grid_w, cfg.patch_h * cfg.patch_w * 3)
        .astype(dtype)
    )
    x = ad.add(ad.matmul(Tensor(patches), params["enc.embed.w"]), params["enc.embed.b"])
    x = ad.add(ad.matmul(ad.gelu(x), params["enc.mix1.w"]), params["enc.mix1.b"])
    x = ad.add(ad.matmul(ad.gelu(x), params["enc.mix2.w"]), params["enc.mix2.b"])
    return x


def encode_images(params: DenoiserParams, images: np.ndarray) -> np.ndarray:
    """Deterministic per-view feature grids (no tape)."""
    if images.ndim != 4 or images.shape[-1] != 3:
        raise InvalidInputError(f"expected (N, S, S, 3) images, got {images.shape}")
    with ad.no_grad():
        return _encode(params, images).data


def embed_rays(params: DenoiserParams, conditioned: np.ndarray) -> np.ndarray:
    """Per-cell affine map of masked noisy rays: (..., 9) -> (..., c2)."""
    if conditioned.shape[-1] != 9:
        raise InvalidInputError(f"conditioned rays must have 9 channels, got {conditioned.shape}")
    dtype = np.dtype(params.config.dtype)
    return conditioned.astype(dtype) @ params["ray_embed.w"].data + params["ray_embed.b"].data


def _forward_tokens(
    params: DenoiserParams,
    feats: Tensor,
    cond: np.ndarray,
    t_batch: np.ndarray,
    view_indices: np.ndarray | None = None,
) -> Tensor:
    """Core network: feats (B,N,h,w,c1) Tensor, cond (B,N,h,w,9) array,
    t_batch (B,) ints -> (B,N,h,w,8) prediction Tensor."""
    cfg = params.config
    dtype = np.dtype(cfg.dtype)
    b, n, h, w, _ = cond.shape
    d = cfg.token_dim
    n_tokens = n * h * w

    if view_indices is None:
        view_indices = np.arange(n)
    pos = _posenc_grid(view_indices, h, w, d).astype(dtype)

    ray_tokens = ad.add(ad.matmul(Tensor(cond.astype(dtype)), params["ray_embed.w"]), params["ray_embed.b"])
    x = ad.concat([ray_tokens, feats], axis=-1)
    x = ad.add(x, Tensor(pos[None]))
    x = ad.reshape(x, (b, n_tokens, d))

    t_emb = Tensor(_sinusoid(t_batch, cfg.time_dim).astype(dtype))
    hd = d // cfg.heads
    one = np.ones((), dtype=dtype)

    for i in range(cfg.layers):
        pre = f"blocks.{i}"
        mod = ad.add(ad.matmul(t_emb, params[f"{pre}.mod.w"]), params[f"{pre}.mod.b"])
        g1 = ad.reshape(ad.narrow(mod, 1, 0, d), (b, 1, d))
        b1 = ad.reshape(ad.narrow(mod, 1, d, d), (b, 1, d))
        g2 = ad.reshape(ad.narrow(mod, 1, 2 * d, d), (b, 1, d))
        b2 = ad.reshape(ad.narrow(mod, 1, 3 * d, d), (b, 1, d))

        a = ad.add(ad.mul(ad.layer_norm(x), ad.add(g1, Tensor(one))), b1)
        q = ad.add(ad.matmul(a, params[f"{pre}.attn.q.w"]), params[f"{pre}.attn.q.b"])
        k = ad.add(ad.matmul(a, params[f"{pre}.attn.k.w"]), params[f"{pre}.attn.k.b"])
        v = ad.add(ad.matmul(a, params[f"{pre}.attn.v.w"]), params[f"{pre}.attn.v.b"])
        q = ad.scale(q, 1.0 / np.sqrt(hd))  # fold the score scaling into q
        q = ad.transpose(ad.reshape(q, (b, n_tokens, cfg.heads, hd)), (0, 2, 1, 3))
        k = ad.transpose(ad.reshape(k, (b, n_tokens, cfg.heads, hd)), (0, 2, 1, 3))
        v = ad.transpose(ad.reshape(v, (b, n_tokens, cfg.heads, hd)), (0, 2, 1, 3))
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2)))
        att = ad.matmul(ad.softmax(scores, axis=-1), v)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (b, n_tokens, d))
        att = ad.add(ad.matmul(att, params[f"{pre}.attn.o.w"]), params[f"{pre}.attn.o.b"])
        x = ad.add(x, att)

        m = ad.add(ad.mul(ad.layer_norm(x), ad.add(g2, Tensor(one))), b2)
        m = ad.add(ad.matmul(m, params[f"{pre}.mlp.fc1.w"]), params[f"{pre}.mlp.fc1.b"])
        m = ad.add(ad.matmul(ad.gelu(m), params[f"{pre}.mlp.fc2.w"]), params[f"{pre}.mlp.fc2.b"])
        x = ad.add(x, m)

    x = ad.layer_norm(x)
    out = ad.add(ad.matmul(x, params["head.w"]), params["head.b"])
    return ad.reshape(out, (b, n, h, w, 8))


def denoise_forward(
    params: DenoiserParams,
    features: np.ndarray,
    conditioned_rays: np.ndarray,
    t: int,
    view_indices: np.ndarray | None = None,
) -> np.ndarray:
    """Predict the clean ray tensor (N, h, w, 8) for one scene (no tape).

    `features` is the (N, h, w, c1) image-feature grid, `conditioned_rays` the
    (N, h, w, 9) masked noisy rays with the mask channel appended.
    """
    if not params_finite(params):
        raise InvalidModelError("denoiser parameters contain non-finite values")
    if conditioned_rays.ndim != 4 or conditioned_rays.shape[-1] != 9:
        raise InvalidInputError(f"conditioned rays must be (N, h, w, 9), got {conditioned_rays.shape}")
    with ad.no_grad():
        out = _forward_tokens(
            params,
            Tensor(features.astype(np.dtype(params.config.dtype))[None]),
            conditioned_rays[None],
            np.array([t]),
            view_indices=view_indices,
        )
    pred = out.data[0]
    if not np.all(np.isfinite(pred)):
        raise InvalidModelError(f"non-finite activations in forward pass at t={t}")
    return pred


# -- training ------------------------------------------------------------------

class Adam:
    """Adam with bias correction; state lives alongside the named tensors."""

    def __init__(self, params: DenoiserParams, lr: float | None = None, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = params.config.lr if lr is None else lr
        self.b1, self.b2, self.eps = b1, b2, eps
        self.step_count = 0
        dtype = np.dtype(params.config.dtype)
        self.m = {k: np.zeros(t.data.shape, dtype=dtype) for k, t in params.tensors.items()}
        self.v = {k: np.zeros(t.data.shape, dtype=dtype) for k, t in params.tensors.items()}

    def step(self):
        self.step_count += 1
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for name, t in self.params.tensors.items():
            if t.grad is None:
                continue
            g = t.grad.astype(t.data.dtype, copy=False)
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            t.data = t.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)


def _normalize_batch(batch):
    images, rays, masks = batch
    images = np.asarray(images, dtype=np.float64)
    rays = np.asarray(rays, dtype=np.float64)
    masks = np.asarray(masks, dtype=bool)
    if images.ndim == 4:
        images, rays, masks = images[None], rays[None], masks[None]
    if images.ndim != 5 or rays.ndim != 5 or rays.shape[-1] != 8 or masks.shape != rays.shape[:-1]:
        raise InvalidInputError(
            f"inconsistent batch shapes images={images.shape} rays={rays.shape} masks={masks.shape}"
        )
    if images.shape[:2] != rays.shape[:2]:
        raise InvalidInputError("batch images and rays disagree on (B, N)")
    return images, rays, masks


def training_loss(params: DenoiserParams, batch, sched: NoiseSchedule, t_batch: np.ndarray, eps: np.ndarray) -> Tensor:
    """Tape-connected masked x0 loss for fixed noise draws (deterministic)."""
    cfg = params.config
    images, rays, masks = _normalize_batch(batch)
    b, n = images.shape[:2]

    ab = sched.alpha_bar[t_batch].reshape(b, 1, 1, 1, 1)
    noisy = np.sqrt(ab) * rays + np.sqrt(1.0 - ab) * eps
    m = masks[..., None].astype(np.float64)
    cond = np.concatenate([noisy * m, m], axis=-1)

    feats = _encode(params, images.reshape(b * n, cfg.image_size, cfg.image_size, 3))
    feats = ad.reshape(feats, (b, n, cfg.grid_h, cfg.grid_w, cfg.c1))
    pred = _forward_tokens(params, feats, cond, t_batch)

    dtype = np.dtype(cfg.dtype)
    n_valid = int(masks.sum())
    if n_valid == 0:
        raise InvalidInputError("batch has no valid pixels")
    diff = ad.sub(pred, Tensor(rays.astype(dtype)))
    diff = ad.mul(diff, Tensor(m.astype(dtype)))
    return ad.scale(ad.sum_all(ad.mul(diff, diff)), 1.0 / (8 * n_valid))


def train_step(params: DenoiserParams, batch, sched: NoiseSchedule, rng: np.random.Generator, opt: Adam | None = None):
    """One optimization step: sample (t, eps), masked x0 loss, backprop, Adam.

    Mutates `params` in place (single writer) and returns (loss, params).
    Deterministic given (params, batch, rng state).
    """
    images, rays, masks = _normalize_batch(batch)
    b = images.shape[0]
    if opt is None:
        opt = Adam(params)
    t_batch = rng.integers(1, sched.T + 1, size=b)
    eps = rng.standard_normal(rays.shape)

    loss = training_loss(params, (images, rays, masks), sched, t_batch, eps)
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise NumericError(f"non-finite training loss: {_diagnose_nonfinite(params)}")
    params.zero_grad()
    loss.backward()
    opt.step()
    if not params_finite(params):
        raise NumericError(f"non-finite parameters after update: {_diagnose_nonfinite(params)}")
    return loss_val, params


def _diagnose_nonfinite(params: DenoiserParams) -> str:
    for name, t in params.tensors.items():
        if not np.all(np.isfinite(t.data)):
            return f"tensor {name!r} has non-finite values"
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return f"gradient of {name!r} has non-finite values"
    return "all parameters finite; loss computation itself overflowed"


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params: DenoiserParams, opt: Adam | None = None, iteration: int = 0, rng: np.random.Generator | None = None):
    """JSON manifest plus raw little-endian float32 blobs per named tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": asdict(params.config),
        "iteration": int(iteration),
        "tensors": {k: list(t.data.shape) for k, t in params.tensors.items()},
        "optimizer": None,
        "rng_state": None,
    }
    for name, t in params.tensors.items():
        atomic_write_bytes(path / f"{name}.f32", t.data.astype("<f4").tobytes())
    if opt is not None:
        manifest["optimizer"] = {"step_count": opt.step_count, "lr": opt.lr, "b1": opt.b1, "b2": opt.b2, "eps": opt.eps}
        for name in params.tensors:
            atomic_write_bytes(path / f"{name}.m.f32", opt.m[name].astype("<f4").tobytes())
            atomic_write_bytes(path / f"{name}.v.f32", opt.v[name].astype("<f4").tobytes())
    if rng is not None:
        manifest["rng_state"] = json.loads(json.dumps(rng.bit_generator.state))
    write_json(path / "manifest.json", manifest)


def load_checkpoint(path):
    """Reload (params, opt, iteration, rng); bit-exact for float32 configs."""
    path = Path(path)
    with open(path / "manifest.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    cfg = TrainConfig(**manifest["config"])
    dtype = np.dtype(cfg.dtype)
    expected = _tensor_shapes(cfg)
    if set(manifest["tensors"]) != set(expected):
        raise ConfigError("checkpoint tensor names do not match the config")
    tensors = {}
    for name, shape in expected.items():
        raw = np.frombuffer((path / f"{name}.f32").read_bytes(), dtype="<f4")
        if raw.size != int(np.prod(shape)):
            raise ConfigError(f"checkpoint blob {name} has wrong size")
        tensors[name] = Tensor(raw.reshape(shape).astype(dtype), requires_grad=True)
    params = DenoiserParams(cfg, tensors)

    opt = None
    if manifest.get("optimizer"):
        o = manifest["optimizer"]
        opt = Adam(params, lr=o["lr"], b1=o["b1"], b2=o["b2"], eps=o["eps"])
        opt.step_count = int(o["step_count"])
        for name, shape in expected.items():
            opt.m[name] = np.frombuffer((path / f"{name}.m.f32").read_bytes(), dtype="<f4").reshape(shape).astype(dtype)
            opt.v[name] = np.frombuffer((path / f"{name}.v.f32").read_bytes(), dtype="<f4").reshape(shape).astype(dtype)

    rng = None
    if manifest.get("rng_state"):
        rng = np.random.default_rng(0)
        state = manifest["rng_state"]
        state["state"] = {k: int(v) for k, v in state["state"].items()}
        rng.bit_generator.state = state
    return params, opt, int(manifest["iteration"]), rng
