"""Multi-view geometry as per-pixel ray origins and endpoints, learned with a
small denoising diffusion transformer, plus the tooling around it: synthetic
scenes, camera recovery, metrics, and a CLI."""

import os as _os

# Honor RAYSFM_THREADS before numpy (and its BLAS) loads. This only takes
# effect when raysfm is imported first, which holds for the CLI entry points.
_cap = _os.environ.get("RAYSFM_THREADS")
if _cap:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _cap)

from .errors import (  # noqa: E402
    RaySfmError,
    ConfigError,
    DataError,
    NumericError,
    InvalidInputError,
    AtInfinityError,
    DegenerateSceneError,
    DegenerateRaysError,
    InsufficientDataError,
    DegenerateConfigurationError,
    InvalidPoseError,
    InvalidModelError,
)
from .geometry import (  # noqa: E402
    PinholeCamera,
    DepthMap,
    RayMap,
    RigidTransform,
    homogenize,
    dehomogenize,
    canonicalize_homogeneous,
    camera_center,
    unproject_endpoint,
    build_raymap,
    normalize_scene,
    rays_to_camera,
    pixel_center_grid,
    patch_center_grid,
)
from .diffusion import (  # noqa: E402
    NoiseSchedule,
    DiffusionState,
    make_schedule,
    forward_diffuse,
    mask_condition,
    x0_loss,
    reverse_sample,
)
from .denoiser import (  # noqa: E402
    TrainConfig,
    DenoiserParams,
    init_params,
    param_count,
    encode_images,
    embed_rays,
    positional_encoding,
    denoise_forward,
    train_step,
    Adam,
    save_checkpoint,
    load_checkpoint,
)
from .metrics import (  # noqa: E402
    MetricReport,
    rotation_accuracy,
    umeyama_align,
    center_accuracy,
    normalize_cloud,
    chamfer,
    random_rotation_baseline,
)
from .synthdata import (  # noqa: E402
    Scene,
    DatasetRecord,
    generate_scene,
    render_view,
    sample_camera_ring,
    apply_mask_dropout,
    make_record,
    generate_dataset,
    load_record,
    load_index,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
