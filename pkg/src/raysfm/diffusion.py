"""Noise schedule, forward process, masked loss, and reverse sampling.

States are N x H x W x 8 tensors holding per-pixel (origin, endpoint)
homogeneous 4-vector pairs for N views. Timestep 0 is the clean sample;
timestep T is pure Gaussian noise (the schedule has exactly zero terminal
signal, so inference can start from a standard normal draw).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, InvalidModelError

DEFAULT_T = 100
BETA_START = 1e-4
BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions alpha_bar[0..T] with alpha_bar[T] = 0."""

    alpha_bar: np.ndarray  # length T+1, alpha_bar[0] = 1, alpha_bar[T] = 0
    T: int

    def __post_init__(self):
        ab = np.ascontiguousarray(self.alpha_bar, dtype=np.float64)
        ab.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        if ab.shape != (self.T + 1,):
            raise InvalidInputError(f"alpha_bar must have length T+1={self.T + 1}, got {ab.shape}")
        if ab[0] != 1.0 or ab[-1] != 0.0:
            raise InvalidInputError("schedule must satisfy alpha_bar[0]=1 and alpha_bar[T]=0 exactly")
        if np.any(np.diff(ab) >= 0):
            raise InvalidInputError("alpha_bar must be strictly decreasing")

    def to_json(self) -> str:
        return json.dumps({"T": self.T, "alpha_bar": self.alpha_bar.tolist()})

    @staticmethod
    def from_json(text: str) -> "NoiseSchedule":
        obj = json.loads(text)
        return NoiseSchedule(alpha_bar=np.array(obj["alpha_bar"]), T=int(obj["T"]))


@dataclass(frozen=True)
class DiffusionState:
    """Noisy (or clean, at t=0) ray tensor with its validity mask."""

    s: np.ndarray  # N x H x W x 8
    t: int
    mask: np.ndarray  # N x H x W bool

    def __post_init__(self):
        s = np.ascontiguousarray(self.s, dtype=np.float64)
        mask = np.ascontiguousarray(self.mask, dtype=bool)
        s.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "mask", mask)
        if s.ndim != 4 or s.shape[-1] != 8:
            raise InvalidInputError(f"state must be NxHxWx8, got {s.shape}")
        if mask.shape != s.shape[:3]:
            raise InvalidInputError(f"mask shape {mask.shape} does not match state {s.shape}")


def make_schedule(T: int = DEFAULT_T) -> NoiseSchedule:
    """Linear-beta schedule rescaled so sqrt(alpha_bar) hits exactly 0 at t=T.

    The base is beta linear in [1e-4, 0.02] over T steps; the terminal rescale
    shifts and scales sqrt(alpha_bar) so the endpoint values 1 and 0 hold
    exactly while intermediate values keep their relative spacing.
    """
    T = int(T)
    if T < 2:
        raise InvalidInputError(f"schedule needs T >= 2, got {T}")
    betas = np.linspace(BETA_START, BETA_END, T)
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    sqrt_ab = np.sqrt(alpha_bar)
    sqrt_ab = (sqrt_ab - sqrt_ab[-1]) / (sqrt_ab[0] - sqrt_ab[-1])
    return NoiseSchedule(alpha_bar=sqrt_ab ** 2, T=T)


def forward_diffuse(s0: DiffusionState, t: int, eps: np.ndarray, sched: NoiseSchedule) -> DiffusionState:
    """sqrt(abar_t) * s0 + sqrt(1 - abar_t) * eps at timestep t; mask unchanged."""
    if s0.t != 0:
        raise InvalidInputError(f"forward_diffuse starts from a clean state, got t={s0.t}")
    if not (0 < t <= sched.T):
        raise InvalidInputError(f"timestep {t} outside (0, {sched.T}]")
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != s0.s.shape:
        raise InvalidInputError(f"noise shape {eps.shape} != state shape {s0.s.shape}")
    ab = sched.alpha_bar[t]
    st = np.sqrt(ab) * s0.s + np.sqrt(1.0 - ab) * eps
    return DiffusionState(s=st, t=int(t), mask=s0.mask)


def mask_condition(st: DiffusionState) -> np.ndarray:
    """(mask * s) with the mask appended as a ninth channel: N x H x W x 9."""
    m = st.mask[..., None].astype(np.float64)
    return np.concatenate([st.s * m, m], axis=-1)


def x0_loss(pred: np.ndarray, s0: DiffusionState) -> float:
    """MSE over the 8 channels of valid pixels; masked pixels contribute zero."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != s0.s.shape:
        raise InvalidInputError(f"prediction shape {pred.shape} != target shape {s0.s.shape}")
    n_valid = int(s0.mask.sum())
    if n_valid == 0:
        warnings.warn("x0_loss over an all-masked state; returning 0", RuntimeWarning)
        return 0.0
    diff = (pred - s0.s) * s0.mask[..., None]
    return float(np.sum(diff * diff) / (8 * n_valid))


def sampling_timesteps(T: int, num_steps: int) -> list[int]:
    """Evenly spaced descending timesteps ending at 0; the chain's first model
    call happens at T * (num_steps - 1) / num_steps, with the initial Gaussian
    draw standing in for the (zero-signal) terminal state."""
    if num_steps < 1:
        raise InvalidInputError(f"num_steps must be >= 1, got {num_steps}")
    ts = [int(round(T * k / num_steps)) for k in range(num_steps - 1, -1, -1)]
    out = []
    for t in ts:  # rounding can collide for num_steps close to T
        if not out or t < out[-1]:
            out.append(t)
    return out


def reverse_sample(
    params,
    images: np.ndarray,
    sched: NoiseSchedule,
    num_steps: int = 10,
    stop_frac: float = 0.9,
    seed: int = 0,
):
    """Sample raymaps for N views by reverse diffusion with early x0 readout.

    Runs deterministic (eta=0) updates built from the model's clean-sample
    prediction over `num_steps` evenly spaced timesteps from T down. At the
    first timestep <= stop_frac * T the x0 prediction is returned directly;
    stop_frac=1 disables early stopping and the final step's prediction is
    returned. Inference always conditions on all-ones masks. Pure function of
    (params, images, seed): same seed, same bits.

    Returns a list of N RayMap objects with every pixel marked valid.
    """
    from . import denoiser as dn
    from .geometry import RayMap

    if not (num_steps >= 1):
        raise InvalidInputError(f"num_steps must be >= 1, got {num_steps}")
    if not (0.0 < stop_frac <= 1.0):
        raise InvalidInputError(f"stop_frac must be in (0, 1], got {stop_frac}")
    if not dn.params_finite(params):
        raise InvalidModelError("denoiser parameters contain non-finite values")

    cfg = params.config
    n = images.shape[0]
    rng = np.random.default_rng(seed)

    feats = dn.encode_images(params, images)
    s = rng.standard_normal((n, cfg.grid_h, cfg.grid_w, 8))
    ones = np.ones((n, cfg.grid_h, cfg.grid_w), dtype=bool)

    def predict(s_t, t):
        cond = mask_condition(DiffusionState(s=s_t, t=t, mask=ones))
        x0 = dn.denoise_forward(params, feats, cond, t)
        if not np.all(np.isfinite(x0)):
            raise InvalidModelError(f"model produced non-finite prediction at t={t}")
        return x0

    ts = sampling_timesteps(sched.T, num_steps)
    threshold = stop_frac * sched.T
    x0 = None
    for i, t in enumerate(ts):
        x0 = predict(s, t)
        if stop_frac < 1.0 and t <= threshold:
            break
        if i + 1 < len(ts):
            t_next = ts[i + 1]
            ab_t = sched.alpha_bar[t]
            ab_next = sched.alpha_bar[t_next]
            eps_hat = (s - np.sqrt(ab_t) * x0) / np.sqrt(1.0 - ab_t)
            s = np.sqrt(ab_next) * x0 + np.sqrt(1.0 - ab_next) * eps_hat

    return [
        RayMap(origins=x0[i, ..., :4], endpoints=x0[i, ..., 4:], valid=ones[i])
        for i in range(n)
    ]
