"""Noise schedules, the forward process, the editing loss and reverse samplers.

Diffusion runs in pixel space.  Rasters live in [0, 1]; the model sees
them mapped to [-1, 1] (``to_model`` / ``from_model``).  Timesteps are
1-based: ``t`` in 1..T indexes ``beta[t - 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Tensor, no_grad, seeded_rng
from .numerics.tensor import mean, mul
from .vocab import null_tokens

ModelFn = Callable[[np.ndarray, "np.ndarray | None", np.ndarray, np.ndarray], "Tensor | np.ndarray"]

KEEP_SIDES = ("inside-mask-from-src", "inside-mask-from-edit")


@dataclass(frozen=True)
class NoiseSchedule:
    kind: str
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    def ab(self, t):
        """alpha_bar at 1-based timestep(s) ``t``."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")
        return self.alpha_bar[t - 1]


def make_schedule(kind: str = "linear", T: int = 200) -> NoiseSchedule:
    """Build a beta schedule.

    ``linear`` ramps beta from 1e-4 to 0.02 over ``T`` steps whatever
    ``T`` is; at short T the chain therefore stops short of pure noise.
    """
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    if kind == "linear":
        beta = np.linspace(1e-4, 0.02, T)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 1e-8, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(kind, T, beta, alpha_bar)


def to_model(x: np.ndarray) -> np.ndarray:
    return x * 2.0 - 1.0


def from_model(x: np.ndarray) -> np.ndarray:
    return (x + 1.0) * 0.5


def _bcast(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Closed-form marginal: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps.

    ``t`` is a scalar or one timestep per leading batch entry.
    """
    if np.shape(eps) != np.shape(x0):
        raise ValueError("eps must match x0 in shape")
    ab = _bcast(sched.ab(t), x0)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def q_step(x_prev: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One step of the forward Markov kernel, x_{t-1} -> x_t."""
    b = sched.beta[t - 1]
    return math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * noise


def _as_array(pred) -> np.ndarray:
    return pred.data if isinstance(pred, Tensor) else np.asarray(pred)


def editing_loss(
    model_fn: ModelFn,
    x_src: np.ndarray,
    x_tgt: np.ndarray,
    text_tokens: np.ndarray,
    t,
    eps: np.ndarray,
    sched: NoiseSchedule,
    w: float = 1.0,
    lambda_w=1,
) -> Tensor:
    """Importance-weighted noise-prediction loss for an editing batch.

    ``lambda_w`` is a scalar or one weight per record in {0, 1}.  Records
    with weight 0 are dropped before the model runs; the remainder is
    averaged, so the objective equals training on the kept records alone.
    """
    if x_tgt.shape != eps.shape or (x_src is not None and x_src.shape[:-1] != x_tgt.shape[:-1]):
        raise ValueError("x_src, x_tgt and eps must share batch and spatial dims")
    batch = x_tgt.shape[0]
    lam = np.broadcast_to(np.asarray(lambda_w), (batch,))
    if not np.isin(lam, (0, 1)).all():
        raise ValueError("importance weights must be 0 or 1")
    keep = lam > 0
    if not keep.any():
        return Tensor(np.zeros((), dtype=x_tgt.dtype))
    t = np.broadcast_to(np.asarray(t), (batch,))
    if not keep.all():
        x_tgt, eps, t = x_tgt[keep], eps[keep], t[keep]
        x_src = None if x_src is None else x_src[keep]
        text_tokens = text_tokens[keep]
    x_t = q_sample(x_tgt, t, eps, sched).astype(x_tgt.dtype)
    pred = model_fn(x_t, x_src, text_tokens, t)
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    diff = pred - Tensor(eps.astype(pred.dtype))
    return mul(mean(mul(diff, diff)), float(w))


def cfg_combine(uncond_pred: np.ndarray, cond_pred: np.ndarray, scale: float) -> np.ndarray:
    if np.shape(uncond_pred) != np.shape(cond_pred):
        raise ValueError("guidance predictions must share a shape")
    return uncond_pred + scale * (cond_pred - uncond_pred)


@dataclass
class BlendPolicy:
    """Masked mixing of the running latent with a source trajectory.

    ``inside-mask-from-src`` keeps the masked region from the source
    trajectory and the rest from the running edit; ``inside-mask-from-edit``
    is the mirror image.  Only the first ``tau`` fraction of reverse steps
    are blended.
    """

    mask: np.ndarray
    keep_side: str = "inside-mask-from-edit"
    tau: float = 1.0

    def __post_init__(self):
        if self.keep_side not in KEEP_SIDES:
            raise ValueError(f"keep_side must be one of {KEEP_SIDES}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        self.mask = np.asarray(self.mask, dtype=bool)

    def n_blend_steps(self, steps: int) -> int:
        return min(steps, math.ceil(self.tau * steps - 1e-9))

    def apply(self, running: np.ndarray, source: np.ndarray) -> np.ndarray:
        m = self.mask[..., None]
        if self.keep_side == "inside-mask-from-src":
            return np.where(m, source, running)
        return np.where(m, running, source)


def timestep_sequence(T: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced 1-based timesteps for a ``steps``-step sampler."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in 1..{T}")
    if steps == 1:
        return np.array([T])
    ts = np.floor(np.linspace(1, T, steps) + 0.5).astype(np.int64)
    return ts[::-1].copy()


def source_trajectory(
    x0_src: np.ndarray, sched: NoiseSchedule, timesteps: np.ndarray, eps: np.ndarray
) -> list[np.ndarray]:
    """Noised copies of the source synchronized with a sampler's timesteps.

    Entry ``i`` sits at ``timesteps[i]``; the extra final entry is the clean
    source, matching the sampler's state after its last step.
    """
    traj = [q_sample(x0_src, int(t), eps, sched) for t in timesteps]
    traj.append(np.array(x0_src, copy=True))
    return traj


def sample(
    model_fn: ModelFn,
    x_src: np.ndarray | None,
    text_tokens: np.ndarray,
    sched: NoiseSchedule,
    steps: int = 50,
    mode: str = "deterministic",
    guidance_scale: float = 1.0,
    seed: int = 0,
    blend: BlendPolicy | None = None,
    trajectory: list[np.ndarray] | None = None,
    shape: tuple[int, ...] | None = None,
    callback: Callable[[int, int, np.ndarray, bool], None] | None = None,
    start: str = "noise",
) -> np.ndarray:
    """Reverse diffusion; returns rasters in [0, 1].

    ``start="noise"`` begins from a standard normal draw.  ``start="source"``
    begins from the forward marginal at the first timestep with the source
    standing in for x0, which is what the model saw in training when the
    schedule stops short of pure noise.

    ``x_src`` is a batch of source rasters in [0, 1] (or None for
    unconditional use, then ``shape`` is required).  ``trajectory`` holds
    model-space latents as produced by :func:`source_trajectory` and must
    be supplied with ``blend``.
    """
    if mode not in ("deterministic", "ancestral"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    if start not in ("noise", "source"):
        raise ValueError(f"unknown start {start!r}")
    if start == "source" and x_src is None:
        raise ValueError("start='source' needs a source image")
    if x_src is not None:
        shape = x_src.shape
        src_m = to_model(x_src)
    else:
        src_m = None
    if shape is None:
        raise ValueError("shape is required when no source is given")
    text_tokens = np.asarray(text_tokens)
    if text_tokens.ndim == 1:
        text_tokens = np.broadcast_to(text_tokens, (shape[0], text_tokens.shape[0]))
    timesteps = timestep_sequence(sched.T, steps)
    n_blend = 0
    if blend is not None:
        if blend.mask.shape != tuple(shape[1:3]):
            raise ValueError(f"blend mask {blend.mask.shape} does not match raster {tuple(shape[1:3])}")
        if trajectory is None or len(trajectory) != len(timesteps) + 1:
            raise ValueError("blending needs a source trajectory with one entry per step plus the clean end")
        n_blend = blend.n_blend_steps(len(timesteps))

    rng = seeded_rng(seed, "sample", mode)
    x = rng.standard_normal(shape)
    if start == "source":
        ab_T = sched.alpha_bar[timesteps[0] - 1]
        x = math.sqrt(ab_T) * src_m + math.sqrt(1.0 - ab_T) * x
    batch = shape[0]
    guided = guidance_scale != 1.0
    if guided:
        tokens2 = np.concatenate([null_tokens(batch, text_tokens.shape[1]), text_tokens])
        src2 = None if src_m is None else np.concatenate([src_m, src_m])

    with no_grad():
        for i, t in enumerate(timesteps):
            tt = np.full(batch, t, dtype=np.int64)
            if guided:
                pred = _as_array(model_fn(np.concatenate([x, x]), src2, tokens2, np.concatenate([tt, tt])))
                eps = cfg_combine(pred[:batch], pred[batch:], guidance_scale)
            else:
                eps = _as_array(model_fn(x, src_m, text_tokens, tt))
            eps = eps.astype(np.float64)
            ab = sched.alpha_bar[t - 1]
            ab_prev = sched.alpha_bar[timesteps[i + 1] - 1] if i + 1 < len(timesteps) else 1.0
            x0 = np.clip((x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab), -1.0, 1.0)
            eps = (x - math.sqrt(ab) * x0) / math.sqrt(1.0 - ab)
            if mode == "deterministic" or ab_prev == 1.0:
                x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
            else:
                sigma = math.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
                x = (
                    math.sqrt(ab_prev) * x0
                    + math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0)) * eps
                    + sigma * rng.standard_normal(shape)
                )
            blended = i < n_blend
            if blended:
                x = blend.apply(x, trajectory[i + 1])
            if callback is not None:
                callback(i, int(t), x, blended)
    return np.clip(from_model(x), 0.0, 1.0)
