"""Flow-matching patch decoder: linear noise schedule, velocity transformer,
training loss, and the classifier-free-guidance Euler sampler.

The schedule is linear/rectified: alpha(t) = 1 - t, sigma(t) = t, which makes
the regression target the closed form eps - z0, independent of t.  Sampling
integrates the learned velocity field from t = 1 (noise) down to t = 0 (data)
with uniform Euler steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (
    ShapeError,
    Tensor,
    add,
    constant,
    mse,
    repeat_rows,
    rng_stream,
    tile_rows,
)
from .model import (
    ModelState,
    VELOCITY_LAYERS,
    embedding_lookup,
    linear,
    pair_mask,
    transformer_stack,
)

__all__ = [
    "alpha",
    "sigma",
    "noise",
    "target_velocity",
    "DiffusionSample",
    "timestep_embedding",
    "velocity",
    "velocity_batch",
    "fm_loss",
    "cfg_combine",
    "sample_patch",
]

TIME_SCALE = 1000.0  # t is in [0, 1]; scaling spreads the sinusoid frequencies


def alpha(t: float) -> float:
    """Data coefficient of the interpolation; alpha(0) = 1, alpha(1) = 0."""
    return 1.0 - t


def sigma(t: float) -> float:
    """Noise coefficient of the interpolation; sigma(0) = 0, sigma(1) = 1."""
    return t


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    return t


def noise(z0: np.ndarray, t: float, eps: np.ndarray) -> np.ndarray:
    """Interpolate z_t = alpha(t) * z0 + sigma(t) * eps."""
    t = _check_t(t)
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"noise: shapes {z0.shape} and {eps.shape} differ")
    return alpha(t) * z0 + sigma(t) * eps


def target_velocity(z0: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Time derivative of the interpolation; eps - z0 under the linear schedule."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError(f"target_velocity: shapes {z0.shape} and {eps.shape} differ")
    return eps - z0


@dataclass(frozen=True)
class DiffusionSample:
    """One realized interpolation point: (z0, t, eps) with z_t derived."""

    z0: np.ndarray
    t: float
    eps: np.ndarray
    z_t: np.ndarray

    @classmethod
    def draw(cls, z0: np.ndarray, t: float, eps: np.ndarray) -> "DiffusionSample":
        return cls(z0=np.asarray(z0), t=float(t), eps=np.asarray(eps),
                   z_t=noise(z0, t, eps))


def timestep_embedding(t_values: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Sinusoidal embeddings of scalar times, one row per value."""
    t_values = np.atleast_1d(np.asarray(t_values, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    args = t_values[:, None] * TIME_SCALE * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if emb.shape[1] < dim:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], dim - emb.shape[1]))], axis=1)
    return emb.astype(dtype)


def velocity_batch(state: ModelState, z_t: np.ndarray, t_values: np.ndarray,
                   cond: Tensor | None, z_prev: np.ndarray) -> Tensor:
    """Velocity predictions for a batch of (z_prev, z_t) pairs.

    Each pair forms a 2-token sequence [proj(z_prev), proj(z_t)] seen by a
    bidirectional transformer; the time embedding and the conditioning vector
    are added to both tokens.  ``cond`` is a (n, d_model) tensor, or None to
    use the learned null embedding (the guidance-free branch).  Output row i
    is the velocity for pair i, read at the z_t position.
    """
    cfg = state.config
    dtype = state.dtype
    z_t = np.asarray(z_t, dtype=dtype)
    z_prev = np.asarray(z_prev, dtype=dtype)
    if z_t.ndim != 2 or z_t.shape[1] != cfg.d_patch:
        raise ShapeError(f"velocity: z_t must be (n, {cfg.d_patch}), got {z_t.shape}")
    if z_prev.shape != z_t.shape:
        raise ShapeError(f"velocity: z_prev shape {z_prev.shape} != z_t shape {z_t.shape}")
    n = z_t.shape[0]
    t_values = np.atleast_1d(np.asarray(t_values, dtype=np.float64))
    if t_values.shape != (n,):
        raise ShapeError(f"velocity: expected {n} time values, got shape {t_values.shape}")
    for t in t_values:
        _check_t(t)

    interleaved = np.empty((2 * n, cfg.d_patch), dtype=dtype)
    interleaved[0::2] = z_prev
    interleaved[1::2] = z_t
    x = linear(constant(interleaved, dtype=dtype), state["vel.in.w"], state["vel.in.b"])
    x = add(x, tile_rows(state["vel.pos"], n))
    t_emb = np.repeat(timestep_embedding(t_values, cfg.d_model, dtype), 2, axis=0)
    x = add(x, constant(t_emb, dtype=dtype))
    if cond is None:
        x = add(x, tile_rows(state["vel.null"], 2 * n))
    else:
        if cond.data.shape != (n, cfg.d_model):
            raise ShapeError(
                f"velocity: cond must be ({n}, {cfg.d_model}), got {cond.data.shape}"
            )
        x = add(x, repeat_rows(cond, 2))

    hidden = transformer_stack(state, "vel", x, VELOCITY_LAYERS, pair_mask(n, dtype))
    at_z = embedding_lookup(hidden, np.arange(1, 2 * n, 2))
    return linear(at_z, state["vel.out.w"], state["vel.out.b"])


def velocity(state: ModelState, z_t: np.ndarray, t: float, h_final,
             z_prev: np.ndarray, cond_enabled: bool) -> Tensor:
    """Single-pair velocity prediction; returns a (1, d_patch) tensor.

    With ``cond_enabled`` false the learned null embedding replaces
    ``h_final``, so the output is invariant to its value.
    """
    cfg = state.config
    z_t = np.asarray(z_t, dtype=state.dtype).reshape(1, -1)
    z_prev = np.asarray(z_prev, dtype=state.dtype).reshape(1, -1)
    if cond_enabled:
        if isinstance(h_final, Tensor):
            cond = h_final if h_final.data.ndim == 2 else None
            if cond is None:
                raise ShapeError(f"velocity: h_final must be a (1, {cfg.d_model}) row")
        else:
            cond = constant(np.asarray(h_final, dtype=state.dtype).reshape(1, -1),
                            dtype=state.dtype)
    else:
        cond = None
    return velocity_batch(state, z_t, np.array([_check_t(t)]), cond, z_prev)


def fm_loss(state: ModelState, z0: np.ndarray, z_prev: np.ndarray, h_final,
            t: float, eps: np.ndarray, cond_enabled: bool,
            velocity_fn: Callable | None = None) -> Tensor:
    """Flow-matching loss for one patch: MSE between the predicted velocity at
    z_t = alpha(t) z0 + sigma(t) eps and the schedule derivative eps - z0,
    averaged over the patch coordinates.

    ``velocity_fn(z_t, t, h_final, z_prev, cond_enabled)`` may replace the
    model's velocity net; tests use this to substitute exact oracles.
    """
    t = _check_t(t)
    z0 = np.asarray(z0, dtype=state.dtype)
    eps = np.asarray(eps, dtype=state.dtype)
    z_t = noise(z0, t, eps)
    target = target_velocity(z0, eps)
    if velocity_fn is None:
        v = velocity(state, z_t, t, h_final, z_prev, cond_enabled)
    else:
        v = velocity_fn(z_t, t, h_final, z_prev, cond_enabled)
        if not isinstance(v, Tensor):
            v = constant(np.asarray(v, dtype=state.dtype), dtype=state.dtype)
    return mse(v, constant(target.reshape(v.data.shape), dtype=state.dtype))


def cfg_combine(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float) -> np.ndarray:
    """Guided velocity v_uncond + scale * (v_cond - v_uncond).

    scale == 1 returns the conditional branch bitwise, scale == 0 the
    unconditional one, so guided sampling at those scales is exactly the
    single-branch sampler.
    """
    v_cond = np.asarray(v_cond)
    v_uncond = np.asarray(v_uncond)
    if v_cond.shape != v_uncond.shape:
        raise ShapeError(f"cfg_combine: shapes {v_cond.shape} and {v_uncond.shape} differ")
    if scale == 1.0:
        return v_cond.copy()
    if scale == 0.0:
        return v_uncond.copy()
    return v_uncond + scale * (v_cond - v_uncond)


def sample_patch(state: ModelState, h_final, z_prev: np.ndarray, steps: int = 10,
                 cfg_scale: float = 2.5, rng: np.random.Generator | None = None,
                 velocity_fn: Callable | None = None) -> np.ndarray:
    """Decode one patch by Euler integration from t = 1 to t = 0.

    z starts as a standard-normal draw; each of the ``steps`` uniform steps
    combines the conditional and unconditional velocities with ``cfg_scale``
    and updates z <- z - v / steps (the velocity is dz/dt).
    """
    if int(steps) < 1:
        raise ValueError(f"sample_patch: steps must be >= 1, got {steps}")
    steps = int(steps)
    cfg = state.config
    if rng is None:
        rng = rng_stream(0, "sample")
    z = rng.standard_normal(cfg.d_patch).astype(state.dtype)
    z_prev = np.asarray(z_prev, dtype=state.dtype).reshape(cfg.d_patch)
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        if velocity_fn is None:
            v_cond = velocity(state, z, t, h_final, z_prev, True).data[0]
            v_uncond = velocity(state, z, t, h_final, z_prev, False).data[0]
        else:
            v_cond = np.asarray(velocity_fn(z, t, h_final, z_prev, True)).reshape(cfg.d_patch)
            v_uncond = np.asarray(velocity_fn(z, t, h_final, z_prev, False)).reshape(cfg.d_patch)
        v = cfg_combine(v_cond, v_uncond, cfg_scale)
        z = (z - dt * v).astype(state.dtype, copy=False)
    return z
