"""Stochastic-interpolant machinery: noising, velocity targets, samplers, inversion.

The path is linear: x_t = (1-t)*x0 + t*eps with t=0 at data and t=1 at
noise, so the flow-matching target is the constant velocity eps - x0.
Samplers integrate the learned field with plain Euler (ODE) or
Euler-Maruyama (SDE) on a uniform grid; DDIM inversion is the same Euler
traversal run forward in t under the unguided conditional velocity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplerError(RuntimeError):
    pass


@dataclass(frozen=True)
class LinearPath:
    """alpha(t) = 1-t, sigma(t) = t on [0,1]."""

    def alpha(self, t: float) -> float:
        return 1.0 - t

    def sigma(self, t: float) -> float:
        return float(t)


def interpolate(x0: np.ndarray, eps: np.ndarray, t: float):
    """Noised state and velocity target on the linear path.

    Returns (x_t, v_target) with x_t = (1-t)*x0 + t*eps and
    v_target = eps - x0 (independent of t on this path).
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {x0.shape} vs {eps.shape}")
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0,1], got {t}")
    x_t = (1.0 - t) * x0 + t * eps
    return x_t, eps - x0


def guided_velocity(v_cond: np.ndarray, v_uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free guidance combination v_u + w*(v_c - v_u).

    w=1 short-circuits to the conditional branch so both endpoint identities
    and the self-consistency property hold exactly in floating point.
    """
    if v_cond.shape != v_uncond.shape:
        raise ValueError("guided_velocity shape mismatch")
    if w == 1.0:
        return v_cond.copy()
    return v_uncond + w * (v_cond - v_uncond)


@dataclass(frozen=True)
class GuidanceSchedule:
    """Guidance weight annealed over normalized sampling progress u in [0,1]."""

    w_start: float = 2.5
    w_end: float = 0.0
    shape: str = "linear"

    def __call__(self, u: float) -> float:
        if self.shape != "linear":
            raise ValueError(f"unknown guidance schedule shape '{self.shape}'")
        return self.w_start + (self.w_end - self.w_start) * u


CONSTANT_UNIT_GUIDANCE = GuidanceSchedule(w_start=1.0, w_end=1.0)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 250
    mode: str = "ode"
    noise_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.mode not in ("ode", "sde"):
            raise ValueError(f"unknown sampler mode '{self.mode}'")


def _velocity_fn(model):
    return model.velocity if hasattr(model, "velocity") else model


def _null_cond(cond):
    if cond is None:
        return None
    return cond.without_conditions()


def _has_conditions(cond) -> bool:
    return cond is not None and cond.any_active()


def _guided(vel, z, t, cond, null_cond, w: float, step: int) -> np.ndarray:
    v_c = vel(z, t, cond, step)
    if w == 1.0 or not _has_conditions(cond):
        return v_c
    v_u = vel(z, t, null_cond, step)
    return guided_velocity(v_c, v_u, w)


def _check_state(z: np.ndarray, step: int) -> None:
    if not np.all(np.isfinite(z)):
        raise SamplerError(f"non-finite state at solver step {step}")


def sample_ode(model, z_T: np.ndarray, cond, cfg: SamplerConfig,
               sched: GuidanceSchedule = CONSTANT_UNIT_GUIDANCE) -> np.ndarray:
    """Euler-integrate dz/dt = -v_hat from t=1 down to t=0."""
    vel = _velocity_fn(model)
    null_cond = _null_cond(cond)
    n = cfg.steps
    dt = 1.0 / n
    z = z_T.astype(np.float64).copy()
    for i in range(n):
        t = 1.0 - i * dt
        u = i / (n - 1) if n > 1 else 0.0
        v = _guided(vel, z, t, cond, null_cond, sched(u), i)
        z = z - dt * v
        _check_state(z, i)
    return z


def sample_sde(model, z_T: np.ndarray, cond, cfg: SamplerConfig,
               sched: GuidanceSchedule = CONSTANT_UNIT_GUIDANCE) -> np.ndarray:
    """Euler-Maruyama variant: noise scaled by sigma(t) at intermediate steps.

    The last step is noise-free so the trajectory lands on the data manifold;
    with noise_scale=0 this reduces exactly to sample_ode.
    """
    vel = _velocity_fn(model)
    null_cond = _null_cond(cond)
    rng = np.random.default_rng(cfg.seed)
    path = LinearPath()
    n = cfg.steps
    dt = 1.0 / n
    z = z_T.astype(np.float64).copy()
    for i in range(n):
        t = 1.0 - i * dt
        u = i / (n - 1) if n > 1 else 0.0
        v = _guided(vel, z, t, cond, null_cond, sched(u), i)
        z = z - dt * v
        if cfg.noise_scale != 0.0 and i < n - 1:
            g = cfg.noise_scale * path.sigma(t - dt)
            z = z + g * np.sqrt(dt) * rng.standard_normal(z.shape)
        _check_state(z, i)
    return z


def ddim_invert(model, z0: np.ndarray, cond, steps: int) -> np.ndarray:
    """Deterministic reverse traversal t: 0 -> 1 under the conditional velocity.

    Runs unguided (w=1); guidance during inversion breaks the round-trip
    property with the forward solver.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    vel = _velocity_fn(model)
    dt = 1.0 / steps
    z = z0.astype(np.float64).copy()
    for i in range(steps):
        t = i * dt
        v = vel(z, t, cond, i)
        z = z + dt * v
        _check_state(z, i)
    return z
