"""Continuous-time variance-preserving noise schedule and DDIM algebra.

All functions here are pure numpy; they accept scalar times or per-sample
time vectors (broadcast against [B, C, H, W] latents). The signal scale
alpha(t) and noise scale sigma(t) satisfy alpha^2 + sigma^2 = 1 exactly.

The cosine form is squashed away from both endpoints so that alpha stays
strictly positive at t = 1 (where sampling grids start) and sigma stays
positive at t = 0; without the squash the DDIM update divides by zero at
the top of the schedule.
"""

import math

import numpy as np

SCHEDULE_FLOOR = 1e-3


class ScheduleDomainError(ValueError):
    """Time outside [0, 1] or an invalid time ordering."""


class DegenerateStepError(ValueError):
    """A step inversion whose denominator vanishes (s too close to t)."""


class CosineSchedule:
    """Variance-preserving cosine schedule on t in [0, 1].

    `floor` is the lowest time used by samplers and training grids.
    `discretization` is the grid count L used when drawing training times
    as i/L.
    """

    def __init__(self, floor=SCHEDULE_FLOOR, discretization=1000, squash=1e-3):
        if not 0.0 < floor < 1.0:
            raise ValueError(f"floor must be in (0,1), got {floor}")
        self.floor = float(floor)
        self.discretization = int(discretization)
        self.squash = float(squash)

    def _theta(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(t < -1e-9) or np.any(t > 1.0 + 1e-9):
            raise ScheduleDomainError(f"time out of domain [0,1]: {t}")
        e = self.squash
        return (e + (1.0 - 2.0 * e) * t) * (math.pi / 2.0)

    def alpha(self, t):
        a = np.cos(self._theta(t)).astype(np.float32)
        return a if a.ndim else float(a)

    def sigma(self, t):
        s = np.sin(self._theta(t)).astype(np.float32)
        return s if s.ndim else float(s)

    def training_times(self, rng, n):
        """Draw n times on the training grid i/L, i in {1..L}."""
        i = rng.integers(1, self.discretization + 1, size=n)
        return (i / self.discretization).astype(np.float32)

    def sampling_grid(self, steps):
        """Uniform grid of steps+1 times from 1.0 down to the floor."""
        if steps < 1:
            raise ValueError(f"steps must be >= 1, got {steps}")
        return np.linspace(1.0, self.floor, steps + 1).astype(np.float32)


def _bcast(v, like):
    """Broadcast a per-sample scalar/vector against a latent batch."""
    v = np.asarray(v, dtype=np.float32)
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (like.ndim - 1))


def add_noise(schedule, z0, eps, t):
    """Forward diffusion: alpha(t) * z0 + sigma(t) * eps."""
    z0 = np.asarray(z0, dtype=np.float32)
    eps = np.asarray(eps, dtype=np.float32)
    if z0.shape != eps.shape:
        raise ValueError(f"add_noise: shapes {z0.shape} vs {eps.shape}")
    a = _bcast(schedule.alpha(t), z0)
    s = _bcast(schedule.sigma(t), z0)
    return a * z0 + s * eps


def _theta64(schedule, t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < -1e-9) or np.any(t > 1.0 + 1e-9):
        raise ScheduleDomainError(f"time out of domain [0,1]: {t}")
    e = schedule.squash
    return (e + (1.0 - 2.0 * e) * t) * (math.pi / 2.0)


def ddim_step(schedule, z, eps_hat, t_from, t_to):
    """Deterministic update from time t_from to an earlier time t_to:

        z_to = alpha_to * (z - sigma_from * eps_hat) / alpha_from
               + sigma_to * eps_hat

    The division by alpha amplifies rounding badly near t = 1, so the
    combination runs in float64 internally; inputs and outputs are float32.
    """
    z = np.asarray(z)
    eps_hat = np.asarray(eps_hat)
    tf = np.asarray(t_from, dtype=np.float64)
    tt = np.asarray(t_to, dtype=np.float64)
    if np.any(tt >= tf):
        raise ScheduleDomainError(f"ddim_step: need t_to < t_from, got {tt} >= {tf}")
    th_f = _theta64(schedule, t_from)
    th_t = _theta64(schedule, t_to)
    a_f = _bcast64(np.cos(th_f), z)
    s_f = _bcast64(np.sin(th_f), z)
    a_t = _bcast64(np.cos(th_t), z)
    s_t = _bcast64(np.sin(th_t), z)
    z64 = z.astype(np.float64)
    e64 = eps_hat.astype(np.float64)
    out = a_t * (z64 - s_f * e64) / a_f + s_t * e64
    return out.astype(np.float32)


def x0_projection(schedule, z, eps_hat, t):
    """Clean-signal estimate (z - sigma_t * eps_hat) / alpha_t."""
    z = np.asarray(z)
    th = _theta64(schedule, t)
    a = _bcast64(np.cos(th), z)
    s = _bcast64(np.sin(th), z)
    out = (z.astype(np.float64) - s * np.asarray(eps_hat, dtype=np.float64)) / a
    return out.astype(np.float32)


def pseudo_epsilon(schedule, z_t, z_s, t, s, denom_floor=1e-8):
    """Invert a DDIM step: the single noise estimate that maps z_t to z_s.

    Returns (z_s - alpha_s * z_t / alpha_t) / (sigma_s - alpha_s * sigma_t
    / alpha_t). Raises when s >= t or when the denominator degenerates.

    The result stays float64: quantizing it would break the round-trip
    identity through ddim_step near t = 1, where alpha_t is tiny. Callers
    that store it (loss targets) cast to float32 themselves.
    """
    z_t = np.asarray(z_t)
    z_s = np.asarray(z_s)
    ta = np.asarray(t, dtype=np.float64)
    sa = np.asarray(s, dtype=np.float64)
    if np.any(sa >= ta):
        raise ScheduleDomainError(f"pseudo_epsilon: need s < t, got {sa} >= {ta}")
    th_t = _theta64(schedule, t)
    th_s = _theta64(schedule, s)
    a_t, s_t = np.cos(th_t), np.sin(th_t)
    a_s, s_s = np.cos(th_s), np.sin(th_s)
    denom = s_s - a_s * s_t / a_t
    if np.any(np.abs(denom) < denom_floor):
        raise DegenerateStepError(f"pseudo_epsilon: degenerate pair, |denom| < {denom_floor}")
    ratio = _bcast64(a_s / a_t, z_t)
    dn = _bcast64(denom, z_t)
    return (z_s.astype(np.float64) - ratio * z_t.astype(np.float64)) / dn


def _bcast64(v, like):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        return v
    return v.reshape((-1,) + (1,) * (like.ndim - 1))
