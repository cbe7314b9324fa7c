"""Component-wise forward SDEs (VP, VE, sub-VP) and their Gaussian kernels."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class TimeOutOfRange(ValueError):
    pass


class TimeOrderViolation(ValueError):
    pass


class SdeKind(str, Enum):
    VP = "VP"
    VE = "VE"
    SUBVP = "SubVP"


# slack for accumulated float error in time grids
_TIME_TOL = 1e-9


@dataclass(frozen=True)
class SdeSpec:
    kind: SdeKind = SdeKind.VP
    beta_min: float = 0.1
    beta_max: float = 1.0
    sigma_min: float = 0.2
    sigma_max: float = 1.0
    T: float = 1.0
    steps: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "kind", SdeKind(self.kind))
        if self.kind is SdeKind.VE:
            if not 0 < self.sigma_min < self.sigma_max:
                raise ValueError("VE requires 0 < sigma_min < sigma_max")
        elif not 0 < self.beta_min < self.beta_max:
            raise ValueError("VP/SubVP require 0 < beta_min < beta_max")
        if self.T <= 0 or self.steps < 1:
            raise ValueError("T must be positive and steps >= 1")

    @classmethod
    def vp(cls, beta_min=0.1, beta_max=1.0, **kw) -> "SdeSpec":
        return cls(SdeKind.VP, beta_min=beta_min, beta_max=beta_max, **kw)

    @classmethod
    def ve(cls, sigma_min=0.2, sigma_max=1.0, **kw) -> "SdeSpec":
        return cls(SdeKind.VE, sigma_min=sigma_min, sigma_max=sigma_max, **kw)

    @classmethod
    def subvp(cls, beta_min=0.1, beta_max=1.0, **kw) -> "SdeSpec":
        return cls(SdeKind.SUBVP, beta_min=beta_min, beta_max=beta_max, **kw)

    # beta is linear in t, so its integral is closed form
    def beta(self, t):
        return self.beta_min + t * (self.beta_max - self.beta_min)

    def beta_integral(self, t0, t1):
        d = self.beta_max - self.beta_min
        return self.beta_min * (t1 - t0) + 0.5 * d * (t1 * t1 - t0 * t0)


@dataclass(frozen=True)
class TransitionParams:
    """Isotropic Gaussian kernel ``N(mean_coef * x, var * I)``."""

    mean_coef: float
    var: float

    @property
    def std(self) -> float:
        return math.sqrt(self.var)


def _check_time(spec: SdeSpec, t) -> None:
    t = np.asarray(t)
    if np.any(t < -_TIME_TOL) or np.any(t > spec.T + _TIME_TOL):
        raise TimeOutOfRange(f"t={t} outside [0, {spec.T}]")


def drift_diffusion(spec: SdeSpec, t):
    """Return ``(drift_scale, g_t)``; the drift is ``drift_scale * x``."""
    _check_time(spec, t)
    if spec.kind is SdeKind.VE:
        r = spec.sigma_max / spec.sigma_min
        g = spec.sigma_min * r ** t * np.sqrt(2.0 * np.log(r))
        return 0.0 * np.asarray(t, dtype=float), g
    b = spec.beta(t)
    if spec.kind is SdeKind.VP:
        return -0.5 * b, np.sqrt(b)
    ib = spec.beta_integral(0.0, t)
    return -0.5 * b, np.sqrt(b * (1.0 - np.exp(-2.0 * ib)))


def marginal_params(spec: SdeSpec, t):
    """Mean coefficient and variance of ``p_0t(x_t | x_0)``.

    Works elementwise when ``t`` is an array (returns arrays then).
    """
    _check_time(spec, t)
    if spec.kind is SdeKind.VE:
        r = spec.sigma_max / spec.sigma_min
        mu = np.ones_like(np.asarray(t, dtype=float))
        var = spec.sigma_min ** 2 * (r ** (2.0 * np.asarray(t, dtype=float)) - 1.0)
    else:
        ib = spec.beta_integral(0.0, np.asarray(t, dtype=float))
        mu = np.exp(-0.5 * ib)
        if spec.kind is SdeKind.VP:
            var = -np.expm1(-ib)
        else:
            var = np.expm1(-ib) ** 2
    if np.ndim(mu) == 0:
        return TransitionParams(float(mu), float(var))
    return mu, var


def marginal_std(spec: SdeSpec, t):
    p = marginal_params(spec, t)
    if isinstance(p, TransitionParams):
        return p.std
    return np.sqrt(p[1])


def transition_params(spec: SdeSpec, t: float, t_next: float) -> TransitionParams:
    """Kernel of the reverse-time F-term from ``t`` back to ``t_next < t``.

    VP: mean coefficient ``exp(C)`` and variance ``1 - exp(-2C)`` with
    ``C = 1/2 * int_{t_next}^{t} beta``. VE keeps the mean and adds the
    variance the forward process accumulates over the interval. SubVP reuses
    the VP kernel (identical drift; variance differs only at O(dt^2)).
    """
    _check_time(spec, t)
    _check_time(spec, t_next)
    if not t_next < t:
        raise TimeOrderViolation(f"need t_next < t, got t={t}, t_next={t_next}")
    if spec.kind is SdeKind.VE:
        r = spec.sigma_max / spec.sigma_min
        var = spec.sigma_min ** 2 * (r ** (2.0 * t) - r ** (2.0 * t_next))
        return TransitionParams(1.0, float(var))
    c = 0.5 * spec.beta_integral(t_next, t)
    return TransitionParams(float(math.exp(c)), float(-math.expm1(-2.0 * c)))


def symmetric_noise(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal noise mirrored from the upper triangle, zero diagonal."""
    z = rng.standard_normal(shape)
    up = np.triu(z, k=1)
    return up + np.swapaxes(up, -1, -2)


def masked_noise(rng: np.random.Generator, shape, mask=None, symmetric: bool = False) -> np.ndarray:
    """Noise that respects the graph contracts (node mask, adjacency symmetry)."""
    z = symmetric_noise(rng, shape) if symmetric else rng.standard_normal(shape)
    if mask is not None:
        m = np.asarray(mask, dtype=float)
        if symmetric:
            z = z * m[..., :, None] * m[..., None, :]
        else:
            z = z * m[..., :, None]
    return z


def _broadcast_time(t, ndim: int):
    t = np.asarray(t, dtype=float)
    return t.reshape(t.shape + (1,) * (ndim - t.ndim))


def perturb(spec: SdeSpec, x0: np.ndarray, t, rng: np.random.Generator, *,
            mask=None, symmetric: bool = False):
    """Draw ``x_t ~ p_0t(. | x0)``; returns ``(x_t, eps, std)``.

    ``t`` may be a scalar or one time per leading batch entry. The noise
    follows the same mask/symmetry contract as the data.
    """
    t_arr = np.asarray(t, dtype=float)
    if np.any(t_arr <= 0) or np.any(t_arr > spec.T + _TIME_TOL):
        raise TimeOutOfRange(f"perturb needs t in (0, {spec.T}], got {t}")
    x0 = np.asarray(x0, dtype=float)
    eps = masked_noise(rng, x0.shape, mask=mask, symmetric=symmetric)
    p = marginal_params(spec, t_arr)
    if isinstance(p, TransitionParams):
        mu, std = p.mean_coef, p.std
        return mu * x0 + std * eps, eps, std
    mu, var = p
    std = np.sqrt(var)
    mu_b = _broadcast_time(mu, x0.ndim)
    std_b = _broadcast_time(std, x0.ndim)
    return mu_b * x0 + std_b * eps, eps, std


def prior_std(spec: SdeSpec) -> float:
    if spec.kind is SdeKind.VE:
        return marginal_params(spec, spec.T).std
    return 1.0


def sample_prior(spec: SdeSpec, shape, rng: np.random.Generator, *,
                 mask=None, symmetric: bool = False) -> np.ndarray:
    return prior_std(spec) * masked_noise(rng, shape, mask=mask, symmetric=symmetric)


def simulate_forward(spec: SdeSpec, x0: np.ndarray, t_end: float, steps: int, rng: np.random.Generator) -> np.ndarray:
    """Euler-Maruyama integration of the forward SDE from ``t = 0`` to ``t_end``."""
    _check_time(spec, t_end)
    x = np.array(x0, dtype=float)
    dt = t_end / steps
    for i in range(steps):
        f, g = drift_diffusion(spec, i * dt)
        x = x + f * x * dt + g * math.sqrt(dt) * rng.standard_normal(x.shape)
    return x
