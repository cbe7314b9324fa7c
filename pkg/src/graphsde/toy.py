"""Two-variable Gaussian-mixture testbed with closed-form partial scores.

Each variable diffuses under its own VP process. Because the forward kernel
is Gaussian and linear, the time-t marginal of the mixture is again a
mixture with means ``mu(t) m_k`` and covariances ``mu(t)^2 C + var(t) I``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .models import Module, linear
from .sde import SdeSpec, marginal_params, marginal_std
from .solvers import SCALAR_LAYOUT, SamplerConfig, ScoreSource, sample_priors, solve_from
from .training import Adam

log = logging.getLogger(__name__)

TOY_MODES = ("joint", "sequential", "independent")


@dataclass(frozen=True)
class GaussMixture2D:
    means: tuple = ((0.5, 0.5), (-0.5, -0.5))
    cov: tuple = ((0.01, 0.009), (0.009, 0.01))
    weights: tuple = (0.5, 0.5)

    def __post_init__(self):
        C = self.C
        if not np.allclose(C, C.T) or np.any(np.linalg.eigvalsh(C) <= 0):
            raise ValueError("covariance must be symmetric positive-definite")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w < 0) or not math.isclose(w.sum(), 1.0, rel_tol=1e-12):
            raise ValueError("weights must be nonnegative and sum to 1")
        if len(self.means) != len(w):
            raise ValueError("one weight per mean")

    @property
    def M(self) -> np.ndarray:
        return np.asarray(self.means, dtype=float)

    @property
    def C(self) -> np.ndarray:
        return np.asarray(self.cov, dtype=float)

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=float)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        k = rng.choice(len(self.w), size=n, p=self.w)
        L = np.linalg.cholesky(self.C)
        return self.M[k] + rng.standard_normal((n, 2)) @ L.T


def _perturbed(mix: GaussMixture2D, t: float, spec: SdeSpec):
    p = marginal_params(spec, t)
    return p.mean_coef * mix.M, p.mean_coef ** 2 * mix.C + p.var * np.eye(2)


def _responsibilities(logs: np.ndarray, w: np.ndarray) -> np.ndarray:
    logs = logs + np.log(w)
    r = np.exp(logs - logs.max(axis=1, keepdims=True))
    return r / r.sum(axis=1, keepdims=True)


def mixture_log_density(mix: GaussMixture2D, points: np.ndarray, t: float, spec: SdeSpec) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    means, cov = _perturbed(mix, t, spec)
    P = np.linalg.inv(cov)
    logdet = np.linalg.slogdet(cov)[1]
    d = pts[:, None, :] - means[None]
    q = np.einsum("nki,ij,nkj->nk", d, P, d)
    logs = -0.5 * q - 0.5 * logdet - math.log(2 * math.pi) + np.log(mix.w)
    top = logs.max(axis=1)
    return top + np.log(np.exp(logs - top[:, None]).sum(axis=1))


def mixture_score(mix: GaussMixture2D, points: np.ndarray, t: float, spec: SdeSpec) -> np.ndarray:
    """Gradient of the time-t log-density at ``points`` (shape ``(n, 2)`` or ``(2,)``)."""
    single = np.ndim(points) == 1
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    means, cov = _perturbed(mix, t, spec)
    P = np.linalg.inv(cov)
    d = pts[:, None, :] - means[None]
    Pd = d @ P
    r = _responsibilities(-0.5 * np.einsum("nki,nki->nk", d, Pd), mix.w)
    s = -np.einsum("nk,nki->ni", r, Pd)
    return s[0] if single else s


def responsibilities(mix: GaussMixture2D, points: np.ndarray, t: float, spec: SdeSpec) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    means, cov = _perturbed(mix, t, spec)
    P = np.linalg.inv(cov)
    d = pts[:, None, :] - means[None]
    return _responsibilities(-0.5 * np.einsum("nki,ij,nkj->nk", d, P, d), mix.w)


def partial_scores_2d(mix: GaussMixture2D, x, a, t: float, spec: SdeSpec):
    """Exact partial scores ``(d/dx, d/da)`` of the joint time-t log-density."""
    x = np.asarray(x, dtype=float)
    s = mixture_score(mix, np.stack([np.ravel(x), np.ravel(np.asarray(a, dtype=float))], axis=1), t, spec)
    return s[:, 0].reshape(x.shape), s[:, 1].reshape(x.shape)


def marginal_score_1d(mix: GaussMixture2D, v, t: float, spec: SdeSpec, axis: int) -> np.ndarray:
    """Score of the 1-D marginal mixture of coordinate ``axis`` at time ``t``."""
    v = np.asarray(v, dtype=float)
    p = marginal_params(spec, t)
    var = p.mean_coef ** 2 * mix.C[axis, axis] + p.var
    m = p.mean_coef * mix.M[:, axis]
    d = np.ravel(v)[:, None] - m[None, :]
    r = _responsibilities(-0.5 * d * d / var, mix.w)
    return (-(r * d).sum(axis=1) / var).reshape(v.shape)


def sequential_score_a(mix: GaussMixture2D, x0, a, t: float, spec: SdeSpec) -> np.ndarray:
    """``d/da log p_t(x, a)`` evaluated at the finished ``x = x0``."""
    return partial_scores_2d(mix, x0, a, t, spec)[1]


def analytic_source(mix: GaussMixture2D, spec: SdeSpec) -> ScoreSource:
    return ScoreSource(
        joint=lambda X, A, t: partial_scores_2d(mix, X, A, t, spec),
        marginal_x=lambda X, t: marginal_score_1d(mix, X, t, spec, 0),
        marginal_a=lambda A, t: marginal_score_1d(mix, A, t, spec, 1),
        conditional_a=lambda X0, A, t: sequential_score_a(mix, X0, A, t, spec),
    )


# ---------------------------------------------------------------- summary


def within_mode_stats(samples: np.ndarray, means: np.ndarray, radius: float | None = 0.5):
    """Nearest-mode assignment, then per-mode correlation and covariance.

    With ``radius`` only samples within that distance of their mode count
    toward the per-mode statistics; assignment counts use all samples.
    """
    d = np.linalg.norm(samples[:, None, :] - means[None], axis=2)
    k = d.argmin(axis=1)
    near = d[np.arange(len(samples)), k]
    counts = np.bincount(k, minlength=len(means))
    corrs, covs, captured = [], [], []
    for j in range(len(means)):
        sel = k == j
        if radius is not None:
            sel &= near <= radius
        captured.append(int(sel.sum()))
        if sel.sum() < 3:
            continue
        pts = samples[sel]
        corrs.append(float(np.corrcoef(pts.T)[0, 1]))
        covs.append(np.cov(pts.T))
    corr = float(np.mean(corrs)) if corrs else float("nan")
    cov = np.mean(covs, axis=0) if covs else np.full((2, 2), np.nan)
    return corr, cov, counts, np.asarray(captured)


@dataclass
class ToySummary:
    mode: str
    source: str
    n_samples: int
    mean: list
    covariance: list
    within_mode_corr: float
    within_mode_cov: list
    mode_counts: list
    captured_counts: list
    nearest_mode_corr: float
    score_evals: int = 0
    wall_clock: float = 0.0

    def to_text(self) -> str:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, list):
                v = " ".join(f"{x:.10g}" if isinstance(x, float) else str(x) for x in np.ravel(v))
            elif isinstance(v, float):
                v = f"{v:.10g}"
            out.append(f"{k}={v}")
        return "\n".join(out) + "\n"


def summarize(samples: np.ndarray, mix: GaussMixture2D, mode: str, source: str, radius: float | None = 0.5,
              score_evals: int = 0, wall_clock: float = 0.0) -> ToySummary:
    corr, cov, counts, captured = within_mode_stats(samples, mix.M, radius)
    corr_all = within_mode_stats(samples, mix.M, None)[0]
    return ToySummary(mode, source, len(samples), samples.mean(axis=0).tolist(), np.cov(samples.T).tolist(),
                      corr, cov.tolist(), counts.tolist(), captured.tolist(), corr_all, score_evals, wall_clock)


def save_point_cloud(samples: np.ndarray, path) -> None:
    np.savetxt(path, samples, fmt="%.10g", delimiter="\t", header="x\ta", comments="")


# ---------------------------------------------------------------- trained MLP


class ToyMLP(Module):
    """Residual MLP ``(v, t) -> score``; ``layers`` counts every linear map."""

    def __init__(self, in_dim: int, hidden: int = 512, layers: int = 20, rng: np.random.Generator | None = None):
        super().__init__()
        if layers < 2:
            raise ValueError("need at least input and output layers")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = {"in_dim": in_dim, "hidden": hidden, "layers": layers}
        self.in_dim, self.n_res = in_dim, layers - 2
        self._linear(rng, "in", in_dim + 1, hidden)
        for i in range(self.n_res):
            self._linear(rng, f"res{i}", hidden, hidden)
            # keep the residual stack near identity at init
            self.params[f"res{i}.W"] *= 1.0 / math.sqrt(max(self.n_res, 1))
        self._linear(rng, "out", hidden, 1)

    def __call__(self, v: np.ndarray, t: np.ndarray, spec: SdeSpec, params=None) -> ad.Tensor:
        p = self.tensors(params)
        t = np.broadcast_to(np.asarray(t, dtype=float), (v.shape[0],))
        h = ad.elu(linear(ad.Tensor(np.concatenate([v, t[:, None]], axis=1)), p, "in"))
        for i in range(self.n_res):
            h = ad.add(h, ad.elu(linear(h, p, f"res{i}")))
        out = ad.reshape(linear(h, p, "out"), (v.shape[0],))
        return ad.mul(out, 1.0 / np.asarray(marginal_std(spec, t)))


@dataclass
class ToyTrainConfig:
    hidden: int = 512
    layers: int = 20
    epochs: int = 5000
    batch_size: int = 2048
    lr: float = 1e-3
    t_eps: float = 1e-3
    fast_epochs: int = 500


def train_toy_score(model: ToyMLP, sample_data, inputs: Sequence[int], target: int, spec: SdeSpec,
                    cfg: ToyTrainConfig, rng: np.random.Generator, epochs: int | None = None) -> list[float]:
    """DSM fit of one partial score; each epoch is one fresh batch from ``sample_data``."""
    opt = Adam(model.params, cfg.lr)
    losses = []
    inputs = list(inputs)
    for _ in range(cfg.epochs if epochs is None else epochs):
        v0 = sample_data(cfg.batch_size, rng)
        t = rng.uniform(cfg.t_eps, spec.T, size=len(v0))
        mu, var = marginal_params(spec, t)
        std = np.sqrt(var)
        eps = rng.standard_normal(v0.shape)
        vt = mu[:, None] * v0 + std[:, None] * eps
        with ad.Tape() as tape:
            ps = {k: tape.watch(ad.Tensor(v, _check=False)) for k, v in model.params.items()}
            s = model(vt[:, inputs], t, spec, ps)
            r = ad.add(ad.mul(s, std), eps[:, target])
            loss = ad.mean(ad.mul(r, r))
        g = ad.backward(tape, loss)
        opt.step({k: g[x.node_id] for k, x in ps.items()})
        losses.append(loss.item())
    return losses


@dataclass
class ToyModels:
    joint_x: ToyMLP
    joint_a: ToyMLP
    marginal_x: ToyMLP
    marginal_a: ToyMLP


def train_toy_models(mix: GaussMixture2D, spec: SdeSpec, cfg: ToyTrainConfig, rng: np.random.Generator,
                     epochs: int | None = None) -> ToyModels:
    rngs = rng.spawn(8)
    models = ToyModels(ToyMLP(2, cfg.hidden, cfg.layers, rngs[0]), ToyMLP(2, cfg.hidden, cfg.layers, rngs[1]),
                       ToyMLP(1, cfg.hidden, cfg.layers, rngs[2]), ToyMLP(1, cfg.hidden, cfg.layers, rngs[3]))
    jobs = [(models.joint_x, [0, 1], 0), (models.joint_a, [0, 1], 1),
            (models.marginal_x, [0], 0), (models.marginal_a, [1], 1)]
    for (m, inp, tgt), r in zip(jobs, rngs[4:]):
        start = time.perf_counter()
        losses = train_toy_score(m, mix.sample, inp, tgt, spec, cfg, r, epochs)
        log.info("toy model inputs=%s target=%d: final loss %.4f (%.1fs)", inp, tgt,
                 float(np.mean(losses[-50:])) if losses else float("nan"), time.perf_counter() - start)
    return models


def mlp_source(models: ToyModels, spec: SdeSpec) -> ScoreSource:
    def ev(m, *cols):
        v = np.stack([np.ravel(c) for c in cols], axis=1)
        return lambda t: m(v, t, spec).data.reshape(np.shape(cols[0]))

    return ScoreSource(
        joint=lambda X, A, t: (ev(models.joint_x, X, A)(t), ev(models.joint_a, X, A)(t)),
        marginal_x=lambda X, t: ev(models.marginal_x, X)(t),
        marginal_a=lambda A, t: ev(models.marginal_a, A)(t),
        conditional_a=lambda X0, A, t: ev(models.joint_a, X0, A)(t),
    )


# ---------------------------------------------------------------- driver


@dataclass
class ToyConfig:
    spec: SdeSpec = field(default_factory=lambda: SdeSpec.vp(0.01, 0.05))
    sampler: SamplerConfig = field(default_factory=lambda: SamplerConfig("EM", 1000, 0.0, 0.7))
    train: ToyTrainConfig = field(default_factory=ToyTrainConfig)
    radius: float | None = 0.5
    fast: bool = False


def run_toy(mode: str, source: str, n_samples: int, cfg: ToyConfig, rng: np.random.Generator,
            models: ToyModels | None = None):
    """Sample the 2-variable reverse system; returns ``(samples[n, 2], summary)``."""
    if mode not in TOY_MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    mix = GaussMixture2D()
    spec = cfg.spec
    if source == "analytic":
        src = analytic_source(mix, spec)
    elif source == "trained_mlp":
        if models is None:
            epochs = cfg.train.fast_epochs if cfg.fast else cfg.train.epochs
            models = train_toy_models(mix, spec, cfg.train, rng.spawn(1)[0], epochs)
        src = mlp_source(models, spec)
    else:
        raise ValueError(f"unknown source {source!r}")
    sampler = SamplerConfig(**{**asdict(cfg.sampler), "mode": mode})
    prior_rng, run_rng = rng.spawn(2)
    state = sample_priors((spec, spec), [(n_samples,), (n_samples,)], prior_rng, SCALAR_LAYOUT)
    start = time.perf_counter()
    x, a = solve_from(src, sampler, (spec, spec), state, run_rng, layout=SCALAR_LAYOUT)
    samples = np.stack([x, a], axis=1)
    summary = summarize(samples, mix, mode, source, cfg.radius, src.calls, time.perf_counter() - start)
    return samples, summary
