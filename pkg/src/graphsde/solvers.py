"""Reverse-time integrators for the coupled (X, A) system.

States are ``(X, A)`` pairs of arrays; either entry may be ``None`` to step
only the other component (used by the sequential mode). A :class:`Layout`
carries the noise contract: an optional node mask and which components are
symmetric matrices with a zero diagonal.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .graphs import Graph, GraphDataset, degree_onehot_features, quantize, sample_node_count
from .sde import SdeKind, SdeSpec, drift_diffusion, masked_noise, sample_prior, transition_params

log = logging.getLogger(__name__)

SOLVERS = ("EM", "Reverse", "PC(EM)", "PC(Reverse)", "S4")
MODES = ("joint", "sequential", "independent")
_ALIASES = {"em": "EM", "reverse": "Reverse", "rev": "Reverse", "pc": "PC(EM)", "pc(em)": "PC(EM)",
            "pc-em": "PC(EM)", "pc(reverse)": "PC(Reverse)", "pc-reverse": "PC(Reverse)", "s4": "S4"}
_TOL = 1e-9


class TimeUnderflow(ValueError):
    pass


class MissingScore(ValueError):
    pass


class ZeroScoreNorm(RuntimeWarning):
    pass


def canonical_solver(name: str) -> str:
    if name in SOLVERS:
        return name
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; choose from {', '.join(SOLVERS)}") from None


@dataclass
class SamplerConfig:
    solver: str = "PC(EM)"
    steps: int = 1000
    snr: float = 0.05
    scale_eps: float = 0.7
    mode: str = "joint"
    n_corrector_steps: int = 1
    t_eps: float = 1e-3

    def __post_init__(self):
        self.solver = canonical_solver(self.solver)
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.snr < 0:
            raise ValueError("snr must be >= 0")
        if not 0 <= self.scale_eps <= 1:
            raise ValueError("scale_eps must lie in [0, 1]")
        if self.n_corrector_steps < 0:
            raise ValueError("n_corrector_steps must be >= 0")


@dataclass
class Layout:
    mask: np.ndarray | None = None
    symmetric: tuple[bool, bool] = (False, True)

    def noise(self, rng, shape, comp: int) -> np.ndarray:
        if self.mask is None and not self.symmetric[comp]:
            return rng.standard_normal(shape)
        return masked_noise(rng, shape, self.mask, symmetric=self.symmetric[comp])

    def apply(self, x: np.ndarray, comp: int) -> np.ndarray:
        if self.mask is None:
            return x
        m = np.asarray(self.mask, dtype=float)
        if self.symmetric[comp]:
            return x * m[..., :, None] * m[..., None, :]
        return x * m[..., :, None]


GRAPH_LAYOUT = Layout()
SCALAR_LAYOUT = Layout(None, (False, False))

ScoreFn = Callable[..., np.ndarray]


class ScoreSource:
    """Partial-score provider with an evaluation counter.

    ``joint(X, A, t) -> (s_X, s_A)``; ``marginal_x(X, t)``;
    ``marginal_a(A, t)``; ``conditional_a(X0, A, t)``. Each call of
    :meth:`evaluate` counts as one score evaluation, whatever the mode.
    """

    def __init__(self, joint=None, marginal_x=None, marginal_a=None, conditional_a=None):
        self._joint = joint
        self._marginal_x = marginal_x
        self._marginal_a = marginal_a
        self._conditional_a = conditional_a
        self.calls = 0

    def require(self, mode: str) -> None:
        needed = {"joint": ("_joint",), "sequential": ("_marginal_x", "_conditional_a"),
                  "independent": ("_marginal_x", "_marginal_a")}[mode]
        missing = [n.lstrip("_") for n in needed if getattr(self, n) is None]
        if missing:
            raise MissingScore(f"mode {mode!r} needs score functions {missing}")

    def evaluate(self, kind: str, X, A, t, X0=None):
        self.calls += 1
        if kind == "joint":
            return self._joint(X, A, t)
        if kind == "x":
            return self._marginal_x(X, t), None
        if kind == "a_given_x0":
            return None, self._conditional_a(X0, A, t)
        if kind == "independent":
            return self._marginal_x(X, t), self._marginal_a(A, t)
        raise ValueError(kind)

    @classmethod
    def from_models(cls, model_x, model_a, specs: Sequence[SdeSpec], mask: np.ndarray,
                    params=(None, None), marginal_model_x=None, marginal_params_x=None) -> "ScoreSource":
        """Wrap trained networks; masks are fixed for the whole solve.

        Without a dedicated marginal X model, ``s_X(X_t, t)`` is the joint
        model evaluated with an empty adjacency, and ``s_A(A_t, t)`` the A
        model evaluated with zero node features.
        """
        spec_x, spec_a = specs
        mask = np.asarray(mask, dtype=float)
        B = mask.shape[0]

        def tv(t):
            return np.full(B, float(t))

        def sx(X, A, t):
            return model_x(X, A, mask, tv(t), spec_x, params[0]).data

        def sa(X, A, t):
            return model_a(X, A, mask, tv(t), spec_a, params[1]).data

        def joint(X, A, t):
            return sx(X, A, t), sa(X, A, t)

        def marginal_x(X, t):
            A0 = np.zeros(X.shape[:-1] + (X.shape[-2],))
            if marginal_model_x is not None:
                return marginal_model_x(X, A0, mask, tv(t), spec_x, marginal_params_x).data
            return sx(X, A0, t)

        def marginal_a(A, t):
            return sa(np.zeros(A.shape[:-1] + (model_a.F,)), A, t)

        def conditional_a(X0, A, t):
            return sa(X0, A, t)

        return cls(joint, marginal_x, marginal_a, conditional_a)


# ---------------------------------------------------------------- steps


def _check_step(t: float, dt: float, t_eps: float) -> None:
    if dt <= 0:
        raise TimeUnderflow(f"step size must be positive, got {dt}")
    if t - dt < t_eps - _TOL:
        raise TimeUnderflow(f"t - dt = {t - dt} below t_eps = {t_eps}")


def _draw(rng, state, layout: Layout):
    return tuple(None if x is None else layout.noise(rng, x.shape, i) for i, x in enumerate(state))


def predictor_em(state, t: float, dt: float, scores, specs: Sequence[SdeSpec], rng, *,
                 layout: Layout = GRAPH_LAYOUT, t_eps: float = 0.0):
    """Euler-Maruyama step of the reverse SDE from ``t`` to ``t - dt``."""
    _check_step(t, dt, t_eps)
    z = _draw(rng, state, layout)
    out = []
    for x, s, spec, zi in zip(state, scores, specs, z):
        if x is None:
            out.append(None)
            continue
        f, g = drift_diffusion(spec, t)
        out.append(x - f * x * dt + g * g * s * dt + g * math.sqrt(dt) * zi)
    return tuple(out)


def predictor_reverse(state, t: float, dt: float, scores, specs: Sequence[SdeSpec], rng, *,
                      layout: Layout = GRAPH_LAYOUT, t_eps: float = 0.0):
    """Ancestral-style step: undo the one-step forward contraction, then score and noise.

    The mean is rescaled by the reverse-kernel coefficient (``1/mu`` of the
    forward step over ``[t - dt, t]``); VE has no drift and coincides with EM.
    """
    _check_step(t, dt, t_eps)
    z = _draw(rng, state, layout)
    out = []
    for x, s, spec, zi in zip(state, scores, specs, z):
        if x is None:
            out.append(None)
            continue
        _, g = drift_diffusion(spec, t)
        if spec.kind is SdeKind.VE:
            base = x
        else:
            base = x * transition_params(spec, t, t - dt).mean_coef
        out.append(base + g * g * s * dt + g * math.sqrt(dt) * zi)
    return tuple(out)


def _batch_norm(v: np.ndarray) -> float:
    flat = v.reshape(v.shape[0], -1) if v.ndim > 1 else v.reshape(-1, 1)
    return float(np.mean(np.linalg.norm(flat, axis=1)))


def langevin_step_size(snr: float, z: np.ndarray, s: np.ndarray) -> float | None:
    """``2 (snr |z| / |s|)^2`` with batch-averaged per-sample norms; ``None`` if ``|s| = 0``."""
    s_norm = _batch_norm(s)
    if s_norm == 0.0:
        return None
    return 2.0 * (snr * _batch_norm(z) / s_norm) ** 2


def corrector_langevin(state, t: float, scores, specs: Sequence[SdeSpec], cfg: SamplerConfig, rng, *,
                       layout: Layout = GRAPH_LAYOUT):
    """One Langevin pass using the given scores (evaluated at ``state``)."""
    z = _draw(rng, state, layout)
    out = []
    for x, s, zi in zip(state, scores, z):
        if x is None:
            out.append(None)
            continue
        alpha = langevin_step_size(cfg.snr, zi, s)
        if alpha is None:
            warnings.warn("score norm is zero; skipping Langevin correction", ZeroScoreNorm, stacklevel=2)
            out.append(x)
            continue
        out.append(x + 0.5 * alpha * s + cfg.scale_eps * math.sqrt(alpha) * zi)
    return tuple(out)


def _kernel(state, spec_pair, t: float, t_next: float, rng, layout: Layout):
    z = _draw(rng, state, layout)
    out = []
    for x, spec, zi in zip(state, spec_pair, z):
        if x is None:
            out.append(None)
            continue
        k = transition_params(spec, t, t_next)
        out.append(k.mean_coef * x + k.std * zi)
    return tuple(out)


def s4_step(state, t: float, dt: float, scores, specs: Sequence[SdeSpec], cfg: SamplerConfig, rngs, *,
            layout: Layout = GRAPH_LAYOUT):
    """Symmetric splitting step from ``t`` to ``t - dt`` given scores at ``state``.

    ``rngs`` is ``(predictor_rng, corrector_rng)``. The scores feed both the
    Langevin correction and the Euler score step, so one evaluation per step.
    """
    _check_step(t, dt, cfg.t_eps)
    pred_rng, corr_rng = rngs
    if cfg.snr > 0:
        state = corrector_langevin(state, t, scores, specs, cfg, corr_rng, layout=layout)
    half = t - 0.5 * dt
    state = _kernel(state, specs, t, half, pred_rng, layout)
    out = []
    for x, s, spec in zip(state, scores, specs):
        if x is None:
            out.append(None)
            continue
        _, g = drift_diffusion(spec, t)
        out.append(x + g * g * s * dt)
    return _kernel(tuple(out), specs, half, t - dt, pred_rng, layout)


# ---------------------------------------------------------------- driver


def time_grid(cfg: SamplerConfig, T: float) -> np.ndarray:
    dt = (T - cfg.t_eps) / cfg.steps
    grid = T - dt * np.arange(cfg.steps + 1)
    grid[-1] = cfg.t_eps
    return grid


def _predictor(name: str):
    return predictor_reverse if "Reverse" in name else predictor_em


def integrate(source: ScoreSource, cfg: SamplerConfig, specs: Sequence[SdeSpec], state, rng, *,
              layout: Layout = GRAPH_LAYOUT, kind: str = "joint", X0=None):
    """Run ``cfg.steps`` reverse steps on the active components of ``state``."""
    T = specs[0].T
    grid = time_grid(cfg, T)
    pred_rng, corr_rng = rng.spawn(2)
    predictor = _predictor(cfg.solver)
    use_pc = cfg.solver.startswith("PC")

    def scores_at(st, t):
        sx, sa = source.evaluate(kind, st[0], st[1], t, X0=X0)
        return (sx if st[0] is not None else None, sa if st[1] is not None else None)

    for i in range(cfg.steps):
        t, t_next = float(grid[i]), float(grid[i + 1])
        dt = t - t_next
        if cfg.solver == "S4":
            state = s4_step(state, t, dt, scores_at(state, t), specs, cfg, (pred_rng, corr_rng), layout=layout)
            continue
        if use_pc:
            for _ in range(cfg.n_corrector_steps):
                state = corrector_langevin(state, t, scores_at(state, t), specs, cfg, corr_rng, layout=layout)
        state = predictor(state, t, dt, scores_at(state, t), specs, pred_rng, layout=layout, t_eps=cfg.t_eps)
    return tuple(None if x is None else layout.apply(x, i) for i, x in enumerate(state))


def solve_from(source: ScoreSource, cfg: SamplerConfig, specs: Sequence[SdeSpec], state, rng, *,
               layout: Layout = GRAPH_LAYOUT):
    """Integrate ``state`` (drawn from the prior) in the configured dependency mode."""
    source.require(cfg.mode)
    if cfg.mode == "joint":
        return integrate(source, cfg, specs, state, rng, layout=layout, kind="joint")
    if cfg.mode == "independent":
        return integrate(source, cfg, specs, state, rng, layout=layout, kind="independent")
    rx, ra = rng.spawn(2)
    (X0, _) = integrate(source, cfg, specs, (state[0], None), rx, layout=layout, kind="x")
    (_, A0) = integrate(source, cfg, specs, (None, state[1]), ra, layout=layout, kind="a_given_x0", X0=X0)
    return X0, A0


def sample_priors(specs: Sequence[SdeSpec], shapes, rng, layout: Layout):
    return tuple(sample_prior(spec, shape, rng, mask=layout.mask, symmetric=layout.symmetric[i])
                 for i, (spec, shape) in enumerate(zip(specs, shapes)))


def solve_reverse(source: ScoreSource, cfg: SamplerConfig, specs: Sequence[SdeSpec], mask: np.ndarray, F: int,
                  rng: np.random.Generator):
    """Raw ``(X, A)`` for a batch of graphs with node masks ``mask[B, N]``."""
    mask = np.asarray(mask, dtype=float)
    B, N = mask.shape
    layout = Layout(mask, (False, True))
    prior_rng, run_rng = rng.spawn(2)
    state = sample_priors(specs, [(B, N, F), (B, N, N)], prior_rng, layout)
    return solve_from(source, cfg, specs, state, run_rng, layout=layout)


@dataclass
class RunMetadata:
    solver: str
    steps: int
    snr: float
    scale_eps: float
    mode: str
    seed: int | None
    count: int
    score_evals: int = 0
    wall_clock: float = 0.0
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        d = asdict(self)
        extra = d.pop("extra")
        d.update(extra)
        return "".join(f"{k}\t{v}\n" for k, v in d.items())


@dataclass
class NodeCountModel:
    """Empirical node-count distribution plus the padding sizes of a dataset."""

    node_count_histogram: dict[int, int]
    n_max: int
    F: int

    @classmethod
    def from_dataset(cls, dataset: GraphDataset) -> "NodeCountModel":
        return cls(dataset.node_count_histogram, dataset.n_max, dataset.F)

    def to_json(self) -> dict:
        return {"node_hist": {str(k): int(v) for k, v in self.node_count_histogram.items()},
                "n_max": self.n_max, "F": self.F}

    @classmethod
    def from_json(cls, d: dict) -> "NodeCountModel":
        return cls({int(k): int(v) for k, v in d["node_hist"].items()}, int(d["n_max"]), int(d["F"]))


def masks_for_counts(counts: np.ndarray, n_max: int) -> np.ndarray:
    return (np.arange(n_max)[None, :] < np.asarray(counts)[:, None]).astype(float)


def generate(models, specs: Sequence[SdeSpec], dataset: GraphDataset | NodeCountModel, cfg: SamplerConfig, count: int,
             rng: np.random.Generator, *, params=(None, None), marginal_model_x=None, chunk: int = 256,
             seed: int | None = None) -> tuple[list[Graph], RunMetadata]:
    """Sample ``count`` binary graphs; node counts follow the dataset histogram.

    Node features of the returned graphs are recomputed as degree one-hots
    from the quantized adjacency.
    """
    meta = RunMetadata(cfg.solver, cfg.steps, cfg.snr, cfg.scale_eps, cfg.mode, seed, count)
    if count == 0:
        return [], meta
    model_x, model_a = models
    size_rng, solve_rng = rng.spawn(2)
    counts = sample_node_count(dataset, size_rng, size=count)
    N, F = dataset.n_max, dataset.F
    graphs: list[Graph] = []
    start = time.perf_counter()
    for lo in range(0, count, chunk):
        mask = masks_for_counts(counts[lo:lo + chunk], N)
        source = ScoreSource.from_models(model_x, model_a, specs, mask, params, marginal_model_x)
        _, A = solve_reverse(source, cfg, specs, mask, F, solve_rng)
        meta.score_evals += source.calls
        meta.extra["batches"] = meta.extra.get("batches", 0) + 1
        Aq = quantize(A, 2, mask)
        for b in range(len(mask)):
            m = mask[b].astype(bool)
            graphs.append(Graph(degree_onehot_features(Aq[b], m, F, clip=True), Aq[b], m))
    meta.wall_clock = time.perf_counter() - start
    return graphs, meta
