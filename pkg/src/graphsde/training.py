"""Denoising score matching for the two partial-score networks."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, save_checkpoint
from .graphs import GraphDataset
from .models import Module
from .sde import SdeSpec, perturb

log = logging.getLogger(__name__)


class EmptyBatch(ValueError):
    pass


class DivergenceDetected(RuntimeError):
    def __init__(self, epoch: int, checkpoint: str | None = None):
        self.epoch = epoch
        self.checkpoint = checkpoint
        where = f"; last good checkpoint {checkpoint}" if checkpoint else ""
        super().__init__(f"non-finite loss at epoch {epoch}{where}")


@dataclass
class LossConfig:
    lambda_mode: str = "sigma_sq"
    t_eps: float = 1e-3
    batch_size: int = 128

    def __post_init__(self):
        if self.lambda_mode != "sigma_sq":
            raise ValueError(f"unsupported lambda_mode {self.lambda_mode!r}")
        if not 0 < self.t_eps < 1:
            raise ValueError("t_eps must lie in (0, T)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainConfig:
    lr: float = 1e-2
    weight_decay: float = 1e-4
    epochs: int = 5000
    ema_decay: float | None = None
    seed: int = 42
    grad_clip: float | None = 1.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.ema_decay is not None and not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must lie in (0, 1)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


class Adam:
    """Adam with L2 weight decay folded into the gradient."""

    def __init__(self, params: dict[str, np.ndarray], lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.wd, self.eps = lr, weight_decay, eps
        self.b1, self.b2 = betas
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            if self.wd:
                g = g + self.wd * p
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def ema_update(shadow: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    out = {}
    for k, s in shadow.items():
        p = params[k]
        if np.shape(s) != np.shape(p):
            raise ad.ShapeMismatch(f"ema: {k} has shape {np.shape(s)} vs {np.shape(p)}")
        out[k] = decay * s + (1.0 - decay) * p
    return out


def _masked_sq_error(pred: ad.Tensor, std: np.ndarray, eps: np.ndarray, counts: np.ndarray) -> ad.Tensor:
    """Batch mean of ``||std * pred + eps||^2 / count`` (the sigma^2-weighted DSM error)."""
    scaled = ad.mul(pred, std.reshape((-1,) + (1,) * (pred.ndim - 1)))
    r = ad.add(scaled, eps)
    per_graph = ad.sum(ad.mul(r, r), axis=tuple(range(1, pred.ndim)))
    return ad.mean(ad.mul(per_graph, 1.0 / counts))


def dsm_losses(batch, models, specs: Sequence[SdeSpec], cfg: LossConfig, rng: np.random.Generator,
               params=(None, None), marginal_x=None, marginal_params=None):
    """Monte Carlo DSM losses ``(loss_x, loss_a)`` for one batch.

    ``batch`` is ``(X0, A0, mask)``; ``models`` are callables with the score
    model signature ``(X, A, mask, t, spec, params) -> Tensor``. With
    ``marginal_x`` a third loss is appended for an X model that sees an
    empty adjacency, i.e. a fit of ``grad_X log p_t(X_t)``.
    """
    X0, A0, mask = batch
    if len(X0) == 0:
        raise EmptyBatch("empty batch")
    spec_x, spec_a = specs
    model_x, model_a = models
    mask = np.asarray(mask, dtype=float)
    B = X0.shape[0]
    t = rng.uniform(cfg.t_eps, spec_x.T, size=B)
    Xt, eps_x, std_x = perturb(spec_x, X0, t, rng, mask=mask)
    At, eps_a, std_a = perturb(spec_a, A0, t, rng, mask=mask, symmetric=True)
    n = mask.sum(axis=1)
    count_x = np.maximum(n * X0.shape[-1], 1.0)
    count_a = np.maximum(n * (n - 1), 1.0)
    sx = model_x(Xt, At, mask, t, spec_x, params[0])
    sa = model_a(Xt, At, mask, t, spec_a, params[1])
    loss_x = _masked_sq_error(sx, np.asarray(std_x), eps_x, count_x)
    loss_a = _masked_sq_error(sa, np.asarray(std_a), eps_a, count_a)
    if marginal_x is None:
        return loss_x, loss_a
    sm = marginal_x(Xt, np.zeros_like(At), mask, t, spec_x, marginal_params)
    return loss_x, loss_a, _masked_sq_error(sm, np.asarray(std_x), eps_x, count_x)


@dataclass
class TrainResult:
    history: list[tuple[int, float, float, float]] = field(default_factory=list)
    ema: tuple[dict | None, dict | None] = (None, None)
    step: int = 0


def _clip(grads: dict[str, np.ndarray], max_norm: float | None) -> dict[str, np.ndarray]:
    if not max_norm:
        return grads
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    s = max_norm / total
    return {k: g * s for k, g in grads.items()}


def train(dataset: GraphDataset, models: tuple[Module, Module], specs: Sequence[SdeSpec],
          loss_cfg: LossConfig, train_cfg: TrainConfig, *, rng: np.random.Generator | None = None,
          checkpoint_path=None, log_path=None, config_echo: dict | None = None,
          on_epoch: Callable[[int, float, float], None] | None = None,
          marginal_x: Module | None = None) -> TrainResult:
    """Jointly fit both score models; parameters are updated in place.

    Each epoch shuffles the training split into minibatches; both models
    see the same batch and the same per-graph times. With ``ema_decay`` a
    shadow copy is updated after every step and returned in the result.
    An optional dedicated marginal X model is fitted alongside; its loss is
    not part of the logged history.
    """
    data = dataset.train if dataset.split else dataset
    if len(data) == 0:
        raise EmptyBatch("dataset has no training graphs")
    rng = rng if rng is not None else np.random.default_rng(train_cfg.seed)
    model_x, model_a = models
    opt_x = Adam(model_x.params, train_cfg.lr, train_cfg.weight_decay)
    opt_a = Adam(model_a.params, train_cfg.lr, train_cfg.weight_decay)
    opt_m = Adam(marginal_x.params, train_cfg.lr, train_cfg.weight_decay) if marginal_x is not None else None
    ema_x = model_x.copy_params() if train_cfg.ema_decay else None
    ema_a = model_a.copy_params() if train_cfg.ema_decay else None
    result = TrainResult(ema=(ema_x, ema_a))
    echo = config_echo if config_echo is not None else {"loss": asdict(loss_cfg), "train": asdict(train_cfg)}
    last_good = None
    good_params = (model_x.copy_params(), model_a.copy_params())
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w")
        log_file.write("epoch\tloss_x\tloss_a\twall_clock\n")
    start = time.perf_counter()

    def write_ckpt(path):
        save_checkpoint(_make_checkpoint(model_x, model_a, result, echo, rng, marginal_x), path)

    try:
        for epoch in range(1, train_cfg.epochs + 1):
            order = rng.permutation(len(data))
            lx_sum = la_sum = 0.0
            nb = 0
            for s in range(0, len(order), loss_cfg.batch_size):
                batch = data.batch(order[s:s + loss_cfg.batch_size])
                with ad.Tape() as tape:
                    px = {k: tape.watch(ad.Tensor(v, _check=False)) for k, v in model_x.params.items()}
                    pa = {k: tape.watch(ad.Tensor(v, _check=False)) for k, v in model_a.params.items()}
                    pm = None
                    if marginal_x is not None:
                        pm = {k: tape.watch(ad.Tensor(v, _check=False)) for k, v in marginal_x.params.items()}
                        lx, la, lm = dsm_losses(batch, models, specs, loss_cfg, rng, (px, pa), marginal_x, pm)
                        total = ad.add(ad.add(lx, la), lm)
                    else:
                        lx, la = dsm_losses(batch, models, specs, loss_cfg, rng, (px, pa))
                        total = ad.add(lx, la)
                if not np.isfinite(total.item()):
                    model_x.params.update(good_params[0])
                    model_a.params.update(good_params[1])
                    raise DivergenceDetected(epoch, last_good)
                g = ad.backward(tape, total)
                gx = _clip({k: g[t.node_id] for k, t in px.items()}, train_cfg.grad_clip)
                ga = _clip({k: g[t.node_id] for k, t in pa.items()}, train_cfg.grad_clip)
                opt_x.step(gx)
                opt_a.step(ga)
                if pm is not None:
                    opt_m.step(_clip({k: g[t.node_id] for k, t in pm.items()}, train_cfg.grad_clip))
                result.step += 1
                if ema_x is not None:
                    ema_x.update(ema_update(ema_x, model_x.params, train_cfg.ema_decay))
                    ema_a.update(ema_update(ema_a, model_a.params, train_cfg.ema_decay))
                lx_sum += lx.item()
                la_sum += la.item()
                nb += 1
            lx_avg, la_avg = lx_sum / nb, la_sum / nb
            wall = time.perf_counter() - start
            result.history.append((epoch, lx_avg, la_avg, wall))
            good_params = (model_x.copy_params(), model_a.copy_params())
            if log_file is not None:
                log_file.write(f"{epoch}\t{lx_avg:.8g}\t{la_avg:.8g}\t{wall:.3f}\n")
                log_file.flush()
            if on_epoch is not None:
                on_epoch(epoch, lx_avg, la_avg)
            if checkpoint_path is not None and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
                write_ckpt(checkpoint_path)
                last_good = str(checkpoint_path)
            if epoch == 1 or epoch % 100 == 0:
                log.info("epoch %d loss_x %.4f loss_a %.4f (%.1fs)", epoch, lx_avg, la_avg, wall)
        if checkpoint_path is not None:
            write_ckpt(checkpoint_path)
    finally:
        if log_file is not None:
            log_file.close()
    return result


def _make_checkpoint(model_x: Module, model_a: Module, result: TrainResult, echo: dict,
                     rng: np.random.Generator | None, marginal_x: Module | None = None) -> Checkpoint:
    tensors = {f"x/{k}": v for k, v in model_x.params.items()}
    tensors.update({f"a/{k}": v for k, v in model_a.params.items()})
    if marginal_x is not None:
        tensors.update({f"mx/{k}": v for k, v in marginal_x.params.items()})
    ema_x, ema_a = result.ema
    if ema_x is not None:
        tensors.update({f"ema/x/{k}": v for k, v in ema_x.items()})
        tensors.update({f"ema/a/{k}": v for k, v in ema_a.items()})
    state = rng.bit_generator.state if rng is not None else None
    return Checkpoint(echo, tensors, result.step, state)


def checkpoint_from_models(model_x: Module, model_a: Module, echo: dict, result: TrainResult | None = None,
                           rng: np.random.Generator | None = None, marginal_x: Module | None = None) -> Checkpoint:
    return _make_checkpoint(model_x, model_a, result or TrainResult(), echo, rng, marginal_x)


def save_training_log(history, path) -> None:
    lines = ["epoch\tloss_x\tloss_a\twall_clock"]
    lines += [f"{e}\t{lx:.8g}\t{la:.8g}\t{w:.3f}" for e, lx, la, w in history]
    Path(path).write_text("\n".join(lines) + "\n")
