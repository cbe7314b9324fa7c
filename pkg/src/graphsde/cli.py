"""Command-line entry point: ``graphsde {train,sample,eval,toy,bench}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

from . import config as C
from .autodiff import NonFiniteValue
from .checkpoint import CheckpointError, CheckpointMismatch, load_checkpoint
from .evaluation import EmptySet, evaluate, orbit_table
from .graphs import (GraphDataset, ParseError, degrees, finalize_dataset, generate_community_small, generate_grid,
                     load_graphs, save_graphs)
from .models import ScoreModelX, build_models
from .seeding import substream
from .solvers import NodeCountModel, SamplerConfig, generate
from .training import DivergenceDetected, train

log = logging.getLogger("graphsde")

OUTPUT_ENV = "GRAPHSDE_OUTPUT_DIR"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
CHECKPOINT_NAME = "checkpoint.gsde"


class DataError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def output_dir(args, cfg) -> Path:
    out = args.out or cfg["run"]["output_dir"] or os.environ.get(OUTPUT_ENV) or "runs"
    p = Path(out)
    p.mkdir(parents=True, exist_ok=True)
    return p


def load_config(args) -> dict:
    cfg = C.load(args.config) if getattr(args, "config", None) else C.defaults()
    if getattr(args, "seed", None) is not None:
        C.set_value(cfg, "run", "seed", args.seed)
    for flag, section, key in _OVERRIDES:
        val = getattr(args, flag, None)
        if val is not None:
            C.set_value(cfg, section, key, val)
    C.validate(cfg)
    return cfg


_OVERRIDES = [
    ("epochs", "train", "epochs"),
    ("solver", "sampler", "solver"),
    ("steps", "sampler", "steps"),
    ("snr", "sampler", "snr"),
    ("scale_eps", "sampler", "scale_eps"),
    ("mode", "sampler", "mode"),
    ("sigma", "eval", "sigma"),
]


def dump_config(cfg: dict, path: Path) -> None:
    path.write_text(C.dumps(cfg))


def build_dataset(cfg: dict) -> GraphDataset:
    d = cfg["dataset"]
    rng = substream(cfg["run"]["seed"], "dataset")
    if d["name"] == "community_small":
        return generate_community_small(d["count"], rng)
    if d["name"] == "grid":
        return generate_grid(d["count"], rng)
    if not d["path"]:
        raise C.ConfigError("[dataset] path is required when name = file")
    ds = load_graphs(d["path"])
    if not ds.split or set(ds.split) == {"train"}:
        ds = finalize_dataset([g.active_adjacency() for g in ds], n_max=ds.n_max, F=ds.F, rng=rng,
                              test_fraction=d["test_fraction"])
    return ds


def _models(cfg: dict, F: int):
    rng = substream(cfg["run"]["seed"], "init")
    mx, ma = build_models(F, cfg["model_x"], cfg["model_a"], rng)
    marginal = ScoreModelX(F, rng=rng, **cfg["model_x"]) if cfg["sampler"]["marginal_x"] == "dedicated" else None
    return mx, ma, marginal


def _specs(cfg: dict):
    return C.sde_spec(cfg["sde_x"]), C.sde_spec(cfg["sde_a"])


def _echo(cfg: dict, counts: NodeCountModel) -> dict:
    return {"config": cfg, "model_hash": C.model_hash(cfg), "data": counts.to_json()}


# ---------------------------------------------------------------- commands


def cmd_train(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    ds = build_dataset(cfg)
    if not ds.split or len(ds.train) == 0:
        raise DataError("dataset has no train partition")
    save_graphs(ds.train, out / "train_graphs.txt")
    save_graphs(ds.test, out / "test_graphs.txt")
    counts = NodeCountModel.from_dataset(ds.train)
    mx, ma, marginal = _models(cfg, ds.F)
    echo = _echo(cfg, counts)
    dump_config(cfg, out / "effective.cfg")
    ckpt = out / CHECKPOINT_NAME
    log.info("training on %d graphs (F=%d, n_max=%d) for %d epochs", len(ds.train), ds.F, ds.n_max,
             cfg["train"]["epochs"])
    rng = substream(cfg["run"]["seed"], "training")
    train(ds, (mx, ma), _specs(cfg), C.loss_config(cfg), C.train_config(cfg), rng=rng, checkpoint_path=ckpt,
          log_path=out / "metrics.tsv", config_echo=echo, marginal_x=marginal)
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def _load_into(module, tensors: dict, what: str) -> None:
    for k, v in module.params.items():
        if k not in tensors or tensors[k].shape != v.shape:
            raise CheckpointMismatch(f"checkpoint lacks a compatible {what} parameter {k!r}")
        module.params[k] = tensors[k].copy()


def _models_from_checkpoint(cfg: dict, ck):
    counts = NodeCountModel.from_json(ck.config["data"])
    mx, ma, marginal = _models(cfg, counts.F)
    use_ema = cfg["sampler"]["use_ema"] and any(k.startswith("ema/") for k in ck.tensors)
    _load_into(mx, ck.group("ema/x" if use_ema else "x"), "x")
    _load_into(ma, ck.group("ema/a" if use_ema else "a"), "a")
    if marginal is not None:
        _load_into(marginal, ck.group("mx"), "marginal x")
    return counts, mx, ma, marginal


def _checkpoint_config(args, ck) -> dict:
    if getattr(args, "config", None):
        cfg = load_config(args)
    else:
        cfg = C.parse_text(C.dumps(ck.config["config"]))
        args_cfg = argparse.Namespace(**{**vars(args), "config": None})
        for flag, section, key in _OVERRIDES:
            val = getattr(args_cfg, flag, None)
            if val is not None:
                C.set_value(cfg, section, key, val)
        if args.seed is not None:
            C.set_value(cfg, "run", "seed", args.seed)
        C.validate(cfg)
    if C.model_hash(cfg) != ck.config.get("model_hash"):
        raise CheckpointMismatch("config does not match the checkpoint (model/data/SDE sections differ)")
    return cfg


def cmd_sample(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = _checkpoint_config(args, ck)
    out = output_dir(args, cfg)
    counts, mx, ma, marginal = _models_from_checkpoint(cfg, ck)
    scfg = C.sampler_config(cfg)
    rng = substream(cfg["run"]["seed"], "sampling")
    graphs, meta = generate((mx, ma), _specs(cfg), counts, scfg, args.count, rng, marginal_model_x=marginal,
                            chunk=cfg["sampler"]["chunk"], seed=cfg["run"]["seed"])
    path = out / (args.name or "samples.txt")
    # generated degrees may exceed the training maximum; widen the header so the file reloads
    F_out = max([counts.F] + [int(degrees(g.A).max(initial=0)) + 1 for g in graphs])
    save_graphs(GraphDataset(graphs, F_out, counts.n_max), path)
    path.with_suffix(".meta").write_text(meta.to_text())
    dump_config(cfg, path.with_suffix(".cfg"))
    print(f"wrote {len(graphs)} graphs to {path}")
    print(meta.to_text(), end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    gen = load_graphs(args.generated)
    ref = load_graphs(args.test)
    report = evaluate(gen, ref, sigma=cfg["eval"]["sigma"], rng=substream(cfg["run"]["seed"], "eval"))
    out = output_dir(args, cfg)
    report.save(out / (args.name or "mmd_report.txt"))
    (out / "orbit_breakdown.tsv").write_text(orbit_table(gen.graphs))
    dump_config(cfg, out / "eval.cfg")
    print(report.to_text(), end="")
    return EXIT_OK


def _toy_cfg(cfg: dict):
    from .sde import SdeSpec
    from .toy import ToyConfig, ToyTrainConfig

    t = cfg["toy"]
    return ToyConfig(
        spec=SdeSpec.vp(t["beta_min"], t["beta_max"]),
        sampler=SamplerConfig(t["solver"], t["steps"], t["snr"], t["scale_eps"]),
        train=ToyTrainConfig(t["hidden"], t["layers"], t["epochs"], t["batch_size"], t["lr"]),
        radius=t["radius"],
        fast=t["fast"],
    )


def cmd_toy(args) -> int:
    from .toy import GaussMixture2D, TOY_MODES, run_toy, save_point_cloud, train_toy_models

    cfg = C.load(args.config) if args.config else C.defaults()
    if args.seed is not None:
        C.set_value(cfg, "run", "seed", args.seed)
    for flag in ("mode", "source", "samples", "solver", "steps", "snr", "scale_eps", "beta_min", "beta_max",
                 "radius", "epochs"):
        val = getattr(args, flag, None)
        if val is not None:
            C.set_value(cfg, "toy", flag, val)
    if args.fast:
        C.set_value(cfg, "toy", "fast", True)
    C.validate(cfg)
    out = output_dir(args, cfg)
    tcfg = _toy_cfg(cfg)
    dump_config(cfg, out / "toy.cfg")
    modes = TOY_MODES if cfg["toy"]["mode"] == "all" else (cfg["toy"]["mode"],)
    models = None
    if cfg["toy"]["source"] == "trained_mlp":
        epochs = tcfg.train.fast_epochs if tcfg.fast else tcfg.train.epochs
        models = train_toy_models(GaussMixture2D(), tcfg.spec, tcfg.train,
                                  substream(cfg["run"]["seed"], "toy-training"), epochs)
    for mode in modes:
        rng = substream(cfg["run"]["seed"], f"toy-{mode}")
        samples, summary = run_toy(mode, cfg["toy"]["source"], cfg["toy"]["samples"], tcfg, rng, models)
        save_point_cloud(samples, out / f"toy_points_{mode}.tsv")
        (out / f"toy_summary_{mode}.txt").write_text(summary.to_text())
        print(f"[{mode}] within_mode_corr={summary.within_mode_corr:.4f} counts={summary.mode_counts} "
              f"evals={summary.score_evals} time={summary.wall_clock:.1f}s")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = load_config(args)
    out = output_dir(args, cfg)
    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        cfg = _checkpoint_config(args, ck)
        counts, mx, ma, marginal = _models_from_checkpoint(cfg, ck)
    else:
        ds = build_dataset(cfg)
        counts = NodeCountModel.from_dataset(ds.train if ds.split else ds)
        mx, ma, marginal = _models(cfg, counts.F)
    rows = ["solver\tsteps\tscore_evals\twall_clock"]
    base = asdict(C.sampler_config(cfg))
    for name in args.solvers.split(","):
        scfg = SamplerConfig(**{**base, "solver": name})
        rng = substream(cfg["run"]["seed"], "sampling")
        _, meta = generate((mx, ma), _specs(cfg), counts, scfg, args.count, rng, marginal_model_x=marginal,
                           chunk=cfg["sampler"]["chunk"], seed=cfg["run"]["seed"])
        rows.append(f"{meta.solver}\t{meta.steps}\t{meta.score_evals}\t{meta.wall_clock:.3f}")
        log.info("%s: %d evals in %.2fs", meta.solver, meta.score_evals, meta.wall_clock)
    text = "\n".join(rows) + "\n"
    (out / "bench.tsv").write_text(text)
    dump_config(cfg, out / "bench.cfg")
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="graphsde", description="Score-based graph generation with coupled SDEs.")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides [run] seed)")
    p.add_argument("--threads", type=int, default=None, help="cap BLAS worker threads")
    p.add_argument("--out", default=None, help=f"output directory (default: [run] output_dir, ${OUTPUT_ENV}, ./runs)")
    p.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, need_config=False):
        sp.add_argument("--config", required=need_config, help="INI run config")
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        sp.add_argument("--out", default=argparse.SUPPRESS)

    def sampler_flags(sp):
        sp.add_argument("--solver")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--snr", type=float)
        sp.add_argument("--scale-eps", dest="scale_eps", type=float)
        sp.add_argument("--mode", choices=("joint", "sequential", "independent"))

    sp = sub.add_parser("train", help="fit both score models")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sample", help="generate graphs from a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--name", help="output file name (default samples.txt)")
    sampler_flags(sp)
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("eval", help="MMD report between two graph files")
    common(sp)
    sp.add_argument("generated")
    sp.add_argument("test")
    sp.add_argument("--sigma", type=float)
    sp.add_argument("--name", help="report file name (default mmd_report.txt)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("toy", help="two-variable mixture experiment")
    common(sp)
    sp.add_argument("--mode", choices=("joint", "sequential", "independent", "all"))
    sp.add_argument("--source", choices=("analytic", "trained_mlp"))
    sp.add_argument("--samples", type=int)
    sp.add_argument("--solver")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--snr", type=float)
    sp.add_argument("--scale-eps", dest="scale_eps", type=float)
    sp.add_argument("--beta-min", dest="beta_min", type=float)
    sp.add_argument("--beta-max", dest="beta_max", type=float)
    sp.add_argument("--radius", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--fast", action="store_true", help="reduced training epochs for the MLP source")
    sp.set_defaults(func=cmd_toy)

    sp = sub.add_parser("bench", help="wall-clock and score-evaluation counts per solver")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--solvers", default="S4,PC(EM),EM,Reverse")
    sampler_flags(sp)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for attr in ("seed", "out"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limit = nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limit = threadpool_limits(args.threads)
    start = time.perf_counter()
    try:
        with limit:
            code = args.func(args)
    except C.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ParseError, DataError, CheckpointError, EmptySet, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DivergenceDetected, NonFiniteValue) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    log.debug("done in %.1fs", time.perf_counter() - start)
    return code


if __name__ == "__main__":
    sys.exit(main())
