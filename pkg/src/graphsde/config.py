"""INI run configuration with typed defaults and strict key checking."""

from __future__ import annotations

import configparser
import copy
import io
from pathlib import Path
from typing import Any

from .checkpoint import config_hash
from .sde import SdeSpec
from .solvers import SamplerConfig
from .training import LossConfig, TrainConfig


class ConfigError(ValueError):
    pass


# section -> key -> (type, default); type "float?" allows "none"
SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "run": {"seed": ("int", 42), "output_dir": ("str", "")},
    "dataset": {"name": ("str", "community_small"), "count": ("int", 100), "path": ("str", ""),
                "test_fraction": ("float", 0.2)},
    "sde_x": {"kind": ("str", "VP"), "beta_min": ("float", 0.1), "beta_max": ("float", 1.0),
              "sigma_min": ("float", 0.2), "sigma_max": ("float", 1.0), "steps": ("int", 1000)},
    "sde_a": {"kind": ("str", "VP"), "beta_min": ("float", 0.1), "beta_max": ("float", 1.0),
              "sigma_min": ("float", 0.2), "sigma_max": ("float", 1.0), "steps": ("int", 1000)},
    "model_x": {"hidden": ("int", 32), "layers": ("int", 3)},
    "model_a": {"hidden": ("int", 32), "blocks": ("int", 5), "powers": ("int", 2), "heads": ("int", 4),
                "c_hidden": ("int", 8), "c_final": ("int", 4)},
    "loss": {"lambda_mode": ("str", "sigma_sq"), "t_eps": ("float", 1e-3), "batch_size": ("int", 128)},
    "train": {"lr": ("float", 1e-2), "weight_decay": ("float", 1e-4), "epochs": ("int", 5000),
              "ema_decay": ("float?", None), "grad_clip": ("float?", 1.0), "checkpoint_every": ("int", 100)},
    "sampler": {"solver": ("str", "PC(EM)"), "steps": ("int", 1000), "snr": ("float", 0.05),
                "scale_eps": ("float", 0.7), "mode": ("str", "joint"), "n_corrector_steps": ("int", 1),
                "t_eps": ("float", 1e-3), "marginal_x": ("str", "joint_model"), "use_ema": ("bool", True),
                "chunk": ("int", 256)},
    "eval": {"sigma": ("float", 1.0)},
    "toy": {"mode": ("str", "joint"), "source": ("str", "analytic"), "samples": ("int", 8192),
            "solver": ("str", "EM"), "steps": ("int", 1000), "snr": ("float", 0.0), "scale_eps": ("float", 0.7),
            "beta_min": ("float", 0.01), "beta_max": ("float", 0.05), "radius": ("float?", 0.5),
            "hidden": ("int", 512), "layers": ("int", 20), "epochs": ("int", 5000), "batch_size": ("int", 2048),
            "lr": ("float", 1e-3), "fast": ("bool", False)},
}

# sections whose values determine the trained weights' meaning
MODEL_SECTIONS = ("dataset", "sde_x", "sde_a", "model_x", "model_a")


def _convert(section: str, key: str, kind: str, raw: str):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float?":
            return None if raw.strip().lower() in ("none", "") else float(raw)
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r} as {kind.rstrip('?')}") from None


def defaults() -> dict[str, dict[str, Any]]:
    return {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}


def parse_text(text: str, base: dict | None = None) -> dict[str, dict[str, Any]]:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}") from None
    cfg = copy.deepcopy(base) if base is not None else defaults()
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key [{section}] {key}")
            cfg[section][key] = _convert(section, key, SCHEMA[section][key][0], raw)
    validate(cfg)
    return cfg


def load(path) -> dict[str, dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text())


def set_value(cfg: dict, section: str, key: str, value) -> None:
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigError(f"unknown key [{section}] {key}")
    cfg[section][key] = _convert(section, key, SCHEMA[section][key][0], str(value))


def dumps(cfg: dict) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, keys in cfg.items():
        cp[section] = {k: "none" if v is None else str(v) for k, v in keys.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def sde_spec(section: dict) -> SdeSpec:
    return SdeSpec(section["kind"], section["beta_min"], section["beta_max"], section["sigma_min"],
                   section["sigma_max"], 1.0, section["steps"])


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(**cfg["loss"])


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(seed=cfg["run"]["seed"], **cfg["train"])


def sampler_config(cfg: dict) -> SamplerConfig:
    s = cfg["sampler"]
    return SamplerConfig(s["solver"], s["steps"], s["snr"], s["scale_eps"], s["mode"], s["n_corrector_steps"],
                         s["t_eps"])


def validate(cfg: dict) -> None:
    """Build every typed object once so bad values fail before any work."""
    try:
        sde_spec(cfg["sde_x"])
        sde_spec(cfg["sde_a"])
        loss_config(cfg)
        train_config(cfg)
        sampler_config(cfg)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if cfg["dataset"]["name"] not in ("community_small", "grid", "file"):
        raise ConfigError(f"[dataset] name: unknown dataset {cfg['dataset']['name']!r}")
    if cfg["sampler"]["marginal_x"] not in ("joint_model", "dedicated"):
        raise ConfigError("[sampler] marginal_x: choose 'joint_model' or 'dedicated'")
    if cfg["toy"]["mode"] not in ("joint", "sequential", "independent", "all"):
        raise ConfigError(f"[toy] mode: unknown mode {cfg['toy']['mode']!r}")
    if cfg["toy"]["source"] not in ("analytic", "trained_mlp"):
        raise ConfigError(f"[toy] source: unknown source {cfg['toy']['source']!r}")
    try:
        SdeSpec.vp(cfg["toy"]["beta_min"], cfg["toy"]["beta_max"])
        SamplerConfig(cfg["toy"]["solver"], cfg["toy"]["steps"], cfg["toy"]["snr"], cfg["toy"]["scale_eps"])
    except ValueError as e:
        raise ConfigError(f"[toy] {e}") from None
    if cfg["eval"]["sigma"] <= 0:
        raise ConfigError("[eval] sigma must be positive")


def model_hash(cfg: dict) -> str:
    return config_hash({s: cfg[s] for s in MODEL_SECTIONS})
