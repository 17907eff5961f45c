"""Run configuration: flat dotted keys, file + flag merging, strict validation."""

import json
from pathlib import Path

# key -> (default, type). Config files are flat JSON objects with these keys;
# command-line flags override file values.
DEFAULTS = {
    "renderer": ("single_surface", str),          # baseline | single_surface
    "renderer.eta": (0.5, float),
    "renderer.base": (0.2, float),
    "renderer.normalize_weights": (False, bool),
    "robust.enabled": (False, bool),
    "robust.t_r": (0.6, float),
    "robust.quantile": (0.5, float),
    "dgs.enabled": (False, bool),
    "dgs.t_h": (0.02, float),
    "optim.lr": (0.01, float),
    "optim.beta1": (0.9, float),
    "optim.beta2": (0.999, float),
    "optim.eps": (1e-8, float),
    "early_stop.interval": (2000, int),
    "sampling.coarse": (64, int),
    "sampling.fine": (64, int),
    "sampling.jitter": (True, bool),
    "field.resolution": (64, (int, list)),
    "field.bounds": ([[-1.05, -1.05, -1.05], [1.05, 1.05, 1.05]], list),
    "field.medium_color": ([0.05, 0.15, 0.20], list),
    "field.init_density": (0.01, float),
    "train.iterations": (20000, int),
    "train.batch_rays": (4096, int),
    "train.patches": (16, int),
    "train.coarse_loss_weight": (1.0, float),
    "train.log_every": (100, int),
    "seed": (0, int),
    "threads": (1, int),
}

_RENDERERS = ("baseline", "single_surface")


class ConfigError(ValueError):
    pass


def load_config_file(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def resolve(file_values=None, overrides=None):
    """Merge defaults <- file <- overrides; reject unknown keys and bad types."""
    cfg = {k: v for k, (v, _) in DEFAULTS.items()}
    for source, name in ((file_values, "config file"), (overrides, "override")):
        if not source:
            continue
        for k, v in source.items():
            if k not in DEFAULTS:
                raise ConfigError(f"unknown {name} key: {k!r}")
            if v is None:
                continue
            _, typ = DEFAULTS[k]
            if typ is float and isinstance(v, (int, float)) and not isinstance(v, bool):
                v = float(v)
            elif typ is int and isinstance(v, int) and not isinstance(v, bool):
                v = int(v)
            elif typ is bool and isinstance(v, bool):
                pass
            elif typ is str and isinstance(v, str):
                pass
            elif isinstance(typ, tuple) or typ is list:
                pass  # structured values validated below
            else:
                raise ConfigError(f"{name} key {k!r} has wrong type: {v!r}")
            cfg[k] = v
    if cfg["renderer"] not in _RENDERERS:
        raise ConfigError(f"renderer must be one of {_RENDERERS}, got {cfg['renderer']!r}")
    if cfg["train.batch_rays"] <= 0 or cfg["train.patches"] <= 0:
        raise ConfigError("batch sizes must be positive")
    if cfg["train.iterations"] < 0:
        raise ConfigError("train.iterations must be >= 0")
    return cfg


def save_resolved(cfg, path):
    with open(path, "w") as f:
        json.dump(cfg, f, indent=1, sort_keys=True)
    return path
