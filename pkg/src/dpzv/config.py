"""Experiment config: YAML schema, validation, and resolution.

The config is a single YAML file; the schema below is the contract.  Every
key is validated (unknown keys rejected with the offending line when it can
be located), scalars may be given where per-device lists are expected, and
the resolved snapshot written next to the run artifacts materializes every
default so that feeding it back reproduces the identical run.
"""

import copy
import math

import numpy as np
import yaml

from .errors import ConfigError
from .protocol import RunConfig

# (expected types, default); required keys have default _REQUIRED
_REQUIRED = object()

_SCHEMA = {
    "seed": (int, 0),
    "output_dir": (str, "out"),
    "dataset": {
        "kind": (str, "synthetic"),
        "num_samples": (int, 2000),
        "total_dim": (int, 16),
        "num_classes": (int, 2),
        "margin": ((int, float), 10.0),
        "images": (str, None),
        "labels": (str, None),
        "path": (str, None),
        "partition": (str, "contiguous_rows"),
    },
    "federation": {
        "num_devices": (int, 2),
        "participation": ((int, float, list), 1.0),
        # absent -> "auto" (10 * num_devices); explicit null disables the cap
        "staleness_cap": ((int, str), "auto"),
    },
    "model": {
        "device_kind": (str, "linear"),
        "device_hidden": (int, 16),
        "embed_dim": ((int, list), 4),
        "head_hidden": (int, 32),
        "param_dtype": (str, "float32"),
    },
    "training": {
        "algorithm": (str, "dpzv"),
        "server_mode": (str, "sgd"),
        "rounds": (int, _REQUIRED),
        "batch_size": (int, 32),
        "device_lr": ((int, float, list), 0.05),
        "server_lr": ((int, float), 0.1),
        "lambda": ((int, float, list), 1e-3),
        "server_lambda": ((int, float), 1e-3),
        "divisor_mode": (str, "two_lambda"),
        "clip_c": ((int, float), 10.0),
    },
    "privacy": {
        "epsilon": ((int, float, str), None),
        "delta": ((int, float), None),
        "sigma_dp": ((int, float), None),
    },
    "comm": {
        "scalar_width": (int, 4),
        "id_width": (int, 4),
    },
    "eval": {
        "every": (int, 100),
        "target_accuracy": ((int, float), 0.9),
    },
}


def _find_line(text, key):
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0]
        if stripped.strip().startswith(f"{key}:"):
            return i
    return None


def _fail(text, path, message):
    key = path.split(".")[-1]
    line = _find_line(text, key) if text else None
    where = f"line {line}: " if line else ""
    raise ConfigError(f"{where}{path}: {message}")


def _validate_section(text, path, schema, given):
    if not isinstance(given, dict):
        _fail(text, path or "config", "expected a mapping")
    out = {}
    for key, value in given.items():
        if key not in schema:
            _fail(text, f"{path}{key}" if not path else f"{path}.{key}", "unknown key")
    for key, spec in schema.items():
        full = key if not path else f"{path}.{key}"
        if isinstance(spec, dict):
            sub = given.get(key, {})
            out[key] = _validate_section(text, full, spec, sub)
            continue
        types, default = spec
        if key in given:
            value = given[key]
            if value is None:
                if default is _REQUIRED:
                    _fail(text, full, "required key missing")
                out[key] = None
            else:
                if isinstance(value, bool) or not isinstance(value, types):
                    _fail(text, full, f"expected {types}, got {type(value).__name__}")
                out[key] = value
        else:
            if default is _REQUIRED:
                _fail(text, full, "required key missing")
            out[key] = default
    return out


def load_config(path):
    """Parse and validate a YAML config file into a resolved dict."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    if raw is None:
        raw = {}
    return validate_config(raw, text)


def validate_config(raw, text=""):
    resolved = _validate_section(text, "", _SCHEMA, raw)
    _check_semantics(text, resolved)
    cap = resolved["federation"]["staleness_cap"]
    if cap == "auto":
        resolved["federation"]["staleness_cap"] = 10 * resolved["federation"]["num_devices"]
    elif isinstance(cap, str):
        _fail(text, "federation.staleness_cap", "must be an integer, null, or 'auto'")
    return resolved


def _check_semantics(text, cfg):
    ds = cfg["dataset"]
    if ds["kind"] not in ("synthetic", "idx", "csv"):
        _fail(text, "dataset.kind", f"unknown dataset kind {ds['kind']!r}")
    if ds["kind"] == "idx" and (not ds["images"] or not ds["labels"]):
        _fail(text, "dataset.kind", "idx datasets need images and labels paths")
    if ds["kind"] == "csv" and not ds["path"]:
        _fail(text, "dataset.path", "csv datasets need a path")
    pv = cfg["privacy"]
    eps = pv["epsilon"]
    if isinstance(eps, str):
        if eps not in ("inf", ".inf", "Infinity"):
            _fail(text, "privacy.epsilon", f"not a number: {eps!r}")
        pv["epsilon"] = math.inf
    has_target = pv["epsilon"] is not None
    if has_target and pv["sigma_dp"] is not None:
        _fail(text, "privacy.sigma_dp",
              "give either an (epsilon, delta) target or sigma_dp, not both")
    if has_target and pv["delta"] is None:
        _fail(text, "privacy.delta", "an epsilon target needs a delta")
    if cfg["model"]["param_dtype"] not in ("float32", "float64"):
        _fail(text, "model.param_dtype", "must be float32 or float64")
    if cfg["eval"]["every"] < 0:
        _fail(text, "eval.every", "must be nonnegative")


def to_run_config(cfg, seed_override=None):
    """Build the simulator RunConfig from a validated config dict."""
    fed, mo, tr, pv, comm = (
        cfg["federation"], cfg["model"], cfg["training"], cfg["privacy"], cfg["comm"]
    )
    try:
        return RunConfig(
            rounds=tr["rounds"],
            batch_size=tr["batch_size"],
            master_seed=cfg["seed"] if seed_override is None else seed_override,
            num_devices=fed["num_devices"],
            embed_dims=mo["embed_dim"],
            algorithm=tr["algorithm"],
            server_mode=tr["server_mode"],
            device_kind=mo["device_kind"],
            device_hidden=mo["device_hidden"],
            head_hidden=mo["head_hidden"],
            param_dtype=mo["param_dtype"],
            device_lr=tr["device_lr"],
            server_lr=tr["server_lr"],
            lam=tr["lambda"],
            server_lam=tr["server_lambda"],
            divisor_mode=tr["divisor_mode"],
            clip_c=tr["clip_c"],
            participation=fed["participation"],
            staleness_cap=fed["staleness_cap"],
            epsilon=pv["epsilon"],
            delta=pv["delta"],
            sigma_dp=pv["sigma_dp"],
            scalar_width=comm["scalar_width"],
            id_width=comm["id_width"],
            eval_every=cfg["eval"]["every"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def dump_resolved(cfg, path):
    """Write the fully-resolved config; feeding it back reproduces the run."""
    out = copy.deepcopy(cfg)
    eps = out["privacy"]["epsilon"]
    if eps is not None and math.isinf(eps):
        out["privacy"]["epsilon"] = "inf"
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(out, fh, sort_keys=True, default_flow_style=False)
