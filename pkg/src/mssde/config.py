"""Flat key=value run configuration.

One key per line, `#` comments, blank lines ignored. Unknown keys are
rejected so typos fail loudly, and every run embeds the resolved config in
its outputs.
"""

from pathlib import Path


class ConfigError(ValueError):
    pass


def _floats(s):
    return tuple(float(v) for v in s.split(","))


def _ints(s):
    return tuple(int(v) for v in s.split(","))


# key -> parser. Grouped by the pipeline step that consumes them.
SCHEMA = {
    # dataset generation
    "problem": str,
    "n_y": int,
    "bounds": _floats,
    "c": float,
    "nu": float,
    "t_end": float,
    "dt": float,
    "save_every": int,
    "sigma": float,
    "n_train": int,
    "n_val": int,
    "n_test": int,
    "test_horizon": float,
    # training
    "n_zeta": int,
    "n_eta": int,
    "m": int,
    "n_quad": int,
    "steps": int,
    "batch": int,
    "lr": float,
    "warm_lr": float,
    "lr_decay_steps": int,
    "val_every": int,
    "q": int,
    "macro_hidden": _ints,
    "micro_hidden": _ints,
    "kernel_factor": int,
    "t_scale": float,
    "seed": int,
    # prediction
    "n_paths": int,
    "predict_dt": float,
    "split": str,
    # baselines
    "dmd_lambda": float,
    "sindy_order": int,
    "sindy_threshold": float,
    "n_coarse": int,
    # file plumbing
    "dataset": str,
    "checkpoint": str,
    "resume": str,
}


def parse_config(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in cfg:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            cfg[key] = SCHEMA[key](val)
        except ValueError as e:
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {e}") from e
    return cfg


def load_config(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return parse_config(text)


def format_config(cfg: dict) -> str:
    lines = []
    for key, val in sorted(cfg.items()):
        if isinstance(val, (tuple, list)):
            val = ",".join(repr(v) for v in val)
        lines.append(f"{key} = {val}")
    return "\n".join(lines) + "\n"
