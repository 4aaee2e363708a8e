"""Flat ``key = value`` run configuration.

Blank lines and text after ``#`` are ignored. Unknown keys, repeated keys and
malformed values raise ConfigError. The resolved configuration (defaults
filled in) is written back in canonical key order with every run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .search import TOY_SPACE

EVAL_MODES = ("fp", "rtn", "+group", "+dynamic", "+search")


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in text.split(",") if tok.strip())


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(tok.strip() for tok in text.split(",") if tok.strip())


def _budget(text: str):
    return None if text.strip() == "auto" else float(text)


def _seed(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 1 << 64:
        raise ValueError("seed must fit in 64 bits")
    return value


@dataclass(frozen=True)
class RunConfig:
    # randomness
    model_seed: int = 0
    sampler_seed: int = 0
    # model and sampler
    bundle: str = ""  # load weights from a bundle instead of random init
    image_size: int = 8
    patch_size: int = 2
    channels: int = 1
    hidden_dim: int = 288
    heads: int = 4
    blocks: int = 4
    timestep_embed_dim: int = 288
    steps: int = 50
    # quantization
    bits_w: int = 4
    bits_a: int = 8
    group_size: int = 32
    exclude: tuple[str, ...] = ()
    calib_samples: int = 32
    group_config: str = ""  # best_config.txt from a search run
    # search
    space: tuple[int, ...] = TOY_SPACE
    population: int = 16
    iterations: int = 15
    mutation_prob: float = 0.2
    topk: int = 8
    budget: float | None = None  # "auto": BitOps of the uniform group_size config
    n_fid: int = 512
    # reports
    stats_samples: int = 16
    modes: tuple[str, ...] = ("fp", "rtn", "+group", "+dynamic")
    out: str = ""

    def __post_init__(self):
        bad = [m for m in self.modes if m not in EVAL_MODES]
        if bad:
            raise ConfigError(f"unknown eval modes {bad}; choose from {EVAL_MODES}")
        for key in ("steps", "calib_samples", "n_fid", "stats_samples", "group_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")


_PARSERS = {
    int: int,
    float: float,
    str: str.strip,
}


def _parser_for(f: dataclasses.Field):
    if f.name in ("model_seed", "sampler_seed"):
        return _seed
    if f.name == "budget":
        return _budget
    if f.name == "space":
        return _int_list
    if f.name in ("exclude", "modes"):
        return _str_list
    return _PARSERS[type(f.default)]


FIELDS = {f.name: f for f in fields(RunConfig)}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _parser_for(FIELDS[key])(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {value!r}") from exc
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def _format(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    """Canonical text: every key in declaration order, parseable by parse_config."""
    lines = ["# resolved run configuration"]
    lines += [f"{f.name} = {_format(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- group config files


def write_group_config(path, sizes, layers, comments: dict | None = None) -> None:
    """Write a searched allocation: ``sizes = 8-16-...`` plus one comment per layer."""
    lines = ["# per-layer group sizes, registry order"]
    lines += [f"#   {name}: {g}" for name, g in zip(layers, sizes)]
    for key, value in (comments or {}).items():
        lines.append(f"# {key}: {_format(value)}")
    lines.append("sizes = " + "-".join(str(int(g)) for g in sizes))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_group_config(path) -> tuple[int, ...]:
    """Read the ``sizes`` line of a group config file."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read group config {path}: {exc.strerror}") from exc
    sizes = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or key != "sizes" or sizes is not None:
            raise ConfigError(f"{path}:{lineno}: expected a single 'sizes = g1-g2-...' line")
        try:
            sizes = tuple(int(tok) for tok in value.split("-"))
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad group sizes {value!r}") from exc
    if sizes is None:
        raise ConfigError(f"{path}: no 'sizes' line")
    if min(sizes) < 1:
        raise ConfigError(f"{path}: group sizes must be positive")
    return sizes
