"""Command-line entry point: ``qdit stats|quantize|search|eval --config <path> --out <dir>``.

Exit status: 0 on success, 2 for configuration or bundle errors, 3 for
numeric or domain errors. Every command writes ``run_config.txt`` (the
resolved configuration) next to its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .bundle import load_model, save_quantized
from .config import RunConfig, format_config, load_config, read_group_config, write_group_config
from .errors import BundleError, ConfigError, NumericError
from .gptq import weighted_error
from .metrics import (
    TIMELINE_HEADER,
    VARIANCE_HEADER,
    activation_timeline_report,
    channel_variance_report,
    channel_variance_rows,
    fit_gaussian,
    frechet_distance,
    static_param_overhead,
    write_csv,
)
from .model import (
    DiffusionSchedule,
    QuantSpec,
    ToyDiT,
    ToyDiTConfig,
    calibrate,
    ddim_sample,
    init_random,
    quantize_model,
    record_activations,
    uniform_groups,
)
from .numerics import mix64
from .search import (
    HISTORY_HEADER,
    BitOpsModel,
    FitnessContext,
    GroupConfig,
    SearchParams,
    bitops,
    evolve,
    history_rows,
)

log = logging.getLogger("qdit")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

# child streams of the sampler seed
STREAM_CALIBRATION = 1
STREAM_EVAL = 2
STREAM_SEARCH = 3
STREAM_STATS = 4


def derived_seed(cfg: RunConfig, stream: int) -> int:
    return mix64(cfg.sampler_seed, stream)


# ---------------------------------------------------------------- shared setup


def build_model(cfg: RunConfig) -> ToyDiT:
    """Load ``bundle`` if set (its stored dimensions win), else random init from ``model_seed``."""
    if cfg.bundle:
        return load_model(cfg.bundle)
    return init_random(
        ToyDiTConfig(
            cfg.image_size,
            cfg.patch_size,
            cfg.channels,
            cfg.hidden_dim,
            cfg.heads,
            cfg.blocks,
            cfg.timestep_embed_dim,
            cfg.model_seed,
        )
    )


def build_schedule(cfg: RunConfig) -> DiffusionSchedule:
    return DiffusionSchedule(steps=cfg.steps)


def group_sizes(cfg: RunConfig, model: ToyDiT) -> tuple[int, ...]:
    """The searched allocation if ``group_config`` is set, otherwise uniform ``group_size``."""
    if cfg.group_config:
        sizes = read_group_config(cfg.group_config)
        if len(sizes) != len(model.registry):
            raise ConfigError(f"group config has {len(sizes)} entries, model has {len(model.registry)} layers")
        return sizes
    return uniform_groups(model, cfg.group_size)


def bitops_model(cfg: RunConfig, model: ToyDiT) -> BitOpsModel:
    return BitOpsModel(model.geometry().layers, cfg.bits_w, cfg.bits_a)


def resolve_budget(cfg: RunConfig, model: ToyDiT) -> float:
    if cfg.budget is not None:
        return cfg.budget
    return float(bitops(GroupConfig(uniform_groups(model, cfg.group_size)), bitops_model(cfg, model)))


def check_fid_samples(cfg: RunConfig, model: ToyDiT) -> None:
    need = model.config.sample_dim + 1
    if cfg.n_fid < need:
        raise ConfigError(f"n_fid must be at least {need} for a {model.config.sample_dim}-dim covariance")


def prepare_out(cfg: RunConfig, out: str | None) -> Path:
    target = out or cfg.out
    if not target:
        raise ConfigError("no output directory: pass --out or set 'out' in the config")
    path = Path(target)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path}: {exc.strerror}") from exc
    # the output location is not part of the run's identity
    (path / "run_config.txt").write_text(format_config(dataclasses.replace(cfg, out="")), encoding="utf-8")
    return path


# ---------------------------------------------------------------- stats

CHANNEL_SUMMARY_HEADER = ("layer", "axis", "channels", "min_std", "median_std", "max_std", "max_over_median")


def _summary_row(layer: str, axis: str, std: np.ndarray, ratio: float) -> tuple:
    return (layer, axis, len(std), float(std.min()), float(np.median(std)), float(std.max()), ratio)


class _ChannelMoments:
    """Running per-channel mean and variance (shifted sums, float64)."""

    def __init__(self):
        self.shift: dict[str, np.ndarray] = {}
        self.count: dict[str, int] = {}
        self.s1: dict[str, np.ndarray] = {}
        self.s2: dict[str, np.ndarray] = {}

    def __call__(self, name: str, tau: int, h: np.ndarray) -> None:
        flat = h.reshape(-1, h.shape[-1]).astype(np.float64)
        if name not in self.shift:
            self.shift[name] = flat.mean(axis=0)
            self.count[name] = 0
            self.s1[name] = np.zeros(flat.shape[1])
            self.s2[name] = np.zeros(flat.shape[1])
        d = flat - self.shift[name]
        self.count[name] += flat.shape[0]
        self.s1[name] += d.sum(axis=0)
        self.s2[name] += (d * d).sum(axis=0)

    def std(self, name: str) -> np.ndarray:
        n = self.count[name]
        mean = self.s1[name] / n
        return np.sqrt(np.maximum(self.s2[name] / n - mean * mean, 0.0))


def cmd_stats(cfg: RunConfig, out: Path) -> None:
    model = build_model(cfg)
    schedule = build_schedule(cfg)
    seed = derived_seed(cfg, STREAM_STATS)

    summary, detail = [], []
    for name in model.registry:
        report = channel_variance_report(model.weight(name))
        summary.append(_summary_row(name, "input", report.input_std, report.input_ratio))
        summary.append(_summary_row(name, "output", report.output_std, report.output_ratio))
        detail += channel_variance_rows(name, report)
    write_csv(out / "channel_variance.csv", CHANNEL_SUMMARY_HEADER, summary)
    write_csv(out / "channel_std.csv", VARIANCE_HEADER, detail)

    moments = _ChannelMoments()
    ddim_sample(model, schedule, cfg.stats_samples, seed, observer=moments, chunk=max(cfg.stats_samples, 1))
    act_rows = []
    for name in model.registry:
        std = moments.std(name)
        med = float(np.median(std))
        ratio = float(std.max()) / med if med > 0 else (0.0 if std.max() == 0 else math.inf)
        act_rows.append(_summary_row(name, "input", std, ratio))
    write_csv(out / "activation_channel_variance.csv", CHANNEL_SUMMARY_HEADER, act_rows)

    snaps = record_activations(model, schedule, cfg.stats_samples, seed)
    write_csv(out / "activation_timeline.csv", TIMELINE_HEADER, activation_timeline_report(snaps))


# ---------------------------------------------------------------- quantize

QUANTIZE_HEADER = (
    "layer", "d_in", "d_out", "tokens", "group_size", "groups", "weight_mse", "hessian_error", "bitops",
)  # fmt: skip
TOTALS_HEADER = ("metric", "value")


def cmd_quantize(cfg: RunConfig, out: Path) -> None:
    model = build_model(cfg)
    schedule = build_schedule(cfg)
    sizes = group_sizes(cfg, model)
    calib = calibrate(model, schedule, cfg.calib_samples, derived_seed(cfg, STREAM_CALIBRATION))
    spec = QuantSpec(sizes, cfg.bits_w, cfg.bits_a, "gptq", "dynamic", cfg.exclude)
    qm = quantize_model(model, spec, calib)
    save_quantized(out / "model.qdtb", qm)

    m = bitops_model(cfg, model)
    rows = []
    for layer, g in zip(m.layers, sizes):
        layer_bitops = bitops(GroupConfig((g,)), BitOpsModel((layer,), m.bits_w, m.bits_a, m.rescale_cost))
        q = qm.layers.get(layer.name)
        if q is None:  # excluded: runs in full precision
            rows.append((layer.name, layer.d_in, layer.d_out, layer.tokens, "fp", 0, 0.0, 0.0, layer_bitops))
            continue
        w = model.weight(layer.name)
        delta = q.wq.dequantize() - w.astype(np.float64)
        rows.append(
            (
                layer.name,
                layer.d_in,
                layer.d_out,
                layer.tokens,
                q.wq.layout.group_size,
                q.wq.layout.group_count,
                float(np.mean(delta * delta)),
                weighted_error(w, q.wq, calib.hessians[layer.name]),
                layer_bitops,
            )
        )
    write_csv(out / "quantize_summary.csv", QUANTIZE_HEADER, rows)
    geometry = model.geometry()
    totals = [
        ("bitops", bitops(GroupConfig(sizes), m)),
        ("param_count", geometry.param_count),
        ("steps", cfg.steps),
        ("static_overhead_ratio", static_param_overhead(geometry, cfg.steps, sizes)),
        ("group_config", str(GroupConfig(sizes))),
    ]
    write_csv(out / "quantize_totals.csv", TOTALS_HEADER, totals)


# ---------------------------------------------------------------- search


def cmd_search(cfg: RunConfig, out: Path) -> None:
    model = build_model(cfg)
    check_fid_samples(cfg, model)
    schedule = build_schedule(cfg)
    params = SearchParams(cfg.space, cfg.population, cfg.iterations, cfg.mutation_prob, cfg.topk, cfg.budget, cfg.n_fid)
    m = bitops_model(cfg, model)
    budget = resolve_budget(cfg, model)
    coarsest = bitops(GroupConfig.uniform(max(params.space), len(m.layers)), m)
    if coarsest > budget:  # before any sampling
        raise ConfigError(f"budget {budget!r} is infeasible: the coarsest configuration needs {coarsest} BitOps")

    eval_seed = derived_seed(cfg, STREAM_EVAL)
    reference = fit_gaussian(ddim_sample(model, schedule, cfg.n_fid, eval_seed))
    calib = calibrate(model, schedule, cfg.calib_samples, derived_seed(cfg, STREAM_CALIBRATION))
    ctx = FitnessContext(model, schedule, reference, calib, cfg.bits_w, cfg.bits_a, cfg.n_fid, eval_seed, exclude=cfg.exclude)
    result = evolve(params, ctx, m, derived_seed(cfg, STREAM_SEARCH), budget)

    write_csv(out / "search_history.csv", HISTORY_HEADER, history_rows(result))
    write_group_config(
        out / "best_config.txt",
        result.best.sizes,
        model.registry,
        {
            "fitness": result.best_fitness,
            "bitops": bitops(result.best, m),
            "budget": budget,
            "evaluated": len(result.evaluated),
        },
    )


# ---------------------------------------------------------------- eval

EVAL_HEADER = ("mode", "weights", "activations", "group_config", "bitops", "fid")


def _mode_spec(mode: str, cfg: RunConfig, model: ToyDiT) -> QuantSpec | None:
    uniform = uniform_groups(model, cfg.group_size)
    if mode == "fp":
        return None
    if mode == "rtn":  # one group per layer, static per-tensor activations
        return QuantSpec(uniform_groups(model), cfg.bits_w, cfg.bits_a, "rtn", "static", cfg.exclude)
    if mode == "+group":
        return QuantSpec(uniform, cfg.bits_w, cfg.bits_a, "gptq", "static", cfg.exclude)
    if mode == "+dynamic":
        return QuantSpec(uniform, cfg.bits_w, cfg.bits_a, "gptq", "dynamic", cfg.exclude)
    if not cfg.group_config:
        raise ConfigError("mode '+search' needs group_config (the best_config.txt of a search run)")
    return QuantSpec(group_sizes(cfg, model), cfg.bits_w, cfg.bits_a, "gptq", "dynamic", cfg.exclude)


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    model = build_model(cfg)
    check_fid_samples(cfg, model)
    schedule = build_schedule(cfg)
    specs = {mode: _mode_spec(mode, cfg, model) for mode in cfg.modes}  # config errors first
    eval_seed = derived_seed(cfg, STREAM_EVAL)
    fp_samples = ddim_sample(model, schedule, cfg.n_fid, eval_seed)
    reference = fit_gaussian(fp_samples)
    calib = None
    if any(s is not None for s in specs.values()):
        calib = calibrate(model, schedule, cfg.calib_samples, derived_seed(cfg, STREAM_CALIBRATION))
    m = bitops_model(cfg, model)
    cache: dict = {}
    rows = []
    for mode, spec in specs.items():
        if spec is None:
            rows.append((mode, "fp", "fp", "", "", frechet_distance(reference, fit_gaussian(fp_samples))))
            continue
        qm = quantize_model(model, spec, calib, cache)
        fid = frechet_distance(reference, fit_gaussian(ddim_sample(model, schedule, cfg.n_fid, eval_seed, qm)))
        g = GroupConfig(spec.group_sizes)
        rows.append((mode, spec.weights, spec.activations, str(g), bitops(g, m), fid))
        log.info("%s: toy-FID %.6g", mode, fid)
    write_csv(out / "eval_report.csv", EVAL_HEADER, rows)


# ---------------------------------------------------------------- entry point

COMMANDS = {"stats": cmd_stats, "quantize": cmd_quantize, "search": cmd_search, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qdit", description="Post-training quantization for a toy diffusion transformer.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip() or None)
        p.add_argument("--config", required=True, help="flat key = value run configuration")
        p.add_argument("--out", help="output directory (overrides 'out' in the config)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="qdit: %(message)s")
    logging.captureWarnings(True)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            cfg = load_config(args.config)
            out = prepare_out(cfg, args.out)
            COMMANDS[args.command](cfg, out)
    except (ConfigError, BundleError) as exc:
        print(f"qdit: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericError, FloatingPointError) as exc:
        print(f"qdit: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


cmd_stats.__doc__ = "per-channel weight and activation statistics"
cmd_quantize.__doc__ = "GPTQ-quantize the model and write a bundle"
cmd_search.__doc__ = "evolutionary group-size search under a BitOps budget"
cmd_eval.__doc__ = "toy-FID ladder over quantization modes"


if __name__ == "__main__":
    sys.exit(main())
