"""A small DiT-style denoiser, its DDIM sampler and quantized execution.

Architecture (unconditional, adaLN modulation from the timestep only)::

    patches (B, N, p*p*C) -> patch_embed -> + fixed 2-D sin-cos positions
    c = t_embed.fc2(silu(t_embed.fc1(freq(t))))
    per block i:
        shift1, scale1, gate1, shift2, scale2, gate2 = blocks.i.adaLN(silu(c))
        h += gate1 * proj(attention(qkv(LN(h) * (1 + scale1) + shift1)))
        h += gate2 * fc2(gelu(fc1(LN(h) * (1 + scale2) + shift2)))
    shift, scale = final.adaLN(silu(c))
    eps = final.linear(LN(h) * (1 + scale) + shift) -> unpatchify

Every linear layer stores ``W`` as ``(d_in, d_out)`` so ``y = x W + b``.
The layer registry lists them in the order above; its length is the length
of a group-size configuration. LayerNorm has no affine parameters; softmax,
LayerNorm and GELU always run in float32.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ConfigError, ValidationError
from .geometry import LayerShape, ModelGeometry
from .gptq import HessianAccumulator, gptq_quantize_layer
from .metrics import Snapshot, summarize
from .numerics import Rng
from .quantizer import (
    GroupLayout,
    QuantizedTensor,
    QuantParams,
    compute_params,
    dynamic_quantize_activation,
    quantize_activation_with,
    quantized_matmul,
    weight_column_sums,
)

log = logging.getLogger(__name__)

LN_EPS = 1e-6
BLOCK_LAYERS = ("adaLN", "qkv", "proj", "fc1", "fc2")


@dataclass(frozen=True)
class ToyDiTConfig:
    image_size: int = 8
    patch_size: int = 2
    channels: int = 1
    hidden_dim: int = 288
    heads: int = 4
    blocks: int = 4
    timestep_embed_dim: int = 288
    seed: int = 0

    def __post_init__(self):
        if min(self.image_size, self.patch_size, self.channels, self.hidden_dim, self.heads, self.blocks) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.heads:
            raise ConfigError("hidden_dim must be divisible by heads")
        if self.hidden_dim % 4:
            raise ConfigError("hidden_dim must be divisible by 4 (2-D sin-cos positions)")
        if self.timestep_embed_dim % 2:
            raise ConfigError("timestep_embed_dim must be even")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def tokens(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def sample_dim(self) -> int:
        return self.image_size * self.image_size * self.channels

    def layer_shapes(self) -> list[LayerShape]:
        h, n = self.hidden_dim, self.tokens
        shapes = [
            LayerShape("t_embed.fc1", self.timestep_embed_dim, h, 1),
            LayerShape("t_embed.fc2", h, h, 1),
            LayerShape("patch_embed", self.patch_dim, h, n),
        ]
        for i in range(self.blocks):
            shapes += [
                LayerShape(f"blocks.{i}.adaLN", h, 6 * h, 1),
                LayerShape(f"blocks.{i}.qkv", h, 3 * h, n),
                LayerShape(f"blocks.{i}.proj", h, h, n),
                LayerShape(f"blocks.{i}.fc1", h, 4 * h, n),
                LayerShape(f"blocks.{i}.fc2", 4 * h, h, n),
            ]
        shapes += [
            LayerShape("final.adaLN", h, 2 * h, 1),
            LayerShape("final.linear", h, self.patch_dim, n),
        ]
        return shapes


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear betas over ``train_steps``, sampled at ``steps`` evenly spaced timesteps."""

    steps: int = 50
    train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        if not 0 <= self.steps <= self.train_steps:
            raise ConfigError("steps must lie in [0, train_steps]")
        if not 0 < self.beta_start <= self.beta_end < 1:
            raise ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1")

    @property
    def betas(self) -> np.ndarray:
        return np.linspace(self.beta_start, self.beta_end, self.train_steps)

    @property
    def train_alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    @property
    def timesteps(self) -> np.ndarray:
        """Training timestep for each sampler index, ascending."""
        return (np.arange(self.steps, dtype=np.int64) * self.train_steps) // max(self.steps, 1)

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return self.train_alphas_cumprod[self.timesteps]

    @property
    def alphas_cumprod_prev(self) -> np.ndarray:
        """alpha-bar of the next (less noisy) sampler index; 1 after the last step."""
        ab = self.alphas_cumprod
        return np.concatenate([[1.0], ab[:-1]])


# ---------------------------------------------------------------- model


def _sincos_1d(dim: int, pos: np.ndarray) -> np.ndarray:
    omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
    out = np.outer(pos.reshape(-1), omega)
    return np.concatenate([np.sin(out), np.cos(out)], axis=1)


def sincos_pos_embed(dim: int, grid: int) -> np.ndarray:
    gh, gw = np.meshgrid(np.arange(grid, dtype=np.float64), np.arange(grid, dtype=np.float64), indexing="ij")
    emb = np.concatenate([_sincos_1d(dim // 2, gh), _sincos_1d(dim // 2, gw)], axis=1)
    return emb.astype(np.float32)


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(np.float32)


class ToyDiT:
    """Weights of the toy denoiser; immutable during inference."""

    def __init__(self, config: ToyDiTConfig, params: dict[str, np.ndarray]):
        self.config = config
        self.shapes = {s.name: s for s in config.layer_shapes()}
        self.registry = list(self.shapes)
        expected = []
        for name in self.registry:
            expected += [f"{name}.weight", f"{name}.bias"]
        if list(params) != expected:
            raise ValidationError("parameter names do not match the layer registry")
        for name, s in self.shapes.items():
            if params[f"{name}.weight"].shape != (s.d_in, s.d_out) or params[f"{name}.bias"].shape != (s.d_out,):
                raise ValidationError(f"bad shape for layer {name}")
        self.params = {k: np.ascontiguousarray(v, dtype=np.float32) for k, v in params.items()}
        self.pos_embed = sincos_pos_embed(config.hidden_dim, config.grid)

    def weight(self, name: str) -> np.ndarray:
        return self.params[f"{name}.weight"]

    def bias(self, name: str) -> np.ndarray:
        return self.params[f"{name}.bias"]

    def linear(self, name: str, h: np.ndarray) -> np.ndarray:
        shape = h.shape
        y = h.reshape(-1, shape[-1]) @ self.weight(name) + self.bias(name)
        return y.reshape(*shape[:-1], y.shape[-1])

    def geometry(self) -> ModelGeometry:
        count = sum(v.size for v in self.params.values())
        return ModelGeometry(tuple(self.shapes.values()), count)

    def zero_output_head(self) -> "ToyDiT":
        params = dict(self.params)
        params["final.linear.weight"] = np.zeros_like(params["final.linear.weight"])
        params["final.linear.bias"] = np.zeros_like(params["final.linear.bias"])
        return ToyDiT(self.config, params)


def init_random(cfg: ToyDiTConfig) -> ToyDiT:
    """Normal weights with std 1/sqrt(fan_in), zero biases, zero final adaLN.

    Each layer draws from its own child stream of the model seed, keyed by its
    registry index, so the weights of one layer do not depend on the others.
    """
    root = Rng(cfg.seed)
    params: dict[str, np.ndarray] = {}
    for idx, s in enumerate(cfg.layer_shapes()):
        if s.name == "final.adaLN":
            w = np.zeros((s.d_in, s.d_out), dtype=np.float32)
        else:
            w = (root.spawn(idx).normal((s.d_in, s.d_out)) / math.sqrt(s.d_in)).astype(np.float32)
        params[f"{s.name}.weight"] = w
        params[f"{s.name}.bias"] = np.zeros(s.d_out, dtype=np.float32)
    return ToyDiT(cfg, params)


def _silu(x):
    return x / (np.float32(1.0) + np.exp(-x))


def _gelu(x):
    c = np.float32(math.sqrt(2.0 / math.pi))
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(c * (x + np.float32(0.044715) * x * x * x)))


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + np.float32(LN_EPS))


def _modulate(x, shift, scale):
    return x * (np.float32(1.0) + scale) + shift


def _softmax(x):
    x = x - x.max(axis=-1, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=-1, keepdims=True)


Observer = Callable[[str, int, np.ndarray], None]


def forward(model: ToyDiT, x, t: int, schedule: DiffusionSchedule, mode=None, observer: Observer | None = None) -> np.ndarray:
    """Noise prediction for flattened samples ``x`` (B, image_size**2 * channels) at sampler index ``t``.

    ``mode`` is None for full precision or a :class:`QuantizedModel`. The
    observer, if given, sees the input of every registry layer.
    """
    cfg = model.config
    if not 0 <= t < schedule.steps:
        raise ValidationError(f"timestep index {t} outside [0, {schedule.steps})")
    if mode is not None and mode.model is not model:
        raise ConfigError("quantized mode was built for a different model")
    linear = model.linear if mode is None else mode.linear
    tau = int(schedule.timesteps[t])

    def lin(name, h):
        if observer is not None:
            observer(name, tau, h)
        return linear(name, h)

    x = np.asarray(x, dtype=np.float32)
    B = x.shape[0]
    p, g, C, H = cfg.patch_size, cfg.grid, cfg.channels, cfg.hidden_dim
    patches = x.reshape(B, C, g, p, g, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, p * p * C)
    h = lin("patch_embed", patches) + model.pos_embed

    temb = timestep_embedding(np.full(B, tau), cfg.timestep_embed_dim)[:, None, :]
    c = lin("t_embed.fc2", _silu(lin("t_embed.fc1", temb)))
    sc = _silu(c)
    heads, hd = cfg.heads, H // cfg.heads
    inv_sqrt = np.float32(1.0 / math.sqrt(hd))
    for i in range(cfg.blocks):
        mod = lin(f"blocks.{i}.adaLN", sc)
        shift1, scale1, gate1, shift2, scale2, gate2 = np.split(mod, 6, axis=-1)
        a = _modulate(_layer_norm(h), shift1, scale1)
        qkv = lin(f"blocks.{i}.qkv", a).reshape(B, -1, 3, heads, hd).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = _softmax((q @ k.transpose(0, 1, 3, 2)) * inv_sqrt) @ v
        att = att.transpose(0, 2, 1, 3).reshape(B, -1, H)
        h = h + gate1 * lin(f"blocks.{i}.proj", att)
        m = _modulate(_layer_norm(h), shift2, scale2)
        h = h + gate2 * lin(f"blocks.{i}.fc2", _gelu(lin(f"blocks.{i}.fc1", m)))
    shift, scale = np.split(lin("final.adaLN", sc), 2, axis=-1)
    out = lin("final.linear", _modulate(_layer_norm(h), shift, scale))
    out = out.reshape(B, g, g, C, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(B, -1)
    return out.astype(np.float32)


DEFAULT_CHUNK = 256


def initial_noise(n: int, dim: int, seed: int) -> np.ndarray:
    return Rng(seed).normal((n, dim))


def ddim_sample(
    model: ToyDiT,
    schedule: DiffusionSchedule,
    n: int,
    seed: int,
    mode=None,
    observer: Observer | None = None,
    chunk: int = DEFAULT_CHUNK,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from seeded Gaussian noise; returns (n, sample_dim) float64.

    Each step: ``x0 = (x - sqrt(1 - ab) eps) / sqrt(ab)``, then
    ``x = sqrt(ab_prev) x0 + sqrt(1 - ab_prev) eps``. The state is kept in
    float64 and rounded to float32 at the model input. Samples are processed
    in fixed chunks, step-major, so observers see each timestep once per chunk
    before the next timestep starts.
    """
    if n < 1:
        raise ValidationError("n must be at least 1")
    x = initial_noise(n, model.config.sample_dim, seed)
    ab, abp = schedule.alphas_cumprod, schedule.alphas_cumprod_prev
    for t in range(schedule.steps - 1, -1, -1):
        eps = np.empty_like(x)
        for lo in range(0, n, chunk):
            eps[lo : lo + chunk] = forward(model, x[lo : lo + chunk], t, schedule, mode, observer)
        x0 = (x - math.sqrt(1.0 - ab[t]) * eps) / math.sqrt(ab[t])
        x = math.sqrt(abp[t]) * x0 + math.sqrt(1.0 - abp[t]) * eps
    return x


# ---------------------------------------------------------------- calibration and recording


@dataclass
class Calibration:
    """Layer-input statistics from a full-precision sampling run."""

    hessians: dict[str, HessianAccumulator]
    channel_min: dict[str, np.ndarray]
    channel_max: dict[str, np.ndarray]
    samples: int
    seed: int


def calibrate(model: ToyDiT, schedule: DiffusionSchedule, n: int = 32, seed: int = 0) -> Calibration:
    """Hessians ``sum x^T x`` and per-channel ranges over all sampler steps."""
    hess = {name: HessianAccumulator.zeros(s.d_in) for name, s in model.shapes.items()}
    lo = {name: np.full(s.d_in, np.inf, dtype=np.float32) for name, s in model.shapes.items()}
    hi = {name: np.full(s.d_in, -np.inf, dtype=np.float32) for name, s in model.shapes.items()}

    def observe(name, tau, h):
        flat = h.reshape(-1, h.shape[-1])
        hess[name].accumulate(flat)
        np.minimum(lo[name], flat.min(axis=0), out=lo[name])
        np.maximum(hi[name], flat.max(axis=0), out=hi[name])

    ddim_sample(model, schedule, n, seed, observer=observe)
    return Calibration(hess, lo, hi, n, seed)


def record_activations(
    model: ToyDiT,
    schedule: DiffusionSchedule,
    n: int = 16,
    seed: int = 0,
    layers: Sequence[str] | None = None,
) -> list[Snapshot]:
    """Input distribution of each transformer-block layer at every sampler step (fp mode).

    Returns ``blocks * 5 * T`` snapshots ordered by layer (registry order),
    then by timestep ascending. ``n`` is processed in a single chunk.
    """
    if layers is None:
        layers = [name for name in model.registry if name.startswith("blocks.")]
    wanted = set(layers)
    snaps: dict[tuple[str, int], Snapshot] = {}

    def observe(name, tau, h):
        if name in wanted:
            snaps[(name, tau)] = summarize(name, tau, h)

    ddim_sample(model, schedule, n, seed, observer=observe, chunk=max(n, 1))
    order = {name: i for i, name in enumerate(layers)}
    return [snaps[k] for k in sorted(snaps, key=lambda k: (order[k[0]], k[1]))]


# ---------------------------------------------------------------- quantized execution


@dataclass(frozen=True)
class QuantSpec:
    """How to quantize each registry layer.

    ``weights``: "gptq" (calibration Hessian) or "rtn" (identity Hessian).
    ``activations``: "dynamic" (per sample, at call time) or "static"
    (per group, from calibration ranges). Excluded layers stay in full
    precision.
    """

    group_sizes: tuple[int, ...]
    bits_w: int = 4
    bits_a: int = 8
    weights: str = "gptq"
    activations: str = "dynamic"
    exclude: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "group_sizes", tuple(int(g) for g in self.group_sizes))
        object.__setattr__(self, "exclude", tuple(self.exclude))
        if self.weights not in ("gptq", "rtn"):
            raise ConfigError(f"unknown weight method {self.weights!r}")
        if self.activations not in ("dynamic", "static"):
            raise ConfigError(f"unknown activation mode {self.activations!r}")
        if any(g < 1 for g in self.group_sizes):
            raise ConfigError("group sizes must be positive")


@dataclass(frozen=True)
class QuantizedLinear:
    wq: QuantizedTensor
    bias: np.ndarray
    bits_a: int
    act_params: QuantParams | None = None  # static parameters, shape (G,)
    wcolsum: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.wcolsum is None:
            object.__setattr__(self, "wcolsum", weight_column_sums(self.wq))

    def __call__(self, h: np.ndarray) -> np.ndarray:
        shape = h.shape
        x = h.reshape(-1, shape[-2], shape[-1])
        layout = self.wq.layout
        if self.act_params is None:
            xq = dynamic_quantize_activation(x, layout.group_size, self.bits_a)
        else:
            xq = quantize_activation_with(x, layout, self.act_params)
        y = quantized_matmul(xq, self.wq, self.wcolsum) + self.bias
        return y.astype(np.float32).reshape(*shape[:-1], y.shape[-1])


class QuantizedModel:
    """A model plus quantized substitutes for some of its registry layers."""

    def __init__(self, model: ToyDiT, spec: QuantSpec, layers: dict[str, QuantizedLinear]):
        self.model = model
        self.spec = spec
        self.layers = layers

    def linear(self, name: str, h: np.ndarray) -> np.ndarray:
        q = self.layers.get(name)
        return self.model.linear(name, h) if q is None else q(h)


def _identity_hessian(d: int) -> np.ndarray:
    return np.eye(d)


def quantize_layer_weights(model: ToyDiT, name: str, g: int, bits: int, method: str, calib: Calibration | None) -> QuantizedTensor:
    w = model.weight(name)
    if method == "rtn":
        return gptq_quantize_layer(w, _identity_hessian(w.shape[0]), g, bits)
    if calib is None:
        raise ConfigError("GPTQ weights need a calibration run")
    return gptq_quantize_layer(w, calib.hessians[name], g, bits)


def static_activation_params(calib: Calibration, name: str, layout: GroupLayout, bits: int) -> QuantParams:
    starts = layout.bounds[:-1]
    lo = np.minimum.reduceat(calib.channel_min[name], starts)
    hi = np.maximum.reduceat(calib.channel_max[name], starts)
    return compute_params(lo, hi, bits)


def quantize_model(
    model: ToyDiT,
    spec: QuantSpec,
    calib: Calibration | None = None,
    cache: dict | None = None,
) -> QuantizedModel:
    """Quantize every non-excluded registry layer according to ``spec``.

    ``cache`` (optional) memoizes quantized weights by (layer, group, bits,
    method) so repeated calls with overlapping configurations reuse work.
    """
    if len(spec.group_sizes) != len(model.registry):
        raise ConfigError(f"group config has {len(spec.group_sizes)} entries, registry has {len(model.registry)}")
    unknown = set(spec.exclude) - set(model.registry)
    if unknown:
        raise ConfigError(f"unknown excluded layers: {sorted(unknown)}")
    if spec.activations == "static" and calib is None:
        raise ConfigError("static activations need a calibration run")
    layers = {}
    for name, g in zip(model.registry, spec.group_sizes):
        if name in spec.exclude:
            continue
        key = (name, min(g, model.shapes[name].d_in), spec.bits_w, spec.weights)
        if cache is not None and key in cache:
            wq, colsum = cache[key]
        else:
            wq = quantize_layer_weights(model, name, g, spec.bits_w, spec.weights, calib)
            colsum = weight_column_sums(wq)
            if cache is not None:
                cache[key] = (wq, colsum)
        act = None
        if spec.activations == "static":
            act = static_activation_params(calib, name, wq.layout, spec.bits_a)
        layers[name] = QuantizedLinear(wq, model.bias(name), spec.bits_a, act, colsum)
    return QuantizedModel(model, spec, layers)


def uniform_groups(model: ToyDiT, g: int | None = None) -> tuple[int, ...]:
    """Same group size for every layer; ``None`` means one group per layer (g = d_in)."""
    return tuple(model.shapes[n].d_in if g is None else int(g) for n in model.registry)
