"""Binary model bundle.

Layout (all integers little-endian)::

    b"QDTB"  u32 version  u32 tensor_count
    per tensor:
        u16 name_length, UTF-8 name
        u8 rank, rank x u32 dims
        prod(dims) x float32 payload

Full-precision models store a ``config`` tensor followed by
``<layer>.weight`` / ``<layer>.bias`` in registry order. Quantized models
store, per quantized layer, ``codes`` (d_in, d_out), ``scale`` and ``zero``
(G, d_out), ``bias``, ``meta`` = [bits_w, bits_a, group_size, static] and,
for static activations, ``act_scale`` / ``act_zero`` (G,). Codes and zero
points are integers stored exactly as float32, which bounds zero points to
|Z| <= 2**24.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import BundleError
from .model import QuantizedLinear, QuantizedModel, QuantSpec, ToyDiT, ToyDiTConfig
from .quantizer import GroupLayout, QuantizedTensor, QuantParams

MAGIC = b"QDTB"
VERSION = 1
_EXACT_INT = 1 << 24

_CONFIG_FIELDS = ("image_size", "patch_size", "channels", "hidden_dim", "heads", "blocks", "timestep_embed_dim")


def write_bundle(path, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    items = [(name, np.asarray(arr)) for name, arr in tensors]
    names = [name for name, _ in items]
    if len(set(names)) != len(names):
        raise BundleError("duplicate tensor names", 0)
    out = bytearray(MAGIC)
    out += struct.pack("<II", VERSION, len(items))
    for name, arr in items:
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise BundleError(f"tensor name too long: {name[:40]}...", len(out))
        if arr.ndim > 0xFF or any(d > 0xFFFFFFFF for d in arr.shape):
            raise BundleError(f"tensor {name} has unsupported shape {arr.shape}", len(out))
        data = arr.astype("<f4")
        if not np.all(np.isfinite(data)):
            raise BundleError(f"tensor {name} contains non-finite values", len(out))
        if not np.array_equal(data.astype(arr.dtype), arr) and arr.dtype.kind in "iu":
            raise BundleError(f"tensor {name} holds integers not exact in float32", len(out))
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += data.tobytes()
    Path(path).write_bytes(bytes(out))


def read_bundle(path) -> list[tuple[str, np.ndarray]]:
    """Parse a bundle; malformed input raises BundleError with the byte offset."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise BundleError(f"cannot read {path}: {exc.strerror}", 0) from exc
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise BundleError(f"truncated while reading {what}", pos)
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise BundleError("bad magic (expected QDTB)", 0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise BundleError(f"unsupported format version {version}", 4)
    tensors = []
    seen = set()
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BundleError("tensor name is not valid UTF-8", start + 2) from exc
        if name in seen:
            raise BundleError(f"duplicate tensor name {name!r}", start)
        seen.add(name)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        at = pos
        arr = np.frombuffer(take(4 * size, f"payload of {name!r}"), dtype="<f4").astype(np.float32).reshape(dims)
        if not np.all(np.isfinite(arr)):
            raise BundleError(f"tensor {name!r} contains non-finite values", at)
        tensors.append((name, arr))
    if pos != len(buf):
        raise BundleError("trailing bytes after last tensor", pos)
    return tensors


# ---------------------------------------------------------------- models


def _seed_words(seed: int) -> list[int]:
    return [(seed >> (16 * i)) & 0xFFFF for i in range(4)]


def _config_tensor(cfg: ToyDiTConfig) -> np.ndarray:
    return np.array([getattr(cfg, f) for f in _CONFIG_FIELDS] + _seed_words(cfg.seed), dtype=np.float32)


def _config_from(arr: np.ndarray) -> ToyDiTConfig:
    if arr.shape != (len(_CONFIG_FIELDS) + 4,):
        raise BundleError("config tensor has the wrong length", 0)
    vals = [int(v) for v in arr]
    seed = sum(w << (16 * i) for i, w in enumerate(vals[len(_CONFIG_FIELDS) :]))
    return ToyDiTConfig(**dict(zip(_CONFIG_FIELDS, vals[: len(_CONFIG_FIELDS)])), seed=seed)


def save_model(path, model: ToyDiT) -> None:
    tensors = [("config", _config_tensor(model.config))]
    tensors += list(model.params.items())
    write_bundle(path, tensors)


def load_model(path) -> ToyDiT:
    tensors = read_bundle(path)
    if not tensors or tensors[0][0] != "config":
        raise BundleError("first tensor must be 'config'", 12)
    cfg = _config_from(tensors[0][1])
    try:
        return ToyDiT(cfg, dict(tensors[1:]))
    except Exception as exc:
        raise BundleError(f"bundle does not describe a valid model: {exc}", 12) from exc


def _exact_int(name: str, arr: np.ndarray) -> np.ndarray:
    if np.any(np.abs(arr) > _EXACT_INT):
        raise BundleError(f"{name}: zero point exceeds 2**24 and cannot be stored exactly", 0)
    return arr.astype(np.float32)


def save_quantized(path, qm: QuantizedModel) -> None:
    """Store codes and parameters; excluded layers keep their fp weights."""
    model, spec = qm.model, qm.spec
    tensors = [("config", _config_tensor(model.config))]
    tensors.append(
        ("spec", np.array([spec.bits_w, spec.bits_a, spec.weights == "gptq", spec.activations == "static"], dtype=np.float32))
    )
    tensors.append(("group_sizes", np.array(spec.group_sizes, dtype=np.float32)))
    for name in model.registry:
        q = qm.layers.get(name)
        if q is None:
            tensors += [(f"{name}.weight", model.weight(name)), (f"{name}.bias", model.bias(name))]
            continue
        static = q.act_params is not None
        tensors += [
            (f"{name}.codes", q.wq.codes.astype(np.float32)),
            (f"{name}.scale", q.wq.params.scale),
            (f"{name}.zero", _exact_int(name, q.wq.params.zero_point)),
            (f"{name}.bias", q.bias),
            (f"{name}.meta", np.array([q.wq.params.bits, q.bits_a, q.wq.layout.group_size, static], dtype=np.float32)),
        ]
        if static:
            tensors += [
                (f"{name}.act_scale", q.act_params.scale),
                (f"{name}.act_zero", _exact_int(name, q.act_params.zero_point)),
            ]
    write_bundle(path, tensors)


def load_quantized(path) -> QuantizedModel:
    """Rebuild a quantized model; quantized layers' fp weights are their dequantized values."""
    t = dict(read_bundle(path))
    try:
        cfg = _config_from(t["config"])
        bits_w, bits_a, gptq, static_mode = (int(v) for v in t["spec"])
        group_sizes = tuple(int(v) for v in t["group_sizes"])
        shapes = cfg.layer_shapes()
        params, layers, exclude = {}, {}, []
        for s in shapes:
            name = s.name
            if f"{name}.codes" not in t:
                params[f"{name}.weight"] = t[f"{name}.weight"]
                params[f"{name}.bias"] = t[f"{name}.bias"]
                exclude.append(name)
                continue
            wbits, abits, g, static = (int(v) for v in t[f"{name}.meta"])
            layout = GroupLayout(s.d_in, g)
            wparams = QuantParams(t[f"{name}.scale"], t[f"{name}.zero"].astype(np.int64), wbits)
            wq = QuantizedTensor(t[f"{name}.codes"].astype(np.uint8), layout, wparams, "weight")
            act = None
            if static:
                act = QuantParams(t[f"{name}.act_scale"], t[f"{name}.act_zero"].astype(np.int64), abits)
            params[f"{name}.weight"] = wq.dequantize().astype(np.float32)
            params[f"{name}.bias"] = t[f"{name}.bias"]
            layers[name] = (wq, act, abits)
        model = ToyDiT(cfg, params)
    except KeyError as exc:
        raise BundleError(f"missing tensor {exc.args[0]!r}", 0) from exc
    except BundleError:
        raise
    except Exception as exc:
        raise BundleError(f"bundle does not describe a valid quantized model: {exc}", 0) from exc
    spec = QuantSpec(
        group_sizes,
        bits_w,
        bits_a,
        "gptq" if gptq else "rtn",
        "static" if static_mode else "dynamic",
        tuple(exclude),
    )
    qlayers = {name: QuantizedLinear(wq, model.bias(name), abits, act) for name, (wq, act, abits) in layers.items()}
    return QuantizedModel(model, spec, qlayers)
