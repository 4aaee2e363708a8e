"""Dense linear algebra and deterministic random numbers.

Tensors are plain ``numpy.ndarray``. User-facing values are float32; reference
paths, oracles and accumulations run in float64.
"""

from __future__ import annotations

import numpy as np

from ._backend import kernels
from .errors import (
    ConvergenceError,
    DimensionError,
    DomainError,
    NotPositiveDefiniteError,
    ValidationError,
)

EIG_MAX_DIM = 256
EIG_MAX_SWEEPS = 100
EIG_TOL = 1e-12

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def as_tensor(x, dtype=np.float32) -> np.ndarray:
    """Convert external input to an array, rejecting NaN/Inf."""
    arr = np.asarray(x, dtype=dtype)
    if not np.all(np.isfinite(arr)):
        raise ValidationError("tensor contains non-finite values")
    return arr


def matmul(a, b) -> np.ndarray:
    """Reference matrix product with float64 accumulation.

    Sums run over the inner index in increasing order, one rank-1 update at a
    time, so every entry is bit-identical to the naive triple loop.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k : k + 1] * b[k : k + 1, :]
    return out


def _check_square_symmetric(a, tol=1e-8) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"expected a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix contains non-finite values")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if np.max(np.abs(a - a.T), initial=0.0) > tol * scale:
        raise ValidationError("matrix is not symmetric")
    return a


def _off_norm(a: np.ndarray) -> float:
    return float(np.linalg.norm(a - np.diag(np.diag(a))))


def sym_eig(a, max_sweeps: int = EIG_MAX_SWEEPS) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in ascending order and the matching orthonormal
    eigenvectors as columns. Sweeps stop once the off-diagonal Frobenius norm
    drops to 1e-12 of the matrix norm.
    """
    a = _check_square_symmetric(a)
    n = a.shape[0]
    if n > EIG_MAX_DIM:
        raise DimensionError(f"sym_eig supports n <= {EIG_MAX_DIM}, got {n}")
    a = np.ascontiguousarray(0.5 * (a + a.T))
    v = np.eye(n)
    norm = np.linalg.norm(a)
    threshold = EIG_TOL * norm
    for _ in range(max_sweeps):
        if _off_norm(a) <= threshold:
            break
        kernels.jacobi_sweep(a, v)
    else:
        if _off_norm(a) > threshold:
            raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def psd_sqrt(a) -> np.ndarray:
    """Symmetric square root of a positive semi-definite matrix."""
    w, v = sym_eig(a)
    norm = max(float(np.max(np.abs(w), initial=0.0)), 1e-300)
    if np.any(w < -1e-6 * norm):
        raise DomainError(f"matrix has a negative eigenvalue {w.min():.3e}")
    root = np.sqrt(np.clip(w, 0.0, None))
    s = (v * root) @ v.T
    return 0.5 * (s + s.T)


def cholesky(a) -> np.ndarray:
    """Lower-triangular Cholesky factor of an SPD matrix."""
    a = _check_square_symmetric(a)
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(str(exc)) from exc


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def mix64(*values: int) -> int:
    """Hash integers into one 64-bit seed (used to derive child streams)."""
    h = np.zeros(1, dtype=np.uint64)
    for value in values:
        h = _splitmix(h ^ np.array([value & _MASK64], dtype=np.uint64))
        h = h + np.uint64(_GAMMA)
    return int(_splitmix(h)[0])


class Rng:
    """Counter-based SplitMix64 generator.

    Draw ``i`` is ``splitmix64(seed + (i + 1) * 0x9E3779B97F4A7C15)``, so a
    stream depends only on the seed and the number of values consumed.
    Uniforms use the top 53 bits; normals use Box-Muller on consecutive
    uniform pairs.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def raw(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        z = np.uint64(self.seed) + idx * np.uint64(_GAMMA)
        return _splitmix(z)

    def uniform(self, size=None) -> np.ndarray | float:
        n = 1 if size is None else int(np.prod(size))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return float(u[0]) if size is None else u.reshape(size)

    def normal(self, size) -> np.ndarray:
        n = int(np.prod(size))
        m = (n + 1) // 2
        u = self.uniform(2 * m)
        u1 = 1.0 - u[0::2]
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        return z[:n].reshape(size)

    def integers(self, high: int, size=None) -> np.ndarray | int:
        """Uniform integers in [0, high)."""
        u = self.uniform(size if size is not None else 1)
        k = np.minimum(np.floor(np.asarray(u) * high).astype(np.int64), high - 1)
        return int(k.ravel()[0]) if size is None else k

    def spawn(self, *key: int) -> "Rng":
        """Independent child stream derived from this seed and ``key``."""
        return Rng(mix64(self.seed, *key))
