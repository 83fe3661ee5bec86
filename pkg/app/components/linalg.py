"""
Dense kernels shared by the model, objective and evaluation code.

All functions are pure. Reductions are done in float64 so results do not
depend on the storage dtype of the inputs.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from utils.errors import DegenerateInputError, InvalidArgumentError

logger = logging.getLogger(__name__)

# Storage dtype for trained parameters and shards; arithmetic is float64.
PARAM_DTYPE = np.float32
COMPUTE_DTYPE = np.float64

DEFAULT_LEAKY_SLOPE = 0.01


@dataclass
class SparseCode:
    """Indices (strictly increasing) and values of the kept latents."""
    indices: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return len(self.indices)

    def to_dense(self, n: int) -> np.ndarray:
        dense = np.zeros(n, dtype=COMPUTE_DTYPE)
        dense[self.indices] = self.values
        return dense

    def as_dict(self) -> Dict[int, float]:
        return {int(i): float(v) for i, v in zip(self.indices, self.values)}


@dataclass
class MacCounter:
    """Tallies multiply-accumulate operations per named term."""
    terms: Dict[str, int] = field(default_factory=dict)

    def add(self, term: str, count: int) -> None:
        self.terms[term] = self.terms.get(term, 0) + int(count)

    @property
    def total(self) -> int:
        return sum(self.terms.values())


def as_compute(a) -> np.ndarray:
    return np.asarray(a, dtype=COMPUTE_DTYPE)


def top_k_indices(values: np.ndarray, k: int) -> np.ndarray:
    """
    Row-wise indices of the k largest entries of a 1-D or 2-D array.

    Ranks by signed value; ties go to the lowest index. Indices come back
    sorted ascending within each row.
    """
    values = np.asarray(values)
    n = values.shape[-1]
    if k < 1 or k > n:
        raise InvalidArgumentError(f"k must be in [1, {n}], got {k}")
    # stable sort on the negation keeps lower indices first among equals
    order = np.argsort(-values, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def top_k(v, k: int) -> SparseCode:
    v = as_compute(v)
    if v.ndim != 1:
        raise InvalidArgumentError(f"top_k expects a vector, got shape {v.shape}")
    indices = top_k_indices(v, k)
    return SparseCode(indices=indices, values=v[indices])


def thresholded_leaky_relu(v, alpha: float, slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    """Identity above alpha, slope*(u - alpha) at or below it."""
    if alpha < 0 or slope < 0:
        raise InvalidArgumentError(
            f"alpha and slope must be nonnegative, got alpha={alpha}, slope={slope}")
    v = as_compute(v)
    return np.where(v > alpha, v, slope * (v - alpha))


def thresholded_leaky_relu_grad(v, alpha: float, slope: float = DEFAULT_LEAKY_SLOPE) -> np.ndarray:
    v = as_compute(v)
    return np.where(v > alpha, 1.0, slope)


def offdiag_frobenius(M) -> float:
    """Frobenius norm of M with its diagonal zeroed."""
    M = as_compute(M)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidArgumentError(f"Expected a square matrix, got shape {M.shape}")
    if M.shape[0] < 2:
        raise InvalidArgumentError("offdiag_frobenius needs n >= 2")
    off = M.copy()
    np.fill_diagonal(off, 0.0)
    return float(np.sqrt(np.sum(off * off)))


def unit_normalize(v) -> np.ndarray:
    v = as_compute(v)
    norm = np.sqrt(np.sum(v * v))
    if not norm > 0:
        raise DegenerateInputError("Cannot normalize a zero vector")
    return v / norm


def unit_normalize_rows(X) -> np.ndarray:
    X = as_compute(X)
    norms = np.sqrt(np.sum(X * X, axis=-1, keepdims=True))
    if np.any(norms == 0):
        bad = np.flatnonzero(norms[..., 0] == 0)
        raise DegenerateInputError(f"Cannot normalize zero rows: {bad[:10].tolist()}")
    return X / norms


def matvec(A: np.ndarray, x: np.ndarray, counter: MacCounter = None, term: str = None) -> np.ndarray:
    """A @ x in float64, optionally charging rows*cols MACs to ``term``."""
    A = as_compute(A)
    if counter is not None:
        counter.add(term, A.shape[0] * A.shape[1])
    return A @ as_compute(x)


def column_norms(M: np.ndarray) -> np.ndarray:
    M = as_compute(M)
    return np.sqrt(np.sum(M * M, axis=-2))


def orthonormal_rows(A: np.ndarray) -> np.ndarray:
    """Orthonormalize the rows of A (Gram-Schmidt via QR, sign-fixed)."""
    q, r = np.linalg.qr(as_compute(A).T)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return (q * signs).T

