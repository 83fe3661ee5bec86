"""
Synthetic hierarchical activations with a planted ground truth.

Each parent concept is a unit vector; each of its children is the parent plus
a vector inside a small subspace orthogonal to it. Samples are positive
combinations of a few (parent + child) vectors plus Gaussian noise, unit
normalized. Everything is a pure function of the DictionarySpec and its seed.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import optimize, stats

from components.linalg import COMPUTE_DTYPE, as_compute, orthonormal_rows, unit_normalize_rows
from utils.errors import CorruptionError, InvalidArgumentError, ShardIOError

logger = logging.getLogger(__name__)

# Eigenvalue floor for the inverse square root of the covariance.
WHITEN_EIG_FLOOR = 1e-8

Label = Tuple[int, int, float]


class DictionarySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    d: int = Field(default=64, ge=2)
    n_parents: int = Field(default=32, ge=1)
    n_children: int = Field(default=8, ge=1)
    s_true: int = Field(default=4, ge=1)
    parents_per_sample: float = Field(default=2.0, ge=1)
    noise_sigma: float = Field(default=0.05, ge=0)
    seed: int = 0
    orthogonalize: bool = True
    child_scale: float = Field(default=0.5, ge=0)
    coeff_min: float = Field(default=0.5, gt=0)
    coeff_max: float = Field(default=1.5, gt=0)
    n_samples: int = Field(default=200_000, ge=1)
    n_shards: int = Field(default=4, ge=1)
    n_pairs: int = Field(default=1000, ge=0)
    whiten: bool = False
    shuffle: bool = False

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.coeff_min > self.coeff_max:
            raise ValueError(f"coeff_min ({self.coeff_min}) > coeff_max ({self.coeff_max})")
        if self.n_parents > self.d:
            logger.warning(f"n_parents={self.n_parents} exceeds d={self.d}; parents cannot be orthogonal")
        return self


@dataclass
class SyntheticDictionary:
    parent_vecs: np.ndarray  # (n_parents, d), unit rows
    child_bases: np.ndarray  # (n_parents, s_true, d), orthonormal rows, orthogonal to the parent
    child_coords: np.ndarray  # (n_parents, n_children, s_true)

    @property
    def d(self) -> int:
        return self.parent_vecs.shape[1]

    @property
    def n_parents(self) -> int:
        return self.parent_vecs.shape[0]

    @property
    def n_children(self) -> int:
        return self.child_coords.shape[1]

    def child_vector(self, p: int, c: int) -> np.ndarray:
        """Full child vector: parent plus its in-context offset."""
        return self.parent_vecs[p] + self.child_coords[p, c] @ self.child_bases[p]

    def child_vectors(self) -> np.ndarray:
        """(n_parents, n_children, d) tensor of every full child vector."""
        offsets = np.einsum("pcs,psd->pcd", self.child_coords, self.child_bases)
        return self.parent_vecs[:, None, :] + offsets

    def save(self, path: Union[str, Path]) -> None:
        try:
            with open(path, "wb") as f:
                np.savez(f, parent_vecs=self.parent_vecs, child_bases=self.child_bases,
                         child_coords=self.child_coords)
        except OSError as e:
            raise ShardIOError(f"Failed to write dictionary to {path}: {e}") from e

    @classmethod
    def load(cls, path: Union[str, Path]) -> 'SyntheticDictionary':
        try:
            with np.load(path) as data:
                return cls(parent_vecs=data["parent_vecs"], child_bases=data["child_bases"],
                           child_coords=data["child_coords"])
        except OSError as e:
            raise ShardIOError(f"Failed to read dictionary from {path}: {e}") from e
        except KeyError as e:
            raise CorruptionError(f"Dictionary file {path} is missing {e}") from e


@dataclass
class LabeledBatch:
    X: np.ndarray  # (n, d), unit rows
    labels: List[List[Label]]

    def __len__(self) -> int:
        return self.X.shape[0]

    def parent_attribute(self, p: int) -> np.ndarray:
        """Binary per-row attribute: is parent p active?"""
        return np.array([any(lp == p for lp, _, _ in row) for row in self.labels], dtype=bool)


def _rngs(seed: int) -> Tuple[np.random.Generator, np.random.Generator]:
    # independent streams so the dictionary does not depend on n_samples
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def plant_dictionary(spec: DictionarySpec) -> SyntheticDictionary:
    if spec.s_true + 1 > spec.d:
        raise InvalidArgumentError(f"s_true + 1 ({spec.s_true + 1}) exceeds d ({spec.d})")
    rng, _ = _rngs(spec.seed)

    parents = unit_normalize_rows(rng.standard_normal((spec.n_parents, spec.d)))
    if spec.orthogonalize and spec.n_parents <= spec.d:
        parents = orthonormal_rows(parents)

    bases = np.empty((spec.n_parents, spec.s_true, spec.d), dtype=COMPUTE_DTYPE)
    coords = np.empty((spec.n_parents, spec.n_children, spec.s_true), dtype=COMPUTE_DTYPE)
    for p in range(spec.n_parents):
        raw = rng.standard_normal((spec.s_true, spec.d))
        # QR with the parent first keeps every basis row orthogonal to it
        bases[p] = orthonormal_rows(np.vstack([parents[p], raw]))[1:]
        c = rng.standard_normal((spec.n_children, spec.s_true))
        coords[p] = spec.child_scale * unit_normalize_rows(c)

    return SyntheticDictionary(parent_vecs=parents, child_bases=bases, child_coords=coords)


def truncated_poisson_pmf(mean: float, upper: int) -> np.ndarray:
    """
    Probabilities of 1..upper under a Poisson law truncated to [1, upper],
    with the rate solved so the truncated mean equals ``mean``.
    """
    support = np.arange(1, upper + 1)
    if upper == 1 or mean <= 1.0:
        return np.eye(1, upper).ravel()
    if mean >= upper:
        return np.eye(1, upper, upper - 1).ravel()

    def pmf(rate: float) -> np.ndarray:
        w = stats.poisson.pmf(support, rate)
        return w / w.sum()

    rate = optimize.brentq(lambda r: pmf(r) @ support - mean, 1e-9, 10.0 * upper + mean)
    return pmf(rate)


def sample_activations(dictionary: SyntheticDictionary, n: int, spec: DictionarySpec,
                       rng: Optional[np.random.Generator] = None) -> LabeledBatch:
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    if rng is None:
        _, rng = _rngs(spec.seed)
    n_p, n_c, d = dictionary.n_parents, dictionary.n_children, dictionary.d

    probs = truncated_poisson_pmf(spec.parents_per_sample, n_p)
    counts = rng.choice(np.arange(1, n_p + 1), size=n, p=probs)
    # parents without replacement: rank random keys per row
    order = np.argsort(rng.random((n, n_p)), axis=1)
    children = rng.integers(0, n_c, size=(n, n_p))
    coeffs = rng.uniform(spec.coeff_min, spec.coeff_max, size=(n, n_p))
    noise = rng.standard_normal((n, d)) * spec.noise_sigma

    full = dictionary.child_vectors()
    active = np.arange(n_p)[None, :] < counts[:, None]
    X = np.empty((n, d), dtype=COMPUTE_DTYPE)
    chunk = max(1, (1 << 22) // (n_p * d))
    for start in range(0, n, chunk):
        sl = slice(start, start + chunk)
        vecs = full[order[sl], children[sl]]  # (rows, n_p, d)
        w = coeffs[sl] * active[sl]
        X[sl] = np.einsum("rp,rpd->rd", w, vecs) + noise[sl]
    X = unit_normalize_rows(X)

    labels = []
    for i in range(n):
        row = [(int(order[i, j]), int(children[i, j]), float(coeffs[i, j]))
               for j in range(counts[i])]
        labels.append(sorted(row))
    return LabeledBatch(X=X, labels=labels)


def sample_paired_views(dictionary: SyntheticDictionary, n_pairs: int, spec: DictionarySpec,
                        rng: Optional[np.random.Generator] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Two noisy views of the same concept draw per pair. The clean part is
    shared; each view gets its own noise.
    """
    if n_pairs < 1:
        raise InvalidArgumentError(f"n_pairs must be >= 1, got {n_pairs}")
    if rng is None:
        rng = np.random.default_rng([spec.seed, 2])
    clean_spec = spec.model_copy(update={"noise_sigma": 0.0})
    clean = sample_activations(dictionary, n_pairs, clean_spec, rng=rng)
    views = []
    for _ in range(2):
        noisy = clean.X + rng.standard_normal(clean.X.shape) * spec.noise_sigma
        views.append(unit_normalize_rows(noisy))
    return views[0], views[1]


def whiten(X) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Symmetric inverse-square-root whitening.

    Returns:
        (X_white, W, mean) with X_white = (X - mean) @ W
    """
    X = as_compute(X)
    n, d = X.shape
    if n < d:
        raise InvalidArgumentError(f"whiten needs rows >= cols, got {n}x{d}")
    mean = X.mean(axis=0)
    cov = np.cov(X, rowvar=False).reshape(d, d)
    eigvals, eigvecs = np.linalg.eigh(cov)
    floored = np.maximum(eigvals, WHITEN_EIG_FLOOR)
    if np.any(eigvals < WHITEN_EIG_FLOOR):
        logger.warning(f"Covariance is near singular; flooring {int(np.sum(eigvals < WHITEN_EIG_FLOOR))} eigenvalue(s)")
    W = (eigvecs / np.sqrt(floored)) @ eigvecs.T
    return (X - mean) @ W, W, mean


def apply_whitening(X, W: np.ndarray, mean: np.ndarray) -> np.ndarray:
    return (as_compute(X) - mean) @ W


def write_labels(path: Union[str, Path], labels: List[List[Label]], offset: int = 0) -> None:
    """
    One line per row: ``row<TAB>p:c:coeff<TAB>p:c:coeff...``. Coefficients
    are written with repr precision so they read back exactly.
    """
    try:
        with open(path, "w") as f:
            for i, row in enumerate(labels):
                fields = [str(offset + i)] + [f"{p}:{c}:{coeff!r}" for p, c, coeff in row]
                f.write("\t".join(fields) + "\n")
    except OSError as e:
        raise ShardIOError(f"Failed to write labels to {path}: {e}") from e


def read_labels(path: Union[str, Path]) -> List[List[Label]]:
    try:
        with open(path) as f:
            lines = f.read().splitlines()
    except OSError as e:
        raise ShardIOError(f"Failed to read labels from {path}: {e}") from e
    labels = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        try:
            row = []
            for item in fields[1:]:
                p, c, coeff = item.split(":")
                row.append((int(p), int(c), float(coeff)))
        except ValueError as e:
            raise CorruptionError(f"Bad label record in {path} at line {lineno}: {line!r}") from e
        labels.append(row)
    return labels
