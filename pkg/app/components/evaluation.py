"""
Quantitative evaluation of trained models: explained variance, planted
dictionary recovery, paired-view divergence, the absorption analog and
per-feature activation reports.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.optimize import linear_sum_assignment

from components.datagen import LabeledBatch, SyntheticDictionary
from components.hsae_model import HsaeModel, forward_batched
from components.linalg import COMPUTE_DTYPE, as_compute, unit_normalize_rows
from utils.errors import InvalidArgumentError, UndefinedMetricError

logger = logging.getLogger(__name__)

# A probe needs at least this many positive and negative rows.
MIN_PROBE_CLASS_ROWS = 10


class EvalSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    top_n: int = Field(default=8, ge=1)
    top_m: int = Field(default=20, ge=1)
    matcher: Literal["greedy", "optimal"] = "greedy"
    chunk_rows: int = Field(default=4096, ge=1)
    # 0 evaluates every row
    max_rows: int = Field(default=0, ge=0)
    absorption_parents: int = Field(default=0, ge=0)


def one_minus_ev_from(X, X_hat) -> float:
    """Σ‖x − x̂‖² / Σ‖x − x̄‖² with x̄ the dataset mean."""
    X, X_hat = as_compute(X), as_compute(X_hat)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidArgumentError(f"Need at least 2 rows, got shape {X.shape}")
    if X_hat.shape != X.shape:
        raise InvalidArgumentError(f"Reconstruction shape {X_hat.shape} != {X.shape}")
    err = np.sum((X - X_hat) ** 2)
    var = np.sum((X - X.mean(axis=0)) ** 2)
    if var == 0:
        raise UndefinedMetricError("Data has zero variance")
    return float(err / var)


def one_minus_ev(model: HsaeModel, X, chunk_rows: int = 4096) -> float:
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[0] < 2:
        raise InvalidArgumentError(f"Need at least 2 rows, got shape {X.shape}")
    mean = as_compute(X).mean(axis=0)
    err = 0.0
    var = 0.0
    for start, trace in forward_batched(model, X, chunk_rows):
        err += float(np.sum((trace.x - trace.x_hat) ** 2))
        var += float(np.sum((trace.x - mean) ** 2))
    if var == 0:
        raise UndefinedMetricError("Data has zero variance")
    return err / var


@dataclass
class RecoveryResult:
    mean_max_cosine: float
    matching: List[Tuple[int, int, float]]  # (parent, latent, cosine)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean_max_cosine": self.mean_max_cosine,
            "matching": [[p, j, c] for p, j, c in self.matching],
        }


def _greedy_matching(C: np.ndarray) -> List[Tuple[int, int]]:
    n_rows, n_cols = C.shape
    # descending cosine; ties resolved by (row, col) order
    order = np.argsort(-C, axis=None, kind="stable")
    used_rows = np.zeros(n_rows, dtype=bool)
    used_cols = np.zeros(n_cols, dtype=bool)
    pairs = []
    for flat in order:
        i, j = divmod(int(flat), n_cols)
        if used_rows[i] or used_cols[j]:
            continue
        used_rows[i] = used_cols[j] = True
        pairs.append((i, j))
        if len(pairs) == n_rows:
            break
    return sorted(pairs)


def _optimal_matching(C: np.ndarray) -> List[Tuple[int, int]]:
    rows, cols = linear_sum_assignment(C, maximize=True)
    return sorted(zip(rows.tolist(), cols.tolist()))


MATCHERS = {"greedy": _greedy_matching, "optimal": _optimal_matching}


def recovery_score(model: HsaeModel, dictionary: SyntheticDictionary,
                   matcher: str = "greedy") -> RecoveryResult:
    """
    Match planted parents one-to-one to top-level decoder columns by cosine.
    Signs matter: a negated atom scores −1.
    """
    D = as_compute(model.top.D)
    if D.shape[0] != dictionary.d:
        raise InvalidArgumentError(f"Model d={D.shape[0]} != dictionary d={dictionary.d}")
    if D.shape[1] < dictionary.n_parents:
        raise InvalidArgumentError(
            f"m_top={D.shape[1]} is smaller than n_parents={dictionary.n_parents}")
    if matcher not in MATCHERS:
        raise InvalidArgumentError(f"Unknown matcher '{matcher}'")

    C = unit_normalize_rows(dictionary.parent_vecs) @ unit_normalize_rows(D.T).T
    pairs = MATCHERS[matcher](C)
    matching = [(p, j, float(C[p, j])) for p, j in pairs]
    return RecoveryResult(mean_max_cosine=float(np.mean([c for _, _, c in matching])),
                          matching=matching)


def _selected_top_sets(model: HsaeModel, X, top_n: int, chunk_rows: int = 4096) -> np.ndarray:
    """
    (n, m_top) mask of the top_n selected latents by code value. Only the
    TopK selection is ranked, so with k < top_n each set holds k latents.
    """
    masks = []
    for _, trace in forward_batched(model, X, chunk_rows):
        keep = min(top_n, trace.indices.shape[1])
        order = np.argsort(-trace.values, axis=1, kind="stable")[:, :keep]
        mask = np.zeros(trace.pre_codes.shape, dtype=bool)
        np.put_along_axis(mask, np.take_along_axis(trace.indices, order, axis=1), True, axis=1)
        masks.append(mask)
    return np.concatenate(masks)


def paired_divergence(model: HsaeModel, pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
                      top_n: int = 8, chunk_rows: int = 4096) -> float:
    """Mean top_n symmetric set difference over (x_a, x_b) pairs."""
    if len(pairs) == 0:
        raise InvalidArgumentError("paired_divergence needs at least one pair")
    if top_n > model.config.m_top:
        raise InvalidArgumentError(f"top_n={top_n} exceeds m_top={model.config.m_top}")
    Xa = np.stack([np.asarray(a) for a, _ in pairs])
    Xb = np.stack([np.asarray(b) for _, b in pairs])
    sets_a = _selected_top_sets(model, Xa, top_n, chunk_rows)
    sets_b = _selected_top_sets(model, Xb, top_n, chunk_rows)
    return float(np.mean(np.sum(sets_a != sets_b, axis=1)))


def absorption_from_codes(Z, attr) -> float:
    """
    Fit a least-squares probe (with intercept) from codes to a binary
    attribute and return 1 − (largest per-latent mass / total mass), where
    a latent's mass is |weight · mean activation over positive rows|.
    """
    Z = as_compute(Z)
    attr = np.asarray(attr, dtype=bool)
    if Z.ndim != 2 or attr.shape != (Z.shape[0],):
        raise InvalidArgumentError(f"Codes {Z.shape} and labels {attr.shape} do not line up")
    n_pos = int(attr.sum())
    n_neg = attr.size - n_pos
    if n_pos < MIN_PROBE_CLASS_ROWS or n_neg < MIN_PROBE_CLASS_ROWS:
        raise UndefinedMetricError(
            f"Probe needs >= {MIN_PROBE_CLASS_ROWS} positives and negatives, got {n_pos}/{n_neg}")
    design = np.hstack([Z, np.ones((Z.shape[0], 1))])
    w, *_ = np.linalg.lstsq(design, attr.astype(COMPUTE_DTYPE), rcond=None)
    masses = np.abs(w[:-1] * Z[attr].mean(axis=0))
    total = masses.sum()
    if not total > 0:
        raise UndefinedMetricError("Probe puts zero mass on every latent")
    return float(1.0 - masses.max() / total)


def absorption_score(model: HsaeModel, X, attr, chunk_rows: int = 4096) -> float:
    Z = np.concatenate([trace.sparse_codes() for _, trace in forward_batched(model, X, chunk_rows)])
    return absorption_from_codes(Z, attr)


def mean_parent_absorption(model: HsaeModel, batch: LabeledBatch, n_parents: int,
                           limit: int = 0, chunk_rows: int = 4096) -> Optional[float]:
    """Average absorption over planted parent attributes; undefined parents are skipped."""
    Z = np.concatenate([trace.sparse_codes() for _, trace in forward_batched(model, batch.X, chunk_rows)])
    parents = range(n_parents if limit == 0 else min(limit, n_parents))
    scores = []
    for p in parents:
        try:
            scores.append(absorption_from_codes(Z, batch.parent_attribute(p)))
        except UndefinedMetricError as e:
            logger.warning(f"Absorption undefined for parent {p}: {e}")
    return float(np.mean(scores)) if scores else None


@dataclass
class FeatureHit:
    row: int
    value: float
    meta: Any = None

    def to_dict(self) -> Dict[str, Any]:
        return {"row": self.row, "value": self.value, "meta": self.meta}


@dataclass
class FeatureReport:
    latents: Dict[int, List[FeatureHit]]
    sublatents: Dict[int, Dict[int, List[FeatureHit]]] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "latents": {str(j): [h.to_dict() for h in hits] for j, hits in self.latents.items()},
            "sublatents": {
                str(j): {str(i): [h.to_dict() for h in hits] for i, hits in subs.items()}
                for j, subs in self.sublatents.items()
            },
        }


def _top_hits(keys: np.ndarray, rows: np.ndarray, values: np.ndarray, n_keys: int,
              top_m: int, meta) -> List[List[FeatureHit]]:
    # group by key, then descending value, then ascending row
    order = np.lexsort((rows, -values, keys))
    keys, rows, values = keys[order], rows[order], values[order]
    starts = np.searchsorted(keys, np.arange(n_keys), side="left")
    ends = np.searchsorted(keys, np.arange(n_keys), side="right")
    out = []
    for lo, hi in zip(starts, ends):
        hi = min(hi, lo + top_m)
        out.append([FeatureHit(row=int(r), value=float(v), meta=None if meta is None else meta[int(r)])
                    for r, v in zip(rows[lo:hi], values[lo:hi])])
    return out


def feature_report(model: HsaeModel, X, meta: Sequence = None, top_m: int = 20,
                   chunk_rows: int = 4096) -> FeatureReport:
    """
    Top-activating rows per top-level latent and per expert sublatent. A
    latent counts as active on a row only when TopK selects it; a sublatent
    only when its expert is selected and it wins the expert's top-1.
    """
    X = np.asarray(X)
    if meta is not None and len(meta) != X.shape[0]:
        raise InvalidArgumentError(f"meta has {len(meta)} entries for {X.shape[0]} rows")
    cfg = model.config

    keys, rows, values = [], [], []
    sub_keys, sub_values = [], []
    for start, trace in forward_batched(model, X, chunk_rows):
        B = trace.batch_size
        keys.append(trace.indices.ravel())
        rows.append(np.repeat(np.arange(start, start + B), cfg.k))
        values.append(trace.values.ravel())
        if trace.has_experts:
            sub_keys.append((trace.indices * cfg.a + trace.low_indices).ravel())
            sub_values.append(trace.low_values.ravel())

    if not keys:
        return FeatureReport(latents={j: [] for j in range(cfg.m_top)})
    keys, rows, values = np.concatenate(keys), np.concatenate(rows), np.concatenate(values)
    per_latent = _top_hits(keys, rows, values, cfg.m_top, top_m, meta)
    report = FeatureReport(latents={j: hits for j, hits in enumerate(per_latent)})

    if sub_keys:
        per_sub = _top_hits(np.concatenate(sub_keys), rows, np.concatenate(sub_values),
                            cfg.m_top * cfg.a, top_m, meta)
        report.sublatents = {
            j: {i: per_sub[j * cfg.a + i] for i in range(cfg.a)} for j in range(cfg.m_top)
        }
    return report


# Serialized key order of an EvalReport.
EVAL_REPORT_KEYS = ("one_minus_ev", "recovery", "paired_divergence", "absorption", "dead_fraction")


@dataclass
class EvalReport:
    one_minus_ev: float
    recovery: Optional[RecoveryResult] = None
    paired_divergence: Optional[float] = None
    absorption: Optional[float] = None
    dead_fraction: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        values = {
            "one_minus_ev": self.one_minus_ev,
            "recovery": self.recovery.to_dict() if self.recovery is not None else None,
            "paired_divergence": self.paired_divergence,
            "absorption": self.absorption,
            "dead_fraction": self.dead_fraction,
        }
        return {key: values[key] for key in EVAL_REPORT_KEYS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EvalReport':
        unknown = set(data) - set(EVAL_REPORT_KEYS)
        if unknown:
            raise InvalidArgumentError(f"Unknown EvalReport keys: {sorted(unknown)}")
        rec = data.get("recovery")
        recovery = None
        if rec is not None:
            recovery = RecoveryResult(mean_max_cosine=rec["mean_max_cosine"],
                                      matching=[tuple(m) for m in rec["matching"]])
        return cls(one_minus_ev=data["one_minus_ev"], recovery=recovery,
                   paired_divergence=data.get("paired_divergence"),
                   absorption=data.get("absorption"), dead_fraction=data.get("dead_fraction"))

    def summary(self) -> Dict[str, Optional[float]]:
        """Flat scalar view used by comparison tables."""
        return {
            "1-EV": self.one_minus_ev,
            "recovery": self.recovery.mean_max_cosine if self.recovery is not None else None,
            "paired divergence": self.paired_divergence,
            "absorption": self.absorption,
            "dead fraction": self.dead_fraction,
        }


def evaluate(model: HsaeModel, X, spec: EvalSpec = None, dictionary: SyntheticDictionary = None,
             batch: LabeledBatch = None, pairs: Tuple[np.ndarray, np.ndarray] = None,
             dead_fraction: float = None) -> EvalReport:
    """
    Build an EvalReport. Metrics whose inputs are missing (no planted
    dictionary, no labels, no pairs) are left as None.
    """
    spec = spec or EvalSpec()
    X = np.asarray(X)
    if spec.max_rows:
        X = X[:spec.max_rows]
    report = EvalReport(one_minus_ev=one_minus_ev(model, X, spec.chunk_rows), dead_fraction=dead_fraction)

    if dictionary is not None:
        report.recovery = recovery_score(model, dictionary, spec.matcher)
    if batch is not None and dictionary is not None:
        if spec.max_rows:
            batch = LabeledBatch(X=batch.X[:spec.max_rows], labels=batch.labels[:spec.max_rows])
        report.absorption = mean_parent_absorption(model, batch, dictionary.n_parents,
                                                   spec.absorption_parents, spec.chunk_rows)
    if pairs is not None:
        Xa, Xb = pairs
        report.paired_divergence = paired_divergence(model, list(zip(Xa, Xb)), spec.top_n,
                                                     spec.chunk_rows)
    logger.info(f"Evaluated {X.shape[0]} rows: 1-EV {report.one_minus_ev:.4f}")
    return report
