"""
Parameter containers and forward passes for the hierarchical SAE and the
flat TopK baseline, plus the analytic multiply-accumulate accountant and the
binary model format.
"""

import dataclasses
import logging
import math
import struct
from dataclasses import dataclass
from fractions import Fraction
from typing import BinaryIO, Dict, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from components.linalg import (
    COMPUTE_DTYPE,
    DEFAULT_LEAKY_SLOPE,
    PARAM_DTYPE,
    MacCounter,
    SparseCode,
    as_compute,
    matvec,
    orthonormal_rows,
    thresholded_leaky_relu,
    top_k,
    top_k_indices,
)
from utils.errors import (
    CheckpointVersionError,
    CorruptionError,
    InvalidArgumentError,
    ShapeMismatchError,
    ShardFormatError,
)

logger = logging.getLogger(__name__)

MODEL_MAGIC = b"HSAE"
MODEL_VERSION = 1
# magic, version, d, m_top, k, a, s, alpha, slope, beta, lambda1, lambda2, use_bias, has_experts
_MODEL_HEADER = struct.Struct("<4sI5I5dBB")

# Scale of the initial expert decoders relative to their encoders
EXPERT_DECODER_INIT_SCALE = 0.1


class HsaeConfig(BaseModel):
    """Architecture and loss weights. Defaults follow the published setup."""
    model_config = ConfigDict(extra="forbid")

    d: int = Field(2304, ge=1)
    m_top: int = Field(16384, ge=1)
    k: int = Field(32, ge=1)
    a: int = Field(16, ge=1)
    s: int = Field(4, ge=1)
    alpha: float = Field(None, ge=0)
    slope: float = Field(DEFAULT_LEAKY_SLOPE, ge=0)
    beta: float = Field(0.1, ge=0)
    lambda1: float = Field(0.1, ge=0)
    lambda2: float = Field(0.001, ge=0)
    use_bias: bool = False
    ortho_form: str = Field("ed", pattern="^(ed|de)$")
    l1_form: str = Field("outside_topk", pattern="^(outside_topk|literal)$")
    aux_coeff: float = Field(1.0 / 30.0, ge=0)
    k_aux: int = Field(None, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _fill_derived_defaults(cls, data):
        if isinstance(data, dict):
            data = dict(data)
            try:
                d = int(data.get("d", cls.model_fields["d"].default))
                k = int(data.get("k", cls.model_fields["k"].default))
            except (TypeError, ValueError):
                # leave it to field validation to report the bad value
                return data
            if data.get("alpha") is None and d > 0:
                data["alpha"] = 1.0 / math.sqrt(d)
            if data.get("k_aux") is None:
                data["k_aux"] = 2 * k
        return data

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.k > self.m_top:
            raise ValueError(f"k ({self.k}) must not exceed m_top ({self.m_top})")
        if self.s > self.d:
            raise ValueError(f"s ({self.s}) must not exceed d ({self.d})")
        return self


@dataclass
class TopLevelParams:
    E: np.ndarray  # (m_top, d)
    D: np.ndarray  # (d, m_top)
    b: Optional[np.ndarray] = None  # (d,)


@dataclass
class ExpertParams:
    pi_down: np.ndarray  # (s, d)
    pi_up: np.ndarray  # (d, s)
    E_j: np.ndarray  # (a, s)
    D_j: np.ndarray  # (s, a)


@dataclass
class ExpertBank:
    """
    Per-expert parameters stacked by kind. Row j of every array belongs to
    expert j; forward and backward gather only the rows of active experts.
    """
    pi_down: np.ndarray  # (m_top, s, d)
    pi_up: np.ndarray  # (m_top, d, s)
    enc: np.ndarray  # (m_top, a, s)
    dec: np.ndarray  # (m_top, s, a)

    def __len__(self) -> int:
        return self.pi_down.shape[0]

    def __getitem__(self, j: int) -> ExpertParams:
        return ExpertParams(pi_down=self.pi_down[j], pi_up=self.pi_up[j],
                            E_j=self.enc[j], D_j=self.dec[j])

    @classmethod
    def from_experts(cls, experts) -> 'ExpertBank':
        experts = list(experts)
        return cls(
            pi_down=np.stack([ex.pi_down for ex in experts]),
            pi_up=np.stack([ex.pi_up for ex in experts]),
            enc=np.stack([ex.E_j for ex in experts]),
            dec=np.stack([ex.D_j for ex in experts]),
        )


class ParameterTree:
    """Ordered name -> array view shared by models, gradients and Adam moments."""

    top: TopLevelParams
    experts: Optional[ExpertBank]

    def arrays(self) -> Dict[str, np.ndarray]:
        out = {"top.E": self.top.E, "top.D": self.top.D}
        if self.top.b is not None:
            out["top.b"] = self.top.b
        if self.experts is not None:
            out["experts.pi_down"] = self.experts.pi_down
            out["experts.pi_up"] = self.experts.pi_up
            out["experts.enc"] = self.experts.enc
            out["experts.dec"] = self.experts.dec
        return out

    def replace_arrays(self, arrays: Dict[str, np.ndarray]):
        top = TopLevelParams(E=arrays["top.E"], D=arrays["top.D"], b=arrays.get("top.b"))
        experts = None
        if self.experts is not None:
            experts = ExpertBank(pi_down=arrays["experts.pi_down"],
                                 pi_up=arrays["experts.pi_up"],
                                 enc=arrays["experts.enc"],
                                 dec=arrays["experts.dec"])
        return dataclasses.replace(self, top=top, experts=experts)

    def map_arrays(self, fn):
        return self.replace_arrays({name: fn(arr) for name, arr in self.arrays().items()})


@dataclass
class HsaeModel(ParameterTree):
    config: HsaeConfig
    top: TopLevelParams
    experts: Optional[ExpertBank] = None

    @property
    def is_baseline(self) -> bool:
        return self.experts is None

    def astype(self, dtype) -> 'HsaeModel':
        return self.map_arrays(lambda a: np.array(a, dtype=dtype, order="C"))

    def copy(self) -> 'HsaeModel':
        return self.map_arrays(lambda a: np.array(a, order="C"))

    def without_experts(self) -> 'HsaeModel':
        return dataclasses.replace(self, experts=None)

    def validate(self) -> None:
        """Raise ShapeMismatchError naming the first array that disagrees with the config."""
        for name, shape in expected_shapes(self.config, self.top.b is not None,
                                           self.experts is not None).items():
            actual = self.arrays().get(name)
            if actual is None or actual.shape != shape:
                raise ShapeMismatchError(name, shape, None if actual is None else actual.shape)


def expected_shapes(cfg: HsaeConfig, with_bias: bool, with_experts: bool) -> Dict[str, Tuple[int, ...]]:
    shapes = {"top.E": (cfg.m_top, cfg.d), "top.D": (cfg.d, cfg.m_top)}
    if with_bias:
        shapes["top.b"] = (cfg.d,)
    if with_experts:
        shapes["experts.pi_down"] = (cfg.m_top, cfg.s, cfg.d)
        shapes["experts.pi_up"] = (cfg.m_top, cfg.d, cfg.s)
        shapes["experts.enc"] = (cfg.m_top, cfg.a, cfg.s)
        shapes["experts.dec"] = (cfg.m_top, cfg.s, cfg.a)
    return shapes


def init_model(cfg: HsaeConfig, rng: np.random.Generator, with_experts: bool = True,
               expert_init: str = "random", dtype=PARAM_DTYPE) -> HsaeModel:
    """
    Initialize a model with unit-norm decoder columns and a tied encoder.

    Top-level parameters are drawn before expert parameters, so a baseline
    and an H-SAE built from the same seed share their top level.

    Args:
        cfg: Architecture config
        rng: Source of randomness
        with_experts: False builds the flat TopK baseline
        expert_init: "random" or "zero"
        dtype: Storage dtype of the parameters

    Returns:
        HsaeModel
    """
    D = rng.standard_normal((cfg.d, cfg.m_top))
    D /= np.linalg.norm(D, axis=0, keepdims=True)
    top = TopLevelParams(E=D.T.copy(), D=D,
                         b=np.zeros(cfg.d) if cfg.use_bias else None)

    experts = None
    if with_experts:
        if expert_init == "zero":
            experts = ExpertBank(
                pi_down=np.zeros((cfg.m_top, cfg.s, cfg.d)),
                pi_up=np.zeros((cfg.m_top, cfg.d, cfg.s)),
                enc=np.zeros((cfg.m_top, cfg.a, cfg.s)),
                dec=np.zeros((cfg.m_top, cfg.s, cfg.a)),
            )
        elif expert_init == "random":
            raw = rng.standard_normal((cfg.m_top, cfg.s, cfg.d))
            pi_down = np.stack([orthonormal_rows(block) for block in raw])
            enc = rng.standard_normal((cfg.m_top, cfg.a, cfg.s))
            enc /= np.linalg.norm(enc, axis=2, keepdims=True)
            experts = ExpertBank(
                pi_down=pi_down,
                pi_up=np.transpose(pi_down, (0, 2, 1)).copy(),
                enc=enc,
                dec=EXPERT_DECODER_INIT_SCALE * np.transpose(enc, (0, 2, 1)),
            )
        else:
            raise InvalidArgumentError(f"Unknown expert_init '{expert_init}'")

    model = HsaeModel(config=cfg, top=top, experts=experts)
    return model.astype(dtype)


@dataclass
class ExpertOutput:
    low_pre_codes: np.ndarray  # (a,)
    low_selected: Tuple[int, float]
    x_hat_low: np.ndarray  # (d,)


@dataclass
class ForwardTrace:
    """
    Everything one forward pass produces, for a batch of B rows.

    Top-level fields have a leading batch axis. Expert fields are indexed
    (row, slot) where slot t refers to expert ``indices[row, t]``; they are
    None for the baseline.
    """
    x: np.ndarray  # (B, d)
    x_centered: np.ndarray  # (B, d)
    logits: np.ndarray  # (B, m_top) before activation
    pre_codes: np.ndarray  # (B, m_top) after activation, before TopK
    indices: np.ndarray  # (B, k) ascending
    values: np.ndarray  # (B, k)
    x_hat_high: np.ndarray  # (B, d)
    x_hat: np.ndarray  # (B, d)
    x_sub: Optional[np.ndarray] = None  # (B, k, s)
    low_logits: Optional[np.ndarray] = None  # (B, k, a)
    low_pre_codes: Optional[np.ndarray] = None  # (B, k, a)
    low_indices: Optional[np.ndarray] = None  # (B, k)
    low_values: Optional[np.ndarray] = None  # (B, k)
    x_sub_hat: Optional[np.ndarray] = None  # (B, k, s)
    x_hat_low: Optional[np.ndarray] = None  # (B, k, d)

    @property
    def batch_size(self) -> int:
        return self.x.shape[0]

    @property
    def has_experts(self) -> bool:
        return self.low_indices is not None

    def codes(self, row: int = 0) -> SparseCode:
        return SparseCode(indices=self.indices[row], values=self.values[row])

    def selection_mask(self) -> np.ndarray:
        """(B, m_top) boolean mask of the TopK selection."""
        mask = np.zeros(self.pre_codes.shape, dtype=bool)
        np.put_along_axis(mask, self.indices, True, axis=1)
        return mask

    def sparse_codes(self) -> np.ndarray:
        """(B, m_top) dense array holding only the selected codes."""
        dense = np.zeros(self.pre_codes.shape, dtype=COMPUTE_DTYPE)
        np.put_along_axis(dense, self.indices, self.values, axis=1)
        return dense

    def expert_outputs(self, row: int = 0) -> Dict[int, ExpertOutput]:
        if not self.has_experts:
            return {}
        return {
            int(j): ExpertOutput(
                low_pre_codes=self.low_pre_codes[row, t],
                low_selected=(int(self.low_indices[row, t]), float(self.low_values[row, t])),
                x_hat_low=self.x_hat_low[row, t],
            )
            for t, j in enumerate(self.indices[row])
        }


def _as_batch(x, d: int) -> np.ndarray:
    X = as_compute(x)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != d:
        raise InvalidArgumentError(f"Expected input of dimension {d}, got shape {np.shape(x)}")
    return X


def _encode_top(top: TopLevelParams, cfg: HsaeConfig, X: np.ndarray, counter: MacCounter = None):
    B = X.shape[0]
    xc = X - as_compute(top.b) if cfg.use_bias else X
    E = as_compute(top.E)
    logits = xc @ E.T
    pre = thresholded_leaky_relu(logits, cfg.alpha, cfg.slope)
    idx = top_k_indices(pre, cfg.k)
    vals = np.take_along_axis(pre, idx, axis=1)
    # only the selected decoder columns are read
    cols = as_compute(top.D).T[idx]  # (B, k, d)
    x_hat_high = np.einsum("bk,bkd->bd", vals, cols)
    if cfg.use_bias:
        x_hat_high = x_hat_high + as_compute(top.b)
    if counter is not None:
        counter.add("top_encode", B * cfg.m_top * cfg.d)
        counter.add("top_decode", B * cfg.k * cfg.d)
    return xc, logits, pre, idx, vals, x_hat_high


def forward_baseline(top: TopLevelParams, cfg: HsaeConfig, x, counter: MacCounter = None) -> ForwardTrace:
    """Flat TopK SAE forward pass; no expert fields are populated."""
    X = _as_batch(x, cfg.d)
    if top.E.shape != (cfg.m_top, cfg.d) or top.D.shape != (cfg.d, cfg.m_top):
        raise InvalidArgumentError(
            f"Top-level shapes {top.E.shape}/{top.D.shape} do not match config")
    xc, logits, pre, idx, vals, x_hat_high = _encode_top(top, cfg, X, counter)
    return ForwardTrace(x=X, x_centered=xc, logits=logits, pre_codes=pre, indices=idx,
                        values=vals, x_hat_high=x_hat_high, x_hat=x_hat_high)


def forward_expert(ex: ExpertParams, cfg: HsaeConfig, x, counter: MacCounter = None) -> ExpertOutput:
    """One expert's low-level SAE applied to a single input vector."""
    x = as_compute(x)
    if x.shape != (cfg.d,):
        raise InvalidArgumentError(f"Expected a vector of dimension {cfg.d}, got {x.shape}")
    x_sub = matvec(ex.pi_down, x, counter, "down_proj")
    low_pre = thresholded_leaky_relu(matvec(ex.E_j, x_sub, counter, "low_encode"),
                                     cfg.alpha, cfg.slope)
    selected = top_k(low_pre, 1)
    one_sparse = selected.to_dense(cfg.a)
    x_sub_hat = matvec(ex.D_j, one_sparse, counter, "low_decode")
    x_hat_low = matvec(ex.pi_up, x_sub_hat, counter, "up_proj")
    return ExpertOutput(low_pre_codes=low_pre,
                        low_selected=(int(selected.indices[0]), float(selected.values[0])),
                        x_hat_low=x_hat_low)


def forward_hsae(model: HsaeModel, x, counter: MacCounter = None) -> ForwardTrace:
    """
    H-SAE forward pass for one vector or a batch of rows.

    Only the k active experts of each row are gathered and evaluated; rows
    of inactive experts are never read. The baseline model (no expert bank)
    falls back to forward_baseline.
    """
    cfg = model.config
    if model.experts is None:
        return forward_baseline(model.top, cfg, x, counter)

    X = _as_batch(x, cfg.d)
    B = X.shape[0]
    xc, logits, pre, idx, vals, x_hat_high = _encode_top(model.top, cfg, X, counter)

    bank = model.experts
    P = as_compute(bank.pi_down[idx])  # (B, k, s, d)
    U = as_compute(bank.pi_up[idx])  # (B, k, d, s)
    Ej = as_compute(bank.enc[idx])  # (B, k, a, s)
    Dj = as_compute(bank.dec[idx])  # (B, k, s, a)

    x_sub = np.einsum("bksd,bd->bks", P, X)
    low_logits = np.einsum("bkas,bks->bka", Ej, x_sub)
    low_pre = thresholded_leaky_relu(low_logits, cfg.alpha, cfg.slope)
    # argmax keeps the first maximum, i.e. the lowest index on ties
    low_idx = np.argmax(low_pre, axis=2)
    low_vals = np.take_along_axis(low_pre, low_idx[..., None], axis=2)[..., 0]
    one_sparse = np.zeros_like(low_pre)
    np.put_along_axis(one_sparse, low_idx[..., None], low_vals[..., None], axis=2)
    x_sub_hat = np.einsum("bksa,bka->bks", Dj, one_sparse)
    x_hat_low = np.einsum("bkds,bks->bkd", U, x_sub_hat)
    x_hat = x_hat_high + x_hat_low.sum(axis=1)

    if counter is not None:
        counter.add("down_proj", B * cfg.k * cfg.s * cfg.d)
        counter.add("low_encode", B * cfg.k * cfg.a * cfg.s)
        counter.add("low_decode", B * cfg.k * cfg.s * cfg.a)
        counter.add("up_proj", B * cfg.k * cfg.d * cfg.s)

    return ForwardTrace(x=X, x_centered=xc, logits=logits, pre_codes=pre, indices=idx,
                        values=vals, x_hat_high=x_hat_high, x_hat=x_hat,
                        x_sub=x_sub, low_logits=low_logits, low_pre_codes=low_pre,
                        low_indices=low_idx, low_values=low_vals,
                        x_sub_hat=x_sub_hat, x_hat_low=x_hat_low)


def forward_batched(model: HsaeModel, X, chunk_rows: int = 4096):
    """Yield (row_offset, trace) over row chunks of a large matrix."""
    X = np.asarray(X)
    for start in range(0, X.shape[0], chunk_rows):
        yield start, forward_hsae(model, X[start:start + chunk_rows])


@dataclass
class FlopBreakdown:
    """Multiply-accumulate counts per forward-pass term for one input vector."""
    top_encode: int
    down_proj: int
    low_encode: int
    low_decode: int
    up_proj: int
    top_decode: int
    flat_equivalent: int = 0

    @property
    def total(self) -> int:
        return (self.top_encode + self.down_proj + self.low_encode
                + self.low_decode + self.up_proj + self.top_decode)

    @property
    def top_encode_fraction(self) -> Fraction:
        return Fraction(self.top_encode, self.total) if self.total else Fraction(0)

    @property
    def top_encode_share(self) -> float:
        return float(self.top_encode_fraction)

    def as_dict(self) -> Dict[str, float]:
        return {
            "top_encode": self.top_encode,
            "down_proj": self.down_proj,
            "low_encode": self.low_encode,
            "low_decode": self.low_decode,
            "up_proj": self.up_proj,
            "top_decode": self.top_decode,
            "total": self.total,
            "top_encode_share": self.top_encode_share,
            "flat_equivalent": self.flat_equivalent,
        }


def flop_terms(d: int, m_top: int, k: int, s: int, a: int, with_experts: bool = True) -> FlopBreakdown:
    """
    Analytic MAC counts. ``flat_equivalent`` is the cost of a flat TopK SAE
    with the same number of effective atoms (m_top * a).
    """
    ek = k if with_experts else 0
    return FlopBreakdown(
        top_encode=m_top * d,
        down_proj=ek * s * d,
        low_encode=ek * a * s,
        low_decode=ek * s * a,
        up_proj=ek * s * d,
        top_decode=k * d,
        flat_equivalent=m_top * a * d + k * d,
    )


def flop_breakdown(cfg: HsaeConfig, with_experts: bool = True) -> FlopBreakdown:
    return flop_terms(cfg.d, cfg.m_top, cfg.k, cfg.s, cfg.a, with_experts=with_experts)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CorruptionError(f"Truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def write_model(f: BinaryIO, model: HsaeModel) -> None:
    """Write the header and row-major float32 parameter blocks."""
    cfg = model.config
    f.write(_MODEL_HEADER.pack(
        MODEL_MAGIC, MODEL_VERSION, cfg.d, cfg.m_top, cfg.k, cfg.a, cfg.s,
        cfg.alpha, cfg.slope, cfg.beta, cfg.lambda1, cfg.lambda2,
        int(cfg.use_bias), int(model.experts is not None)))
    f.write(np.ascontiguousarray(model.top.E, dtype="<f4").tobytes())
    f.write(np.ascontiguousarray(model.top.D, dtype="<f4").tobytes())
    if cfg.use_bias:
        f.write(np.ascontiguousarray(model.top.b, dtype="<f4").tobytes())
    if model.experts is not None:
        bank = model.experts
        m = cfg.m_top
        # one record per expert: pi_down, pi_up, E_j, D_j
        records = np.concatenate([
            np.asarray(bank.pi_down, dtype="<f4").reshape(m, -1),
            np.asarray(bank.pi_up, dtype="<f4").reshape(m, -1),
            np.asarray(bank.enc, dtype="<f4").reshape(m, -1),
            np.asarray(bank.dec, dtype="<f4").reshape(m, -1),
        ], axis=1)
        f.write(np.ascontiguousarray(records).tobytes())


def _read_block(f: BinaryIO, shape, what: str) -> np.ndarray:
    count = int(np.prod(shape))
    raw = _read_exact(f, 4 * count, what)
    return np.frombuffer(raw, dtype="<f4").astype(PARAM_DTYPE).reshape(shape)


def read_model(f: BinaryIO, expected: HsaeConfig = None) -> HsaeModel:
    """
    Read a model written by write_model.

    The header stores dimensions, activation and loss weights only. Without
    ``expected``, ortho_form, l1_form, aux_coeff and k_aux come back as
    their defaults; checkpoints restore them from the config JSON they carry.

    Args:
        f: Binary file positioned at the model header
        expected: Optional config the stored dimensions must agree with

    Raises:
        ShardFormatError: bad magic
        CheckpointVersionError: unsupported version
        CorruptionError: truncated payload
        ShapeMismatchError: stored dimensions disagree with ``expected``
    """
    header = _read_exact(f, _MODEL_HEADER.size, "model header")
    (magic, version, d, m_top, k, a, s, alpha, slope, beta, lambda1, lambda2,
     use_bias, has_experts) = _MODEL_HEADER.unpack(header)
    if magic != MODEL_MAGIC:
        raise ShardFormatError(f"Bad model magic {magic!r}")
    if version != MODEL_VERSION:
        raise CheckpointVersionError(
            f"Unsupported model format version {version} (expected {MODEL_VERSION})")

    stored = dict(d=d, m_top=m_top, k=k, a=a, s=s)
    if expected is not None:
        for name, value in stored.items():
            if getattr(expected, name) != value:
                raise ShapeMismatchError(name, getattr(expected, name), value)
        cfg = expected.model_copy(update=dict(alpha=alpha, slope=slope, beta=beta,
                                              lambda1=lambda1, lambda2=lambda2,
                                              use_bias=bool(use_bias)))
    else:
        cfg = HsaeConfig(**stored, alpha=alpha, slope=slope, beta=beta,
                         lambda1=lambda1, lambda2=lambda2, use_bias=bool(use_bias))

    top = TopLevelParams(
        E=_read_block(f, (m_top, d), "top-level encoder"),
        D=_read_block(f, (d, m_top), "top-level decoder"),
        b=_read_block(f, (d,), "bias") if use_bias else None,
    )
    experts = None
    if has_experts:
        sizes = [s * d, d * s, a * s, s * a]
        records = _read_block(f, (m_top, sum(sizes)), "expert parameters")
        bounds = np.cumsum([0] + sizes)
        experts = ExpertBank(
            pi_down=records[:, bounds[0]:bounds[1]].reshape(m_top, s, d).copy(),
            pi_up=records[:, bounds[1]:bounds[2]].reshape(m_top, d, s).copy(),
            enc=records[:, bounds[2]:bounds[3]].reshape(m_top, a, s).copy(),
            dec=records[:, bounds[3]:bounds[4]].reshape(m_top, s, a).copy(),
        )
    return HsaeModel(config=cfg, top=top, experts=experts)
