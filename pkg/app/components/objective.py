"""
Training objective: reconstruction, top-level reconstruction, bi-orthogonality
and sparsity terms, the baseline's auxiliary dead-latent loss, and their
hand-derived gradients.

TopK selections are held fixed during backward (straight-through), so
gradients flow only through the selected codes for the reconstruction terms.
Batch losses are means over rows; the orthogonality term is a function of the
parameters alone and is counted once per batch.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import numpy as np

from components.hsae_model import (
    ExpertBank,
    ForwardTrace,
    HsaeConfig,
    HsaeModel,
    ParameterTree,
    TopLevelParams,
    forward_hsae,
)
from components.linalg import (
    COMPUTE_DTYPE,
    as_compute,
    offdiag_frobenius,
    thresholded_leaky_relu_grad,
    top_k_indices,
)
from utils.errors import InvalidArgumentError, NumericFailureError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    """
    Effective term weights for one step. A weight of None switches the term
    off entirely: it is neither computed nor differentiated and is reported
    as 0.
    """
    beta: Optional[float]
    lambda1: Optional[float]
    lambda2: Optional[float]
    aux_coeff: Optional[float] = None

    @classmethod
    def from_config(cls, cfg: HsaeConfig, scale: float = 1.0, top_recon: bool = True,
                    ortho: bool = True, l1: bool = True, aux: bool = False) -> 'LossWeights':
        return cls(
            beta=cfg.beta * scale if top_recon else None,
            lambda1=cfg.lambda1 * scale if ortho else None,
            lambda2=cfg.lambda2 * scale if l1 else None,
            aux_coeff=cfg.aux_coeff if aux else None,
        )


@dataclass
class LossBreakdown:
    recon: float
    top_recon: float
    ortho: float
    sparse: float
    aux_dead: float
    total: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class Gradients(ParameterTree):
    top: TopLevelParams
    experts: Optional[ExpertBank] = None

    @classmethod
    def zeros_like(cls, model: ParameterTree) -> 'Gradients':
        zeros = Gradients(top=model.top, experts=model.experts)
        return zeros.map_arrays(lambda a: np.zeros(a.shape, dtype=COMPUTE_DTYPE))

    def global_norm(self) -> float:
        total = 0.0
        for arr in self.arrays().values():
            total += float(np.sum(np.square(arr, dtype=COMPUTE_DTYPE)))
        return float(np.sqrt(total))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(arr)) for arr in self.arrays().values())


def _check_trace(trace: ForwardTrace, X: np.ndarray, model: HsaeModel) -> None:
    cfg = model.config
    if X.shape != trace.x.shape:
        raise InvalidArgumentError(f"Input shape {X.shape} does not match trace {trace.x.shape}")
    if trace.pre_codes.shape[1] != cfg.m_top:
        raise InvalidArgumentError(
            f"Trace has {trace.pre_codes.shape[1]} latents, model has {cfg.m_top}")
    if trace.has_experts != (model.experts is not None):
        raise InvalidArgumentError("Trace and model disagree on whether experts are present")


def _as_rows(x) -> np.ndarray:
    X = as_compute(x)
    return X[None, :] if X.ndim == 1 else X


def _dead_mask(dead, m_top: int) -> np.ndarray:
    if dead is None:
        return np.zeros(m_top, dtype=bool)
    dead = np.asarray(dead)
    if dead.dtype == bool:
        if dead.shape != (m_top,):
            raise InvalidArgumentError(f"Dead mask must have length {m_top}")
        return dead
    mask = np.zeros(m_top, dtype=bool)
    if dead.size:
        if dead.min() < 0 or dead.max() >= m_top:
            raise InvalidArgumentError("Dead latent index out of range")
        mask[dead.astype(int)] = True
    return mask


def ortho_penalty(top: TopLevelParams, cfg: HsaeConfig) -> float:
    """Off-diagonal Frobenius norm of E·D (or D·E), normalized by n² − n."""
    E, D = as_compute(top.E), as_compute(top.D)
    M = E @ D if cfg.ortho_form == "ed" else D @ E
    n = M.shape[0]
    if n < 2:
        return 0.0
    return offdiag_frobenius(M) / (n * n - n)


def _sparse_rows(trace: ForwardTrace, cfg: HsaeConfig) -> np.ndarray:
    mask = trace.selection_mask()
    keep = mask if cfg.l1_form == "literal" else ~mask
    per_row = np.sum(np.abs(trace.pre_codes) * keep, axis=1)
    if trace.has_experts:
        low_abs = np.abs(trace.low_pre_codes)
        if cfg.l1_form == "literal":
            per_row = per_row + low_abs.sum(axis=(1, 2))
        else:
            low_mask = _low_selection_mask(trace)
            per_row = per_row + np.sum(low_abs * ~low_mask, axis=(1, 2))
    return per_row


def _low_selection_mask(trace: ForwardTrace) -> np.ndarray:
    mask = np.zeros(trace.low_pre_codes.shape, dtype=bool)
    np.put_along_axis(mask, trace.low_indices[..., None], True, axis=2)
    return mask


def _aux_selection(trace: ForwardTrace, dead_mask: np.ndarray, k_aux: int):
    """(B, m_top) codes of the top-k_aux dead latents per row, or None."""
    kk = min(int(k_aux), int(dead_mask.sum()))
    if kk == 0:
        return None
    candidates = np.where(dead_mask[None, :], trace.pre_codes, -np.inf)
    idx = top_k_indices(candidates, kk)
    codes = np.zeros(trace.pre_codes.shape, dtype=COMPUTE_DTYPE)
    np.put_along_axis(codes, idx, np.take_along_axis(trace.pre_codes, idx, axis=1), axis=1)
    return codes


def _aux_terms(top: TopLevelParams, X: np.ndarray, trace: ForwardTrace,
               dead_mask: np.ndarray, k_aux: int):
    codes = _aux_selection(trace, dead_mask, k_aux)
    if codes is None:
        return None
    residual = X - trace.x_hat
    has_residual = np.sum(residual * residual, axis=1) > 0
    aux_recon = codes @ as_compute(top.D).T
    err = (residual - aux_recon) * has_residual[:, None]
    return codes, err


def aux_dead_loss(top: TopLevelParams, x, trace: ForwardTrace, dead, k_aux: int) -> float:
    """
    Squared error between the residual x − x̂ and its reconstruction from the
    top-k_aux dead latents (ranked by code value), averaged over rows. Rows
    with zero residual contribute nothing.
    """
    X = _as_rows(x)
    m_top = trace.pre_codes.shape[1]
    terms = _aux_terms(top, X, trace, _dead_mask(dead, m_top), k_aux)
    if terms is None:
        return 0.0
    _, err = terms
    return float(np.mean(np.sum(err * err, axis=1)))


def compute_losses(trace: ForwardTrace, x, model: HsaeModel, weights: LossWeights = None,
                   dead=None) -> LossBreakdown:
    cfg = model.config
    X = _as_rows(x)
    _check_trace(trace, X, model)
    if weights is None:
        weights = LossWeights.from_config(cfg)

    r = X - trace.x_hat
    recon = float(np.mean(np.sum(r * r, axis=1)))
    total = recon

    top_recon = 0.0
    if weights.beta is not None:
        rh = X - trace.x_hat_high
        top_recon = float(np.mean(np.sum(rh * rh, axis=1)))
        total += weights.beta * top_recon

    ortho = 0.0
    if weights.lambda1 is not None:
        ortho = ortho_penalty(model.top, cfg)
        total += weights.lambda1 * ortho

    sparse = 0.0
    if weights.lambda2 is not None:
        sparse = float(np.mean(_sparse_rows(trace, cfg)))
        total += weights.lambda2 * sparse

    aux = 0.0
    if weights.aux_coeff is not None and dead is not None:
        aux = aux_dead_loss(model.top, X, trace, dead, cfg.k_aux)
        total += weights.aux_coeff * aux

    return LossBreakdown(recon=recon, top_recon=top_recon, ortho=ortho, sparse=sparse,
                         aux_dead=aux, total=total)


def _ortho_grads(top: TopLevelParams, cfg: HsaeConfig, weight: float):
    E, D = as_compute(top.E), as_compute(top.D)
    M = E @ D if cfg.ortho_form == "ed" else D @ E
    n = M.shape[0]
    if n < 2:
        return 0.0, 0.0
    off = M.copy()
    np.fill_diagonal(off, 0.0)
    norm = np.sqrt(np.sum(off * off))
    if norm == 0:
        return 0.0, 0.0
    G = weight * off / (norm * (n * n - n))
    if cfg.ortho_form == "ed":
        return G @ D.T, E.T @ G
    return D.T @ G, G @ E.T


def backward(model: HsaeModel, x, trace: ForwardTrace, weights: LossWeights = None,
             dead=None) -> Gradients:
    """
    Exact gradients of the batch-mean total loss with respect to every
    parameter. Inactive experts receive exactly zero gradient.

    Raises:
        NumericFailureError: if any gradient entry is nonfinite
    """
    cfg = model.config
    X = _as_rows(x)
    _check_trace(trace, X, model)
    if weights is None:
        weights = LossWeights.from_config(cfg)

    B = X.shape[0]
    scale = 1.0 / B
    E, D = as_compute(model.top.E), as_compute(model.top.D)
    mask = trace.selection_mask()

    g = -2.0 * scale * (X - trace.x_hat)  # d total / d x_hat

    aux = None
    if weights.aux_coeff is not None and dead is not None:
        aux = _aux_terms(model.top, X, trace, _dead_mask(dead, cfg.m_top), cfg.k_aux)
    if aux is not None:
        codes, err = aux
        # the residual target depends on x_hat as well as on the dead codes
        d_aux = -2.0 * scale * weights.aux_coeff * err
        g = g + d_aux

    g_high = g
    if weights.beta is not None:
        g_high = g + weights.beta * (-2.0 * scale) * (X - trace.x_hat_high)

    dD = g_high.T @ trace.sparse_codes()
    dp = (g_high @ D) * mask

    if weights.lambda2 is not None:
        keep = mask if cfg.l1_form == "literal" else ~mask
        dp = dp + weights.lambda2 * scale * np.sign(trace.pre_codes) * keep

    if aux is not None:
        dD = dD + d_aux.T @ codes
        dp = dp + (d_aux @ D) * (codes != 0)

    du = dp * thresholded_leaky_relu_grad(trace.logits, cfg.alpha, cfg.slope)
    dE = du.T @ trace.x_centered
    db = None
    if cfg.use_bias:
        db = g_high.sum(axis=0) - (du @ E).sum(axis=0)

    if weights.lambda1 is not None:
        oE, oD = _ortho_grads(model.top, cfg, weights.lambda1)
        dE = dE + oE
        dD = dD + oD

    grads = Gradients(top=TopLevelParams(E=dE, D=dD, b=db))
    if model.experts is not None:
        grads.experts = _expert_grads(model, trace, g, weights, scale)

    if not grads.is_finite():
        raise NumericFailureError("Nonfinite gradient encountered in backward pass")
    return grads


def _expert_grads(model: HsaeModel, trace: ForwardTrace, g: np.ndarray,
                  weights: LossWeights, scale: float) -> ExpertBank:
    cfg = model.config
    bank = model.experts
    idx = trace.indices
    U = as_compute(bank.pi_up[idx])
    Ej = as_compute(bank.enc[idx])
    Dj = as_compute(bank.dec[idx])

    low_mask = _low_selection_mask(trace)
    one_sparse = np.where(low_mask, trace.low_pre_codes, 0.0)

    dy = np.einsum("bkds,bd->bks", U, g)
    dU = np.einsum("bd,bks->bkds", g, trace.x_sub_hat)
    dDj = np.einsum("bks,bka->bksa", dy, one_sparse)
    dq = np.einsum("bksa,bks->bka", Dj, dy) * low_mask
    if weights.lambda2 is not None:
        keep = np.ones_like(low_mask) if cfg.l1_form == "literal" else ~low_mask
        dq = dq + weights.lambda2 * scale * np.sign(trace.low_pre_codes) * keep
    dlow = dq * thresholded_leaky_relu_grad(trace.low_logits, cfg.alpha, cfg.slope)
    dEj = np.einsum("bka,bks->bkas", dlow, trace.x_sub)
    dx_sub = np.einsum("bkas,bka->bks", Ej, dlow)
    dP = np.einsum("bks,bd->bksd", dx_sub, trace.x)

    out = ExpertBank(
        pi_down=np.zeros(bank.pi_down.shape, dtype=COMPUTE_DTYPE),
        pi_up=np.zeros(bank.pi_up.shape, dtype=COMPUTE_DTYPE),
        enc=np.zeros(bank.enc.shape, dtype=COMPUTE_DTYPE),
        dec=np.zeros(bank.dec.shape, dtype=COMPUTE_DTYPE),
    )
    # rows are accumulated in (row, slot) order; repeated experts sum up
    np.add.at(out.pi_down, idx, dP)
    np.add.at(out.pi_up, idx, dU)
    np.add.at(out.enc, idx, dEj)
    np.add.at(out.dec, idx, dDj)
    return out


@dataclass
class GradCheckReport:
    max_rel_error: float
    skipped: bool = False
    margin: float = float("inf")
    reason: Optional[str] = None
    per_parameter: Dict[str, float] = field(default_factory=dict)


def selection_margin(model: HsaeModel, trace: ForwardTrace, dead=None) -> float:
    """
    Smallest distance of any code to a nondifferentiable boundary: the
    activation threshold, the TopK cut, the top-1 cut inside each active
    expert, and the auxiliary dead-latent cut.
    """
    cfg = model.config
    margins = [np.min(np.abs(trace.logits - cfg.alpha))]
    m = trace.pre_codes.shape[1]
    if cfg.k < m:
        ranked = -np.sort(-trace.pre_codes, axis=1)
        margins.append(np.min(ranked[:, cfg.k - 1] - ranked[:, cfg.k]))
    if trace.has_experts:
        margins.append(np.min(np.abs(trace.low_logits - cfg.alpha)))
        if cfg.a > 1:
            ranked = -np.sort(-trace.low_pre_codes, axis=2)
            margins.append(np.min(ranked[..., 0] - ranked[..., 1]))
    dead_mask = _dead_mask(dead, m)
    n_dead = int(dead_mask.sum())
    if 0 < cfg.k_aux < n_dead:
        ranked = -np.sort(-trace.pre_codes[:, dead_mask], axis=1)
        margins.append(np.min(ranked[:, cfg.k_aux - 1] - ranked[:, cfg.k_aux]))
    return float(min(margins))


def _total_loss(model: HsaeModel, X: np.ndarray, weights: LossWeights, dead) -> float:
    trace = forward_hsae(model, X)
    return compute_losses(trace, X, model, weights, dead).total


def grad_check(model: HsaeModel, x, eps: float = 1e-5, weights: LossWeights = None,
               dead=None, gradients: Gradients = None) -> GradCheckReport:
    """
    Compare analytic gradients with central finite differences in float64.

    The check refuses to run (reports a boundary skip) when any code lies
    within 10·eps of a selection or threshold boundary.

    Args:
        model: Model to check; copied to float64
        x: One vector or a batch of rows
        eps: Finite-difference step
        weights: Loss weights; defaults to the config's, aux off
        dead: Dead latent set for the auxiliary term
        gradients: Analytic gradients to check instead of backward()'s

    Returns:
        GradCheckReport with the max per-parameter relative error
    """
    model64 = model.astype(np.float64)
    X = _as_rows(x)
    if weights is None:
        weights = LossWeights.from_config(model64.config)
    trace = forward_hsae(model64, X)

    margin = selection_margin(model64, trace, dead)
    if margin <= 10 * eps:
        logger.warning(f"Gradient check skipped: margin {margin:.3g} <= 10*eps")
        return GradCheckReport(max_rel_error=0.0, skipped=True, margin=margin,
                               reason=f"boundary margin {margin:.3g} is within 10*eps")

    analytic = gradients if gradients is not None else backward(model64, X, trace, weights, dead)
    analytic_arrays = analytic.arrays()

    per_parameter = {}
    for name, param in model64.arrays().items():
        numeric = np.zeros(param.shape, dtype=COMPUTE_DTYPE)
        # index the parameter itself; a reshape of a non-C array is a copy
        for idx in np.ndindex(param.shape):
            original = param[idx]
            param[idx] = original + eps
            plus = _total_loss(model64, X, weights, dead)
            param[idx] = original - eps
            minus = _total_loss(model64, X, weights, dead)
            param[idx] = original
            numeric[idx] = (plus - minus) / (2 * eps)
        a = as_compute(analytic_arrays[name])
        denom = max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        per_parameter[name] = float(np.linalg.norm(a - numeric) / denom)

    return GradCheckReport(max_rel_error=max(per_parameter.values()), margin=margin,
                           per_parameter=per_parameter)
