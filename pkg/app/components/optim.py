"""
Adam with global-norm clipping, the warmup/cosine learning-rate schedule,
regularizer warmup and decoder renormalization.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from components.hsae_model import HsaeModel
from components.linalg import as_compute, column_norms
from components.objective import Gradients
from utils.errors import DegenerateInputError, InvalidArgumentError, NumericFailureError

logger = logging.getLogger(__name__)


class OptConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    lr_peak: float = Field(default=5e-4, gt=0)
    lr_init: float = Field(default=1e-11, ge=0)
    warmup_steps: int = Field(default=1000, ge=0)
    # None until the trainer knows the dataset size
    total_steps: Optional[int] = Field(default=None, gt=0)
    clip_norm: float = Field(default=0.75, gt=0)
    b1: float = Field(default=0.9, ge=0, lt=1)
    b2: float = Field(default=0.999, ge=0, lt=1)
    eps_adam: float = Field(default=1e-8, gt=0)

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.total_steps is not None and not self.warmup_steps < self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be < total_steps ({self.total_steps})")
        return self

    def with_total_steps(self, total_steps: int) -> 'OptConfig':
        return self.model_validate({**self.model_dump(), "total_steps": total_steps})


@dataclass
class OptState:
    """Adam moments (float64, mirroring the model) and the step counter."""
    step: int
    m: Gradients
    v: Gradients

    @classmethod
    def fresh(cls, model: HsaeModel) -> 'OptState':
        return cls(step=0, m=Gradients.zeros_like(model), v=Gradients.zeros_like(model))

    def copy(self) -> 'OptState':
        return OptState(step=self.step, m=self.m.map_arrays(np.copy), v=self.v.map_arrays(np.copy))


def _require_total(cfg: OptConfig) -> int:
    if cfg.total_steps is None:
        raise InvalidArgumentError("OptConfig.total_steps must be set before scheduling")
    return cfg.total_steps


def lr_schedule(step: int, cfg: OptConfig) -> float:
    """Linear warmup lr_init → lr_peak, then cosine decay to 0 at total_steps."""
    total = _require_total(cfg)
    if step < 0:
        raise InvalidArgumentError(f"step must be >= 0, got {step}")
    if step > total:
        return 0.0
    if step < cfg.warmup_steps:
        return cfg.lr_init + (cfg.lr_peak - cfg.lr_init) * step / cfg.warmup_steps
    progress = (step - cfg.warmup_steps) / (total - cfg.warmup_steps)
    if progress >= 1.0:
        return 0.0
    return cfg.lr_peak * 0.5 * (1.0 + math.cos(math.pi * progress))


def reg_warmup(step: int, cfg: OptConfig) -> float:
    if cfg.warmup_steps == 0 or step >= cfg.warmup_steps:
        return 1.0
    return max(step, 0) / cfg.warmup_steps


def adam_step(model: HsaeModel, grads: Gradients, state: OptState,
              cfg: OptConfig) -> Tuple[HsaeModel, OptState]:
    """
    One clipped Adam update. Inputs are not mutated.

    Raises:
        NumericFailureError: if grads contain NaN/Inf (state is left as given)
    """
    if not grads.is_finite():
        raise NumericFailureError(f"Nonfinite gradient at step {state.step}")

    params = model.arrays()
    g_arrays = grads.arrays()
    if params.keys() != g_arrays.keys():
        raise InvalidArgumentError(
            f"Gradient keys {list(g_arrays)} do not match model keys {list(params)}")
    for name, p in params.items():
        if g_arrays[name].shape != p.shape:
            raise InvalidArgumentError(
                f"Gradient '{name}' has shape {g_arrays[name].shape}, expected {p.shape}")

    norm = grads.global_norm()
    clip = min(1.0, cfg.clip_norm / norm) if norm > 0 else 1.0
    lr = lr_schedule(state.step, cfg)
    t = state.step + 1
    bc1 = 1.0 - cfg.b1 ** t
    bc2 = 1.0 - cfg.b2 ** t

    m_prev, v_prev = state.m.arrays(), state.v.arrays()
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = as_compute(g_arrays[name]) * clip
        m = cfg.b1 * m_prev[name] + (1.0 - cfg.b1) * g
        v = cfg.b2 * v_prev[name] + (1.0 - cfg.b2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps_adam)
        new_params[name] = (as_compute(p) - update).astype(p.dtype)
        new_m[name] = m
        new_v[name] = v

    new_state = OptState(step=t, m=state.m.replace_arrays(new_m), v=state.v.replace_arrays(new_v))
    return model.replace_arrays(new_params), new_state


def _renormalized_columns(D: np.ndarray, what: str) -> np.ndarray:
    norms = column_norms(D)
    zero = np.flatnonzero(norms == 0)
    if zero.size:
        raise DegenerateInputError(f"Zero decoder column(s) in {what}: {zero[:10].tolist()}")
    # columns already unit to within storage precision are left untouched
    tol = 8 * np.finfo(D.dtype).eps
    off = np.abs(norms - 1.0) > tol
    if not np.any(off):
        return D
    out = D.copy()
    out[:, off] = (as_compute(D[:, off]) / norms[off]).astype(D.dtype)
    return out


def renormalize_decoder(model: HsaeModel, include_experts: bool = False) -> HsaeModel:
    """Rescale decoder columns to unit ℓ2 norm; idempotent."""
    out = model.copy()
    out.top.D = _renormalized_columns(model.top.D, "top.D")
    if include_experts and model.experts is not None:
        dec = model.experts.dec
        rescaled = [_renormalized_columns(dec[j], f"experts.dec[{j}]") for j in range(dec.shape[0])]
        out.experts.dec = np.stack(rescaled).astype(dec.dtype)
    return out
