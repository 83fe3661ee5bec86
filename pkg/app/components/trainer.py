"""
Training loop: forward, warmed-up losses, backward, clipped Adam, decoder
renormalization and dead-latent tracking, with periodic checkpoints and a
line-delimited run log.

Checkpoint layout (little-endian):
    magic "HCKP", version u32
    u32 length + UTF-8 JSON of the TrainConfig
    model block (hsae_model.write_model)
    optimizer block: step u64, then first and second moments as f64 arrays
        in parameter order
    tracker block: has_tracker u8, batches_seen u64, rates f64[m_top],
        has_sub u8, sub_rates f64[m_top * a]
"""

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterator, List, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from rich.progress import BarColumn, Progress, TaskProgressColumn, TextColumn

from components.datagen import LabeledBatch
from components.hsae_model import (
    ForwardTrace,
    HsaeConfig,
    HsaeModel,
    forward_hsae,
    init_model,
    read_model,
    write_model,
)
from components.linalg import COMPUTE_DTYPE, as_compute, unit_normalize_rows
from components.objective import Gradients, LossBreakdown, LossWeights, backward, compute_losses
from components.optim import OptConfig, OptState, adam_step, lr_schedule, reg_warmup, renormalize_decoder
from components.shards import BatchStream, prefetch, stream_batches
from utils.errors import (
    CheckpointVersionError,
    CorruptionError,
    InvalidArgumentError,
    NumericFailureError,
    ShapeMismatchError,
    ShardFormatError,
    ShardIOError,
)

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"HCKP"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sI")
CHECKPOINT_NAME = "checkpoint.bin"
RUN_LOG_NAME = "run_log.jsonl"


class Toggles(BaseModel):
    model_config = ConfigDict(extra="forbid")

    ortho: bool = True
    l1: bool = True
    top_recon: bool = True


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: HsaeConfig = Field(default_factory=HsaeConfig)
    opt: OptConfig = Field(default_factory=OptConfig)
    epochs: int = Field(default=4, ge=1)
    batch_size: int = Field(default=32512, ge=1)
    mode: Literal["hsae", "baseline", "baseline_with_aux"] = "hsae"
    toggles: Toggles = Field(default_factory=Toggles)
    ema_window_batches: int = Field(default=300, ge=1)
    # 0 writes only the final checkpoint
    checkpoint_every: int = Field(default=1000, ge=0)
    log_every: int = Field(default=1, ge=1)
    seed: int = 0
    freeze_experts: bool = False
    expert_init: Literal["random", "zero"] = "random"
    renorm_expert_decoders: bool = False
    normalize_inputs: bool = True

    @property
    def with_experts(self) -> bool:
        return self.mode == "hsae"


@dataclass
class DeadLatentTracker:
    """EMA of the per-sample firing frequency of every latent."""
    window: int
    batch_size: int
    rates: np.ndarray  # (m_top,)
    sub_rates: Optional[np.ndarray] = None  # (m_top, a)
    batches_seen: int = 0

    @classmethod
    def fresh(cls, cfg: TrainConfig) -> 'DeadLatentTracker':
        m, a = cfg.model.m_top, cfg.model.a
        return cls(window=cfg.ema_window_batches, batch_size=cfg.batch_size,
                   rates=np.zeros(m, dtype=COMPUTE_DTYPE),
                   sub_rates=np.zeros((m, a), dtype=COMPUTE_DTYPE) if cfg.with_experts else None)

    @property
    def decay(self) -> float:
        return 1.0 - 1.0 / self.window

    @property
    def threshold(self) -> float:
        return 1.0 / (self.window * self.batch_size)

    def dead_mask(self) -> np.ndarray:
        # nothing is known to be dead before the first update
        if self.batches_seen == 0:
            return np.zeros_like(self.rates, dtype=bool)
        return self.rates < self.threshold

    def dead_fraction(self) -> float:
        return float(np.mean(self.dead_mask()))

    def dead_sublatent_fraction(self) -> Optional[float]:
        if self.sub_rates is None or self.batches_seen == 0:
            return None
        return float(np.mean(self.sub_rates < self.threshold))


def update_dead_tracker(tracker: DeadLatentTracker, trace: ForwardTrace) -> DeadLatentTracker:
    B = trace.batch_size
    if trace.pre_codes.shape[1] != tracker.rates.shape[0]:
        raise InvalidArgumentError("Trace and tracker disagree on m_top")
    fired = trace.selection_mask().sum(axis=0) / B
    decay = tracker.decay
    rates = decay * tracker.rates + (1.0 - decay) * fired

    sub_rates = tracker.sub_rates
    if sub_rates is not None and trace.has_experts:
        counts = np.zeros(sub_rates.shape, dtype=COMPUTE_DTYPE)
        np.add.at(counts, (trace.indices, trace.low_indices), 1.0)
        sub_rates = decay * sub_rates + (1.0 - decay) * counts / B

    return DeadLatentTracker(window=tracker.window, batch_size=tracker.batch_size, rates=rates,
                             sub_rates=sub_rates, batches_seen=tracker.batches_seen + 1)


@dataclass
class RunRecord:
    step: int
    epoch: int
    lr: float
    losses: LossBreakdown
    dead_fraction: float
    wall_time: float

    def to_json(self) -> str:
        record = {"step": self.step, "epoch": self.epoch, "lr": self.lr}
        record.update(self.losses.as_dict())
        record["dead_fraction"] = self.dead_fraction
        record["wall_time"] = round(self.wall_time, 3)
        return json.dumps(record)


@dataclass
class RunLog:
    records: List[RunRecord] = field(default_factory=list)

    def append(self, record: RunRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise InvalidArgumentError(
                f"Run log steps must increase: {record.step} after {self.records[-1].step}")
        self.records.append(record)

    def write(self, path: Union[str, Path], append: bool = False) -> None:
        try:
            with open(path, "a" if append else "w") as f:
                for record in self.records:
                    f.write(record.to_json() + "\n")
        except OSError as e:
            raise ShardIOError(f"Failed to write run log {path}: {e}") from e


@dataclass
class Checkpoint:
    config: TrainConfig
    model: HsaeModel
    opt_state: OptState
    tracker: Optional[DeadLatentTracker] = None


@dataclass
class TrainResult:
    model: HsaeModel
    log: RunLog
    opt_state: OptState
    tracker: DeadLatentTracker


def _write_f64(f: BinaryIO, arr: np.ndarray) -> None:
    f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def _read_f64(f: BinaryIO, shape, what: str) -> np.ndarray:
    n = int(np.prod(shape)) * 8
    raw = f.read(n)
    if len(raw) != n:
        raise CorruptionError(f"Truncated checkpoint {what}: expected {n} bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype="<f8").astype(COMPUTE_DTYPE).reshape(shape)


def _read_struct(f: BinaryIO, fmt: str, what: str):
    st = struct.Struct(fmt)
    raw = f.read(st.size)
    if len(raw) != st.size:
        raise CorruptionError(f"Truncated checkpoint {what}")
    return st.unpack(raw)


def save_checkpoint(path: Union[str, Path], config: TrainConfig, model: HsaeModel,
                    opt_state: OptState, tracker: DeadLatentTracker = None) -> None:
    """Write atomically: the previous checkpoint survives a failed write."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    config_json = config.model_dump_json().encode("utf-8")
    try:
        with open(tmp, "wb") as f:
            f.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
            f.write(struct.pack("<I", len(config_json)))
            f.write(config_json)
            write_model(f, model)
            f.write(struct.pack("<Q", opt_state.step))
            for arr in opt_state.m.arrays().values():
                _write_f64(f, arr)
            for arr in opt_state.v.arrays().values():
                _write_f64(f, arr)
            f.write(struct.pack("<B", int(tracker is not None)))
            if tracker is not None:
                f.write(struct.pack("<Q", tracker.batches_seen))
                _write_f64(f, tracker.rates)
                f.write(struct.pack("<B", int(tracker.sub_rates is not None)))
                if tracker.sub_rates is not None:
                    _write_f64(f, tracker.sub_rates)
        tmp.replace(path)
    except OSError as e:
        raise ShardIOError(f"Failed to write checkpoint {path}: {e}") from e
    logger.info(f"Saved checkpoint at step {opt_state.step} to {path}")


def load_checkpoint(path: Union[str, Path], expected: HsaeConfig = None) -> Checkpoint:
    """
    Raises:
        ShardFormatError: not a checkpoint
        CheckpointVersionError: unsupported version
        CorruptionError: truncated file
        ShapeMismatchError: stored dimensions disagree with ``expected``
    """
    try:
        f = open(path, "rb")
    except OSError as e:
        raise ShardIOError(f"Failed to open checkpoint {path}: {e}") from e
    with f:
        magic, version = _read_struct(f, _CKPT_HEADER.format, "header")
        if magic != CHECKPOINT_MAGIC:
            raise ShardFormatError(f"{path} is not a checkpoint (magic {magic!r})")
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"Checkpoint {path} has version {version}, expected {CHECKPOINT_VERSION}")
        (n_json,) = _read_struct(f, "<I", "config length")
        raw_json = f.read(n_json)
        if len(raw_json) != n_json:
            raise CorruptionError(f"Truncated checkpoint config in {path}")
        try:
            config = TrainConfig.model_validate_json(raw_json)
        except ValidationError as e:
            raise CorruptionError(f"Checkpoint {path} holds an invalid config: {e}") from e

        if expected is not None:
            for name in ("d", "m_top", "k", "a", "s"):
                if getattr(expected, name) != getattr(config.model, name):
                    raise ShapeMismatchError(name, getattr(expected, name),
                                             getattr(config.model, name))
        model = read_model(f, expected=config.model)

        (step,) = _read_struct(f, "<Q", "optimizer step")
        shapes = {name: arr.shape for name, arr in model.arrays().items()}
        m = {name: _read_f64(f, shape, f"moment '{name}'") for name, shape in shapes.items()}
        v = {name: _read_f64(f, shape, f"moment '{name}'") for name, shape in shapes.items()}
        template = Gradients(top=model.top, experts=model.experts)
        opt_state = OptState(step=step, m=template.replace_arrays(m), v=template.replace_arrays(v))

        tracker = None
        (has_tracker,) = _read_struct(f, "<B", "tracker flag")
        if has_tracker:
            (seen,) = _read_struct(f, "<Q", "tracker count")
            rates = _read_f64(f, (config.model.m_top,), "tracker rates")
            (has_sub,) = _read_struct(f, "<B", "sublatent flag")
            sub = _read_f64(f, (config.model.m_top, config.model.a), "sublatent rates") if has_sub else None
            tracker = DeadLatentTracker(window=config.ema_window_batches, batch_size=config.batch_size,
                                        rates=rates, sub_rates=sub, batches_seen=seen)
    return Checkpoint(config=config, model=model, opt_state=opt_state, tracker=tracker)


def _as_matrix(data) -> np.ndarray:
    if isinstance(data, LabeledBatch):
        return data.X
    return np.asarray(data)


def _batches_per_epoch(data, batch_size: int) -> int:
    if isinstance(data, BatchStream):
        return data.batches_per_epoch
    return _as_matrix(data).shape[0] // batch_size


def _epoch_batches(data, batch_size: int, start: int, threads: int) -> Iterator[np.ndarray]:
    if isinstance(data, BatchStream):
        data.seek_batch(start)
        batches = stream_batches(data)
        return prefetch(batches, depth=threads) if threads > 1 else batches
    X = _as_matrix(data)
    n_batches = X.shape[0] // batch_size
    return (X[i * batch_size:(i + 1) * batch_size] for i in range(start, n_batches))


def _data_dimension(data) -> int:
    return data.d if isinstance(data, BatchStream) else _as_matrix(data).shape[1]


def train_step(cfg: TrainConfig, model: HsaeModel, opt_state: OptState, tracker: DeadLatentTracker,
               X: np.ndarray):
    """
    One optimizer step on one batch.

    Returns:
        (model, opt_state, tracker, losses)
    """
    X = as_compute(X)
    if cfg.normalize_inputs:
        X = unit_normalize_rows(X)

    trace = forward_hsae(model, X)
    scale = reg_warmup(opt_state.step, cfg.opt)
    weights = LossWeights.from_config(
        cfg.model, scale,
        top_recon=cfg.toggles.top_recon and cfg.with_experts,
        ortho=cfg.toggles.ortho,
        l1=cfg.toggles.l1,
        aux=cfg.mode == "baseline_with_aux",
    )
    dead = tracker.dead_mask() if cfg.mode == "baseline_with_aux" else None

    losses = compute_losses(trace, X, model, weights, dead)
    if not np.isfinite(losses.total):
        raise NumericFailureError(f"Nonfinite loss at step {opt_state.step}")
    grads = backward(model, X, trace, weights, dead)
    if cfg.freeze_experts and grads.experts is not None:
        grads = grads.replace_arrays({
            name: np.zeros_like(arr) if name.startswith("experts.") else arr
            for name, arr in grads.arrays().items()})

    model, opt_state = adam_step(model, grads, opt_state, cfg.opt)
    model = renormalize_decoder(model, include_experts=cfg.renorm_expert_decoders)
    tracker = update_dead_tracker(tracker, trace)
    return model, opt_state, tracker, losses


def train(cfg: TrainConfig, data, out_dir: Union[str, Path] = None, resume: Union[str, Path] = None,
          threads: int = 1, show_progress: bool = False) -> TrainResult:
    """
    Train an H-SAE or baseline on a shard stream or an in-memory matrix.

    Args:
        cfg: Training config
        data: BatchStream, LabeledBatch or (n, d) array
        out_dir: Where checkpoints and the run log go; None keeps everything in memory
        resume: Checkpoint to continue from
        threads: >1 prefetches shard batches on a background thread
        show_progress: Render a rich progress bar

    Returns:
        TrainResult with the final model, run log, optimizer state and tracker

    Raises:
        NumericFailureError: training hit a nonfinite value; the last
            checkpoint on disk is left as it was
    """
    if _data_dimension(data) != cfg.model.d:
        raise InvalidArgumentError(
            f"Data dimension {_data_dimension(data)} does not match model d={cfg.model.d}")
    if isinstance(data, BatchStream) and data.batch_size != cfg.batch_size:
        raise InvalidArgumentError(
            f"Stream batch size {data.batch_size} differs from config {cfg.batch_size}")
    per_epoch = _batches_per_epoch(data, cfg.batch_size)
    if per_epoch == 0:
        raise InvalidArgumentError(f"Fewer rows than one batch of {cfg.batch_size}")

    total_steps = cfg.opt.total_steps or cfg.epochs * per_epoch
    try:
        cfg = cfg.model_copy(update={"opt": cfg.opt.with_total_steps(total_steps)})
    except ValidationError as e:
        raise InvalidArgumentError(f"Invalid optimizer schedule for {total_steps} steps: {e}") from e

    if resume is not None:
        ckpt = load_checkpoint(resume, expected=cfg.model)
        model, opt_state = ckpt.model, ckpt.opt_state
        tracker = ckpt.tracker or DeadLatentTracker.fresh(cfg)
        logger.info(f"Resuming from {resume} at step {opt_state.step}")
    else:
        model = init_model(cfg.model, np.random.default_rng(cfg.seed),
                           with_experts=cfg.with_experts, expert_init=cfg.expert_init)
        opt_state = OptState.fresh(model)
        tracker = DeadLatentTracker.fresh(cfg)

    ckpt_path = Path(out_dir) / CHECKPOINT_NAME if out_dir is not None else None
    log = RunLog()
    start_step = opt_state.step
    t0 = time.monotonic()

    progress = Progress(TextColumn("[bold blue]{task.description}"), BarColumn(),
                        TaskProgressColumn(), TextColumn("{task.fields[loss]}"),
                        disable=not show_progress)
    with progress:
        task = progress.add_task(f"[cyan]Training {cfg.mode}", total=total_steps,
                                 completed=start_step, loss="")
        try:
            for epoch in range(start_step // per_epoch, cfg.epochs):
                if opt_state.step >= total_steps:
                    break
                first = start_step - epoch * per_epoch if epoch == start_step // per_epoch else 0
                for X in _epoch_batches(data, cfg.batch_size, first, threads):
                    if opt_state.step >= total_steps:
                        break
                    lr = lr_schedule(opt_state.step, cfg.opt)
                    model, opt_state, tracker, losses = train_step(cfg, model, opt_state, tracker, X)
                    step = opt_state.step
                    if step % cfg.log_every == 0 or step == total_steps:
                        log.append(RunRecord(step=step, epoch=epoch, lr=lr, losses=losses,
                                             dead_fraction=tracker.dead_fraction(),
                                             wall_time=time.monotonic() - t0))
                    progress.update(task, advance=1, loss=f"loss {losses.total:.4g}")
                    if ckpt_path is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
                        save_checkpoint(ckpt_path, cfg, model, opt_state, tracker)
                logger.info(f"Epoch {epoch} done at step {opt_state.step}, "
                            f"dead fraction {tracker.dead_fraction():.4f}")
        except NumericFailureError as e:
            logger.error(f"Training aborted at step {opt_state.step}: {e}")
            if out_dir is not None:
                log.write(Path(out_dir) / RUN_LOG_NAME, append=resume is not None)
            raise

    if out_dir is not None:
        save_checkpoint(ckpt_path, cfg, model, opt_state, tracker)
        log.write(Path(out_dir) / RUN_LOG_NAME, append=resume is not None)
    return TrainResult(model=model, log=log, opt_state=opt_state, tracker=tracker)
