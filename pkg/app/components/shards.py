"""
On-disk activation shards, external two-pass shuffling and batch streaming.

Shard layout (little-endian):
    magic     4 bytes  b"HACT"
    version   u32
    d         u32
    row_count u64
    dtype     u8       0 = f32
followed by row_count * d float32 values, row-major.
"""

import logging
import queue
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, List, Sequence, Tuple, Union

import numpy as np

from utils.errors import (
    CorruptionError,
    InvalidArgumentError,
    ShardFormatError,
    ShardIOError,
)

logger = logging.getLogger(__name__)

SHARD_MAGIC = b"HACT"
SHARD_VERSION = 1
DTYPE_F32 = 0
_HEADER = struct.Struct("<4sIIQB")
HEADER_BYTES = _HEADER.size
_PAYLOAD_DTYPE = np.dtype("<f4")

# Rows moved per read while scattering into buckets.
SCATTER_CHUNK_ROWS = 65536

PathLike = Union[str, Path]


@dataclass(frozen=True)
class ShardHeader:
    d: int
    row_count: int
    version: int = SHARD_VERSION
    dtype: int = DTYPE_F32

    @property
    def payload_bytes(self) -> int:
        return self.row_count * self.d * _PAYLOAD_DTYPE.itemsize


def write_shard(path: PathLike, X) -> None:
    X = np.asarray(X)
    if X.ndim != 2:
        raise InvalidArgumentError(f"Shard payload must be 2-D, got shape {X.shape}")
    if X.shape[1] > 2 ** 31:
        raise InvalidArgumentError(f"d={X.shape[1]} exceeds the shard limit")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError(f"Refusing to write nonfinite values to {path}")
    payload = np.ascontiguousarray(X, dtype=_PAYLOAD_DTYPE)
    header = _HEADER.pack(SHARD_MAGIC, SHARD_VERSION, X.shape[1], X.shape[0], DTYPE_F32)
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(payload.tobytes())
    except OSError as e:
        raise ShardIOError(f"Failed to write shard {path}: {e}") from e


def read_shard_header(path: PathLike) -> ShardHeader:
    try:
        with open(path, "rb") as f:
            raw = f.read(HEADER_BYTES)
        size = Path(path).stat().st_size
    except OSError as e:
        raise ShardIOError(f"Failed to read shard {path}: {e}") from e

    if len(raw) < HEADER_BYTES:
        raise CorruptionError(f"Shard {path} is truncated: header has {len(raw)} bytes")
    magic, version, d, row_count, dtype = _HEADER.unpack(raw)
    if magic != SHARD_MAGIC:
        raise ShardFormatError(f"Shard {path} has bad magic {magic!r}")
    if version != SHARD_VERSION:
        raise ShardFormatError(f"Shard {path} has unsupported version {version}")
    if dtype != DTYPE_F32:
        raise ShardFormatError(f"Shard {path} has unsupported dtype code {dtype}")

    header = ShardHeader(d=d, row_count=row_count, version=version, dtype=dtype)
    if size != HEADER_BYTES + header.payload_bytes:
        raise CorruptionError(
            f"Shard {path} payload is {size - HEADER_BYTES} bytes, header declares "
            f"{row_count} rows of d={d} ({header.payload_bytes} bytes)")
    return header


def open_shard(path: PathLike) -> np.ndarray:
    """Read-only memory map of the shard payload, shape (row_count, d)."""
    header = read_shard_header(path)
    if header.row_count == 0:
        return np.empty((0, header.d), dtype=_PAYLOAD_DTYPE)
    try:
        return np.memmap(path, dtype=_PAYLOAD_DTYPE, mode="r", offset=HEADER_BYTES,
                         shape=(header.row_count, header.d))
    except (OSError, ValueError) as e:
        raise ShardIOError(f"Failed to map shard {path}: {e}") from e


def read_shard(path: PathLike) -> np.ndarray:
    return np.array(open_shard(path), dtype=np.float32)


def shard_dimension(paths: Sequence[PathLike]) -> Tuple[int, int]:
    """Common d and total row count across shards."""
    if not paths:
        raise InvalidArgumentError("No shard paths given")
    headers = [read_shard_header(p) for p in paths]
    dims = {h.d for h in headers}
    if len(dims) != 1:
        raise InvalidArgumentError(f"Shards disagree on dimension: {sorted(dims)}")
    return dims.pop(), sum(h.row_count for h in headers)


def list_shards(directory: PathLike) -> List[Path]:
    return sorted(Path(directory).glob("shard_*.bin"))


def shard_path(directory: PathLike, i: int) -> Path:
    return Path(directory) / f"shard_{i:05d}.bin"


def shuffle_shards(in_paths: Sequence[PathLike], out_paths: Sequence[PathLike], seed: int,
                   tmp_dir: PathLike = None, chunk_rows: int = SCATTER_CHUNK_ROWS) -> None:
    """
    Globally permute rows across shards with bounded memory.

    Pass one assigns every row to an output bucket (bucket sizes are as even
    as possible) and appends it to a temporary bucket file. Pass two loads
    one bucket at a time, permutes it and writes the output shard.
    """
    if not out_paths:
        raise InvalidArgumentError("No output paths given")
    d, total = shard_dimension(in_paths)
    n_out = len(out_paths)
    rng = np.random.default_rng(seed)

    sizes = np.full(n_out, total // n_out, dtype=np.int64)
    sizes[: total % n_out] += 1
    assignment = np.repeat(np.arange(n_out, dtype=np.int32), sizes)
    rng.shuffle(assignment)

    with tempfile.TemporaryDirectory(dir=tmp_dir) as tmp:
        bucket_paths = [Path(tmp) / f"bucket_{j:05d}.raw" for j in range(n_out)]
        try:
            buckets = [open(p, "wb") for p in bucket_paths]
        except OSError as e:
            raise ShardIOError(f"Failed to create bucket files in {tmp}: {e}") from e
        try:
            offset = 0
            for path in in_paths:
                rows = open_shard(path)
                for start in range(0, rows.shape[0], chunk_rows):
                    chunk = np.asarray(rows[start:start + chunk_rows])
                    labels = assignment[offset + start: offset + start + chunk.shape[0]]
                    for j in np.unique(labels):
                        buckets[j].write(np.ascontiguousarray(chunk[labels == j]).tobytes())
                offset += rows.shape[0]
        finally:
            for b in buckets:
                b.close()

        for j, (bucket, out) in enumerate(zip(bucket_paths, out_paths)):
            data = np.fromfile(bucket, dtype=_PAYLOAD_DTYPE).reshape(-1, d)
            if data.shape[0] != sizes[j]:
                raise CorruptionError(f"Bucket {j} holds {data.shape[0]} rows, expected {sizes[j]}")
            write_shard(out, data[rng.permutation(data.shape[0])])
            bucket.unlink()
    logger.info(f"Shuffled {total} rows from {len(in_paths)} shard(s) into {n_out}")


@dataclass
class BatchStream:
    """Fixed-size batches over an ordered list of shards."""
    paths: List[Path]
    batch_size: int
    cursor: Tuple[int, int] = (0, 0)  # (shard, row) of the next unread row
    d: int = field(init=False, default=0)
    _rows: List[int] = field(init=False, default_factory=list, repr=False)

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        self.paths = [Path(p) for p in self.paths]
        self.d, _ = shard_dimension(self.paths)
        self._rows = [read_shard_header(p).row_count for p in self.paths]

    @property
    def total_rows(self) -> int:
        return sum(self._rows)

    @property
    def batches_per_epoch(self) -> int:
        return self.total_rows // self.batch_size

    def rewind(self) -> None:
        self.cursor = (0, 0)

    def seek_batch(self, index: int) -> None:
        """Position the cursor at the first row of batch ``index`` of the epoch."""
        if index < 0 or index > self.batches_per_epoch:
            raise InvalidArgumentError(f"Batch index {index} outside [0, {self.batches_per_epoch}]")
        row = index * self.batch_size
        for shard, count in enumerate(self._rows):
            if row < count:
                self.cursor = (shard, row)
                return
            row -= count
        self.cursor = (len(self._rows), 0)


def stream_batches(stream: BatchStream) -> Iterator[np.ndarray]:
    """
    Yield float32 batches from the stream's cursor to the end of the epoch,
    carrying rows across shard boundaries. The final partial batch is dropped.
    """
    pending: List[np.ndarray] = []
    n_pending = 0
    shard, row = stream.cursor
    while shard < len(stream.paths):
        rows = open_shard(stream.paths[shard])
        if rows.shape[0] != stream._rows[shard]:
            raise CorruptionError(f"Shard {stream.paths[shard]} changed size during streaming")
        while row < rows.shape[0]:
            take = min(stream.batch_size - n_pending, rows.shape[0] - row)
            pending.append(np.asarray(rows[row:row + take]))
            n_pending += take
            row += take
            if n_pending == stream.batch_size:
                batch = pending[0].copy() if len(pending) == 1 else np.concatenate(pending)
                pending, n_pending = [], 0
                stream.cursor = (shard, row) if row < rows.shape[0] else (shard + 1, 0)
                yield batch
        shard, row = shard + 1, 0
    if n_pending:
        logger.debug(f"Dropped {n_pending} tail row(s) at end of epoch")
    stream.cursor = (len(stream.paths), 0)


_DONE = object()


def prefetch(batches: Iterable[np.ndarray], depth: int = 2) -> Iterator[np.ndarray]:
    """
    Produce batches on a background thread through a bounded queue. Order is
    preserved; an exception in the producer is re-raised in the consumer.
    """
    q: queue.Queue = queue.Queue(maxsize=max(1, depth))
    stop = threading.Event()

    def producer():
        try:
            for batch in batches:
                if stop.is_set():
                    return
                q.put(batch)
            q.put(_DONE)
        except Exception as e:
            q.put(e)

    worker = threading.Thread(target=producer, name="batch-prefetch", daemon=True)
    worker.start()
    try:
        while True:
            item = q.get()
            if item is _DONE:
                break
            if isinstance(item, Exception):
                raise item
            yield item
    finally:
        stop.set()
        # unblock a producer waiting on a full queue
        while not q.empty():
            q.get_nowait()
