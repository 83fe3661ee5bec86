import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from rich.console import Console
from rich.table import Table

from components.datagen import (
    LabeledBatch,
    SyntheticDictionary,
    apply_whitening,
    plant_dictionary,
    read_labels,
    sample_activations,
    sample_paired_views,
    whiten,
    write_labels,
)
from components.evaluation import EvalReport, EvalSpec, evaluate, feature_report
from components.hsae_model import flop_breakdown
from components.linalg import unit_normalize_rows
from components.shards import (
    BatchStream,
    list_shards,
    read_shard,
    shard_path,
    shuffle_shards,
    write_shard,
)
from components.trainer import CHECKPOINT_NAME, Checkpoint, TrainConfig, load_checkpoint, train
from utils.config import ParsedConfig, get_seed_override, get_threads, parse_config, setup_logging
from utils.data_utils import ensure_dir, load_json, save_json
from utils.errors import HsaeError, InvalidArgumentError

console = Console()
logger = logging.getLogger(__name__)

DICTIONARY_FILE = "dictionary.npz"
LABELS_FILE = "labels.tsv"
WHITENING_FILE = "whitening.npz"
PAIRS_FILES = ("pairs_a.bin", "pairs_b.bin")
SHUFFLED_DIR = "shuffled"
EVAL_FILE = "eval.json"


@dataclass
class RunSpec:
    command: str
    config: Optional[Path] = None
    out: Optional[Path] = None
    seed: Optional[int] = None
    data: Optional[Path] = None
    model: Optional[Path] = None
    labels: Optional[Path] = None
    resume: Optional[Path] = None
    top: int = 20
    runs: List[Path] = field(default_factory=list)
    threads: int = 1


def load_settings(spec: RunSpec) -> ParsedConfig:
    """Config file plus seed overrides: --seed beats HSAE_SEED beats the file."""
    parsed = parse_config(spec.config)
    seed = spec.seed if spec.seed is not None else get_seed_override()
    return parsed.with_seed(seed)


def _require(path: Optional[Path], what: str) -> Path:
    if path is None:
        raise InvalidArgumentError(f"Missing required {what}")
    if not Path(path).exists():
        raise InvalidArgumentError(f"{what} not found: {path}")
    return Path(path)


def _training_shards(data_dir: Path) -> List[Path]:
    shuffled = data_dir / SHUFFLED_DIR
    paths = list_shards(shuffled) if shuffled.is_dir() else []
    paths = paths or list_shards(data_dir)
    if not paths:
        raise InvalidArgumentError(f"No shards found in {data_dir}")
    return paths


def _load_rows(data_dir: Path) -> np.ndarray:
    paths = list_shards(data_dir)
    if not paths:
        raise InvalidArgumentError(f"No shards found in {data_dir}")
    return np.concatenate([read_shard(p) for p in paths])


def gen_data(spec: RunSpec) -> int:
    settings = load_settings(spec)
    data_spec = settings.data
    out = _require_out(spec)

    dictionary = plant_dictionary(data_spec)
    batch = sample_activations(dictionary, data_spec.n_samples, data_spec)
    X = batch.X
    pairs = None
    if data_spec.n_pairs:
        pairs = sample_paired_views(dictionary, data_spec.n_pairs, data_spec)

    whitening = None
    if data_spec.whiten:
        X, W, mean = whiten(X)
        whitening = (W, mean)
        if pairs is not None:
            pairs = tuple(apply_whitening(P, W, mean) for P in pairs)

    ensure_dir(out)
    if whitening is not None:
        np.savez(out / WHITENING_FILE, W=whitening[0], mean=whitening[1])
    bounds = np.linspace(0, X.shape[0], data_spec.n_shards + 1).astype(int)
    paths = []
    for i in range(data_spec.n_shards):
        path = shard_path(out, i)
        write_shard(path, X[bounds[i]:bounds[i + 1]])
        paths.append(path)
    write_labels(out / LABELS_FILE, batch.labels)
    dictionary.save(out / DICTIONARY_FILE)
    if pairs is not None:
        for name, P in zip(PAIRS_FILES, pairs):
            write_shard(out / name, P)
    save_json(out / "data_spec.json", data_spec.model_dump())

    if data_spec.shuffle:
        shuffled = ensure_dir(out / SHUFFLED_DIR)
        shuffle_shards(paths, [shard_path(shuffled, i) for i in range(len(paths))],
                       seed=data_spec.seed, tmp_dir=out)

    console.print(f"Wrote [green]{X.shape[0]}[/green] rows of d={X.shape[1]} "
                  f"in {len(paths)} shard(s) to {out}")
    return 0


def _require_out(spec: RunSpec) -> Path:
    if spec.out is None:
        raise InvalidArgumentError(f"{spec.command} needs --out")
    return Path(spec.out)


def _train_run(cfg: TrainConfig, data_dir: Path, out: Path, resume: Path = None, threads: int = 1):
    stream = BatchStream(paths=_training_shards(data_dir), batch_size=cfg.batch_size)
    ensure_dir(out)
    result = train(cfg, stream, out_dir=out, resume=resume, threads=threads,
                   show_progress=sys.stderr.isatty())
    save_json(out / "train_config.json", cfg.model_dump())
    return result


def train_command(spec: RunSpec) -> int:
    settings = load_settings(spec)
    data_dir = _require(spec.data, "--data directory")
    out = _require_out(spec)
    resume = _require(spec.resume, "--resume checkpoint") if spec.resume is not None else None
    result = _train_run(settings.train, data_dir, out, resume, spec.threads)
    last = result.log.records[-1] if result.log.records else None
    if last is not None:
        console.print(f"Finished at step [green]{last.step}[/green]: "
                      f"loss {last.losses.total:.5g}, dead fraction {last.dead_fraction:.4f}")
    return 0


def _evaluate_dir(ckpt: Checkpoint, data_dir: Path, eval_spec: EvalSpec,
                  labels_path: Path = None) -> EvalReport:
    X = _load_rows(data_dir)
    normalize = ckpt.config.normalize_inputs

    def prepare(M):
        return unit_normalize_rows(M) if normalize else M

    dictionary = None
    if (data_dir / DICTIONARY_FILE).exists():
        dictionary = SyntheticDictionary.load(data_dir / DICTIONARY_FILE)

    batch = None
    labels_path = labels_path or (data_dir / LABELS_FILE)
    if labels_path.exists():
        labels = read_labels(labels_path)
        if len(labels) != X.shape[0]:
            raise InvalidArgumentError(
                f"{labels_path} has {len(labels)} records for {X.shape[0]} rows")
        batch = LabeledBatch(X=prepare(X), labels=labels)

    pairs = None
    if all((data_dir / name).exists() for name in PAIRS_FILES):
        pairs = tuple(prepare(read_shard(data_dir / name)) for name in PAIRS_FILES)

    dead = ckpt.tracker.dead_fraction() if ckpt.tracker is not None else None
    return evaluate(ckpt.model, prepare(X), eval_spec, dictionary=dictionary, batch=batch,
                    pairs=pairs, dead_fraction=dead)


def _print_report(title: str, reports: Dict[str, EvalReport]) -> None:
    table = Table(title=title)
    table.add_column("metric")
    for name in reports:
        table.add_column(name, justify="right")
    first = next(iter(reports.values()))
    for metric in first.summary():
        cells = []
        for report in reports.values():
            value = report.summary()[metric]
            cells.append("-" if value is None else f"{value:.4f}")
        table.add_row(metric, *cells)
    console.print(table)


def eval_command(spec: RunSpec) -> int:
    settings = load_settings(spec) if spec.config is not None else None
    ckpt = load_checkpoint(_require(spec.model, "--model checkpoint"))
    data_dir = _require(spec.data, "--data directory")
    labels = _require(spec.labels, "--labels file") if spec.labels is not None else None
    out = _require_out(spec)
    eval_spec = settings.eval if settings is not None else EvalSpec()

    report = _evaluate_dir(ckpt, data_dir, eval_spec, labels)
    save_json(out, report.to_dict())
    _print_report(f"Evaluation of {spec.model}", {ckpt.config.mode: report})
    return 0


def flops_command(spec: RunSpec) -> int:
    settings = load_settings(spec)
    cfg = settings.train.model
    breakdown = flop_breakdown(cfg, with_experts=settings.train.with_experts)
    table = Table(title=f"Forward MACs per input (d={cfg.d}, m_top={cfg.m_top}, k={cfg.k}, "
                        f"s={cfg.s}, a={cfg.a})")
    table.add_column("term")
    table.add_column("MACs", justify="right")
    for term, value in breakdown.as_dict().items():
        table.add_row(term, f"{value:.4f}" if isinstance(value, float) else str(value))
    fraction = breakdown.top_encode_fraction
    table.add_row("top_encode_fraction", f"{fraction.numerator}/{fraction.denominator}")
    if breakdown.flat_equivalent:
        table.add_row("total / flat_equivalent", f"{breakdown.total / breakdown.flat_equivalent:.4f}")
    console.print(table)
    return 0


def inspect_command(spec: RunSpec) -> int:
    ckpt = load_checkpoint(_require(spec.model, "--model checkpoint"))
    data_dir = _require(spec.data, "--data directory")
    X = _load_rows(data_dir)
    if ckpt.config.normalize_inputs:
        X = unit_normalize_rows(X)
    meta = None
    if (data_dir / LABELS_FILE).exists():
        meta = read_labels(data_dir / LABELS_FILE)
        if len(meta) != X.shape[0]:
            meta = None
            logger.warning(f"Ignoring {LABELS_FILE}: row count does not match the shards")

    report = feature_report(ckpt.model, X, meta, top_m=spec.top)
    if spec.out is not None:
        save_json(spec.out, report.to_dict())

    table = Table(title=f"Most frequently selected latents ({spec.model})")
    table.add_column("latent", justify="right")
    table.add_column("hits", justify="right")
    table.add_column("max value", justify="right")
    table.add_column("top rows")
    active = sorted(((j, hits) for j, hits in report.latents.items() if hits),
                    key=lambda item: (-len(item[1]), -item[1][0].value, item[0]))
    for j, hits in active[:spec.top]:
        table.add_row(str(j), str(len(hits)), f"{hits[0].value:.4f}",
                      ", ".join(str(h.row) for h in hits[:5]))
    console.print(table)
    dead = sum(1 for hits in report.latents.values() if not hits)
    console.print(f"{dead} of {len(report.latents)} latents never selected")
    return 0


def _load_report(path: Path) -> EvalReport:
    path = Path(path)
    if path.is_dir():
        path = path / EVAL_FILE
    return EvalReport.from_dict(load_json(_require(path, "eval report")))


def compare_command(spec: RunSpec) -> int:
    if len(spec.runs) != 2:
        raise InvalidArgumentError(f"compare takes two runs, got {len(spec.runs)}")
    reports = {str(run): _load_report(run) for run in spec.runs}
    _print_report("Comparison", reports)
    return 0


ABLATION_GRID = [(ortho, l1) for ortho in (True, False) for l1 in (True, False)]


def ablate_command(spec: RunSpec) -> int:
    """Train and evaluate the ortho × ℓ1 grid on the same data and seed."""
    settings = load_settings(spec)
    data_dir = _require(spec.data, "--data directory")
    out = ensure_dir(_require_out(spec))
    reports = {}
    for ortho, l1 in ABLATION_GRID:
        name = f"ortho-{'on' if ortho else 'off'}_l1-{'on' if l1 else 'off'}"
        toggles = settings.train.toggles.model_copy(update={"ortho": ortho, "l1": l1})
        cfg = settings.train.model_copy(update={"toggles": toggles})
        run_dir = out / name
        _train_run(cfg, data_dir, run_dir, threads=spec.threads)
        ckpt = load_checkpoint(run_dir / CHECKPOINT_NAME)
        report = _evaluate_dir(ckpt, data_dir, settings.eval)
        save_json(run_dir / EVAL_FILE, report.to_dict())
        reports[name] = report
    _print_report("Regularizer ablation", reports)
    return 0


HANDLERS = {
    "gen-data": gen_data,
    "train": train_command,
    "eval": eval_command,
    "flops": flops_command,
    "inspect": inspect_command,
    "compare": compare_command,
    "ablate": ablate_command,
}


def dispatch(spec: RunSpec) -> int:
    """Run one command; 0 on success, 1 with a one-line diagnostic on failure."""
    handler = HANDLERS.get(spec.command)
    if handler is None:
        logger.error(f"Unknown command '{spec.command}'")
        return 2
    try:
        return handler(spec)
    except (HsaeError, OSError) as e:
        logger.error(f"{spec.command} failed: {e}")
        return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hsae", description="Hierarchical SAE workbench")
    parser.add_argument("--seed", type=int, default=None, help="Override every seed")
    parser.add_argument("--threads", type=int, default=None,
                        help="Worker threads (default HSAE_THREADS or 1)")
    parser.add_argument("--log-level", default=None, help="Logging level (default HSAE_LOG_LEVEL)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="Generate synthetic hierarchical shards")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="Train an H-SAE or baseline")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--labels", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--config", type=Path)

    p = sub.add_parser("flops", help="Print the forward-pass cost breakdown")
    p.add_argument("--config", type=Path)

    p = sub.add_parser("inspect", help="Report top-activating rows per feature")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--top", type=int, default=20)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("compare", help="Compare two evaluation reports or run directories")
    p.add_argument("runs", nargs=2, type=Path)

    p = sub.add_parser("ablate", help="Train and evaluate the regularizer grid")
    p.add_argument("--config", type=Path)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def parse_run_spec(argv: Sequence[str] = None) -> RunSpec:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    return RunSpec(
        command=args.command,
        config=getattr(args, "config", None),
        out=getattr(args, "out", None),
        seed=args.seed,
        data=getattr(args, "data", None),
        model=getattr(args, "model", None),
        labels=getattr(args, "labels", None),
        resume=getattr(args, "resume", None),
        top=getattr(args, "top", 20),
        runs=list(getattr(args, "runs", [])),
        threads=args.threads if args.threads is not None else get_threads(),
    )


def main(argv: Sequence[str] = None) -> int:
    try:
        spec = parse_run_spec(argv)
    except HsaeError as e:
        logger.error(str(e))
        return 1
    return dispatch(spec)


if __name__ == "__main__":
    sys.exit(main())
