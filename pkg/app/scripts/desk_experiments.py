#!/usr/bin/env python3
"""
Desk-scale comparison of the H-SAE against the flat TopK baseline on
synthetic hierarchical data: reconstruction, dead latents, planted-parent
recovery, paired-view divergence, absorption, and the cost model.

Run from the app directory:
    python scripts/desk_experiments.py --seeds 0 1 2
"""

import argparse
import logging
import os
import sys
from fractions import Fraction

import numpy as np
from rich.console import Console
from rich.table import Table

# Add parent directory to path to import app modules
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from components.datagen import DictionarySpec, plant_dictionary, sample_activations, sample_paired_views  # noqa: E402
from components.evaluation import EvalSpec, evaluate  # noqa: E402
from components.hsae_model import HsaeConfig, flop_terms, forward_hsae, init_model  # noqa: E402
from components.linalg import MacCounter  # noqa: E402
from components.optim import OptConfig  # noqa: E402
from components.trainer import Toggles, TrainConfig, train  # noqa: E402
from utils.config import setup_logging  # noqa: E402

console = Console()
logger = logging.getLogger(__name__)


def desk_configs(seed: int, epochs: int, batch_size: int):
    model = HsaeConfig(d=64, m_top=256, k=4, a=16, s=4)
    opt = OptConfig(warmup_steps=100)
    common = dict(model=model, opt=opt, epochs=epochs, batch_size=batch_size, seed=seed,
                  log_every=50, checkpoint_every=0)
    return {
        "hsae": TrainConfig(mode="hsae", **common),
        "baseline": TrainConfig(mode="baseline", **common),
        "baseline_bare": TrainConfig(mode="baseline", toggles=Toggles(ortho=False), **common),
    }


def run_seed(seed: int, samples: int, epochs: int, batch_size: int, n_pairs: int):
    spec = DictionarySpec(d=64, n_parents=32, n_children=8, noise_sigma=0.05,
                          n_samples=samples, seed=seed)
    dictionary = plant_dictionary(spec)
    train_batch = sample_activations(dictionary, samples, spec)
    held_out = sample_activations(dictionary, min(samples, 20000), spec,
                                  rng=np.random.default_rng([seed, 3]))
    pairs = sample_paired_views(dictionary, n_pairs, spec)

    results = {}
    for name, cfg in desk_configs(seed, epochs, batch_size).items():
        console.print(f"[cyan]seed {seed}: training {name}[/cyan]")
        result = train(cfg, train_batch, show_progress=True)
        results[name] = evaluate(result.model, held_out.X, EvalSpec(), dictionary=dictionary,
                                 batch=held_out, pairs=pairs,
                                 dead_fraction=result.tracker.dead_fraction())
    return results


def cost_check() -> bool:
    cfg = HsaeConfig(d=128, m_top=1024, k=8, s=4, a=16)
    model = init_model(cfg, np.random.default_rng(0))
    counter = MacCounter()
    forward_hsae(model, np.random.default_rng(1).standard_normal(cfg.d), counter)
    analytic = flop_terms(cfg.d, cfg.m_top, cfg.k, cfg.s, cfg.a)
    matches = counter.total == analytic.total
    share = analytic.top_encode_fraction
    console.print(f"MAC count {counter.total} vs analytic {analytic.total}; "
                  f"top-level encode share {share} = {float(share):.4f}")
    return matches and share == Fraction(131072, 141312)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--samples", type=int, default=200_000)
    parser.add_argument("--epochs", type=int, default=4)
    parser.add_argument("--batch-size", type=int, default=1024)
    parser.add_argument("--pairs", type=int, default=1000)
    args = parser.parse_args()
    setup_logging("WARNING")

    per_seed = {seed: run_seed(seed, args.samples, args.epochs, args.batch_size, args.pairs)
                for seed in args.seeds}

    table = Table(title="Desk experiments")
    table.add_column("seed", justify="right")
    table.add_column("model")
    for metric in ("1-EV", "recovery", "paired divergence", "absorption", "dead fraction"):
        table.add_column(metric, justify="right")
    for seed, reports in per_seed.items():
        for name, report in reports.items():
            cells = ["-" if v is None else f"{v:.4f}" for v in report.summary().values()]
            table.add_row(str(seed), name, *cells)
    console.print(table)

    def wins(predicate):
        return sum(1 for reports in per_seed.values() if predicate(reports))

    n = len(per_seed)
    need = (2 * n + 2) // 3
    checks = {
        "reconstruction: H-SAE 1-EV >= 5% lower": wins(
            lambda r: r["hsae"].one_minus_ev <= 0.95 * r["baseline"].one_minus_ev) >= need,
        "cost: counted MACs match, top encode share exact": cost_check(),
        "dead latents: H-SAE < 1%, bare baseline higher": all(
            r["hsae"].dead_fraction < 0.01
            and r["baseline_bare"].dead_fraction > r["hsae"].dead_fraction
            for r in per_seed.values()),
        "recovery: mean matched cosine >= 0.8": wins(
            lambda r: r["hsae"].recovery.mean_max_cosine >= 0.8) >= need,
        "divergence: H-SAE <= baseline": all(
            r["hsae"].paired_divergence <= r["baseline"].paired_divergence
            for r in per_seed.values()),
        "absorption: H-SAE < baseline": wins(
            lambda r: (r["hsae"].absorption is not None and r["baseline"].absorption is not None
                       and r["hsae"].absorption < r["baseline"].absorption)) >= need,
    }
    for name, ok in checks.items():
        style = "bold green" if ok else "bold red"
        console.print(f"[{style}]{'PASS' if ok else 'FAIL'}[/{style}] {name}")
    return all(checks.values())


if __name__ == "__main__":
    success = main()
    sys.exit(0 if success else 1)
