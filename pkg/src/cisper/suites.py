"""Ablation and prompt-length experiment drivers.

Both drivers take a ``runner(config) -> weighted_f1``; by default it is a
full train + evaluate through :mod:`cisper.pipeline`. Every run is seeded
from its own config, so rows do not depend on execution order.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from statistics import mean
from typing import Callable, List, Optional, Sequence

from .errors import CisperError, ConfigurationError
from .promptgen import ABLATION_MODES
from .train import RunConfig

logger = logging.getLogger(__name__)

Runner = Callable[[RunConfig], float]
ABLATION_ORDER = ("random", "context-only", "commonsense-only", "full")


class SuiteError(CisperError):
    def __init__(self, message, partial_rows):
        self.partial_rows = partial_rows
        super().__init__(message)


def pipeline_runner(experiment, out_dir=None, eval_split: str = "test") -> Runner:
    from .pipeline import run_training

    def run(cfg: RunConfig) -> float:
        sub = None
        if out_dir is not None:
            sub = Path(out_dir) / f"{cfg.mode}_ne{cfg.n_e}_np{cfg.n_p}_seed{cfg.seed}"
        _, _, report = run_training(cfg, experiment, sub, eval_split)
        return report.weighted_f1

    return run


def write_csv(rows: Sequence[dict], path) -> None:
    if not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def _repeat_scores(cfg: RunConfig, runner: Runner, seeds: Sequence[int]) -> List[float]:
    return [runner(cfg.replace(seed=s)) for s in seeds]


def ablation_suite(base_config: RunConfig, runner: Runner, out_dir=None, seeds: Optional[Sequence[int]] = None) -> List[dict]:
    """One row per information setting, with deltas against the random-prompt row."""
    seeds = list(seeds) if seeds is not None else [base_config.seed + r for r in range(base_config.repeats)]
    rows: List[dict] = []
    for mode in ABLATION_ORDER:
        commonsense, context = ABLATION_MODES[mode]
        try:
            scores = _repeat_scores(base_config.replace(mode=mode), runner, seeds)
        except Exception as exc:
            if out_dir is not None:
                write_csv(rows, Path(out_dir) / "ablation.partial.csv")
            raise SuiteError(f"ablation run for mode {mode!r} failed: {exc}", rows) from exc
        rows.append(
            {
                "mode": mode,
                "commonsense": "yes" if commonsense else "no",
                "context": "yes" if context else "no",
                "weighted_f1": mean(scores),
                "runs": len(scores),
            }
        )
    baseline = rows[0]["weighted_f1"]
    for row in rows:
        row["delta_vs_random"] = row["weighted_f1"] - baseline
    if out_dir is not None:
        write_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def sweep_prompt_length(
    base_config: RunConfig, values: Sequence[int], runner: Runner, out_dir=None, seeds: Optional[Sequence[int]] = None
) -> List[dict]:
    """Train/evaluate with N_e = N_p = n for each n; writes ``sweep.csv`` and ``sweep.png``."""
    values = list(values)
    if not values or any(int(v) < 1 for v in values):
        raise ConfigurationError(f"sweep values must be a non-empty list of integers >= 1, got {values}")
    seeds = list(seeds) if seeds is not None else [base_config.seed + r for r in range(base_config.repeats)]
    rows: List[dict] = []
    for n in values:
        n = int(n)
        try:
            scores = _repeat_scores(base_config.replace(n_e=n, n_p=n), runner, seeds)
        except Exception as exc:
            if out_dir is not None:
                write_csv(rows, Path(out_dir) / "sweep.partial.csv")
            raise SuiteError(f"sweep run for N={n} failed: {exc}", rows) from exc
        rows.append({"n": n, "pseudo_tokens": 4 * n, "weighted_f1": mean(scores), "runs": len(scores)})
    if out_dir is not None:
        write_csv(rows, Path(out_dir) / "sweep.csv")
        plot_sweep(rows, Path(out_dir) / "sweep.png")
    return rows


def plot_sweep(rows: Sequence[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r["n"] for r in rows]
    ys = [100 * r["weighted_f1"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(xs, ys, marker="o")
    ax.set_xlabel("N_e (= N_p)")
    ax.set_ylabel("weighted-F1 (%)")
    ax.set_xticks(xs)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
