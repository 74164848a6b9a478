"""Score-threshold filtering of labelled sets and the retrain comparison."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import DenoiserConfig, NoiseSchedule, TrainConfig, train_base
from .evaluation import EvalResult, evaluate
from .scorer import ScorerModel, normalized
from .skeleton import Dataset, fmt_float

DEFAULT_TAU = 0.6


@dataclass
class CleaningReport:
    n_total: int
    n_kept: int
    tau: float
    ids: np.ndarray
    scores: np.ndarray  # normalized, aligned with ids
    kept_ids: np.ndarray  # sorted

    def to_text(self) -> str:
        lines = [f"n_total {self.n_total}", f"n_kept {self.n_kept}", f"tau {fmt_float(self.tau)}"]
        lines.append("kept " + " ".join(str(int(i)) for i in self.kept_ids))
        lines.append("# sample_id score kept")
        keep = set(int(i) for i in self.kept_ids)
        for i, s in zip(self.ids, self.scores):
            lines.append(f"{int(i)} {fmt_float(s)} {int(int(i) in keep)}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def score_dataset(scorer: ScorerModel, ds: Dataset) -> np.ndarray:
    """Normalized score of each stored label pose against its observation."""
    return normalized(scorer.score_candidates(ds.joints3d[:, None], ds)[:, 0])


def clean(ds: Dataset, scores, tau: float = DEFAULT_TAU) -> tuple[Dataset, CleaningReport]:
    """Keep samples with score >= tau. The input dataset is not modified."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (len(ds),):
        raise ValueError(f"expected {len(ds)} scores, got shape {scores.shape}")
    keep = np.flatnonzero(scores >= tau)
    keep = keep[np.argsort(ds.ids[keep], kind="stable")]
    report = CleaningReport(len(ds), len(keep), float(tau), ds.ids.copy(), scores.copy(), ds.ids[keep].copy())
    return ds.subset(keep), report


@dataclass
class RetrainComparison:
    full: EvalResult
    cleaned: EvalResult
    n_full: int
    n_cleaned: int

    def to_text(self) -> str:
        from .metrics import MetricReport

        head = f"{'train set':<10}{'n':>8}" + "".join(f"{f:>14}" for f in MetricReport.FIELDS)
        rows = [head]
        for name, n, res in (("full", self.n_full, self.full), ("cleaned", self.n_cleaned, self.cleaned)):
            rows.append(f"{name:<10}{n:>8}" + "".join(f"{v:>14.6f}" for v in res.mean.as_array()))
        return "\n".join(rows) + "\n"


def compare_retrain(
    full: Dataset,
    cleaned: Dataset,
    heldout: Dataset,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    seed: int,
    M: int = 10,
    model_cfg: DenoiserConfig | None = None,
) -> RetrainComparison:
    """Train two base models that differ only in their training set; evaluate both."""
    if len(full) == 0 or len(cleaned) == 0:
        raise ValueError("both datasets must be non-empty")
    results = []
    for ds in (full, cleaned):
        model, _ = train_base(ds, schedule, cfg, seed, model_cfg)
        results.append(evaluate(model, heldout, schedule, seed, M))
    return RetrainComparison(results[0], results[1], len(full), len(cleaned))
