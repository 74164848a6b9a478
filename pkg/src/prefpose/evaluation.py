"""Min-of-M evaluation of a denoiser and plain-text report rows."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffusion import CandidateSet, DenoiserModel, NoiseSchedule, sample
from .metrics import MetricReport, metric_table
from .skeleton import Dataset


@dataclass
class EvalResult:
    sample_ids: np.ndarray
    per_sample: np.ndarray  # (n, 4) min over M of each metric
    M: int

    @property
    def mean(self) -> MetricReport:
        return MetricReport(*self.per_sample.mean(axis=0))


def candidate_metrics(cands: CandidateSet, ds: Dataset, rows=None) -> np.ndarray:
    """(n, M, 4) metrics of every candidate against the label pose."""
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
    n, M = cands.joints3d.shape[:2]
    J = ds.topology.num_joints
    gt = np.repeat(ds.joints3d[rows], M, axis=0)
    return metric_table(cands.joints3d.reshape(-1, J, 3), gt, ds.topology).reshape(n, M, 4)


def evaluate(model: DenoiserModel, ds: Dataset, schedule: NoiseSchedule, seed: int, M: int) -> EvalResult:
    cands = sample(model, ds, schedule, seed, M, purpose="eval-sample")
    return EvalResult(cands.sample_ids, candidate_metrics(cands, ds).min(axis=1), M)


def format_rows(ids, table) -> str:
    """``id pve mpjpe pa_mpjpe pa_pve`` per line, six decimals."""
    lines = ["# sample_id " + " ".join(MetricReport.FIELDS)]
    for sid, row in zip(ids, np.asarray(table)):
        lines.append(f"{int(sid)} " + " ".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def write_rows(path, ids, table) -> None:
    Path(path).write_text(format_rows(ids, table))


def format_summary(named: dict[str, EvalResult]) -> str:
    """Aligned min-of-M table, one line per model."""
    head = f"{'model':<16}{'M':>4}" + "".join(f"{f:>14}" for f in MetricReport.FIELDS)
    lines = [head]
    for name, res in named.items():
        lines.append(f"{name:<16}{res.M:>4}" + "".join(f"{v:>14.6f}" for v in res.mean.as_array()))
    return "\n".join(lines) + "\n"
