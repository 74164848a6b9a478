"""Reconstruction errors, similarity Procrustes alignment and correlations.

All position metrics are in millimetres and pelvis-aligned (joint 0).
Functions accept a single cloud ``(P, 3)`` or a batch ``(n, P, 3)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels


class DegenerateError(ValueError):
    """Point configuration too degenerate for a similarity fit."""


@dataclass(frozen=True)
class MetricReport:
    pve_mm: float
    mpjpe_mm: float
    pa_mpjpe_mm: float
    pa_pve_mm: float

    FIELDS = ("pve_mm", "mpjpe_mm", "pa_mpjpe_mm", "pa_pve_mm")

    def as_array(self) -> np.ndarray:
        return np.array([self.pve_mm, self.mpjpe_mm, self.pa_mpjpe_mm, self.pa_pve_mm])


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, pts) -> np.ndarray:
        return self.scale * np.asarray(pts) @ self.rotation.T + self.translation


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.shape[-1] != 3 or pred.shape[-2] < 2:
        raise ValueError(f"expected (..., P>=2, 3) points, got {pred.shape}")
    return pred, gt


def _mean_dist(a, b):
    return np.sqrt(np.sum((a - b) ** 2, axis=-1)).mean(axis=-1)


def mpjpe(pred_joints, gt_joints):
    pred, gt = _check_pair(pred_joints, gt_joints)
    return _mean_dist(pred - pred[..., :1, :], gt - gt[..., :1, :])


def pve(pred_vertices, gt_vertices, pred_pelvis, gt_pelvis):
    """Vertex error after subtracting each side's pelvis joint ``(..., 3)``."""
    pred, gt = _check_pair(pred_vertices, gt_vertices)
    pp = np.asarray(pred_pelvis, dtype=np.float64)[..., None, :]
    gp = np.asarray(gt_pelvis, dtype=np.float64)[..., None, :]
    return _mean_dist(pred - pp, gt - gp)


def umeyama_batch(pred, gt) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Least-squares ``(s, R, t)`` with ``s R pred + t ~ gt`` for each item."""
    pred, gt = _check_pair(pred, gt)
    single = pred.ndim == 2
    if single:
        pred, gt = pred[None], gt[None]
    if pred.shape[-2] < 3:
        raise DegenerateError("need at least 3 points")
    n_pts = pred.shape[-2]
    mu_p = pred.mean(axis=1)
    mu_g = gt.mean(axis=1)
    xp = pred - mu_p[:, None]
    xg = gt - mu_g[:, None]
    cov = np.einsum("npi,npj->nij", xg, xp) / n_pts
    U, D, V = _kernels.svd3_batch(cov)
    if np.any(D[:, 1] <= 1e-12 * np.maximum(D[:, 0], 1e-300)):
        raise DegenerateError("covariance rank < 2 (collinear or coincident points)")
    sign = np.sign(np.linalg.det(U) * np.linalg.det(V))
    S = np.ones((len(D), 3))
    S[:, 2] = np.where(sign < 0, -1.0, 1.0)
    R = np.einsum("nij,nj,nkj->nik", U, S, V)
    var_p = np.sum(xp * xp, axis=(1, 2)) / n_pts
    s = np.sum(D * S, axis=1) / var_p
    t = mu_g - s[:, None] * np.einsum("nij,nj->ni", R, mu_p)
    if single:
        return s[0], R[0], t[0]
    return s, R, t


def umeyama(pred_points, gt_points) -> SimilarityTransform:
    s, R, t = umeyama_batch(pred_points, gt_points)
    return SimilarityTransform(float(s), R, t)


def _apply(s, R, t, pts):
    return s[..., None, None] * np.einsum("...ij,...pj->...pi", R, pts) + t[..., None, :]


def pelvis_similarity(pred, gt, pred_pelvis, gt_pelvis):
    """``(s, R, err)`` of the similarity about the pelvis minimising the mean point distance.

    The reported error is a mean of Euclidean distances, so the alignment
    minimises exactly that rather than the squared error. The identity is a
    feasible alignment, hence the aligned error never exceeds the
    pelvis-aligned one.
    """
    x = np.asarray(pred, dtype=np.float64) - np.asarray(pred_pelvis, dtype=np.float64)[:, None, :]
    y = np.asarray(gt, dtype=np.float64) - np.asarray(gt_pelvis, dtype=np.float64)[:, None, :]
    return _kernels.align_about_origin(x, y)


def _batched(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None] if a.ndim == 2 else a


def pa_mpjpe(pred, gt):
    """MPJPE after the optimal similarity alignment about the pelvis."""
    pred, gt = _check_pair(pred, gt)
    single = pred.ndim == 2
    p, g = _batched(pred), _batched(gt)
    err = pelvis_similarity(p, g, p[:, 0], g[:, 0])[2]
    return err[0] if single else err


def pa_pve(pred_vertices, gt_vertices, pred_joints, gt_joints):
    """PVE after the optimal similarity alignment of the vertices about the pelvis."""
    pv, gv = _check_pair(pred_vertices, gt_vertices)
    single = pv.ndim == 2
    pj, gj = _batched(pred_joints), _batched(gt_joints)
    err = pelvis_similarity(_batched(pv), _batched(gv), pj[:, 0], gj[:, 0])[2]
    return err[0] if single else err


def metric_table(pred_joints, gt_joints, topology) -> np.ndarray:
    """``(n, 4)`` array in :attr:`MetricReport.FIELDS` order."""
    from .skeleton import densify_vertices

    pj = np.asarray(pred_joints, dtype=np.float64).reshape(-1, *np.shape(pred_joints)[-2:])
    gj = np.asarray(gt_joints, dtype=np.float64).reshape(pj.shape)
    pv = densify_vertices(pj, topology)
    gv = densify_vertices(gj, topology)
    out = np.stack(
        [
            pve(pv, gv, pj[:, 0], gj[:, 0]),
            mpjpe(pj, gj),
            pa_mpjpe(pj, gj),
            pa_pve(pv, gv, pj, gj),
        ],
        axis=1,
    )
    return out


def metric_report(pred_joints, gt_joints, topology) -> MetricReport:
    return MetricReport(*metric_table(pred_joints, gt_joints, topology)[0])


def min_of_m(reports: Sequence[MetricReport]) -> MetricReport:
    """Each metric minimised independently over the list."""
    if not reports:
        raise ValueError("min_of_m needs at least one report")
    arr = np.array([r.as_array() for r in reports])
    return MetricReport(*arr.min(axis=0))


# ---------------------------------------------------------------------------
# correlations


def _check_corr(xs, ys):
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.size != y.size:
        raise ValueError(f"length mismatch {x.size} vs {y.size}")
    if x.size < 3:
        raise ValueError("need at least 3 values")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ValueError("correlation undefined for constant input")
    return x, y


def plcc(xs, ys) -> float:
    x, y = _check_corr(xs, ys)
    xc = x - x.mean()
    yc = y - y.mean()
    r = float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))
    return min(1.0, max(-1.0, r))


def average_ranks(xs) -> np.ndarray:
    """1-based ranks; tied values share the mean of their positions."""
    return _kernels.average_ranks(xs)


def srcc(xs, ys) -> float:
    x, y = _check_corr(xs, ys)
    return plcc(average_ranks(x), average_ranks(y))
