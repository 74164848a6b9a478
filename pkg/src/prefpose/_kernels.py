"""Hot numeric kernels with a numba path and a pure-numpy fallback.

Set ``PREFPOSE_PURE_NUMPY=1`` before import to force the numpy path. The
numba path is also skipped when numba cannot be imported. Both paths follow
the same arithmetic; results agree to ~1e-12 but are not guaranteed to be
bit-identical across paths (within one path they are).
"""

from __future__ import annotations

import math
import os

import numpy as np

_FORCE_NUMPY = os.environ.get("PREFPOSE_PURE_NUMPY", "").strip() not in ("", "0")

try:
    if _FORCE_NUMPY:
        raise ImportError
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

SVD_TOL = 1e-12
SVD_MAX_SWEEPS = 60
_PAIRS = ((0, 1), (0, 2), (1, 2))


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# forward kinematics


def _fk_numpy(angles, root, parents, bone, rest_dir):
    n, J, _ = angles.shape
    joints = np.empty((n, J, 3))
    rots = np.empty((n, J, 3, 3))
    eye = np.eye(3)
    for j in range(J):
        r = angles[:, j, :]
        theta = np.sqrt(np.sum(r * r, axis=1))
        safe = np.where(theta < 1e-12, 1.0, theta)
        k = r / safe[:, None]
        K = np.zeros((n, 3, 3))
        K[:, 0, 1] = -k[:, 2]
        K[:, 0, 2] = k[:, 1]
        K[:, 1, 0] = k[:, 2]
        K[:, 1, 2] = -k[:, 0]
        K[:, 2, 0] = -k[:, 1]
        K[:, 2, 1] = k[:, 0]
        s = np.sin(theta)[:, None, None]
        c = (1.0 - np.cos(theta))[:, None, None]
        R = eye + s * K + c * (K @ K)
        R[theta < 1e-12] = eye
        p = parents[j]
        if p < 0:
            rots[:, j] = R
            joints[:, j] = root
        else:
            offset = bone[j] * rest_dir[j]
            joints[:, j] = joints[:, p] + rots[:, p] @ offset
            rots[:, j] = rots[:, p] @ R
    return joints


def _rodrigues_into(r0, r1, r2, R):
    theta = math.sqrt(r0 * r0 + r1 * r1 + r2 * r2)
    for a in range(3):
        for b in range(3):
            R[a, b] = 1.0 if a == b else 0.0
    if theta < 1e-12:
        return
    k0 = r0 / theta
    k1 = r1 / theta
    k2 = r2 / theta
    K = np.zeros((3, 3))
    K[0, 1] = -k2
    K[0, 2] = k1
    K[1, 0] = k2
    K[1, 2] = -k0
    K[2, 0] = -k1
    K[2, 1] = k0
    s = math.sin(theta)
    c = 1.0 - math.cos(theta)
    for a in range(3):
        for b in range(3):
            kk = K[a, 0] * K[0, b] + K[a, 1] * K[1, b] + K[a, 2] * K[2, b]
            R[a, b] += s * K[a, b] + c * kk


def _fk_loop(angles, root, parents, bone, rest_dir):
    n, J, _ = angles.shape
    joints = np.empty((n, J, 3))
    rots = np.empty((J, 3, 3))
    R = np.empty((3, 3))
    for i in range(n):
        for j in range(J):
            _rodrigues_into(angles[i, j, 0], angles[i, j, 1], angles[i, j, 2], R)
            p = parents[j]
            if p < 0:
                for a in range(3):
                    joints[i, j, a] = root[i, a]
                    for b in range(3):
                        rots[j, a, b] = R[a, b]
            else:
                for a in range(3):
                    acc = 0.0
                    for b in range(3):
                        acc += rots[p, a, b] * (bone[j] * rest_dir[j, b])
                    joints[i, j, a] = joints[i, p, a] + acc
                for a in range(3):
                    for b in range(3):
                        rots[j, a, b] = (
                            rots[p, a, 0] * R[0, b] + rots[p, a, 1] * R[1, b] + rots[p, a, 2] * R[2, b]
                        )
    return joints


# ---------------------------------------------------------------------------
# 3x3 two-sided Jacobi SVD


def _rot2(w, x, y, z):
    """Left/right rotations diagonalising [[w, x], [y, z]].

    Returns (g00, g01, g10, g11, c2, s2) where G = [[g00, g01], [g10, g11]]
    acts on rows and J = [[c2, s2], [-s2, c2]] acts on columns.
    """
    phi = math.atan2(y - x, w + z)
    c1 = math.cos(phi)
    s1 = math.sin(phi)
    p = c1 * w + s1 * y
    q = c1 * x + s1 * z
    r = -s1 * x + c1 * z
    if q == 0.0:
        c2 = 1.0
        s2 = 0.0
    else:
        zeta = (r - p) / (2.0 * q)
        t = (1.0 if zeta >= 0.0 else -1.0) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
        c2 = 1.0 / math.sqrt(1.0 + t * t)
        s2 = t * c2
    g00 = c2 * c1 + s2 * s1
    g01 = c2 * s1 - s2 * c1
    g10 = s2 * c1 - c2 * s1
    g11 = s2 * s1 + c2 * c1
    return g00, g01, g10, g11, c2, s2


def _svd3_single(A0, U, S, V):
    A = A0.copy()
    for a in range(3):
        for b in range(3):
            U[a, b] = 1.0 if a == b else 0.0
            V[a, b] = 1.0 if a == b else 0.0
    norm = 0.0
    for a in range(3):
        for b in range(3):
            norm += A[a, b] * A[a, b]
    tol = SVD_TOL * math.sqrt(norm)
    for _ in range(SVD_MAX_SWEEPS):
        rotated = False
        for pair in range(3):
            if pair == 0:
                p, q = 0, 1
            elif pair == 1:
                p, q = 0, 2
            else:
                p, q = 1, 2
            if abs(A[p, q]) <= tol and abs(A[q, p]) <= tol:
                continue
            rotated = True
            g00, g01, g10, g11, c2, s2 = _rot2(A[p, p], A[p, q], A[q, p], A[q, q])
            for k in range(3):
                ap = A[p, k]
                aq = A[q, k]
                A[p, k] = g00 * ap + g01 * aq
                A[q, k] = g10 * ap + g11 * aq
            for k in range(3):
                ap = A[k, p]
                aq = A[k, q]
                A[k, p] = c2 * ap - s2 * aq
                A[k, q] = s2 * ap + c2 * aq
            for k in range(3):
                up = U[k, p]
                uq = U[k, q]
                U[k, p] = g00 * up + g01 * uq
                U[k, q] = g10 * up + g11 * uq
                vp = V[k, p]
                vq = V[k, q]
                V[k, p] = c2 * vp - s2 * vq
                V[k, q] = s2 * vp + c2 * vq
        if not rotated:
            break
    for i in range(3):
        S[i] = A[i, i]
        if S[i] < 0.0:
            S[i] = -S[i]
            for k in range(3):
                U[k, i] = -U[k, i]
    # insertion sort, descending
    for i in range(1, 3):
        j = i
        while j > 0 and S[j] > S[j - 1]:
            tmp = S[j]
            S[j] = S[j - 1]
            S[j - 1] = tmp
            for k in range(3):
                tmp = U[k, j]
                U[k, j] = U[k, j - 1]
                U[k, j - 1] = tmp
                tmp = V[k, j]
                V[k, j] = V[k, j - 1]
                V[k, j - 1] = tmp
            j -= 1


def _svd3_loop(mats):
    n = mats.shape[0]
    U = np.empty((n, 3, 3))
    S = np.empty((n, 3))
    V = np.empty((n, 3, 3))
    for i in range(n):
        _svd3_single(mats[i], U[i], S[i], V[i])
    return U, S, V


def _svd3_numpy(mats):
    """Vectorised over the batch: every matrix runs the same sweep schedule and
    converged pairs get the identity rotation, which leaves them untouched."""
    A = np.array(mats, dtype=np.float64, copy=True)
    n = A.shape[0]
    U = np.tile(np.eye(3), (n, 1, 1))
    V = np.tile(np.eye(3), (n, 1, 1))
    tol = SVD_TOL * np.sqrt(np.sum(A * A, axis=(1, 2)))
    idx = np.arange(n)
    for _ in range(SVD_MAX_SWEEPS):
        any_rot = False
        for p, q in _PAIRS:
            w, x, y, z = A[:, p, p], A[:, p, q], A[:, q, p], A[:, q, q]
            active = ~((np.abs(x) <= tol) & (np.abs(y) <= tol))
            if not active.any():
                continue
            any_rot = True
            phi = np.arctan2(y - x, w + z)
            c1, s1 = np.cos(phi), np.sin(phi)
            pp = c1 * w + s1 * y
            qq = c1 * x + s1 * z
            rr = -s1 * x + c1 * z
            nz = qq != 0.0
            zeta = np.where(nz, (rr - pp) / np.where(nz, 2.0 * qq, 1.0), 0.0)
            sign = np.where(zeta >= 0.0, 1.0, -1.0)
            t = np.where(nz, sign / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta)), 0.0)
            c2 = np.where(nz, 1.0 / np.sqrt(1.0 + t * t), 1.0)
            s2 = np.where(nz, t * c2, 0.0)
            g00 = c2 * c1 + s2 * s1
            g01 = c2 * s1 - s2 * c1
            g10 = s2 * c1 - c2 * s1
            g11 = s2 * s1 + c2 * c1
            sel = idx[active]
            g00, g01, g10, g11 = g00[sel, None], g01[sel, None], g10[sel, None], g11[sel, None]
            c2, s2 = c2[sel, None], s2[sel, None]
            ap, aq = A[sel, p, :].copy(), A[sel, q, :].copy()
            A[sel, p, :] = g00 * ap + g01 * aq
            A[sel, q, :] = g10 * ap + g11 * aq
            ap, aq = A[sel, :, p].copy(), A[sel, :, q].copy()
            A[sel, :, p] = c2 * ap - s2 * aq
            A[sel, :, q] = s2 * ap + c2 * aq
            up, uq = U[sel, :, p].copy(), U[sel, :, q].copy()
            U[sel, :, p] = g00 * up + g01 * uq
            U[sel, :, q] = g10 * up + g11 * uq
            vp, vq = V[sel, :, p].copy(), V[sel, :, q].copy()
            V[sel, :, p] = c2 * vp - s2 * vq
            V[sel, :, q] = s2 * vp + c2 * vq
        if not any_rot:
            break
    S = np.stack([A[:, 0, 0], A[:, 1, 1], A[:, 2, 2]], axis=1)
    neg = S < 0.0
    S = np.abs(S)
    U = np.where(neg[:, None, :], -U, U)
    order = np.argsort(-S, axis=1, kind="stable")
    S = np.take_along_axis(S, order, axis=1)
    U = np.take_along_axis(U, order[:, None, :], axis=2)
    V = np.take_along_axis(V, order[:, None, :], axis=2)
    return U, S, V


# ---------------------------------------------------------------------------
# similarity alignment about the origin minimising the mean point distance

ALIGN_MAX_ITERS = 200
ALIGN_TOL = 1e-12


def _fit_sr_single(x, y, w, U, S, V, R):
    """Weighted least-squares (s, R) for sum_i w_i |s R x_i - y_i|^2; R written in place."""
    C = np.zeros((3, 3))
    var = 0.0
    for i in range(x.shape[0]):
        for a in range(3):
            var += w[i] * x[i, a] * x[i, a]
            for b in range(3):
                C[a, b] += w[i] * y[i, a] * x[i, b]
    _svd3_single(C, U, S, V)
    detu = (U[0, 0] * (U[1, 1] * U[2, 2] - U[1, 2] * U[2, 1]) - U[0, 1] * (U[1, 0] * U[2, 2] - U[1, 2] * U[2, 0])
            + U[0, 2] * (U[1, 0] * U[2, 1] - U[1, 1] * U[2, 0]))
    detv = (V[0, 0] * (V[1, 1] * V[2, 2] - V[1, 2] * V[2, 1]) - V[0, 1] * (V[1, 0] * V[2, 2] - V[1, 2] * V[2, 0])
            + V[0, 2] * (V[1, 0] * V[2, 1] - V[1, 1] * V[2, 0]))
    d3 = -1.0 if detu * detv < 0.0 else 1.0
    for a in range(3):
        for b in range(3):
            R[a, b] = U[a, 0] * V[b, 0] + U[a, 1] * V[b, 1] + d3 * U[a, 2] * V[b, 2]
    tr = S[0] + S[1] + d3 * S[2]
    return tr / var if var > 0.0 else 1.0


def _mean_resid_single(s, R, x, y, d):
    tot = 0.0
    for i in range(x.shape[0]):
        acc = 0.0
        for a in range(3):
            r = s * (R[a, 0] * x[i, 0] + R[a, 1] * x[i, 1] + R[a, 2] * x[i, 2]) - y[i, a]
            acc += r * r
        d[i] = math.sqrt(acc)
        tot += d[i]
    return tot / x.shape[0]


def _align_loop(x, y, max_iters, tol):
    n, P, _ = x.shape
    s_out = np.empty(n)
    R_out = np.empty((n, 3, 3))
    err_out = np.empty(n)
    U = np.empty((3, 3))
    V = np.empty((3, 3))
    S = np.empty(3)
    R = np.empty((3, 3))
    d = np.empty(P)
    w = np.empty(P)
    for k in range(n):
        xk = x[k]
        yk = y[k]
        ymax = 0.0
        for i in range(P):
            for a in range(3):
                if abs(yk[i, a]) > ymax:
                    ymax = abs(yk[i, a])
        floor = 1e-9 * (ymax + 1.0)
        for a in range(3):
            for b in range(3):
                R_out[k, a, b] = 1.0 if a == b else 0.0
        s_best = 1.0
        best = _mean_resid_single(1.0, R_out[k], xk, yk, d)
        for i in range(P):
            w[i] = 1.0
        s_new = _fit_sr_single(xk, yk, w, U, S, V, R)
        e_new = _mean_resid_single(s_new, R, xk, yk, d)
        if e_new < best:
            best = e_new
            s_best = s_new
            R_out[k] = R
        for _ in range(max_iters):
            _mean_resid_single(s_best, R_out[k], xk, yk, d)
            for i in range(P):
                w[i] = 1.0 / max(d[i], floor)
            s_new = _fit_sr_single(xk, yk, w, U, S, V, R)
            e_new = _mean_resid_single(s_new, R, xk, yk, d)
            if not e_new < best:
                break
            gain = best - e_new
            best = e_new
            s_best = s_new
            R_out[k] = R
            if gain <= tol * best:
                break
        s_out[k] = s_best
        err_out[k] = best
    return s_out, R_out, err_out


def _fit_sr_numpy(x, y, w):
    U, D, V = _svd3_numpy(np.einsum("np,npi,npj->nij", w, y, x))
    S = np.ones_like(D)
    S[:, 2] = np.where(np.linalg.det(U) * np.linalg.det(V) < 0, -1.0, 1.0)
    R = np.einsum("nij,nj,nkj->nik", U, S, V)
    var = np.einsum("np,npi,npi->n", w, x, x)
    return np.sum(D * S, axis=1) / np.where(var > 0, var, np.inf), R


def _resid_numpy(s, R, x, y):
    return np.sqrt(np.sum((s[:, None, None] * np.einsum("nij,npj->npi", R, x) - y) ** 2, axis=-1))


def _align_numpy(x, y, max_iters, tol):
    """Batch version of the same schedule; finished items are dropped from the active set."""
    n, P, _ = x.shape
    s = np.ones(n)
    R = np.tile(np.eye(3), (n, 1, 1))
    best = _resid_numpy(s, R, x, y).mean(axis=1)
    s_ls, R_ls = _fit_sr_numpy(x, y, np.ones((n, P)))
    s_ls = np.where(np.isfinite(s_ls), s_ls, 1.0)
    e_ls = _resid_numpy(s_ls, R_ls, x, y).mean(axis=1)
    take = e_ls < best
    s[take], R[take], best[take] = s_ls[take], R_ls[take], e_ls[take]
    floor = 1e-9 * (np.abs(y).max(axis=(1, 2)) + 1.0)
    active = np.arange(n)
    for _ in range(max_iters):
        if len(active) == 0:
            break
        d = _resid_numpy(s[active], R[active], x[active], y[active])
        s_new, R_new = _fit_sr_numpy(x[active], y[active], 1.0 / np.maximum(d, floor[active, None]))
        s_new = np.where(np.isfinite(s_new), s_new, 1.0)
        e_new = _resid_numpy(s_new, R_new, x[active], y[active]).mean(axis=1)
        better = e_new < best[active]
        gain = best[active] - e_new
        b = active[better]
        s[b], R[b], best[b] = s_new[better], R_new[better], e_new[better]
        active = active[better & (gain > tol * e_new)]
    return s, R, best


# ---------------------------------------------------------------------------
# average ranks with ties


def _rank_numpy(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(n)
    # boundaries of tie groups in sorted order
    starts = np.flatnonzero(np.concatenate(([True], xs[1:] != xs[:-1])))
    ends = np.concatenate((starts[1:], [n]))
    avg = 0.5 * (starts + ends - 1) + 1.0
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def _rank_loop(x):
    n = x.shape[0]
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(n)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and x[order[j + 1]] == x[order[i]]:
            j += 1
        r = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = r
        i = j + 1
    return ranks


if HAVE_NUMBA:
    _rodrigues_into = njit(cache=True)(_rodrigues_into)
    _fk_fast = njit(cache=True)(_fk_loop)
    _rot2 = njit(cache=True)(_rot2)
    _svd3_single = njit(cache=True)(_svd3_single)
    _svd3_fast = njit(cache=True)(_svd3_loop)
    _rank_fast = njit(cache=True)(_rank_loop)
    _fit_sr_single = njit(cache=True)(_fit_sr_single)
    _mean_resid_single = njit(cache=True)(_mean_resid_single)
    _align_fast = njit(cache=True)(_align_loop)


def forward_kinematics_batch(angles, root, parents, bone, rest_dir) -> np.ndarray:
    """(n, J, 3) axis-angles and (n, 3) roots -> (n, J, 3) joint positions."""
    angles = np.ascontiguousarray(angles, dtype=np.float64)
    root = np.ascontiguousarray(root, dtype=np.float64)
    parents = np.ascontiguousarray(parents, dtype=np.int64)
    bone = np.ascontiguousarray(bone, dtype=np.float64)
    rest_dir = np.ascontiguousarray(rest_dir, dtype=np.float64)
    if HAVE_NUMBA:
        return _fk_fast(angles, root, parents, bone, rest_dir)
    return _fk_numpy(angles, root, parents, bone, rest_dir)


def svd3_batch(mats) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched 3x3 SVD, ``A = U @ diag(S) @ V.T`` with S descending and >= 0."""
    mats = np.ascontiguousarray(mats, dtype=np.float64).reshape(-1, 3, 3)
    if HAVE_NUMBA:
        return _svd3_fast(mats)
    return _svd3_numpy(mats)


def average_ranks(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64).reshape(-1)
    if HAVE_NUMBA:
        return _rank_fast(x)
    return _rank_numpy(x)


def align_about_origin(x, y) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per item ``(s, R, err)`` minimising ``err = mean_i |s R x_i - y_i|`` over scale and rotation.

    Majorise-minimise from the better of the identity and the least-squares
    fit: each step is a least-squares fit weighted by the inverse current
    distances, accepted only if it lowers the mean distance.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if HAVE_NUMBA:
        return _align_fast(x, y, ALIGN_MAX_ITERS, ALIGN_TOL)
    return _align_numpy(x, y, ALIGN_MAX_ITERS, ALIGN_TOL)


# exposed so tests and the benchmark can run both paths side by side
numpy_impls = {"fk": _fk_numpy, "svd3": _svd3_numpy, "rank": _rank_numpy, "align": _align_numpy}
