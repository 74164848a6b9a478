"""Acceptance criteria, one PASS/FAIL line each (run with ``-s`` to see them).

The default-config pipeline runs come from the ``accept_runs`` fixture; see
``conftest.py`` for reusing them across invocations.
"""

import statistics
import time

import numpy as np

from prefpose.cleaning import clean
from prefpose.diffusion import DenoiserConfig, DenoiserModel, build_schedule, q_sample
from prefpose.gradcheck import TOLERANCE, run_gradchecks
from prefpose.metrics import MetricReport, metric_table, mpjpe, pa_mpjpe, umeyama_batch
from prefpose.preference import (
    DpoConfig,
    build_preference_dataset,
    build_preference_dataset_gt,
    dpo_loss_tensor,
    select_pairs,
)
from prefpose.rng import stream
from prefpose.scorer import eval_scores, ranknet_pair_loss, scorer_loss
from prefpose.skeleton import GenConfig, generate_dataset

from helpers import SeedRun, run_tiny, table_row

SEEDS = (7, 8, 9)


def report(n: int, ok: bool, detail: str) -> None:
    print(f"\n{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


def _random_rotations(rng, n):
    q, r = np.linalg.qr(rng.normal(size=(n, 3, 3)))
    q = q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :]
    q[np.linalg.det(q) < 0, :, 0] *= -1
    return q


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    reps = run_gradchecks(7)
    dt = time.perf_counter() - t0
    worst = max(r.max_rel_err for r in reps.values())
    detail = ", ".join(f"{k} {r.max_rel_err:.2e} ({r.n_checked} coords, {r.n_kinks} kinks)" for k, r in reps.items())
    report(1, worst < TOLERANCE and dt < 60, f"{detail}; {dt:.1f} s")


def test_criterion_2_procrustes():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    n = 1000
    P = rng.normal(size=(n, 16, 3)) * 200
    s = rng.uniform(0.5, 2.0, n)
    R = _random_rotations(rng, n)
    t = rng.normal(size=(n, 3)) * 500
    G = s[:, None, None] * np.einsum("nij,npj->npi", R, P) + t[:, None]
    pa = pa_mpjpe(P, G)
    s_hat, R_hat, t_hat = umeyama_batch(P, G)
    orth = np.abs(np.einsum("nji,njk->nik", R_hat, R_hat) - np.eye(3)).max()
    det = np.abs(np.linalg.det(R_hat) - 1).max()
    # noisy clouds: no random similarity may beat the least-squares residual
    Q = P[:50]
    H = G[:50] + rng.normal(size=Q.shape) * 40
    s1, R1, t1 = umeyama_batch(Q, H)
    best = np.sum((s1[:, None, None] * np.einsum("nij,npj->npi", R1, Q) + t1[:, None] - H) ** 2, axis=(1, 2))
    beaten = 0
    for k in range(200):
        sr = s1 * rng.uniform(0.8, 1.25, 50)
        # alternate global draws with small perturbations of the fitted rotation
        if k % 2:
            Rr = _random_rotations(rng, 50)
        else:
            q, r = np.linalg.qr(np.eye(3) + 0.05 * rng.normal(size=(50, 3, 3)))
            Rr = R1 @ (q * np.sign(np.diagonal(r, axis1=1, axis2=2))[:, None, :])
            Rr[np.linalg.det(Rr) < 0] = R1[np.linalg.det(Rr) < 0]
        tr = t1 + rng.normal(size=(50, 3)) * 10
        res = np.sum((sr[:, None, None] * np.einsum("nij,npj->npi", Rr, Q) + tr[:, None] - H) ** 2, axis=(1, 2))
        beaten += int(np.sum(res < best - 1e-9 * best))
    dt = time.perf_counter() - t0
    ok = pa.max() < 1e-8 and orth < 1e-9 and det < 1e-9 and beaten == 0 and dt < 30
    report(2, ok, f"max pa error {pa.max():.2e}, orthogonality {orth:.1e}, det {det:.1e}, oracle wins {beaten}; {dt:.1f} s")


def test_criterion_3_loss_anchors():
    a = ranknet_pair_loss(1.7, 1.7, 1)
    tied = [MetricReport(5, 5, 5, 5)] * 2
    b = scorer_loss([0.2, 0.2], tied)
    ds = generate_dataset(GenConfig(n_samples=3), 0, "anchor")
    sched = build_schedule()
    ref = DenoiserModel.init(DenoiserConfig(num_joints=16), stream(0, "anchor"))
    from prefpose.diffusion import dataset_tokens, joints_to_latent

    x0 = joints_to_latent(ds.joints3d)
    tok, vis = dataset_tokens(ds)
    rng = np.random.default_rng(0)
    eps = rng.normal(size=x0.shape)
    c = dpo_loss_tensor(ref.copy(), ref, x0, x0 + 0.3 * eps, np.array([1, 50, 100]), eps, eps, tok, vis, sched, DpoConfig()).item()
    ok = abs(a - np.log(2)) <= 1e-9 and abs(b - 8 * np.log(2)) <= 1e-9 and abs(c - np.log(2)) <= 1e-6
    report(3, ok, f"pair {a:.12f}, tied M=2 total {b:.12f}, dpo at theta=ref {c:.9f}")


def test_criterion_4_schedule():
    sched = build_schedule()
    ident = np.abs(sched.alpha**2 + sched.sigma**2 - 1).max()
    rng = np.random.default_rng(4)
    x0 = np.array([1.2, -0.7, 0.05])
    worst = 0.0
    for t in range(1, sched.T + 1, 9):
        eps = rng.normal(size=(100_000, 3))
        xt = q_sample(np.broadcast_to(x0, eps.shape), t, eps, sched)
        a, s = sched.alpha[t - 1], sched.sigma[t - 1]
        worst = max(worst, np.abs(xt.mean(0) - a * x0).max() / max(np.abs(a * x0).max(), s))
        worst = max(worst, np.abs(xt.std(0) / s - 1).max())
    report(4, ident < 1e-12 and worst < 0.01, f"max |a^2+s^2-1| {ident:.1e}, worst relative Monte-Carlo gap {worst:.4f}")


def test_criterion_5_scorer_quality(accept_runs):
    r = accept_runs[7]
    dt = sum(r.step(c) for c in ("gen-data", "train-scorer", "eval-scorer"))
    text = r.report("eval-scorer-{h}.txt")
    scorer_srcc = float(table_row(text, "mpjpe_mm")[2])
    oracle_srcc = float(table_row(text.split("oracle scorer")[1], "mpjpe_mm")[2])
    # ranks of the normalized score equal ranks of the raw score (logistic is monotone)
    labels = np.random.default_rng(5).uniform(20, 200, size=(50, 8, 4))
    direct = eval_scores(-labels[..., 1], labels).srcc["mpjpe_mm"]
    ok = scorer_srcc >= 0.6 and oracle_srcc == 1.0 and direct == 1.0 and dt < 300
    report(5, ok, f"seed 7 SRCC vs -MPJPE {scorer_srcc:.4f}, oracle {oracle_srcc:.4f}; {dt:.0f} s")


def _dpo_gain(r: SeedRun) -> tuple[float, float]:
    dt = sum(
        r.step(*c)
        for c in (("gen-data",), ("train-base",), ("train-scorer",), ("build-prefs",), ("dpo-finetune",), ("evaluate",))
    )
    text = r.report("evaluate-{h}.txt")
    base = float(table_row(text, "train-base")[3])
    dpo = float(table_row(text, "dpo-finetune")[3])
    return 100.0 * (1.0 - dpo / base), dt


def test_criterion_6_dpo_improvement(accept_runs):
    res = {s: _dpo_gain(accept_runs[s]) for s in SEEDS}
    med = statistics.median(g for g, _ in res.values())
    total = sum(dt for _, dt in res.values())
    gains = ", ".join(f"seed {s} {g:+.2f}%" for s, (g, _) in res.items())
    report(6, med >= 5.0 and total < 900, f"min-of-10 MPJPE gain {gains}; median {med:+.2f}%; {total / 60:.1f} min")


def test_criterion_7_corrupted_ablation(accept_runs):
    r = accept_runs[7]
    _dpo_gain(r)
    for c in (("build-prefs", "--split", "corrupt"), ("dpo-finetune", "--split", "corrupt"), ("sft-finetune",)):
        r.step(*c)
    # an explicit --m gives a separate report that includes the corrupted-set models
    r.step("evaluate", "--m", "10")
    text = r.report("evaluate-{h}-m10.txt")
    base = float(table_row(text, "train-base")[3])
    dpo = 100.0 * (1.0 - float(table_row(text, "dpo-finetune-corrupt")[3]) / base)
    sft = 100.0 * (1.0 - float(table_row(text, "sft-finetune-corrupt")[3]) / base)
    report(7, dpo >= 0.0 and sft < -2.0, f"seed 7 on 30% corrupted labels: DPO {dpo:+.2f}%, supervised {sft:+.2f}% vs base")


def test_criterion_8_cleaning(accept_runs):
    gains, rates = [], []
    for s in SEEDS:
        r = accept_runs[s]
        for c in ("gen-data", "train-scorer", "clean", "compare-retrain"):
            r.step(c)
        text = r.report("compare-retrain-{h}.txt")
        full = float(table_row(text, "full")[3])
        cleaned = float(table_row(text, "cleaned")[3])
        gains.append(100.0 * (1.0 - cleaned / full))
        rates.append(float(table_row(text, "corruption")[5]))
    med = statistics.median(gains)
    detail = ", ".join(f"seed {s} {g:+.2f}% (kept corruption {c:.3f})" for s, g, c in zip(SEEDS, gains, rates))
    report(8, med > 0 and max(rates) < 0.3, f"tau 0.6 cleaned-vs-full MPJPE gain {detail}; median {med:+.2f}%")


def test_criterion_9_reproducibility(tmp_path):
    a = run_tiny(tmp_path / "a")
    b = run_tiny(tmp_path / "b")
    diff = [k for k in a if a.get(k) != b.get(k)] + sorted(set(b) - set(a))
    report(9, not diff, f"{len(a)} output files from every command compared, {len(diff)} differ")


def test_criterion_10_invariants():
    fails = []
    rng = np.random.default_rng(10)
    # pairing: tie-breaking, M >= 2K, distinct winner/loser
    w, l_, deg = select_pairs([0.5] * 6, 2, rng)
    if not (deg and set(w) <= {0, 1} and set(l_) <= {4, 5}):
        fails.append("tie-break")
    try:
        select_pairs([1.0, 2.0, 3.0], 2, rng)
        fails.append("M < 2K accepted")
    except ValueError:
        pass
    for _ in range(200):
        keys = rng.permutation(10).astype(float)
        w, l_, _ = select_pairs(keys, 5, rng)
        if set(w) & set(l_):
            fails.append("self pair")
    # scorer := -MPJPE reproduces the GT-ranked pairs
    ds = generate_dataset(GenConfig(n_samples=12), 3, "accept-pairs")
    sched = build_schedule()
    base = DenoiserModel.init(DenoiserConfig(num_joints=16, hidden=32), stream(3, "accept"))

    class NegMpjpe:
        def score_candidates(self, joints, ds_, rows=None):
            n, M = joints.shape[:2]
            gt = np.repeat(ds_.joints3d, M, axis=0)
            return -metric_table(joints.reshape(-1, 16, 3), gt, ds_.topology)[:, 1].reshape(n, M)

    key = lambda p: (p.sample_id, p.w_index, p.l_index)  # noqa: E731
    a = sorted(map(key, build_preference_dataset(base, NegMpjpe(), ds, sched, 8, 2, 3)))
    b = sorted(map(key, build_preference_dataset_gt(base, ds, sched, 8, 2, 3)))
    if a != b:
        fails.append("oracle equivalence")
    # metrics: pa <= unaligned, min-of-M <= each
    gt = rng.normal(size=(2000, 16, 3)) * 200
    pred = gt + rng.normal(size=gt.shape) * rng.uniform(5, 150, size=(2000, 1, 1))
    tab = metric_table(pred, gt, ds.topology)
    if np.any(tab[:, 2] > tab[:, 1] + 1e-9) or np.any(tab[:, 3] > tab[:, 0] + 1e-9):
        fails.append("pa > unaligned")
    per = tab[:, 1].reshape(200, 10)
    if np.any(per.min(axis=1)[:, None] > per):
        fails.append("min-of-M")
    if not np.allclose(mpjpe(pred, gt), tab[:, 1]):
        fails.append("metric table")
    # cleaning: monotone in tau, idempotent
    big = generate_dataset(GenConfig(n_samples=200), 4, "accept-clean")
    scores = rng.uniform(0, 1, len(big))
    prev = None
    for tau in np.linspace(0, 1.05, 22):
        kept, rep = clean(big, scores, tau)
        if prev is not None and not set(rep.kept_ids) <= prev:
            fails.append("monotone")
        prev = set(rep.kept_ids)
        again, rep2 = clean(kept, scores[kept.ids], tau)
        if not np.array_equal(rep2.kept_ids, rep.kept_ids):
            fails.append("idempotent")
    report(10, not fails, "pairing, metric and cleaning invariants" + (f" failed: {sorted(set(fails))}" if fails else " hold"))
