import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefpose.autodiff import Tensor
from prefpose.metrics import MetricReport, mpjpe
from prefpose.rng import stream
from prefpose.scorer import (
    ScorerConfig,
    ScorerModel,
    ScorerTrainConfig,
    build_scorer_input,
    eval_scorer,
    eval_scores,
    joint_features,
    load_scorer,
    normalized,
    ranknet_pair_loss,
    save_scorer,
    scorer_loss,
    scorer_loss_tensor,
    pair_label_counts,
    synthesize_scorer_trainset,
    train_scorer,
)
from prefpose.skeleton import GenConfig, Observation, canonicalize_angles, forward_kinematics, generate_dataset

TINY = ScorerConfig(num_joints=16, dim=16, heads=2, blocks=1, ffn=16)


def test_pair_loss_anchors():
    assert ranknet_pair_loss(0.3, 0.3, 0) == pytest.approx(np.log(2), abs=1e-12)
    assert ranknet_pair_loss(-2.0, -2.0, 1) == pytest.approx(np.log(2), abs=1e-12)
    assert ranknet_pair_loss(1.0, 0.0, 1) == pytest.approx(0.313262, abs=1e-6)
    assert ranknet_pair_loss(30.0, 0.0, 0) == pytest.approx(30.0, abs=1e-9)
    assert ranknet_pair_loss(1e6, 0.0, 0) == pytest.approx(30.0, abs=1e-9)


def _labels(rows):
    return np.array([[list(MetricReport(*r).as_array()) for r in rows]])


def test_scorer_loss_anchors():
    tied = [MetricReport(1, 1, 1, 1), MetricReport(1, 1, 1, 1)]
    assert scorer_loss([0.0, 0.0], tied) == pytest.approx(8 * np.log(2), abs=1e-9)
    assert scorer_loss([5.0, 5.0], [MetricReport(1, 2, 3, 4), MetricReport(5, 6, 7, 8)]) == pytest.approx(
        8 * np.log(2), abs=1e-9
    )
    good = [MetricReport(1, 1, 1, 1), MetricReport(2, 2, 2, 2)]
    assert scorer_loss([40.0, 0.0], good) < 1e-12


@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
def test_scorer_loss_matches_brute_force(seed, M):
    rng = np.random.default_rng(seed)
    s = rng.normal(size=M) * 3
    lab = rng.integers(0, 3, size=(M, 4)).astype(float)
    brute = 0.0
    for m, n in itertools.permutations(range(M), 2):
        for k in range(4):
            brute += ranknet_pair_loss(s[m], s[n], float(lab[m, k] < lab[n, k]))
    assert scorer_loss(s, lab) == pytest.approx(brute, rel=1e-12, abs=1e-12)
    t = scorer_loss_tensor(Tensor(s[None]), pair_label_counts(lab[None])).item()
    assert t == pytest.approx(brute, rel=1e-12)


def test_scorer_input_examples():
    ds = generate_dataset(GenConfig(n_samples=40, obs_noise_px=0.0, p_occ=0.3), 1, "si")
    for i in range(5):
        inp = build_scorer_input(ds.joints3d[i], ds.camera[i], Observation(ds.uv[i], ds.visibility[i]), ds.root[i])
        vis = ds.visibility[i]
        np.testing.assert_allclose(inp.uvd[vis, :2], ds.uv[i][vis], atol=1e-9)
        assert np.all(inp.local_obs[~vis] == 0)
        assert np.all(inp.obs_tokens[~vis][:, :5] == 0)
    rng = np.random.default_rng(0)
    gaps = []
    for sig in (0.05, 0.15, 0.3):
        ang = canonicalize_angles(ds.angles + rng.normal(size=ds.angles.shape) * sig)
        X = forward_kinematics(ds.topology, ang, ds.root)
        inp = build_scorer_input(X, ds.camera, Observation(ds.uv, ds.visibility), ds.root)
        d = np.linalg.norm(inp.uvd[..., :2] - ds.uv, axis=-1)
        gaps.append(d[ds.visibility].mean())
    assert gaps[0] < gaps[1] < gaps[2]


def test_joint_features_shape(small_ds):
    inp = build_scorer_input(small_ds.joints3d, small_ds.camera, Observation(small_ds.uv, small_ds.visibility), small_ds.root)
    f = joint_features(inp)
    assert f.shape == (len(small_ds), 16, 7 + 16)
    assert np.all(np.isfinite(f))


def test_trainset_properties(small_ds):
    a = synthesize_scorer_trainset(small_ds, 5, 3)
    b = synthesize_scorer_trainset(small_ds, 5, 3)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.joints, b.joints)
    assert np.all(a.labels > 0)
    ladder = (0.05, 0.15, 0.3)
    one = synthesize_scorer_trainset(generate_dataset(GenConfig(n_samples=150), 2, "lad"), 30, 2, ladder=ladder)
    means = [one.labels[..., 1][one.sigmas == s].mean() for s in ladder]
    assert means[0] < means[1] < means[2]


def test_eval_oracles():
    rng = np.random.default_rng(0)
    labels = rng.uniform(10, 100, size=(200, 8, 4))
    k = MetricReport.FIELDS.index("mpjpe_mm")
    assert eval_scores(-labels[..., k], labels).srcc["mpjpe_mm"] == 1.0
    assert eval_scores(labels[..., k], labels).srcc["mpjpe_mm"] == -1.0
    rand = eval_scores(rng.normal(size=(200, 8)), labels)
    assert abs(rand.srcc["mpjpe_mm"]) < 0.1
    const = eval_scores(np.ones((3, 8)), labels[:3])
    assert const.n_skipped == 3 and const.n_used == 0


def test_normalized_range_and_stability():
    x = np.array([-1e4, -30.0, 0.0, 30.0, 1e4])
    y = normalized(x)
    assert y[2] == 0.5 and np.all(np.diff(y) >= 0) and np.all((y >= 0) & (y <= 1))
    assert np.all((normalized(np.linspace(-20, 20, 9)) > 0) & (normalized(np.linspace(-20, 20, 9)) < 1))


def test_train_scorer_small(small_ds, tmp_path):
    sset = synthesize_scorer_trainset(small_ds, 6, 1)
    cfg = ScorerTrainConfig(steps=40, groups_per_batch=4, lr=3e-3, log_every=20)
    m1, curve = train_scorer(small_ds, sset, cfg, 1, TINY)
    m2, _ = train_scorer(small_ds, sset, cfg, 1, TINY)
    assert curve[-1][1] < curve[0][1]
    save_scorer(tmp_path / "a.ckpt", m1)
    save_scorer(tmp_path / "b.ckpt", m2)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    back = load_scorer(tmp_path / "a.ckpt")
    s1 = m1.score_candidates(sset.joints, small_ds, sset.rows)
    assert np.array_equal(s1, back.score_candidates(sset.joints, small_ds, sset.rows))
    # calibration: median raw score on the training candidates is zero
    assert abs(np.median(s1)) < 1e-9
    ev = eval_scorer(m1, small_ds, sset)
    assert -1 <= ev.srcc["mpjpe_mm"] <= 1


def test_candidate_scoring_is_independent(small_ds):
    m = ScorerModel.init(TINY, stream(0, "t"))
    J = small_ds.joints3d
    both = m.score_candidates(np.stack([J, J[::-1]], axis=1), small_ds)
    alone = m.score_candidates(J[:, None], small_ds)
    np.testing.assert_allclose(both[:, 0], alone[:, 0], atol=1e-12)


def test_behind_camera_candidate_is_scored():
    ds = generate_dataset(GenConfig(n_samples=2), 1, "bc")
    m = ScorerModel.init(TINY, stream(0, "t"))
    X = ds.joints3d.copy()
    X[0, 5, 2] = -50.0
    s = m.score_candidates(X[:, None], ds)
    assert np.all(np.isfinite(s))


def test_config_validation():
    with pytest.raises(ValueError):
        ScorerModel.init(ScorerConfig(dim=10, heads=4), stream(0, "t"))
