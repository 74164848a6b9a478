import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from prefpose.diffusion import DenoiserConfig, DenoiserModel, dataset_tokens, joints_to_latent, save_denoiser
from prefpose.metrics import metric_table
from prefpose.preference import (
    DpoConfig,
    build_preference_dataset,
    build_preference_dataset_gt,
    dpo_loss,
    dpo_loss_tensor,
    dpo_margin,
    finetune_dpo,
    load_pairs,
    omega_weight,
    save_pairs,
    select_pairs,
)
from prefpose.rng import stream

TINY = DenoiserConfig(num_joints=16, token_dim=8, hidden=24, layers=2, time_dim=8)


def test_select_pairs_example():
    keys = [0.9, 0.8, 0.7, 0.3, 0.2, 0.1]
    for seed in range(20):
        w, l_, deg = select_pairs(keys, 2, np.random.default_rng(seed))
        assert len(w) == len(l_) == 2 and not deg
        assert set(w) <= {0, 1} and set(l_) <= {4, 5}


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=12, unique=True), st.integers(0, 1000))
def test_select_pairs_k1_and_distinct(keys, seed):
    w, l_, _ = select_pairs(keys, 1, np.random.default_rng(seed))
    assert w[0] == int(np.argmax(keys)) and l_[0] == int(np.argmin(keys))
    K = len(keys) // 2
    w, l_, _ = select_pairs(keys, K, np.random.default_rng(seed))
    assert not set(w) & set(l_)


def test_select_pairs_degenerate_and_errors():
    w, l_, deg = select_pairs([1.0] * 4, 2, np.random.default_rng(0))
    assert deg and set(w) <= {0, 1} and set(l_) <= {2, 3}
    with pytest.raises(ValueError):
        select_pairs([1.0, 2.0, 3.0], 2, np.random.default_rng(0))


class _NegMpjpe:
    """Scorer stand-in whose raw score is the negated ground-truth MPJPE."""

    def score_candidates(self, joints, ds, rows=None):
        rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
        n, M, J, _ = joints.shape
        gt = np.repeat(ds.joints3d[rows], M, axis=0)
        return -metric_table(joints.reshape(-1, J, 3), gt, ds.topology)[:, 1].reshape(n, M)


def _key(p):
    return (p.sample_id, p.w_index, p.l_index, p.x0_w.tobytes(), p.x0_l.tobytes())


def test_oracle_equivalence_and_determinism(small_ds, schedule):
    base = DenoiserModel.init(TINY, stream(0, "pref-test"))
    a = build_preference_dataset(base, _NegMpjpe(), small_ds, schedule, 6, 2, 11, rows=np.arange(8))
    b = build_preference_dataset_gt(base, small_ds, schedule, 6, 2, 11, rows=np.arange(8))
    assert sorted(map(_key, a)) == sorted(map(_key, b))
    c = build_preference_dataset_gt(base, small_ds, schedule, 6, 2, 11, rows=np.arange(8))
    assert list(map(_key, b)) == list(map(_key, c))
    with pytest.raises(ValueError):
        build_preference_dataset_gt(base, small_ds, schedule, 3, 2, 11)


def test_m2_k1_winner_is_lower_error(small_ds, schedule):
    base = DenoiserModel.init(TINY, stream(0, "pref-test"))
    pairs = build_preference_dataset_gt(base, small_ds, schedule, 2, 1, 4)
    assert len(pairs) == len(small_ds)
    for p in pairs:
        assert p.w_index != p.l_index and p.score_w >= p.score_l


def test_pairs_roundtrip(small_ds, schedule, tmp_path):
    base = DenoiserModel.init(TINY, stream(0, "pref-test"))
    pairs = build_preference_dataset_gt(base, small_ds, schedule, 4, 2, 3, rows=[0, 1, 2])
    save_pairs(tmp_path / "p.txt", pairs)
    back = load_pairs(tmp_path / "p.txt")
    assert list(map(_key, back)) == list(map(_key, pairs))
    save_pairs(tmp_path / "q.txt", back)
    assert (tmp_path / "p.txt").read_bytes() == (tmp_path / "q.txt").read_bytes()


def _batch(ds, n=6, seed=0):
    rng = np.random.default_rng(seed)
    x0 = joints_to_latent(ds.joints3d[:n])
    tok, vis = dataset_tokens(ds.subset(np.arange(n)))
    xw = x0 + 0.05 * rng.normal(size=x0.shape)
    xl = x0 + 0.4 * rng.normal(size=x0.shape)
    t = rng.integers(1, 101, size=n)
    return xw, xl, t, rng.normal(size=x0.shape), rng.normal(size=x0.shape), tok, vis


def test_dpo_loss_anchor_values(small_ds, schedule):
    ref = DenoiserModel.init(TINY, stream(0, "pref-test"))
    xw, xl, t, ew, el, tok, vis = _batch(small_ds, n=1)
    assert dpo_loss_tensor(ref.copy(), ref, xw, xl, t, ew, el, tok, vis, schedule, DpoConfig()).item() == pytest.approx(
        np.log(2), abs=1e-9
    )
    theta = ref.copy()
    for _, p in theta.params.items():
        p.data = p.data + 0.02 * np.random.default_rng(1).normal(size=p.shape)
    delta = dpo_margin(theta, ref, xw, xl, t, ew, el, tok, vis, schedule).item()
    assert delta != 0
    cfg = DpoConfig(beta_eff=0.5 / abs(delta))
    hi, lo = (xw, xl) if delta > 0 else (xl, xw)
    e_hi, e_lo = (ew, el) if delta > 0 else (el, ew)
    assert dpo_loss_tensor(theta, ref, hi, lo, t, e_hi, e_lo, tok, vis, schedule, cfg).item() == pytest.approx(0.974077, abs=1e-6)
    assert dpo_loss_tensor(theta, ref, lo, hi, t, e_lo, e_hi, tok, vis, schedule, cfg).item() == pytest.approx(0.474077, abs=1e-6)


def test_dpo_loss_single_pair_and_mismatch(small_ds, schedule):
    base = DenoiserModel.init(TINY, stream(0, "pref-test"))
    p = build_preference_dataset_gt(base, small_ds, schedule, 2, 1, 4, rows=[3])[0]
    eps = np.random.default_rng(0).normal(size=48)
    assert dpo_loss(base.copy(), base, p, 17, eps, eps, schedule, DpoConfig(), small_ds) == pytest.approx(np.log(2), abs=1e-9)
    other = DenoiserModel.init(DenoiserConfig(num_joints=16, token_dim=8, hidden=16, layers=2, time_dim=8), stream(0, "x"))
    with pytest.raises(ValueError):
        dpo_loss(other, base, p, 17, eps, eps, schedule, DpoConfig(), small_ds)


def test_dpo_swap_convexity_and_monotonicity(small_ds, schedule):
    ref = DenoiserModel.init(TINY, stream(0, "pref-test"))
    theta = ref.copy()
    for _, p in theta.params.items():
        p.data = p.data + 0.02 * np.random.default_rng(2).normal(size=p.shape)
    xw, xl, t, ew, el, tok, vis = _batch(small_ds)
    cfg = DpoConfig(beta_eff=50.0)
    for i in range(len(t)):
        s = slice(i, i + 1)
        fwd = dpo_loss_tensor(theta, ref, xw[s], xl[s], t[s], ew[s], el[s], tok[s], vis[s], schedule, cfg).item()
        rev = dpo_loss_tensor(theta, ref, xl[s], xw[s], t[s], el[s], ew[s], tok[s], vis[s], schedule, cfg).item()
        assert fwd + rev > 2 * np.log(2)
    # the loss is strictly increasing in the margin, i.e. in theta's winner error
    s = slice(0, 1)
    d = dpo_margin(theta, ref, xw[s], xl[s], t[s], ew[s], ew[s], tok[s], vis[s], schedule).item()
    hi, lo = (xw, xl) if d > 0 else (xl, xw)
    losses = [
        dpo_loss_tensor(theta, ref, hi[s], lo[s], t[s], ew[s], ew[s], tok[s], vis[s], schedule, DpoConfig(beta_eff=b)).item()
        for b in (1.0, 10.0, 100.0)
    ]
    assert losses[0] < losses[1] < losses[2]


def test_omega_weights(schedule):
    t = np.array([1, 50, 100])
    np.testing.assert_array_equal(omega_weight(t, schedule, "constant"), 1.0)
    w = omega_weight(t, schedule, "snr-min5")
    assert w[0] == 5.0 and np.all(w <= 5.0) and w[-1] < w[1]
    with pytest.raises(ValueError):
        omega_weight(t, schedule, "bogus")


def test_finetune_step0_ref_frozen_checkpoints(small_ds, schedule, tmp_path):
    base = DenoiserModel.init(TINY, stream(0, "pref-test"))
    before = {n: p.data.copy() for n, p in base.params.items()}
    pairs = build_preference_dataset_gt(base, small_ds, schedule, 4, 2, 3)
    cfg = DpoConfig(epochs=3, batch_size=16, lr=1e-3, checkpoint_every=2)
    out, curve = finetune_dpo(base, pairs, small_ds, schedule, cfg, 5, checkpoint_prefix=tmp_path / "dpo")
    assert curve[0][0] == 0 and curve[0][1] == pytest.approx(np.log(2), abs=1e-6)
    for n, p in base.params.items():
        assert np.array_equal(before[n], p.data)
    assert sorted(x.name for x in tmp_path.iterdir()) == ["dpo-epoch002.ckpt", "dpo-epoch003.ckpt"]
    assert any(not np.array_equal(before[n], p.data) for n, p in out.params.items())
    again, _ = finetune_dpo(base, pairs, small_ds, schedule, cfg, 5)
    save_denoiser(tmp_path / "a.ckpt", out)
    save_denoiser(tmp_path / "b.ckpt", again)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    with pytest.raises(ValueError):
        finetune_dpo(base, [], small_ds, schedule, cfg, 5)
