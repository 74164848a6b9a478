"""Properties of the default-config seed-7 models (shared with the acceptance runs)."""

import numpy as np
import pytest

from prefpose.cleaning import score_dataset
from prefpose.config import load_config
from prefpose.diffusion import build_schedule, load_denoiser, sample
from prefpose.metrics import mpjpe
from prefpose.scorer import load_scorer
from prefpose.skeleton import forward_kinematics, load_dataset


@pytest.fixture(scope="module")
def seed7(accept_runs):
    r = accept_runs[7]
    for c in ("gen-data", "train-base", "train-scorer"):
        r.step(c)
    b = load_config(None, 7)["base"]
    return r, build_schedule(b["T"], b["beta_min"], b["beta_max"])


def _load(r, kind, name):
    return r.root / kind / name.format(h=r.hash)


def test_base_curve_decreases(seed7):
    r, _ = seed7
    rows = [line.split() for line in r.report("train-base-{h}-curve.txt").splitlines() if not line.startswith("#")]
    losses = [float(f[1]) for f in rows if f]
    assert losses[-1] < losses[0]


def test_min_of_100_beats_rest_pose(seed7):
    r, sched = seed7
    ds = load_dataset(_load(r, "datasets", "gen-data-{h}-test.txt")).subset(np.arange(100))
    model = load_denoiser(_load(r, "checkpoints", "train-base-{h}.ckpt"))
    cands = sample(model, ds, sched, 7, 100, purpose="test-m100")
    J = ds.topology.num_joints
    err = mpjpe(cands.joints3d.reshape(-1, J, 3), np.repeat(ds.joints3d, 100, axis=0)).reshape(len(ds), 100)
    rest = forward_kinematics(ds.topology, np.zeros_like(ds.angles), ds.root)
    assert err.min(axis=1).mean() < mpjpe(rest, ds.joints3d).mean()
    # occluded joints are less constrained, so the candidates spread more there
    spread = cands.joints3d.std(axis=1).mean(axis=-1)
    vis = ds.visibility
    assert spread[~vis].mean() > spread[vis].mean()


def test_scorer_separates_corrupted_labels(seed7):
    r, _ = seed7
    ds = load_dataset(_load(r, "datasets", "gen-data-{h}-corrupt.txt"))
    scorer = load_scorer(_load(r, "checkpoints", "train-scorer-{h}.ckpt"))
    s = score_dataset(scorer, ds)
    assert np.all((s > 0) & (s < 1))
    good, bad = s[~ds.corrupted], s[ds.corrupted]
    auc = (np.mean(good[:, None] > bad[None, :]) + 0.5 * np.mean(good[:, None] == bad[None, :]))
    assert auc > 0.8
    assert np.array_equal(s, score_dataset(scorer, ds))
