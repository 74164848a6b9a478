"""Preference pairs from ranked candidates and Diffusion-DPO finetuning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import AdamState, Tensor, adam_step, backward, no_grad, ops
from .diffusion import (
    CandidateSet,
    DenoiserModel,
    NoiseSchedule,
    TrainConfig,
    TrainingError,
    dataset_tokens,
    fit_denoiser,
    q_sample,
    sample,
    save_denoiser,
)
from .metrics import MetricReport, metric_table
from .rng import stream
from .skeleton import Dataset, fmt_float

log = logging.getLogger(__name__)

PROVENANCES = ("scorer-ranked", "gt-ranked")
OMEGAS = ("constant", "snr-min5", "sigma2")


@dataclass(frozen=True)
class PreferencePair:
    sample_id: int
    x0_w: np.ndarray  # (3J,) latent
    x0_l: np.ndarray
    provenance: str
    score_w: float  # ranking key of the winner (higher is better)
    score_l: float
    w_index: int = -1  # candidate indices within the sampled set
    l_index: int = -1


def select_pairs(keys, K: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, bool]:
    """Winner/loser candidate indices for one sample.

    Candidates are sorted by descending key with ties broken by index; K
    winners are drawn with replacement from the top K and K losers from the
    bottom K. The flag reports a degenerate (all-tied) key vector.
    """
    keys = np.asarray(keys, dtype=np.float64)
    M = len(keys)
    if K < 1:
        raise ValueError("K must be >= 1")
    if M < 2 * K:
        raise ValueError(f"need M >= 2K, got M={M}, K={K}")
    order = np.lexsort((np.arange(M), -keys))
    top, bottom = order[:K], order[M - K :]
    w = top[rng.integers(0, K, size=K)]
    l_ = bottom[rng.integers(0, K, size=K)]
    return w, l_, bool(np.all(keys == keys[0]))


def pairs_from_keys(cands: CandidateSet, keys, K: int, seed: int, provenance: str) -> list[PreferencePair]:
    """Apply :func:`select_pairs` to every sample with stream (seed, "pairing", id)."""
    if provenance not in PROVENANCES:
        raise ValueError(f"unknown provenance {provenance!r}")
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape != cands.latents.shape[:2]:
        raise ValueError(f"keys shape {keys.shape} vs candidates {cands.latents.shape[:2]}")
    out = []
    n_degenerate = 0
    for i, sid in enumerate(cands.sample_ids):
        w, l_, degenerate = select_pairs(keys[i], K, stream(seed, "pairing", int(sid)))
        if degenerate:
            n_degenerate += 1
            log.warning("build-prefs: sample %d has all-tied keys; pairs formed by index", int(sid))
        for a, b in zip(w, l_):
            out.append(
                PreferencePair(
                    int(sid), cands.latents[i, a].copy(), cands.latents[i, b].copy(), provenance,
                    float(keys[i, a]), float(keys[i, b]), int(a), int(b),
                )
            )
    if n_degenerate:
        log.warning("build-prefs: %d degenerate samples", n_degenerate)
    return out


def build_preference_dataset(
    base: DenoiserModel, scorer, ds: Dataset, schedule: NoiseSchedule, M: int, K: int, seed: int, rows=None
) -> list[PreferencePair]:
    """Pairs ranked by the scorer's raw score."""
    if M < 2 * K:
        raise ValueError(f"need M >= 2K, got M={M}, K={K}")
    cands = sample(base, ds, schedule, seed, M, rows=rows, purpose="prefs-sample")
    rows = np.arange(len(ds)) if rows is None else rows
    keys = scorer.score_candidates(cands.joints3d, ds, rows)
    return pairs_from_keys(cands, keys, K, seed, "scorer-ranked")


def build_preference_dataset_gt(
    base: DenoiserModel, ds: Dataset, schedule: NoiseSchedule, M: int, K: int, seed: int,
    metric: str = "mpjpe_mm", rows=None,
) -> list[PreferencePair]:
    """Pairs ranked by the negated ground-truth error."""
    if M < 2 * K:
        raise ValueError(f"need M >= 2K, got M={M}, K={K}")
    k = MetricReport.FIELDS.index(metric)
    cands = sample(base, ds, schedule, seed, M, rows=rows, purpose="prefs-sample")
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows)
    J = ds.topology.num_joints
    gt = np.repeat(ds.joints3d[rows], M, axis=0)
    err = metric_table(cands.joints3d.reshape(-1, J, 3), gt, ds.topology)[:, k].reshape(len(rows), M)
    return pairs_from_keys(cands, -err, K, seed, "gt-ranked")


# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class DpoConfig:
    beta_eff: float = 500.0
    omega: str = "constant"  # or "snr-min5", "sigma2"
    epochs: int = 50
    batch_size: int = 128
    lr: float = 3e-5
    share_noise: bool = True  # one eps draw for both halves of a pair
    ema: float = 0.99  # decay of the weight average that is returned; 0 disables it
    checkpoint_every: int = 10  # epochs between checkpoints; the last epoch is always saved

    def __post_init__(self):
        if not self.beta_eff > 0:
            raise ValueError("beta_eff must be positive")
        if not 0.0 <= self.ema < 1.0:
            raise ValueError("ema must be in [0, 1)")
        if self.omega not in OMEGAS:
            raise ValueError(f"unknown omega {self.omega!r}")


def omega_weight(t, schedule: NoiseSchedule, kind: str) -> np.ndarray:
    t = np.asarray(t, dtype=np.int64)
    if kind == "constant":
        return np.ones(t.shape)
    if kind == "snr-min5":
        return np.minimum(schedule.snr[t - 1], 5.0)
    if kind == "sigma2":
        return 1.0 / (1.0 + schedule.snr[t - 1])
    raise ValueError(f"unknown omega {kind!r}")


def check_same_architecture(theta: DenoiserModel, ref: DenoiserModel) -> None:
    if theta.config != ref.config or theta.params.shapes() != ref.params.shapes():
        raise ValueError("theta and ref architectures differ")


def dpo_margin(theta: DenoiserModel, ref: DenoiserModel, x0w, x0l, t, eps_w, eps_l, tokens, vis, schedule) -> Tensor:
    """Per-pair Delta: (theta err - ref err) on the winner minus the same on the loser."""
    xw = q_sample(x0w, t, eps_w, schedule)
    xl = q_sample(x0l, t, eps_l, schedule)
    n = len(xw)
    x = np.concatenate([xw, xl])
    tt = np.concatenate([t, t])
    tok = np.concatenate([tokens, tokens])
    vv = np.concatenate([vis, vis])
    eps = np.concatenate([eps_w, eps_l])
    err_theta = ops.sum_of_squares(ops.sub(theta(x, tt, tok, vv), Tensor(eps)), axis=-1)
    with no_grad():
        ref_pred = ref._eps_fast(x, tt, ref._cond_projection(tok, vv))
    err_ref = np.sum((eps - ref_pred) ** 2, axis=-1)
    diff = ops.sub(err_theta, Tensor(err_ref))
    sign = np.concatenate([np.ones(n), -np.ones(n)])
    signed = ops.mul(diff, Tensor(sign))
    stacked = ops.reshape(signed, (2, n))
    return ops.sum(ops.transpose(stacked, (1, 0)), axis=1)


def dpo_loss_tensor(theta, ref, x0w, x0l, t, eps_w, eps_l, tokens, vis, schedule, config: DpoConfig) -> Tensor:
    """Mean over the batch of softplus(beta_eff * omega * Delta)."""
    check_same_architecture(theta, ref)
    t = np.asarray(t, dtype=np.int64)
    delta = dpo_margin(theta, ref, x0w, x0l, t, eps_w, eps_l, tokens, vis, schedule)
    w = config.beta_eff * omega_weight(t, schedule, config.omega)
    return ops.mean(ops.softplus(ops.mul(delta, Tensor(w))))


def dpo_loss(theta, ref, pair: PreferencePair, t: int, eps_w, eps_l, schedule, config: DpoConfig, ds: Dataset) -> float:
    """Loss of a single pair; the condition comes from the pair's sample in ``ds``."""
    row = ds.row_of(pair.sample_id)
    tok, vis = dataset_tokens(ds.subset([row]))
    with no_grad():
        loss = dpo_loss_tensor(
            theta, ref, pair.x0_w[None], pair.x0_l[None], np.array([t]),
            np.asarray(eps_w)[None], np.asarray(eps_l)[None], tok, vis, schedule, config,
        )
    return loss.item()


# ---------------------------------------------------------------------------
# finetuning


def _pair_arrays(pairs: list[PreferencePair], ds: Dataset):
    if not pairs:
        raise ValueError("no preference pairs")
    rows = np.array([ds.row_of(p.sample_id) for p in pairs])
    tok, vis = dataset_tokens(ds)
    xw = np.stack([p.x0_w for p in pairs])
    xl = np.stack([p.x0_l for p in pairs])
    return xw, xl, tok[rows], vis[rows]


def finetune_dpo(
    base: DenoiserModel,
    pairs: list[PreferencePair],
    ds: Dataset,
    schedule: NoiseSchedule,
    config: DpoConfig,
    seed: int,
    checkpoint_prefix: str | Path | None = None,
    on_epoch: Callable[[int, DenoiserModel], None] | None = None,
) -> tuple[DenoiserModel, list[tuple[int, float]]]:
    """Theta starts as a copy of ``base``; ``base`` itself serves as the frozen reference.

    With ``config.ema > 0`` the returned and checkpointed weights are the
    exponential moving average of theta. Checkpoints go to
    ``{checkpoint_prefix}-epochNNN.ckpt``.
    """
    xw, xl, tok, vis = _pair_arrays(pairs, ds)
    theta = base.copy()
    ref = base
    avg = base.copy() if config.ema > 0 else theta
    state = AdamState.for_params(theta.params, lr=config.lr)
    rng = stream(seed, "train/dpo")
    n = len(xw)
    D = xw.shape[1]
    curve = []
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for lo in range(0, n, config.batch_size):
            b = order[lo : lo + config.batch_size]
            t = rng.integers(1, schedule.T + 1, size=len(b))
            eps_w = rng.normal(size=(len(b), D))
            eps_l = eps_w if config.share_noise else rng.normal(size=(len(b), D))
            try:
                loss = dpo_loss_tensor(theta, ref, xw[b], xl[b], t, eps_w, eps_l, tok[b], vis[b], schedule, config)
            except FloatingPointError as exc:
                raise TrainingError(f"dpo-finetune: {exc} at step {step}") from exc
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingError(f"dpo-finetune: non-finite loss at step {step}")
            if step == 0:
                curve.append((0, val))
            adam_step(theta.params, backward(loss, theta.params.items()), state)
            if avg is not theta:
                d = config.ema
                for name, p in avg.params.items():
                    p.data = d * p.data + (1.0 - d) * theta.params[name].data
            total += val
            batches += 1
            step += 1
        curve.append((step, total / batches))
        log.info("dpo-finetune epoch %d loss %.6f", epoch + 1, total / batches)
        last = epoch + 1 == config.epochs
        if checkpoint_prefix is not None and ((epoch + 1) % config.checkpoint_every == 0 or last):
            save_denoiser(f"{checkpoint_prefix}-epoch{epoch + 1:03d}.ckpt", avg, {"epoch": str(epoch + 1)})
        if on_epoch is not None:
            on_epoch(epoch + 1, avg)
    return avg, curve


def finetune_supervised(
    base: DenoiserModel, ds: Dataset, schedule: NoiseSchedule, cfg: TrainConfig, seed: int
) -> tuple[DenoiserModel, list[tuple[int, float]]]:
    """Plain noise-prediction finetuning on the dataset's stored labels."""
    model = base.copy()
    curve = fit_denoiser(model, ds, schedule, cfg, stream(seed, "train/supervised"), what="sft-finetune")
    return model, curve


# ---------------------------------------------------------------------------
# file format


def save_pairs(path, pairs: list[PreferencePair]) -> None:
    """One row per pair: id, provenance, winner/loser index and key, then both latents."""
    lines = ["# sample_id provenance w_index l_index score_w score_l x0_w... x0_l..."]
    for p in pairs:
        nums = " ".join(fmt_float(v) for v in np.concatenate([p.x0_w, p.x0_l]))
        lines.append(
            f"{p.sample_id} {p.provenance} {p.w_index} {p.l_index} {fmt_float(p.score_w)} {fmt_float(p.score_l)} {nums}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_pairs(path) -> list[PreferencePair]:
    out = []
    for k, line in enumerate(Path(path).read_text().splitlines()):
        if not line or line.startswith("#"):
            continue
        f = line.split()
        try:
            vals = np.array([float(v) for v in f[6:]])
            if len(vals) % 2:
                raise ValueError("odd latent length")
            h = len(vals) // 2
            if f[1] not in PROVENANCES:
                raise ValueError(f"unknown provenance {f[1]!r}")
            out.append(PreferencePair(int(f[0]), vals[:h], vals[h:], f[1], float(f[4]), float(f[5]), int(f[2]), int(f[3])))
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{k + 1}: bad pair row ({exc})") from exc
    return out
