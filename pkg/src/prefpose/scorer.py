"""Pose-quality scorer trained with a pairwise ranking objective.

Each candidate pose is projected to UVD, paired joint-by-joint with the
observed keypoints, and passed through self-attention over joints plus
cross-attention to the observation tokens. The output is one raw score per
candidate; higher means better.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import (
    AdamState,
    ParameterSet,
    Tensor,
    adam_step,
    backward,
    init_layernorm,
    init_linear,
    linear,
    no_grad,
    ops,
)
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .diffusion import LATENT_SCALE_MM, TrainingError, observation_tokens
from .metrics import MetricReport, metric_table, plcc, srcc
from .rng import stream
from .skeleton import Camera, Dataset, Observation, canonicalize_angles, forward_kinematics, project

log = logging.getLogger(__name__)

SIGMA_LADDER = (0.03, 0.08, 0.15, 0.3, 0.5)
LOGIT_CAP = 30.0
NUM_METRICS = 4
JOINT_FEATURES = 7
MIN_DEPTH_MM = 100.0  # candidates are clamped in front of the camera before projection


@dataclass(frozen=True)
class ScorerInput:
    """Per-joint scorer inputs; arrays may carry leading batch dims."""

    uvd: np.ndarray  # (..., J, 3) pixels, pixels, metres
    local_obs: np.ndarray  # (..., J, 4) [u_obs/w, v_obs/h, visible, matched]; zeros when occluded
    obs_tokens: np.ndarray  # (..., J, 5+J)
    camera: np.ndarray  # (..., 5)
    root: np.ndarray  # (..., 3)


def build_scorer_input(joints3d, camera, observation: Observation, root) -> ScorerInput:
    """Inputs for one candidate ``(J, 3)`` or a batch ``(n, J, 3)`` of one observation each."""
    X = np.asarray(joints3d, dtype=np.float64)
    single = X.ndim == 2
    cam = camera.as_array() if isinstance(camera, Camera) else np.asarray(camera, dtype=np.float64)
    uv = np.asarray(observation.uv_px, dtype=np.float64)
    vis = np.asarray(observation.visibility, dtype=bool)
    root = np.asarray(root, dtype=np.float64)
    if single:
        X = X[None]
    n = X.shape[0]
    cam = np.broadcast_to(cam, (n, 5))
    uv = np.broadcast_to(uv, (n, *uv.shape[-2:]))
    vis = np.broadcast_to(vis, (n, vis.shape[-1]))
    root = np.broadcast_to(root, (n, 3))
    if np.any(X[..., 2] < MIN_DEPTH_MM):
        X = X.copy()
        X[..., 2] = np.maximum(X[..., 2], MIN_DEPTH_MM)
    uvd = project(X, cam)
    visf = vis.astype(np.float64)
    local = np.stack([uv[..., 0] / cam[:, 3:4], uv[..., 1] / cam[:, 4:5], visf, visf], axis=-1) * visf[..., None]
    tokens = observation_tokens(uv, vis, cam, root)
    inp = ScorerInput(uvd, local, tokens, np.array(cam), np.array(root))
    if single:
        return ScorerInput(inp.uvd[0], inp.local_obs[0], inp.obs_tokens[0], inp.camera[0], inp.root[0])
    return inp


def joint_features(inp: ScorerInput) -> np.ndarray:
    """(n, J, 7+J): candidate and observed keypoints back-projected to the root
    depth (units of LATENT_SCALE_MM), relative depth, visibility, matched flag,
    one-hot joint id."""
    uvd, local, cam, root = inp.uvd, inp.local_obs, inp.camera, inp.root
    n, J, _ = uvd.shape
    f, cx, cy, w, h = (cam[:, k : k + 1] for k in range(5))
    z = root[:, 2:3]
    s = LATENT_SCALE_MM
    cu = ((uvd[..., 0] - cx) / f * z - root[:, 0:1]) / s
    cv = ((uvd[..., 1] - cy) / f * z - root[:, 1:2]) / s
    vis = local[..., 2]
    ou = ((local[..., 0] * w - cx) / f * z - root[:, 0:1]) / s * vis
    ov = ((local[..., 1] * h - cy) / f * z - root[:, 1:2]) / s * vis
    d = uvd[..., 2] * 1000.0 / s
    feats = np.stack([cu, cv, d, ou, ov, vis, local[..., 3]], axis=-1)
    onehot = np.broadcast_to(np.eye(J), (n, J, J))
    return np.concatenate([feats, onehot], axis=-1)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class ScorerConfig:
    num_joints: int = 16
    dim: int = 64
    heads: int = 4
    blocks: int = 2
    ffn: int = 128

    def to_meta(self) -> dict[str, str]:
        return {f"scorer.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "ScorerConfig":
        return cls(**{f.name: int(meta[f"scorer.{f.name}"]) for f in fields(cls)})


def _attention(p: ParameterSet, name: str, q_in: Tensor, kv_in: Tensor, heads: int) -> Tensor:
    n, Lq, C = q_in.shape
    Lk = kv_in.shape[1]
    dh = C // heads
    q = ops.transpose(ops.reshape(linear(p, f"{name}.q", q_in), (n, Lq, heads, dh)), (0, 2, 1, 3))
    k = ops.transpose(ops.reshape(linear(p, f"{name}.k", kv_in), (n, Lk, heads, dh)), (0, 2, 3, 1))
    v = ops.transpose(ops.reshape(linear(p, f"{name}.v", kv_in), (n, Lk, heads, dh)), (0, 2, 1, 3))
    att = ops.softmax(ops.scale(ops.matmul(q, k), 1.0 / np.sqrt(dh)), axis=-1)
    out = ops.reshape(ops.transpose(ops.matmul(att, v), (0, 2, 1, 3)), (n, Lq, C))
    return linear(p, f"{name}.o", out)


class ScorerModel:
    def __init__(self, config: ScorerConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ScorerConfig, rng: np.random.Generator) -> "ScorerModel":
        J, C = config.num_joints, config.dim
        if C % config.heads:
            raise ValueError("dim must be divisible by heads")
        p = ParameterSet()
        init_linear(p, "fj1", 3 + J, C, rng)
        init_linear(p, "fj2", C, C, rng)
        init_linear(p, "fl", 4, C, rng)
        init_linear(p, "fuse", 2 * C, C, rng)
        init_linear(p, "obs", 5 + J, C, rng)
        for b in range(config.blocks):
            for part in ("sa", "ca"):
                for proj in "qkvo":
                    init_linear(p, f"b{b}.{part}.{proj}", C, C, rng)
            for ln in ("ln1", "ln2", "ln3"):
                init_layernorm(p, f"b{b}.{ln}", C)
            init_linear(p, f"b{b}.ff1", C, config.ffn, rng)
            init_linear(p, f"b{b}.ff2", config.ffn, C, rng)
        init_linear(p, "dec1", C, C, rng)
        init_linear(p, "dec2", C, 1, rng)
        return cls(config, p)

    def forward(self, feats, obs_tokens) -> Tensor:
        """(n, J, 7+J) joint features and (n, J, 5+J) observation tokens -> (n,) raw scores."""
        p = self.params
        feats = np.asarray(feats)
        n = feats.shape[0]
        geo = np.concatenate([feats[..., 0:3], feats[..., 7:]], axis=-1)
        fj = linear(p, "fj2", ops.relu(linear(p, "fj1", Tensor(geo))))
        fl = linear(p, "fl", Tensor(feats[..., 3:7]))
        x = linear(p, "fuse", ops.concat([fj, fl], axis=-1))
        kv = linear(p, "obs", Tensor(obs_tokens))
        for b in range(self.config.blocks):
            ln = lambda name, t: ops.layernorm(t, p[f"b{b}.{name}.g"], p[f"b{b}.{name}.b"])  # noqa: E731
            h = ln("ln1", x)
            x = ops.add(x, _attention(p, f"b{b}.sa", h, h, self.config.heads))
            x = ops.add(x, _attention(p, f"b{b}.ca", ln("ln2", x), kv, self.config.heads))
            h = linear(p, f"b{b}.ff2", ops.relu(linear(p, f"b{b}.ff1", ln("ln3", x))))
            x = ops.add(x, h)
        pooled = ops.mean(x, axis=1)
        out = linear(p, "dec2", ops.relu(linear(p, "dec1", pooled)))
        return ops.reshape(out, (n,))

    def score_inputs(self, inp: ScorerInput, batch: int = 4096) -> np.ndarray:
        """Raw scores for a batch of inputs; each candidate is scored on its own."""
        feats = joint_features(inp)
        out = np.empty(len(feats))
        with no_grad():
            for lo in range(0, len(feats), batch):
                out[lo : lo + batch] = self.forward(feats[lo : lo + batch], inp.obs_tokens[lo : lo + batch]).data
        return out

    def score_candidates(self, joints, ds: Dataset, rows=None) -> np.ndarray:
        """Raw scores ``(n, M)`` for candidate joints ``(n, M, J, 3)`` of dataset rows."""
        rows = np.arange(len(ds)) if rows is None else np.asarray(rows, dtype=np.int64)
        joints = np.asarray(joints, dtype=np.float64)
        n, M = joints.shape[:2]
        inp = _batched_input(joints.reshape(n * M, *joints.shape[2:]), ds, np.repeat(rows, M))
        return self.score_inputs(inp).reshape(n, M)


def _batched_input(joints, ds: Dataset, rows) -> ScorerInput:
    obs = Observation(ds.uv[rows], ds.visibility[rows])
    return build_scorer_input(joints, ds.camera[rows], obs, ds.root[rows])


def normalized(raw) -> np.ndarray:
    """Logistic of the raw score."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.where(raw >= 0, 1.0 / (1.0 + np.exp(-np.abs(raw))), np.exp(-np.abs(raw)) / (1.0 + np.exp(-np.abs(raw))))


def save_scorer(path, model: ScorerModel, extra: dict[str, str] | None = None) -> None:
    save_checkpoint(path, model.params, {"kind": "scorer", **model.config.to_meta(), **(extra or {})})


def load_scorer(path) -> ScorerModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "scorer":
        raise ValueError(f"{path}: not a scorer checkpoint")
    model = ScorerModel.init(ScorerConfig.from_meta(meta), np.random.default_rng(0))
    model.params.load_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# losses


def ranknet_pair_loss(s_m, s_n, y) -> float:
    """-y log sigmoid(d) - (1-y) log(1 - sigmoid(d)), d = s_m - s_n capped at +-30."""
    d = min(LOGIT_CAP, max(-LOGIT_CAP, float(s_m) - float(s_n)))
    sp = lambda z: max(z, 0.0) + np.log1p(np.exp(-abs(z)))  # noqa: E731
    return float(y * sp(-d) + (1 - y) * sp(d))


def ordered_pairs(M: int) -> tuple[np.ndarray, np.ndarray]:
    m, n = np.meshgrid(np.arange(M), np.arange(M), indexing="ij")
    keep = m != n
    return m[keep], n[keep]


def pair_label_counts(labels) -> np.ndarray:
    """``(G, M, 4)`` metric errors -> ``(G, P)`` number of metrics where m beats n."""
    labels = np.asarray(labels, dtype=np.float64)
    m, n = ordered_pairs(labels.shape[1])
    return (labels[:, m, :] < labels[:, n, :]).sum(axis=-1).astype(np.float64)


def scorer_loss_tensor(scores: Tensor, counts) -> Tensor:
    """Sum over ordered pairs and the four metrics, averaged over groups.

    ``scores`` is (G, M) raw scores; ``counts`` is from :func:`pair_label_counts`.
    """
    G, M = scores.shape
    if M < 2:
        raise ValueError("need at least 2 candidates per group")
    m, n = ordered_pairs(M)
    flat = ops.reshape(scores, (G * M,))
    base = (np.arange(G) * M)[:, None]
    d = ops.sub(ops.gather_rows(flat, (base + m).ravel()), ops.gather_rows(flat, (base + n).ravel()))
    d = ops.clip(d, -LOGIT_CAP, LOGIT_CAP)
    y = np.asarray(counts, dtype=np.float64).ravel()
    per = ops.add(ops.mul(Tensor(y), ops.softplus(ops.scale(d, -1.0))), ops.mul(Tensor(NUM_METRICS - y), ops.softplus(d)))
    return ops.scale(ops.sum(per), 1.0 / G)


def scorer_loss(scores, labels: list[MetricReport] | np.ndarray) -> float:
    """Total ranking loss of one candidate set (M scores, M metric reports)."""
    s = np.asarray(scores, dtype=np.float64).reshape(1, -1)
    if s.shape[1] < 2:
        raise ValueError("need at least 2 candidates")
    lab = np.array([r.as_array() if isinstance(r, MetricReport) else r for r in labels], dtype=np.float64)
    with no_grad():
        return scorer_loss_tensor(Tensor(s), pair_label_counts(lab[None])).item()


# ---------------------------------------------------------------------------
# training data


@dataclass
class ScorerSet:
    """Perturbed candidates with metric labels, grouped by source sample."""

    rows: np.ndarray  # (G,) dataset rows
    sigmas: np.ndarray  # (G, M)
    angles: np.ndarray  # (G, M, J, 3)
    joints: np.ndarray  # (G, M, J, 3)
    labels: np.ndarray  # (G, M, 4) in MetricReport.FIELDS order


def synthesize_scorer_trainset(ds: Dataset, M_per_sample: int, seed: int, ladder=SIGMA_LADDER, purpose="scorer-set") -> ScorerSet:
    """Per sample, M perturbations of the label pose with sigma drawn from the ladder."""
    G = len(ds)
    J = ds.topology.num_joints
    ladder = np.asarray(ladder, dtype=np.float64)
    sig = np.empty((G, M_per_sample))
    ang = np.empty((G, M_per_sample, J, 3))
    for g in range(G):
        rng = stream(seed, purpose, int(ds.ids[g]))
        sig[g] = ladder[rng.integers(0, len(ladder), size=M_per_sample)]
        noise = rng.normal(size=(M_per_sample, J, 3)) * sig[g][:, None, None]
        ang[g] = canonicalize_angles(ds.angles[g][None] + noise)
    roots = np.repeat(ds.root, M_per_sample, axis=0)
    joints = forward_kinematics(ds.topology, ang.reshape(-1, J, 3), roots).reshape(G, M_per_sample, J, 3)
    gt = np.repeat(ds.joints3d, M_per_sample, axis=0)
    labels = metric_table(joints.reshape(-1, J, 3), gt, ds.topology).reshape(G, M_per_sample, 4)
    return ScorerSet(np.arange(G), sig, ang, joints, labels)


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass(frozen=True)
class ScorerTrainConfig:
    steps: int = 400
    groups_per_batch: int = 16
    lr: float = 1e-3
    log_every: int = 100


def _set_inputs(ds: Dataset, sset: ScorerSet):
    G, M = sset.joints.shape[:2]
    inp = _batched_input(sset.joints.reshape(G * M, *sset.joints.shape[2:]), ds, np.repeat(sset.rows, M))
    feats = joint_features(inp).reshape(G, M, *inp.uvd.shape[1:2], -1)
    tokens = inp.obs_tokens.reshape(G, M, *inp.obs_tokens.shape[1:])
    return feats, tokens


def train_scorer(
    ds: Dataset, sset: ScorerSet, cfg: ScorerTrainConfig, seed: int, model_cfg: ScorerConfig | None = None
) -> tuple[ScorerModel, list[tuple[int, float]]]:
    if sset.joints.shape[1] < 2:
        raise ValueError("every sample needs at least 2 candidates")
    model = ScorerModel.init(model_cfg or ScorerConfig(num_joints=ds.topology.num_joints), stream(seed, "init/scorer"))
    feats, tokens = _set_inputs(ds, sset)
    counts = pair_label_counts(sset.labels)
    G, M = feats.shape[:2]
    rng = stream(seed, "train/scorer")
    state = AdamState.for_params(model.params, lr=cfg.lr)
    curve = []
    running = 0.0
    for step in range(cfg.steps):
        g = rng.integers(0, G, size=cfg.groups_per_batch)
        f = feats[g].reshape(-1, *feats.shape[2:])
        tk = tokens[g].reshape(-1, *tokens.shape[2:])
        try:
            s = ops.reshape(model.forward(f, tk), (len(g), M))
            loss = scorer_loss_tensor(s, counts[g])
        except FloatingPointError as exc:
            raise TrainingError(f"train-scorer: {exc} at step {step}") from exc
        val = loss.item()
        if not np.isfinite(val):
            raise TrainingError(f"train-scorer: non-finite loss at step {step}")
        adam_step(model.params, backward(loss, model.params.items()), state)
        running += val
        if (step + 1) % cfg.log_every == 0 or step == 0:
            k = 1 if step == 0 else cfg.log_every
            curve.append((step + 1, running / k))
            log.info("train-scorer step %d loss %.6f", step + 1, running / k)
            running = 0.0
    calibrate(model, feats.reshape(-1, *feats.shape[2:]), tokens.reshape(-1, *tokens.shape[2:]))
    return model, curve


def calibrate(model: ScorerModel, feats, tokens) -> None:
    """Shift the output bias so the median raw score on ``feats`` is zero.

    The ranking loss only sees score differences, so the offset is otherwise
    arbitrary; fixing it gives the logistic-normalised score a stable meaning.
    """
    with no_grad():
        raw = np.concatenate(
            [model.forward(feats[lo : lo + 4096], tokens[lo : lo + 4096]).data for lo in range(0, len(feats), 4096)]
        )
    b = model.params["dec2.b"]
    b.data = b.data - np.median(raw)


CORR_COLUMNS = ("pve_mm", "mpjpe_mm", "pa_mpjpe_mm", "pa_pve_mm")


@dataclass
class ScorerEval:
    plcc: dict[str, float]
    srcc: dict[str, float]
    n_used: int
    n_skipped: int


def eval_scores(scores, labels) -> ScorerEval:
    """Per-sample correlations between score and negated error, averaged.

    ``scores`` is (G, M); ``labels`` is (G, M, 4). Samples whose scores are
    constant are skipped and counted.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    P = {c: [] for c in CORR_COLUMNS}
    S = {c: [] for c in CORR_COLUMNS}
    skipped = 0
    used = 0
    for g in range(len(scores)):
        if np.all(scores[g] == scores[g][0]):
            skipped += 1
            continue
        used += 1
        for k, c in enumerate(CORR_COLUMNS):
            err = -labels[g, :, k]
            if np.all(err == err[0]):
                continue
            P[c].append(plcc(scores[g], err))
            S[c].append(srcc(scores[g], err))
    mean = lambda v: float(np.mean(v)) if v else float("nan")  # noqa: E731
    return ScorerEval({c: mean(P[c]) for c in CORR_COLUMNS}, {c: mean(S[c]) for c in CORR_COLUMNS}, used, skipped)


def eval_scorer(model: ScorerModel, ds: Dataset, sset: ScorerSet) -> ScorerEval:
    G, M = sset.joints.shape[:2]
    if M < 2:
        raise ValueError("need at least 2 candidates per sample")
    raw = model.score_candidates(sset.joints, ds, sset.rows)
    return eval_scores(normalized(raw), sset.labels)


def format_eval_table(ev: ScorerEval) -> str:
    head = "metric        PLCC     SRCC"
    rows = [f"{c:<12} {ev.plcc[c]:7.4f}  {ev.srcc[c]:7.4f}" for c in CORR_COLUMNS]
    return "\n".join([head, *rows, f"samples used {ev.n_used}, skipped {ev.n_skipped}"])
