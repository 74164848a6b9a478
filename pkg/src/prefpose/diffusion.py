"""Variance-preserving diffusion over root-relative joint positions.

Latents are ``(3J,)`` vectors of pelvis-relative joint coordinates divided by
LATENT_SCALE_MM. The denoiser predicts the added noise from ``(x_t, t, observation)``.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .autodiff import AdamState, ParameterSet, Tensor, adam_step, backward, init_linear, linear, no_grad, ops
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .rng import stream
from .skeleton import Dataset, impose_bone_lengths

log = logging.getLogger(__name__)

LATENT_SCALE_MM = 100.0
TOKEN_FEATURES = 5


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray  # index t-1 holds step t
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @property
    def alpha(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def sigma(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    @property
    def snr(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)

    def at(self, t):
        """(alpha_t, sigma_t) for 1-based timesteps."""
        i = np.asarray(t) - 1
        return self.alpha[i], self.sigma[i]


def build_schedule(T: int = 100, beta_min: float = 1e-4, beta_max: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule."""
    if T < 2:
        raise ValueError("T must be >= 2")
    if not 0.0 < beta_min < beta_max < 1.0:
        raise ValueError("need 0 < beta_min < beta_max < 1")
    beta = np.linspace(beta_min, beta_max, T)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(beta, alpha_bar)


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``x_t = alpha_t x0 + sigma_t eps``; ``t`` is a scalar or one step per row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    if np.any(np.asarray(t) < 1) or np.any(np.asarray(t) > schedule.T):
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    a, s = schedule.at(t)
    a = np.asarray(a)
    s = np.asarray(s)
    if a.ndim:
        a = a.reshape(-1, *([1] * (x0.ndim - 1)))
        s = s.reshape(-1, *([1] * (x0.ndim - 1)))
    return a * x0 + s * eps


# ---------------------------------------------------------------------------
# latents and observation tokens


def joints_to_latent(joints3d) -> np.ndarray:
    X = np.asarray(joints3d, dtype=np.float64)
    rel = X - X[..., :1, :]
    return rel.reshape(*X.shape[:-2], -1) / LATENT_SCALE_MM


def latent_to_joints(x, root=None) -> np.ndarray:
    """Decode to mm, force the pelvis to the origin, then add ``root`` if given."""
    x = np.asarray(x, dtype=np.float64)
    X = x.reshape(*x.shape[:-1], -1, 3) * LATENT_SCALE_MM
    X = X - X[..., :1, :]
    if root is not None:
        X = X + np.asarray(root, dtype=np.float64)[..., None, :]
    return X


def observation_tokens(uv, visibility, camera, root) -> np.ndarray:
    """``(n, J, 5+J)`` tokens per joint.

    Layout: [u/width, v/height, visible, bx, by, one-hot joint id] where
    (bx, by) is the keypoint back-projected to the root depth, relative to the
    root, in metres. Occluded joints carry zeros in the first five slots.
    """
    uv = np.asarray(uv, dtype=np.float64)
    vis = np.asarray(visibility, dtype=np.float64)
    cam = np.asarray(camera, dtype=np.float64)
    root = np.asarray(root, dtype=np.float64)
    n, J, _ = uv.shape
    f, z = cam[:, 0:1], root[:, 2:3]
    u = uv[..., 0] / cam[:, 3:4]
    v = uv[..., 1] / cam[:, 4:5]
    bx = ((uv[..., 0] - cam[:, 1:2]) / f * z - root[:, 0:1]) / 1000.0
    by = ((uv[..., 1] - cam[:, 2:3]) / f * z - root[:, 1:2]) / 1000.0
    cont = np.stack([u, v, np.ones_like(u), bx, by], axis=-1) * vis[..., None]
    onehot = np.broadcast_to(np.eye(J), (n, J, J))
    return np.concatenate([cont, onehot], axis=-1)


def dataset_tokens(ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return observation_tokens(ds.uv, ds.visibility, ds.camera, ds.root), ds.visibility.astype(np.float64)


# ---------------------------------------------------------------------------
# denoiser


@dataclass(frozen=True)
class DenoiserConfig:
    num_joints: int = 16
    token_dim: int = 32
    hidden: int = 256
    layers: int = 3
    time_dim: int = 32

    @property
    def latent_dim(self) -> int:
        return 3 * self.num_joints

    def to_meta(self) -> dict[str, str]:
        return {f"denoiser.{k}": str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_meta(cls, meta: dict[str, str]) -> "DenoiserConfig":
        return cls(**{f.name: int(meta[f"denoiser.{f.name}"]) for f in fields(cls)})


class DenoiserModel:
    """Noise predictor conditioned on per-joint observation tokens.

    Tokens go through a shared linear+relu embedding; occluded joints are
    replaced by a learned mask token. The trunk sees the noisy latent, a
    sinusoidal time embedding, the mean-pooled token vector and the
    concatenated tokens.
    """

    def __init__(self, config: DenoiserConfig, params: ParameterSet):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: DenoiserConfig, rng: np.random.Generator) -> "DenoiserModel":
        J, E, H = config.num_joints, config.token_dim, config.hidden
        p = ParameterSet()
        init_linear(p, "tok", TOKEN_FEATURES + J, E, rng)
        p.add("mask_token", rng.uniform(-0.1, 0.1, size=(E,)))
        width = config.latent_dim + config.time_dim + E + J * E
        for i in range(config.layers):
            init_linear(p, f"trunk{i}", width if i == 0 else H, H, rng)
        init_linear(p, "out", H, config.latent_dim, rng)
        return cls(config, p)

    def copy(self) -> "DenoiserModel":
        return DenoiserModel(self.config, self.params.copy())

    def encode(self, tokens, vis) -> Tensor:
        """(n, J, 5+J) tokens -> (n, E + J*E) condition features."""
        n, J, _ = np.shape(tokens)
        E = self.config.token_dim
        vis = np.asarray(vis, dtype=np.float64)
        emb = ops.relu(linear(self.params, "tok", Tensor(tokens)))
        keep = Tensor(np.broadcast_to(vis[..., None], (n, J, E)))
        occ = Tensor((1.0 - vis)[..., None])
        mask = ops.reshape(self.params["mask_token"], (1, E))
        emb = ops.add(ops.mul(emb, keep), ops.matmul(occ, mask))
        pooled = ops.mean(emb, axis=1)
        flat = ops.reshape(emb, (n, J * E))
        return ops.concat([pooled, flat], axis=-1)

    def forward(self, x_t, t, cond: Tensor) -> Tensor:
        x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        temb = ops.sinusoidal_time_embedding(t, self.config.time_dim)
        h = ops.concat([x, temb, cond], axis=-1)
        for i in range(self.config.layers):
            h = ops.relu(linear(self.params, f"trunk{i}", h))
        return linear(self.params, "out", h)

    def __call__(self, x_t, t, tokens, vis) -> Tensor:
        return self.forward(x_t, t, self.encode(tokens, vis))

    # fast inference path (plain numpy, no graph)
    def _cond_projection(self, tokens, vis) -> np.ndarray:
        with no_grad():
            cond = self.encode(tokens, vis).data
        w0 = self.params["trunk0.w"].data
        off = self.config.latent_dim + self.config.time_dim
        return cond @ w0[off:] + self.params["trunk0.b"].data

    def _eps_fast(self, x, t, cond_proj) -> np.ndarray:
        P = {n: t_.data for n, t_ in self.params.items()}
        D = self.config.latent_dim
        temb = ops.sinusoidal_time_embedding(t, self.config.time_dim).data
        w0 = P["trunk0.w"]
        h = np.maximum(x @ w0[:D] + temb @ w0[D : D + self.config.time_dim] + cond_proj, 0.0)
        for i in range(1, self.config.layers):
            h = np.maximum(h @ P[f"trunk{i}.w"] + P[f"trunk{i}.b"], 0.0)
        return h @ P["out.w"] + P["out.b"]


def save_denoiser(path, model: DenoiserModel, extra: dict[str, str] | None = None) -> None:
    meta = {"kind": "denoiser", **model.config.to_meta(), **(extra or {})}
    save_checkpoint(path, model.params, meta)


def load_denoiser(path) -> DenoiserModel:
    arrays, meta = load_checkpoint(path)
    if meta.get("kind") != "denoiser":
        raise ValueError(f"{path}: not a denoiser checkpoint")
    cfg = DenoiserConfig.from_meta(meta)
    model = DenoiserModel.init(cfg, np.random.default_rng(0))
    model.params.load_arrays(arrays)
    return model


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 700
    batch_size: int = 256
    lr: float = 1e-3
    log_every: int = 100


def eps_loss(model: DenoiserModel, x0, t, eps, tokens, vis, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between the true and predicted noise."""
    x_t = q_sample(x0, t, eps, schedule)
    pred = model(x_t, t, tokens, vis)
    return ops.mean(ops.sum_of_squares(ops.sub(pred, Tensor(eps)), axis=-1))


def _check_finite(loss: Tensor, step: int, what: str) -> float:
    val = loss.item()
    if not np.isfinite(val):
        raise TrainingError(f"{what}: non-finite loss {val} at step {step}")
    return val


def fit_denoiser(
    model: DenoiserModel,
    ds: Dataset,
    schedule: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    what: str = "train-base",
) -> list[tuple[int, float]]:
    """Minimise the noise-prediction loss in place; returns the logged curve."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    x0_all = joints_to_latent(ds.joints3d)
    tok_all, vis_all = dataset_tokens(ds)
    state = AdamState.for_params(model.params, lr=cfg.lr)
    curve = []
    running = 0.0
    for step in range(cfg.steps):
        rows = rng.integers(0, len(ds), size=cfg.batch_size)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch_size)
        eps = rng.normal(size=(cfg.batch_size, model.config.latent_dim))
        try:
            loss = eps_loss(model, x0_all[rows], t, eps, tok_all[rows], vis_all[rows], schedule)
        except FloatingPointError as exc:
            raise TrainingError(f"{what}: {exc} at step {step}") from exc
        val = _check_finite(loss, step, what)
        grads = backward(loss, model.params.items())
        adam_step(model.params, grads, state)
        running += val
        if (step + 1) % cfg.log_every == 0 or step == 0:
            k = 1 if step == 0 else cfg.log_every
            curve.append((step + 1, running / k))
            log.info("%s step %d loss %.6f", what, step + 1, running / k)
            running = 0.0
    return curve


def train_base(
    ds: Dataset, schedule: NoiseSchedule, cfg: TrainConfig, seed: int, model_cfg: DenoiserConfig | None = None
) -> tuple[DenoiserModel, list[tuple[int, float]]]:
    model_cfg = model_cfg or DenoiserConfig(num_joints=ds.topology.num_joints)
    model = DenoiserModel.init(model_cfg, stream(seed, "init/denoiser"))
    curve = fit_denoiser(model, ds, schedule, cfg, stream(seed, "train/base"))
    return model, curve


# ---------------------------------------------------------------------------
# sampling


def sample_latents(
    model: DenoiserModel,
    tokens,
    vis,
    schedule: NoiseSchedule,
    rngs: list[list[np.random.Generator]],
) -> np.ndarray:
    """Ancestral DDPM sampling; ``rngs[i][m]`` drives candidate m of condition i.

    Returns ``(n, M, 3J)`` latents.
    """
    n = len(rngs)
    M = len(rngs[0])
    D = model.config.latent_dim
    T = schedule.T
    noise = np.empty((n, M, T, D))
    for i in range(n):
        for m in range(M):
            noise[i, m] = rngs[i][m].normal(size=(T, D))
    cond = model._cond_projection(tokens, vis)
    cond = np.repeat(cond, M, axis=0)
    x = noise[:, :, 0].reshape(n * M, D)
    beta, sigma = schedule.beta, schedule.sigma
    for t in range(T, 0, -1):
        eps = model._eps_fast(x, np.full(n * M, t), cond)
        mean = (x - (beta[t - 1] / sigma[t - 1]) * eps) / np.sqrt(1.0 - beta[t - 1])
        if t > 1:
            x = mean + np.sqrt(beta[t - 1]) * noise[:, :, T - t + 1].reshape(n * M, D)
        else:
            x = mean
    return x.reshape(n, M, D)


@dataclass
class CandidateSet:
    sample_ids: np.ndarray  # (n,)
    latents: np.ndarray  # (n, M, 3J)
    joints3d: np.ndarray  # (n, M, J, 3) camera frame, anchored at the sample root

    @property
    def num_candidates(self) -> int:
        return self.latents.shape[1]


def sample(
    model: DenoiserModel,
    ds: Dataset,
    schedule: NoiseSchedule,
    seed: int,
    M: int,
    rows=None,
    chunk: int = 2048,
    purpose: str = "sample",
) -> CandidateSet:
    """M candidates per condition; trajectory (id, m) uses stream (seed, purpose, id, m).

    The sampled latents are decoded with the dataset's bone lengths imposed,
    and the returned latents are re-encoded from those joints.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    rows = np.arange(len(ds)) if rows is None else np.asarray(rows, dtype=np.int64)
    tok_all, vis_all = dataset_tokens(ds)
    per = max(1, chunk // M)
    out = []
    for lo in range(0, len(rows), per):
        r = rows[lo : lo + per]
        rngs = [[stream(seed, purpose, int(ds.ids[i]), m) for m in range(M)] for i in r]
        out.append(sample_latents(model, tok_all[r], vis_all[r], schedule, rngs))
    D = model.config.latent_dim
    lat = np.concatenate(out, axis=0) if out else np.zeros((0, M, D))
    # candidates are skeletons: the known bone lengths are re-imposed on decode
    joints = impose_bone_lengths(latent_to_joints(lat, ds.root[rows][:, None, :]), ds.topology)
    return CandidateSet(ds.ids[rows].copy(), joints_to_latent(joints), joints)


def save_candidates(path, cands: CandidateSet) -> None:
    """One row per candidate: sample id, candidate index, 3J camera-frame coordinates (mm)."""
    n, M = cands.joints3d.shape[:2]
    flat = cands.joints3d.reshape(n, M, -1)
    lines = ["# sample_id candidate x0 y0 z0 x1 ..."]
    for i in range(n):
        for m in range(M):
            lines.append(f"{int(cands.sample_ids[i])} {m} " + " ".join(format(v, ".17g") for v in flat[i, m]))
    Path(path).write_text("\n".join(lines) + "\n")


def load_candidates(path) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`save_candidates`: ``(ids (n,), joints (n, M, J, 3))``."""
    rows = [ln.split() for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    if not rows:
        raise ValueError(f"{path}: no candidates")
    ids = np.array([int(r[0]) for r in rows])
    idx = np.array([int(r[1]) for r in rows])
    vals = np.array([[float(v) for v in r[2:]] for r in rows])
    M = int(idx.max()) + 1
    if len(rows) % M or np.any(idx != np.tile(np.arange(M), len(rows) // M)):
        raise ValueError(f"{path}: candidate rows are not grouped per sample")
    n = len(rows) // M
    return ids[::M], vals.reshape(n, M, -1, 3)
