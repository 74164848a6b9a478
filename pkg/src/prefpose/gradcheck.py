"""Finite-difference checks of the three trained objectives on small instances."""

from __future__ import annotations

from .autodiff import GradcheckReport, gradient_check_report, ops
from .diffusion import DenoiserConfig, DenoiserModel, build_schedule, dataset_tokens, eps_loss, joints_to_latent
from .preference import DpoConfig, dpo_loss_tensor
from .rng import stream
from .scorer import ScorerConfig, ScorerModel, _set_inputs, pair_label_counts, scorer_loss_tensor, synthesize_scorer_trainset
from .skeleton import GenConfig, generate_dataset

TOLERANCE = 1e-4


def run_gradchecks(seed: int, h: float = 1e-5, n_coords: int = 16) -> dict[str, GradcheckReport]:
    """Reports for the noise-prediction loss, the scorer ranking loss and the DPO loss."""
    ds = generate_dataset(GenConfig(n_samples=4), seed, "gradcheck")
    J = ds.topology.num_joints
    sched = build_schedule(T=20)
    dcfg = DenoiserConfig(num_joints=J, token_dim=6, hidden=12, layers=2, time_dim=6)
    rng = stream(seed, "gradcheck")
    out = {}

    model = DenoiserModel.init(dcfg, stream(seed, "gradcheck/denoiser"))
    x0 = joints_to_latent(ds.joints3d)
    tok, vis = dataset_tokens(ds)
    t = rng.integers(1, sched.T + 1, size=len(ds))
    eps = rng.normal(size=x0.shape)
    out["denoiser"] = gradient_check_report(
        lambda: eps_loss(model, x0, t, eps, tok, vis, sched), model.params, h=h, n_coords=n_coords,
        rng=stream(seed, "gradcheck/coords", 0),
    )

    # attention logits at init are nearly uniform, which leaves gradients at
    # round-off level; sharpen them so the check is informative
    scorer = ScorerModel.init(ScorerConfig(num_joints=J, dim=8, heads=2, blocks=1, ffn=8), stream(seed, "gradcheck/scorer"))
    for name, p in scorer.params.items():
        if name.endswith(".w"):
            p.data = 2.0 * p.data
    sub = ds.subset([0, 1])
    sset = synthesize_scorer_trainset(sub, 3, seed, purpose="gradcheck/scorer-set")
    feats, tokens = _set_inputs(sub, sset)
    counts = pair_label_counts(sset.labels)
    G, M = feats.shape[:2]
    f = feats.reshape(G * M, *feats.shape[2:])
    tk = tokens.reshape(G * M, *tokens.shape[2:])
    out["scorer_loss"] = gradient_check_report(
        lambda: scorer_loss_tensor(ops.reshape(scorer.forward(f, tk), (G, M)), counts),
        scorer.params, h=h, n_coords=n_coords, rng=stream(seed, "gradcheck/coords", 1),
    )

    ref = DenoiserModel.init(dcfg, stream(seed, "gradcheck/denoiser"))
    theta = ref.copy()
    for _, p in theta.params.items():
        p.data = p.data + 0.05 * rng.normal(size=p.shape)
    xw = x0 + 0.1 * rng.normal(size=x0.shape)
    xl = x0 + 0.3 * rng.normal(size=x0.shape)
    cfg = DpoConfig(beta_eff=500.0)
    out["dpo_loss"] = gradient_check_report(
        lambda: dpo_loss_tensor(theta, ref, xw, xl, t, eps, eps, tok, vis, sched, cfg),
        theta.params, h=h, n_coords=n_coords, rng=stream(seed, "gradcheck/coords", 2),
    )
    return out


def format_report(reports: dict[str, GradcheckReport]) -> str:
    lines = [f"{'objective':<14}{'max_rel_err':>14}{'checked':>9}{'kinks':>7}{'zero':>6}  status"]
    for name, r in reports.items():
        status = "ok" if r.max_rel_err < TOLERANCE else "FAIL"
        lines.append(f"{name:<14}{r.max_rel_err:>14.3e}{r.n_checked:>9}{r.n_kinks:>7}{r.n_zero:>6}  {status}")
    return "\n".join(lines) + "\n"
