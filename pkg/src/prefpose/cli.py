"""Pipeline driver: ``prefpose <command> --run-dir DIR [--config FILE] [--seed N]``.

Every emitted file lives under the run directory and is named
``<command>-<config hash><tag>``. The tag names the split or ranking and any
flag that overrides a config value (``-m16``, ``-tau0.5``), so two runs that
differ only in a flag never collide. The resolved config is stored as
``config-<hash>.ini``. ``log.txt`` is appended to by every command.

Failures print one line on stderr::

    error command=<cmd> type=<kind> msg=<quoted message>

with exit status 2 for usage or config problems, 3 for missing inputs and 1
for anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import CheckpointError
from .cleaning import RetrainComparison, clean, compare_retrain, score_dataset
from .config import ConfigError, RunConfig, load_config
from .diffusion import (
    DenoiserConfig,
    TrainConfig,
    TrainingError,
    build_schedule,
    load_denoiser,
    sample,
    save_candidates,
    save_denoiser,
    train_base,
)
from .evaluation import evaluate, format_summary, write_rows
from .gradcheck import TOLERANCE, format_report, run_gradchecks
from .metrics import MetricReport
from .preference import (
    DpoConfig,
    build_preference_dataset,
    build_preference_dataset_gt,
    finetune_dpo,
    finetune_supervised,
    load_pairs,
    save_pairs,
)
from .scorer import (
    ScorerConfig,
    ScorerTrainConfig,
    eval_scorer,
    eval_scores,
    format_eval_table,
    load_scorer,
    normalized,
    save_scorer,
    synthesize_scorer_trainset,
    train_scorer,
)
from .skeleton import GenConfig, fmt_float, generate_dataset, load_dataset, save_dataset

log = logging.getLogger("prefpose")

SPLITS = ("train", "test", "scorer-train", "scorer-test", "corrupt")
SUBDIRS = ("datasets", "checkpoints", "candidates", "scores", "pairs", "reports")


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class Run:
    cfg: RunConfig
    root: Path
    command: str

    @property
    def tag(self) -> str:
        return self.cfg.hash()

    def path(self, sub: str, suffix: str = "", ext: str = "txt", command: str | None = None) -> Path:
        return self.root / sub / f"{command or self.command}-{self.tag}{suffix}.{ext}"

    def need(self, path: Path) -> Path:
        if not Path(path).is_file():
            raise MissingInput(f"required input {path} not found")
        return Path(path)

    def dataset(self, split: str):
        return load_dataset(self.need(self.path("datasets", f"-{split}", command="gen-data")))

    def schedule(self):
        b = self.cfg["base"]
        return build_schedule(T=b["T"], beta_min=b["beta_min"], beta_max=b["beta_max"])

    def base_ckpt(self, given: str | None) -> Path:
        return self.need(Path(given) if given else self.path("checkpoints", ext="ckpt", command="train-base"))

    def scorer_ckpt(self, given: str | None) -> Path:
        return self.need(Path(given) if given else self.path("checkpoints", ext="ckpt", command="train-scorer"))

    def out(self, args, default: Path) -> Path:
        p = Path(args.out) if getattr(args, "out", None) else default
        p.parent.mkdir(parents=True, exist_ok=True)
        return p


def _flag_tag(args, names) -> str:
    return "".join(f"-{n}{getattr(args, n)}" for n in names if getattr(args, n, None) is not None)


def _write_curve(path: Path, curve) -> None:
    lines = ["# step loss"] + [f"{s} {fmt_float(v)}" for s, v in curve]
    path.write_text("\n".join(lines) + "\n")


def _emit(path: Path) -> None:
    log.info("wrote %s", path)
    print(path)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run, args) -> None:
    d = run.cfg["data"]
    base = GenConfig(obs_noise_px=d["obs_noise_px"], p_occ=d["p_occ"])
    sizes = {
        "train": d["n_train"],
        "test": d["n_test"],
        "scorer-train": d["n_scorer_train"],
        "scorer-test": d["n_scorer_test"],
        "corrupt": d["n_corrupt"],
    }
    for split in SPLITS:
        gc = replace(base, n_samples=sizes[split])
        if split == "corrupt":
            gc = replace(gc, corruption_fraction=d["corruption_fraction"], corruption_sigma_rad=d["corruption_sigma_rad"])
        ds = generate_dataset(gc, run.cfg.seed, split)
        p = run.path("datasets", f"-{split}")
        save_dataset(p, ds)
        _emit(p)


def _denoiser_config(cfg: RunConfig, J: int) -> DenoiserConfig:
    b = cfg["base"]
    return DenoiserConfig(num_joints=J, token_dim=b["token_dim"], hidden=b["hidden"], layers=b["layers"], time_dim=b["time_dim"])


def cmd_train_base(run: Run, args) -> None:
    ds = run.dataset(args.split)
    b = run.cfg["base"]
    tc = TrainConfig(steps=b["steps"], batch_size=b["batch_size"], lr=b["lr"])
    model, curve = train_base(ds, run.schedule(), tc, run.cfg.seed, _denoiser_config(run.cfg, ds.topology.num_joints))
    sfx = "" if args.split == "train" else f"-{args.split}"
    p = run.out(args, run.path("checkpoints", sfx, "ckpt"))
    save_denoiser(p, model, {"split": args.split})
    _write_curve(run.path("reports", sfx + "-curve"), curve)
    _emit(p)


def cmd_sample(run: Run, args) -> None:
    ds = run.dataset(args.split)
    model = load_denoiser(run.base_ckpt(args.ckpt))
    M = args.m if args.m is not None else run.cfg["eval"]["m"]
    cands = sample(model, ds, run.schedule(), run.cfg.seed, M)
    p = run.out(args, run.path("candidates", f"-{args.split}" + _flag_tag(args, ["m"])))
    save_candidates(p, cands)
    _emit(p)


def cmd_train_scorer(run: Run, args) -> None:
    ds = run.dataset("scorer-train")
    s = run.cfg["scorer"]
    sset = synthesize_scorer_trainset(ds, s["m_per_sample"], run.cfg.seed)
    mc = ScorerConfig(num_joints=ds.topology.num_joints, dim=s["dim"], heads=s["heads"], blocks=s["blocks"], ffn=s["ffn"])
    tc = ScorerTrainConfig(steps=s["steps"], groups_per_batch=s["groups_per_batch"], lr=s["lr"])
    model, curve = train_scorer(ds, sset, tc, run.cfg.seed, mc)
    p = run.out(args, run.path("checkpoints", ext="ckpt"))
    save_scorer(p, model)
    _write_curve(run.path("reports", "-curve"), curve)
    _emit(p)


def cmd_eval_scorer(run: Run, args) -> None:
    ds = run.dataset("scorer-test")
    model = load_scorer(run.scorer_ckpt(args.ckpt))
    M = args.m if args.m is not None else run.cfg["scorer"]["m_per_sample"]
    sset = synthesize_scorer_trainset(ds, M, run.cfg.seed, purpose="scorer-test-set")
    raw = model.score_candidates(sset.joints, ds, sset.rows)
    ev = eval_scorer(model, ds, sset)
    oracle = eval_scores(-sset.labels[:, :, MetricReport.FIELDS.index("mpjpe_mm")], sset.labels)
    tag = _flag_tag(args, ["m"])
    lines = ["# sample_id candidate sigma_rad raw_score normalized_score " + " ".join(MetricReport.FIELDS)]
    norm = normalized(raw)
    for g in range(len(sset.rows)):
        sid = int(ds.ids[sset.rows[g]])
        for m in range(M):
            vals = " ".join(f"{v:.6f}" for v in sset.labels[g, m])
            lines.append(f"{sid} {m} {fmt_float(sset.sigmas[g, m])} {fmt_float(raw[g, m])} {fmt_float(norm[g, m])} {vals}")
    sp = run.path("scores", tag)
    sp.parent.mkdir(parents=True, exist_ok=True)
    sp.write_text("\n".join(lines) + "\n")
    report = (
        f"scorer vs negated error, per-sample mean over {len(sset.rows)} samples, M={M}\n"
        + format_eval_table(ev)
        + "\n\noracle scorer (negated MPJPE)\n"
        + format_eval_table(oracle)
        + "\n"
    )
    p = run.out(args, run.path("reports", tag))
    p.write_text(report)
    sys.stdout.write(report)
    _emit(p)


def _pairs_path(run: Run, split: str, ranking: str, args) -> Path:
    return run.path("pairs", f"-{split}-{ranking}" + _flag_tag(args, ["m", "k"]), command="build-prefs")


def cmd_build_prefs(run: Run, args) -> None:
    ds = run.dataset(args.split)
    base = load_denoiser(run.base_ckpt(args.ckpt))
    pr = run.cfg["prefs"]
    M = args.m if args.m is not None else pr["m"]
    K = args.k if args.k is not None else pr["k"]
    if K < 1 or M < 2 * K:
        raise ConfigError(f"need K >= 1 and M >= 2K, got M={M}, K={K}")
    rows = np.arange(min(pr["n_samples"], len(ds)))
    if args.ranking == "scorer":
        scorer = load_scorer(run.scorer_ckpt(args.scorer))
        pairs = build_preference_dataset(base, scorer, ds, run.schedule(), M, K, run.cfg.seed, rows=rows)
    else:
        pairs = build_preference_dataset_gt(base, ds, run.schedule(), M, K, run.cfg.seed, rows=rows)
    p = run.out(args, _pairs_path(run, args.split, args.ranking, args))
    save_pairs(p, pairs)
    _emit(p)


def _dpo_config(cfg: RunConfig) -> DpoConfig:
    d = cfg["dpo"]
    return DpoConfig(
        beta_eff=d["beta_eff"], omega=d["omega"], epochs=d["epochs"], batch_size=d["batch_size"], lr=d["lr"],
        ema=d["ema"], checkpoint_every=d["checkpoint_every"],
    )


def cmd_dpo_finetune(run: Run, args) -> None:
    ds = run.dataset(args.split)
    base = load_denoiser(run.base_ckpt(args.ckpt))
    pairs = load_pairs(run.need(Path(args.pairs) if args.pairs else _pairs_path(run, args.split, args.ranking, args)))
    sfx = ("" if args.split == "train" else f"-{args.split}") + ("" if args.ranking == "scorer" else f"-{args.ranking}")
    default = run.path("checkpoints", sfx, "ckpt")
    p = run.out(args, default)
    prefix = p.with_suffix("")
    model, curve = finetune_dpo(base, pairs, ds, run.schedule(), _dpo_config(run.cfg), run.cfg.seed, checkpoint_prefix=prefix)
    save_denoiser(p, model, {"split": args.split, "pairs": str(len(pairs))})
    _write_curve(run.path("reports", sfx + "-curve"), curve)
    _emit(p)


def cmd_sft_finetune(run: Run, args) -> None:
    ds = run.dataset(args.split)
    base = load_denoiser(run.base_ckpt(args.ckpt))
    s = run.cfg["sft"]
    tc = TrainConfig(steps=s["steps"], batch_size=s["batch_size"], lr=s["lr"])
    model, curve = finetune_supervised(base, ds, run.schedule(), tc, run.cfg.seed)
    p = run.out(args, run.path("checkpoints", f"-{args.split}", "ckpt"))
    save_denoiser(p, model, {"split": args.split})
    _write_curve(run.path("reports", f"-{args.split}-curve"), curve)
    _emit(p)


def _model_name(run: Run, path: Path) -> str:
    return path.stem.replace(f"-{run.tag}", "")


def cmd_evaluate(run: Run, args) -> None:
    ds = run.dataset(args.split)
    if args.ckpt:
        ckpts = [run.need(Path(c)) for c in args.ckpt]
    else:
        ckpts = [run.base_ckpt(None)]
        for cmd, sfx in (("dpo-finetune", ""), ("dpo-finetune", "-corrupt"), ("sft-finetune", "-corrupt")):
            c = run.path("checkpoints", sfx, "ckpt", command=cmd)
            if c.is_file():
                ckpts.append(c)
    M = args.m if args.m is not None else run.cfg["eval"]["m"]
    if M < 1:
        raise ConfigError(f"M must be >= 1, got {M}")
    tag = ("" if args.split == "test" else f"-{args.split}") + _flag_tag(args, ["m"])
    results = {}
    for c in ckpts:
        name = _model_name(run, c)
        if name in results:
            raise UsageError(f"duplicate model name {name}")
        res = evaluate(load_denoiser(c), ds, run.schedule(), run.cfg.seed, M)
        results[name] = res
        write_rows(run.path("reports", f"{tag}-{name}-rows"), res.sample_ids, res.per_sample)
    text = f"min-of-M over {len(ds)} held-out samples (mm)\n" + format_summary(results)
    first, ref = next(iter(results.items()))
    k = MetricReport.FIELDS.index("mpjpe_mm")
    for name, res in list(results.items())[1:]:
        rel = 1.0 - res.mean.as_array()[k] / ref.mean.as_array()[k]
        text += f"mpjpe improvement of {name} over {first}: {100.0 * rel:+.2f}%\n"
    p = run.out(args, run.path("reports", tag))
    p.write_text(text)
    sys.stdout.write(text)
    _emit(p)


def cmd_clean(run: Run, args) -> None:
    ds = run.dataset(args.split)
    scorer = load_scorer(run.scorer_ckpt(args.scorer))
    tau = args.tau if args.tau is not None else run.cfg["cleaning"]["tau"]
    kept, report = clean(ds, score_dataset(scorer, ds), tau)
    tag = _flag_tag(args, ["tau"])
    dp = run.path("datasets", tag)
    save_dataset(dp, kept)
    rate = lambda d: float(d.corrupted.mean()) if len(d) else 0.0  # noqa: E731
    text = f"corruption_rate_full {rate(ds):.6f}\ncorruption_rate_kept {rate(kept):.6f}\n" + report.to_text()
    p = run.out(args, run.path("reports", tag))
    p.write_text(text)
    log.info("clean kept %d of %d (corruption %.4f -> %.4f)", len(kept), len(ds), rate(ds), rate(kept))
    _emit(dp)
    _emit(p)


def cmd_compare_retrain(run: Run, args) -> None:
    full = run.dataset(args.split)
    tag = _flag_tag(args, ["tau"])
    cleaned = load_dataset(run.need(run.path("datasets", tag, command="clean")))
    heldout = run.dataset("test")
    b = run.cfg["base"]
    tc = TrainConfig(steps=b["steps"], batch_size=b["batch_size"], lr=b["lr"])
    mc = _denoiser_config(run.cfg, full.topology.num_joints)
    cmp_: RetrainComparison = compare_retrain(
        full, cleaned, heldout, run.schedule(), tc, run.cfg.seed, run.cfg["eval"]["m"], mc
    )
    k = MetricReport.FIELDS.index("mpjpe_mm")
    rel = 1.0 - cmp_.cleaned.mean.as_array()[k] / cmp_.full.mean.as_array()[k]
    text = (
        f"min-of-{run.cfg['eval']['m']} on {len(heldout)} held-out samples (mm)\n"
        + cmp_.to_text()
        + f"corruption rate full {full.corrupted.mean():.6f} cleaned {cleaned.corrupted.mean():.6f}\n"
        + f"mpjpe improvement of cleaned over full: {100.0 * rel:+.2f}%\n"
    )
    p = run.out(args, run.path("reports", tag))
    p.write_text(text)
    sys.stdout.write(text)
    _emit(p)


class GradcheckFailed(Exception):
    pass


def cmd_gradcheck(run: Run, args) -> None:
    reports = run_gradchecks(run.cfg.seed)
    text = format_report(reports)
    p = run.out(args, run.path("reports"))
    p.write_text(text)
    sys.stdout.write(text)
    _emit(p)
    bad = [k for k, r in reports.items() if not r.max_rel_err < TOLERANCE]
    if bad:
        raise GradcheckFailed(f"relative error above {TOLERANCE:g} for {', '.join(bad)}")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate all dataset splits"),
    "train-base": (cmd_train_base, "train the base denoiser"),
    "sample": (cmd_sample, "draw M candidates per sample from a denoiser"),
    "train-scorer": (cmd_train_scorer, "train the pose scorer"),
    "eval-scorer": (cmd_eval_scorer, "PLCC/SRCC of the scorer on held-out perturbations"),
    "build-prefs": (cmd_build_prefs, "build winner/loser pairs from ranked candidates"),
    "dpo-finetune": (cmd_dpo_finetune, "preference finetuning against the frozen base"),
    "sft-finetune": (cmd_sft_finetune, "supervised finetuning on stored labels"),
    "evaluate": (cmd_evaluate, "min-of-M metrics of one or more checkpoints"),
    "clean": (cmd_clean, "drop samples whose label scores below tau"),
    "compare-retrain": (cmd_compare_retrain, "retrain on full vs cleaned set and compare"),
    "gradcheck": (cmd_gradcheck, "finite-difference checks of the three objectives"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--run-dir", required=True, help="output directory")
    common.add_argument("--config", help="config file (key = value sections)")
    common.add_argument("--seed", type=int, help="overrides [global] seed")
    common.add_argument("--out", help="explicit path of the main output")

    ap = _Parser(prog="prefpose", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", metavar="command", required=True)
    ps = {}
    for name, (_, help_) in COMMANDS.items():
        ps[name] = sub.add_parser(name, parents=[common], help=help_, description=help_)
    for name in ("sample", "build-prefs", "dpo-finetune", "sft-finetune", "evaluate", "train-base"):
        ps[name].add_argument("--ckpt", action="append" if name == "evaluate" else None,
                              help="denoiser checkpoint (repeatable for evaluate)")
    ps["eval-scorer"].add_argument("--ckpt", help="scorer checkpoint")
    for name in ("build-prefs", "clean"):
        ps[name].add_argument("--scorer", help="scorer checkpoint")
    for name in ("sample", "eval-scorer", "build-prefs", "evaluate"):
        ps[name].add_argument("--m", type=int, help="candidates per sample")
    ps["build-prefs"].add_argument("--k", type=int, help="winners/losers drawn from the top/bottom K")
    ps["dpo-finetune"].add_argument("--pairs", help="pairs file")
    for name in ("clean", "compare-retrain"):
        ps[name].add_argument("--tau", type=float, help="score threshold")
    splits = {
        "train-base": ("train", ["train", "corrupt"]),
        "sample": ("test", list(SPLITS)),
        "build-prefs": ("train", ["train", "corrupt"]),
        "dpo-finetune": ("train", ["train", "corrupt"]),
        "sft-finetune": ("corrupt", ["train", "corrupt"]),
        "evaluate": ("test", ["test", "train"]),
        "clean": ("corrupt", ["corrupt", "train"]),
        "compare-retrain": ("corrupt", ["corrupt", "train"]),
    }
    for name, (default, choices) in splits.items():
        ps[name].add_argument("--split", default=default, choices=choices)
    for name in ("build-prefs", "dpo-finetune"):
        ps[name].add_argument("--ranking", default="scorer", choices=["scorer", "gt"])
    return ap


def _setup(args) -> Run:
    cfg = load_config(args.config, args.seed) if args.config is None or Path(args.config).is_file() else None
    if cfg is None:
        raise MissingInput(f"config file {args.config} not found")
    root = Path(args.run_dir)
    for d in SUBDIRS:
        (root / d).mkdir(parents=True, exist_ok=True)
    (root / f"config-{cfg.hash()}.ini").write_text(cfg.render())
    return Run(cfg, root, args.command)


def _attach_log(run: Run) -> logging.Handler:
    h = logging.FileHandler(run.root / "log.txt", mode="a", encoding="utf-8")
    h.setFormatter(logging.Formatter(f"{run.command} [{run.tag}] %(message)s"))
    log.addHandler(h)
    log.setLevel(logging.INFO)
    return h


def _fail(command: str, kind: str, msg: str, code: int) -> int:
    print(f"error command={command} type={kind} msg={json.dumps(str(msg).splitlines()[0] if msg else '')}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    command = next((a for a in argv if a in COMMANDS), "-")
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(command, "usage", str(exc), 2)
    handler = None
    try:
        run = _setup(args)
        handler = _attach_log(run)
        t0 = time.perf_counter()
        log.info("start seed=%d", run.cfg.seed)
        COMMANDS[args.command][0](run, args)
        log.info("done in %.1f s", time.perf_counter() - t0)
        return 0
    except (ConfigError, UsageError) as exc:
        return _fail(args.command, "config", str(exc), 2)
    except (MissingInput, FileNotFoundError) as exc:
        return _fail(args.command, "missing-input", str(exc), 3)
    except GradcheckFailed as exc:
        return _fail(args.command, "gradcheck", str(exc), 1)
    except (TrainingError, CheckpointError, ValueError) as exc:
        return _fail(args.command, type(exc).__name__, str(exc), 1)
    except Exception as exc:  # noqa: BLE001 - one-line contract for every failure
        return _fail(args.command, type(exc).__name__, str(exc), 1)
    finally:
        if handler is not None:
            log.removeHandler(handler)
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
