"""Shared drivers for running the CLI pipeline inside tests."""

import json
import time
from pathlib import Path

from prefpose.cli import main
from prefpose.config import load_config

TINY = Path(__file__).parent / "data" / "tiny.ini"

TINY_PIPELINE = [
    ["gen-data"],
    ["train-base"],
    ["sample", "--m", "3"],
    ["train-scorer"],
    ["eval-scorer"],
    ["build-prefs"],
    ["build-prefs", "--ranking", "gt"],
    ["dpo-finetune"],
    ["train-base", "--split", "corrupt"],
    ["build-prefs", "--split", "corrupt"],
    ["dpo-finetune", "--split", "corrupt"],
    ["sft-finetune"],
    ["evaluate"],
    ["evaluate", "--m", "1"],
    ["clean", "--tau", "0.0"],
    ["clean"],
    ["compare-retrain", "--tau", "0.0"],
    ["gradcheck"],
]


def run_tiny(root: Path) -> dict[str, bytes]:
    """Run every command on the tiny config; return all outputs except the log."""
    for cmd in TINY_PIPELINE:
        assert main([*cmd, "--run-dir", str(root), "--config", str(TINY)]) == 0, cmd
    return {
        str(p.relative_to(root)): p.read_bytes()
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != "log.txt"
    }


class SeedRun:
    """Default-config CLI run for one seed; steps already recorded as done are skipped.

    Elapsed seconds per step are kept in ``timings.json`` beside the run
    directory so a reused directory still reports the original runtimes.
    """

    def __init__(self, base: Path, seed: int):
        self.seed = seed
        self.root = base / f"seed{seed}"
        self.hash = load_config(None, seed).hash()
        self._tfile = base / f"seed{seed}-timings.json"
        self.timings = json.loads(self._tfile.read_text()) if self._tfile.is_file() else {}

    def step(self, *args: str) -> float:
        key = " ".join(args)
        if key not in self.timings:
            t0 = time.perf_counter()
            code = main([*args, "--run-dir", str(self.root), "--seed", str(self.seed)])
            assert code == 0, f"{key} exited with {code}"
            self.timings[key] = time.perf_counter() - t0
            self._tfile.write_text(json.dumps(self.timings, indent=1))
        return self.timings[key]

    def report(self, name: str) -> str:
        return (self.root / "reports" / name.format(h=self.hash)).read_text()


def table_row(text: str, first: str) -> list[str]:
    for line in text.splitlines():
        f = line.split()
        if f and f[0] == first:
            return f
    raise KeyError(first)
