"""Run configuration: sectioned ``key = value`` files with typed defaults.

Every key has a default; a file may override any subset but unknown sections
or keys are errors. ``[global] seed`` must be given explicitly (file or
``--seed``). The resolved configuration is rendered canonically so its hash
can tag output files.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .skeleton import fmt_float


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict[str, object]] = {
    "global": {"seed": None},
    "data": {
        "n_train": 3000,
        "n_test": 1000,
        "n_scorer_train": 3000,
        "n_scorer_test": 200,
        "n_corrupt": 3000,
        "obs_noise_px": 3.0,
        "p_occ": 0.15,
        "corruption_fraction": 0.3,
        "corruption_sigma_rad": 0.3,
    },
    "base": {
        "steps": 700,
        "batch_size": 256,
        "lr": 1e-3,
        "hidden": 256,
        "layers": 3,
        "token_dim": 32,
        "time_dim": 32,
        "T": 100,
        "beta_min": 1e-4,
        "beta_max": 0.2,
    },
    "scorer": {
        "steps": 400,
        "groups_per_batch": 16,
        "lr": 1e-3,
        "m_per_sample": 8,
        "dim": 64,
        "heads": 4,
        "blocks": 2,
        "ffn": 128,
    },
    "prefs": {"m": 32, "k": 4, "n_samples": 1000},
    "dpo": {
        "beta_eff": 500.0,
        "omega": "constant",
        "epochs": 50,
        "batch_size": 128,
        "lr": 3e-5,
        "ema": 0.99,
        "checkpoint_every": 10,
    },
    "sft": {"steps": 1600, "batch_size": 128, "lr": 3e-5},
    "cleaning": {"tau": 0.6},
    "eval": {"m": 10},
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, dict[str, object]]

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    @property
    def seed(self) -> int:
        return int(self.values["global"]["seed"])

    def with_overrides(self, **sections: dict[str, object]) -> "RunConfig":
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for s, kv in sections.items():
            for k, v in kv.items():
                if s not in vals or k not in vals[s]:
                    raise ConfigError(f"unknown key [{s}] {k}")
                vals[s][k] = _coerce(s, k, v)
        return RunConfig(vals)

    def render(self) -> str:
        lines = []
        for s in DEFAULTS:
            lines.append(f"[{s}]")
            for k in DEFAULTS[s]:
                v = self.values[s][k]
                lines.append(f"{k} = {fmt_float(v) if isinstance(v, float) else v}")
            lines.append("")
        return "\n".join(lines)

    def hash(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()[:10]


def _coerce(section: str, key: str, raw):
    default = DEFAULTS[section][key]
    try:
        if section == "global" and key == "seed":
            v = int(raw)
            if v < 0:
                raise ValueError("seed must be non-negative")
            return v
        if isinstance(default, bool):
            raise TypeError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return str(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key}: invalid value {raw!r}") from exc


def parse_config(text: str, seed: int | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"parse error: {exc.message if hasattr(exc, 'message') else exc}".splitlines()[0]) from exc
    vals = {s: dict(kv) for s, kv in DEFAULTS.items()}
    for s in cp.sections():
        if s not in DEFAULTS:
            raise ConfigError(f"unknown section [{s}]")
        for k, raw in cp.items(s):
            if k not in DEFAULTS[s]:
                raise ConfigError(f"unknown key [{s}] {k}")
            vals[s][k] = _coerce(s, k, raw)
    if seed is not None:
        vals["global"]["seed"] = _coerce("global", "seed", seed)
    if vals["global"]["seed"] is None:
        raise ConfigError("[global] seed is required")
    return RunConfig(vals)


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    text = "" if path is None else Path(path).read_text()
    return parse_config(text, seed)
