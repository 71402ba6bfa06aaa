"""Run configuration: an INI file with sections, overridable from the environment.

Any key can be overridden with ``ENGAGEKIT_<SECTION>_<KEY>=value``.
"""

from __future__ import annotations

import configparser
import hashlib
import os
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .dataset import SynthConfig
from .models import GbdtConfig
from .policy import DEFAULT_THRESHOLDS, DEFAULT_WINDOWS

ENV_PREFIX = "ENGAGEKIT_"

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "out": "out"},
    "data": {"source": "synth", "path": "", "schema": "", "exclude_sessions": "", "game_bounds": ""},
    "synth": {},
    "preprocess": {"window_s": "1.0", "stride_s": "0.5"},
    "model": {"kind": "gbdt", "feature_group": "all", "decision_threshold": "0.5"},
    "protocols": {
        "generalized": "1,2,3,4,5,6",
        "individualized": "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
        "random": "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9",
        "random_iterations": "10",
    },
    "policy": {
        "windows": ",".join(str(w) for w in DEFAULT_WINDOWS),
        "thresholds": ",".join(str(t) for t in DEFAULT_THRESHOLDS),
        "layout": "cross",
        "anchor_window": "3.0",
        "anchor_threshold": "0.35",
        "mode": "crossing",
        "individualized_fraction": "0.5",
    },
    "sequences": {"trend_bins": "10", "speech_horizon_s": "60"},
    "stats": {"face_confidence_min": "0.75", "annotations": ""},
}


class ConfigError(ValueError):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def substream_seed(seed: int, name: str, index: int = 0) -> int:
    """Independent, reproducible seed for a named consumer of randomness."""
    ss = np.random.SeedSequence([seed, zlib.crc32(name.encode()), index])
    return int(ss.generate_state(1)[0])


@dataclass
class RunConfig:
    seed: int = 0
    out: Path = Path("out")
    source: str = "synth"
    data_path: Path | None = None
    schema_path: Path | None = None
    exclude_sessions: tuple[tuple[str, str], ...] = ()
    game_bounds_path: Path | None = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    window_s: float = 1.0
    stride_s: float = 0.5
    model_kind: str = "gbdt"
    feature_group: str | tuple[str, ...] = "all"
    decision_threshold: float = 0.5
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)
    generalized: tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    individualized: tuple[float, ...] = ()
    random: tuple[float, ...] = ()
    random_iterations: int = 10
    policy_windows: tuple[float, ...] = DEFAULT_WINDOWS
    policy_thresholds: tuple[float, ...] = DEFAULT_THRESHOLDS
    policy_layout: str = "cross"
    anchor_window: float = 3.0
    anchor_threshold: float = 0.35
    policy_mode: str = "crossing"
    policy_individualized_fraction: float = 0.5
    trend_bins: int = 10
    speech_horizon_s: float = 60.0
    face_confidence_min: float = 0.75
    annotations_path: Path | None = None
    raw: dict = field(default_factory=dict)

    @property
    def config_hash(self) -> str:
        # the output location does not change results, so it stays out of the hash
        text = "\n".join(
            f"{s}.{k}={v}" for s in sorted(self.raw) for k, v in sorted(self.raw[s].items()) if (s, k) != ("run", "out")
        )
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _build_dataclass(cls, section: dict[str, str], seed: int | None = None):
    kwargs = {}
    for f in fields(cls):
        if f.name in section:
            raw = section[f.name]
            typ = f.type if isinstance(f.type, type) else {"int": int, "float": float}.get(str(f.type), float)
            kwargs[f.name] = int(raw) if typ is int else float(raw)
    if seed is not None and "seed" not in section:
        kwargs["seed"] = seed
    return cls(**kwargs)


def load_config(path: str | Path | None = None, overrides: dict[str, dict[str, str]] | None = None,
                environ: dict[str, str] | None = None) -> RunConfig:
    """Read defaults, then *path*, then ``ENGAGEKIT_*`` variables, then *overrides*."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";",))
    parser.optionxform = str
    parser.read_dict(DEFAULTS)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            parser.read(p)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from None
    env = os.environ if environ is None else environ
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX):
            continue
        rest = key[len(ENV_PREFIX):].lower()
        for section in parser.sections():
            if rest.startswith(section + "_"):
                parser.set(section, rest[len(section) + 1:], value)
                break
    for section, items in (overrides or {}).items():
        if not parser.has_section(section):
            parser.add_section(section)
        for k, v in items.items():
            parser.set(section, k, str(v))
    raw = {s: dict(parser.items(s)) for s in parser.sections()}
    try:
        return _from_raw(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None


def _opt_path(text: str) -> Path | None:
    return Path(text) if text.strip() else None


def _from_raw(raw: dict[str, dict[str, str]]) -> RunConfig:
    known = {s: set(v) for s, v in DEFAULTS.items()}
    known["synth"] = {f.name for f in fields(SynthConfig)}
    known["model"] |= {f.name for f in fields(GbdtConfig)}
    for section, items in raw.items():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(items) - known[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")

    run, data, model = raw["run"], raw["data"], raw["model"]
    seed = int(run["seed"])
    source = data["source"]
    if source not in ("synth", "csv"):
        raise ConfigError("data.source must be 'synth' or 'csv'")
    if source == "csv" and not data["path"].strip():
        raise ConfigError("data.source = csv needs data.path")
    if source == "synth" and data["path"].strip():
        raise ConfigError("give either a synthetic source or data.path, not both")
    exclude = tuple(
        tuple(item.split(":", 1)) for item in data["exclude_sessions"].split(",") if item.strip()
    )
    if any(len(e) != 2 for e in exclude):
        raise ConfigError("exclude_sessions entries look like participant:session")
    group = model["feature_group"].strip()
    feature_group: str | tuple[str, ...] = group if group in ("all", "visual", "audio", "game", "key") else tuple(
        g.strip() for g in group.split(",") if g.strip()
    )
    prot, pol, seq, st = raw["protocols"], raw["policy"], raw["sequences"], raw["stats"]
    cfg = RunConfig(
        seed=seed,
        out=Path(run["out"]),
        source=source,
        data_path=_opt_path(data["path"]),
        schema_path=_opt_path(data["schema"]),
        exclude_sessions=exclude,  # type: ignore[arg-type]
        game_bounds_path=_opt_path(data["game_bounds"]),
        synth=_build_dataclass(SynthConfig, raw["synth"], substream_seed(seed, "synth")),
        window_s=float(raw["preprocess"]["window_s"]),
        stride_s=float(raw["preprocess"]["stride_s"]),
        model_kind=model["kind"],
        feature_group=feature_group,
        decision_threshold=float(model["decision_threshold"]),
        gbdt=_build_dataclass(GbdtConfig, {k: v for k, v in model.items() if k in {f.name for f in fields(GbdtConfig)}},
                              substream_seed(seed, "bagging")),
        generalized=_ints(prot["generalized"]),
        individualized=_floats(prot["individualized"]),
        random=_floats(prot["random"]),
        random_iterations=int(prot["random_iterations"]),
        policy_windows=_floats(pol["windows"]),
        policy_thresholds=_floats(pol["thresholds"]),
        policy_layout=pol["layout"],
        anchor_window=float(pol["anchor_window"]),
        anchor_threshold=float(pol["anchor_threshold"]),
        policy_mode=pol["mode"],
        policy_individualized_fraction=float(pol["individualized_fraction"]),
        trend_bins=int(seq["trend_bins"]),
        speech_horizon_s=float(seq["speech_horizon_s"]),
        face_confidence_min=float(st["face_confidence_min"]),
        annotations_path=_opt_path(st["annotations"]),
        raw=raw,
    )
    if cfg.model_kind not in ("gbdt", "logistic"):
        raise ConfigError("model.kind must be gbdt or logistic")
    if cfg.policy_mode not in ("crossing", "any"):
        raise ConfigError("policy.mode must be crossing or any")
    return cfg
