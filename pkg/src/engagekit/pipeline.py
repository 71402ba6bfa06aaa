"""Pipeline steps behind the command line: each step reads earlier artifacts and writes its own."""

from __future__ import annotations

import hashlib
import json
import math
import platform
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .config import RunConfig, substream_seed
from .dataset import DataError, FrameTable, generate_synthetic, load_frames, load_schema, save_frames, truncate_to_games
from .metrics import feature_correlations, key_features
from .models import fit_logistic, train_gbdt
from .policy import policy_sweep, sweep_grid, timelines_from_predictions, tradeoff_curves
from .preprocess import (
    WindowTable,
    apply_scaler,
    fit_scaler,
    load_windows,
    save_windows,
    select_features,
    window_aggregate,
)
from .protocols import Generalized, Individualized, RandomSample, run_experiment, summarize
from .sequences import (
    box_plot_quantiles,
    engaged_fraction,
    engagement_by_robot_speech,
    engagement_trend,
    segment_labels,
    segments_frame,
    segments_from_labels,
    sequence_stats,
)
from .stats import anova_oneway, fleiss_kappa, pca_project, var_ftest

MANIFEST = "manifest.json"
FAMILIES = ("generalized", "individualized", "random")


class StepError(RuntimeError):
    """A pipeline step failed; the message names the step."""


def clean_json(obj):
    """Replace NaN/inf with None and numpy scalars with Python ones, recursively."""
    if isinstance(obj, dict):
        return {str(k): clean_json(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [clean_json(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return clean_json(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def dump_json(obj) -> str:
    return json.dumps(clean_json(obj), indent=1, sort_keys=True, allow_nan=False) + "\n"


def versions() -> dict[str, str]:
    import numba
    import scipy

    return {
        "engagekit": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


class ArtifactWriter:
    """Writes artifacts into the output directory and records each in the manifest.

    All writes go through one instance, so the manifest never misses a file.
    """

    def __init__(self, out: Path, cfg: RunConfig):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        path = self.out / MANIFEST
        self.manifest = json.loads(path.read_text()) if path.is_file() else {}
        if self.manifest.get("config_hash") != cfg.config_hash:
            # artifacts from another configuration are not reusable
            self.manifest = {"artifacts": {}}
        self.manifest.update(config_hash=cfg.config_hash, seed=cfg.seed, versions=versions())

    def path(self, name: str) -> Path:
        return self.out / name

    def current(self, name: str) -> Path | None:
        """Path of *name* if it was written under the current configuration."""
        p = self.out / name
        entry = self.manifest["artifacts"].get(name)
        if entry is None or not p.is_file():
            return None
        return p

    def _record(self, name: str, command: str) -> None:
        digest = hashlib.sha256((self.out / name).read_bytes()).hexdigest()
        self.manifest["artifacts"][name] = {"command": command, "sha256": digest, "config_hash": self.cfg.config_hash}
        (self.out / MANIFEST).write_text(dump_json(self.manifest))

    def text(self, name: str, text: str, command: str) -> None:
        (self.out / name).write_text(text)
        self._record(name, command)

    def json(self, name: str, obj, command: str) -> None:
        self.text(name, dump_json(obj), command)

    def csv(self, name: str, df: pd.DataFrame, command: str) -> None:
        df.to_csv(self.out / name, index=False, na_rep="", lineterminator="\n")
        self._record(name, command)

    def forget(self, prefix: str) -> None:
        """Drop manifest entries (and files) whose name starts with *prefix*."""
        for name in [n for n in self.manifest["artifacts"] if n.startswith(prefix)]:
            del self.manifest["artifacts"][name]
            (self.out / name).unlink(missing_ok=True)
        (self.out / MANIFEST).write_text(dump_json(self.manifest))


class Pipeline:
    """Runs steps in order, passing tables in memory and falling back to artifacts on disk."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.schema = load_schema(cfg.schema_path)
        self.writer = ArtifactWriter(cfg.out, cfg)
        self._frames: FrameTable | None = None
        self._windows: WindowTable | None = None

    # ---- inputs

    def frames(self) -> FrameTable:
        if self._frames is not None:
            return self._frames
        cfg = self.cfg
        if cfg.source == "csv":
            frames = load_frames(cfg.data_path, self.schema, cfg.exclude_sessions)
        else:
            cached = self.writer.current("frames.csv")
            frames = (load_frames(cached, self.schema) if cached
                      else generate_synthetic(cfg.synth, self.schema))
        if cfg.game_bounds_path is not None:
            frames = truncate_to_games(frames, read_game_bounds(cfg.game_bounds_path))
        self._frames = frames
        return frames

    def windows(self) -> WindowTable:
        if self._windows is None:
            cached = self.writer.current("windows.csv")
            self._windows = load_windows(cached, self.schema) if cached else self.preprocess()
        return self._windows

    # ---- steps

    def synth(self) -> None:
        if self.cfg.source != "synth":
            raise StepError("synth: data.source is csv; nothing to generate")
        self._frames = generate_synthetic(self.cfg.synth, self.schema)
        save_frames(self._frames, self.writer.path("frames.csv"))
        self.writer._record("frames.csv", "synth")

    def preprocess(self) -> WindowTable:
        table = window_aggregate(self.frames(), self.cfg.window_s, self.cfg.stride_s)
        if len(table) == 0:
            raise StepError("preprocess: no complete windows in the data")
        save_windows(table, self.writer.path("windows.csv"))
        self.writer._record("windows.csv", "preprocess")
        self._windows = table
        return table

    def train(self) -> None:
        """Fit the deployable model on every window and save it with its scaler."""
        cfg = self.cfg
        table = select_features(self.windows(), cfg.feature_group)
        scaler = fit_scaler(table)
        z = apply_scaler(scaler, table)
        if cfg.model_kind == "gbdt":
            model = train_gbdt(z, cfg.gbdt).to_dict()
        else:
            model = fit_logistic(np.nan_to_num(z.X(), nan=0.0), z.y(), features=z.feature_names).to_dict()
            model["format"] = "engagekit.logistic"
        self.writer.json("model.json", {"model": model, "scaler": scaler.to_dict(), "kind": cfg.model_kind}, "train")

    def split_specs(self) -> dict[str, list]:
        cfg = self.cfg
        seeds = tuple(substream_seed(cfg.seed, "split", i) for i in range(cfg.random_iterations))
        return {
            "generalized": [Generalized(m) for m in cfg.generalized],
            "individualized": [Individualized(f) for f in cfg.individualized],
            "random": [RandomSample(f, seeds) for f in cfg.random],
        }

    def evaluate(self) -> None:
        cfg = self.cfg
        windows = self.windows()
        self.writer.forget("eval_")
        self.writer.forget("predictions_")
        all_reports = []
        for family, specs in self.split_specs().items():
            if not specs:
                continue
            reports = []
            for spec in specs:
                results = run_experiment(windows, spec, cfg.gbdt, cfg.feature_group,
                                         cfg.decision_threshold, cfg.model_kind)
                reports += [r.report for r in results]
                keep = ((family == "generalized" and spec.train_users == max(cfg.generalized))
                        or (family == "individualized"
                            and math.isclose(spec.train_fraction, cfg.policy_individualized_fraction)))
                if keep:
                    pred = pd.concat(
                        [r.predictions.assign(split_id=r.report.split_id) for r in results], ignore_index=True
                    )
                    self.writer.csv(f"predictions_{family}.csv", pred, "evaluate")
            table = summarize(reports).drop(columns=["family", "n_splits"])
            self.writer.csv(f"eval_{family}.csv", table, "evaluate")
            all_reports += reports
        if not all_reports:
            raise StepError("evaluate: no split specs configured")
        self.writer.json("eval_reports.json", [r.as_dict() for r in all_reports], "evaluate")

    def sequences(self) -> None:
        cfg = self.cfg
        windows = self.windows()
        segs = segment_labels(windows, cfg.stride_s)
        stats = sequence_stats(segs)
        self.writer.csv("segments.csv", segments_frame(segs), "sequences")
        try:
            trend = {p: t.as_dict() for p, t in engagement_trend(windows, cfg.trend_bins).items()}
        except ValueError as exc:
            trend = {"error": str(exc)}
        try:
            speech = engagement_by_robot_speech(windows, cfg.speech_horizon_s)
        except ValueError as exc:
            speech = {"error": str(exc)}
        self.writer.json("sequence_stats.json", {
            "stats": stats.as_dict(),
            "box_plot": box_plot_quantiles(segs),
            "trend": trend,
            "robot_speech": speech,
            "engaged_fraction": engaged_fraction(windows),
        }, "sequences")

    def policy(self) -> None:
        cfg = self.cfg
        windows = self.windows()
        stats = sequence_stats(segment_labels(windows, cfg.stride_s))
        grid = sweep_grid(cfg.policy_windows, cfg.policy_thresholds, cfg.anchor_window,
                          cfg.anchor_threshold, cfg.policy_layout)
        self.writer.forget("policy_")
        ran = False
        for family in ("generalized", "individualized"):
            src = self.writer.current(f"predictions_{family}.csv")
            if src is None:
                continue
            pred = pd.read_csv(src, dtype={"participant_id": str, "session_id": str})
            # a window scored by several splits contributes its mean probability
            pred = (pred.groupby(["participant_id", "session_id", "t_start_s"], sort=False, as_index=False)
                    .agg(prob=("prob", "mean"), engaged=("engaged", "first")))
            timelines = timelines_from_predictions(pred)
            segs = [s for tl in timelines
                    for s in segments_from_labels(tl.label, tl.t_s, tl.participant, tl.session, cfg.stride_s)]
            table, corrs = policy_sweep(timelines, segs, stats, grid, cfg.policy_mode,
                                        cfg.anchor_window, cfg.anchor_threshold)
            self.writer.csv(f"policy_sweep_{family}.csv", table, "policy")
            self.writer.json(f"policy_{family}.json", {
                "correlations": corrs,
                "tradeoff": tradeoff_curves(table),
                "mode": cfg.policy_mode,
                "long_ds_threshold_s": stats.long_threshold,
                "short_ds_threshold_s": stats.short_threshold,
            }, "policy")
            ran = True
        if not ran:
            raise StepError("policy: no prediction artifacts; run evaluate first")

    def stats(self) -> None:
        cfg = self.cfg
        windows = self.windows()
        scaler = fit_scaler(windows)
        Z = np.nan_to_num(apply_scaler(scaler, windows).X(), nan=0.0)
        pca = pca_project(Z, 2)
        d = windows.data
        coords = pd.DataFrame(pca.coords, columns=[f"pc{i + 1}" for i in range(pca.coords.shape[1])])
        coords["participant"] = d["participant_id"].to_numpy()
        coords["session"] = d["session_id"].to_numpy()
        coords["engaged"] = d["engaged"].to_numpy()
        if "face_confidence" in d.columns:
            export = coords[d["face_confidence"].to_numpy() >= cfg.face_confidence_min]
        else:
            export = coords
        self.writer.csv("pca.csv", export, "stats")

        tests = {}
        y = d["engaged"].to_numpy()
        for j in range(pca.coords.shape[1]):
            pc = pca.coords[:, j]
            tests[f"pc{j + 1}"] = {
                "anova_participants": _anova_by(pc, d["participant_id"].to_numpy()),
                "anova_sessions": _anova_by(pc, d["session_index"].to_numpy()),
                "anova_engagement": _anova_by(pc, y),
                "ftest_engagement": _ftest(pc[y == 1], pc[y == 0]),
                "ftest_participants": _pairwise_ftests(pc, d["participant_id"].to_numpy()),
            }
        try:
            corrs = feature_correlations(windows)
            keys = key_features(corrs)
        except ValueError as exc:
            corrs, keys = {"error": str(exc)}, []
        out = {
            "pca": {"explained": pca.explained, "axes": pca.axes, "features": windows.feature_names},
            "tests": tests,
            "correlations": corrs,
            "key_features": keys,
        }
        if cfg.annotations_path is not None:
            counts = pd.read_csv(cfg.annotations_path).to_numpy()
            out["fleiss_kappa"] = fleiss_kappa(counts)
        self.writer.json("stats.json", out, "stats")

    def report(self) -> None:
        from .report import emit_report

        self.writer.text("report.md", emit_report(self.writer.out), "report")


def _result(r) -> dict:
    return {"statistic": r.statistic, "p": r.p, "df": list(r.df)}


def _anova_by(values: np.ndarray, keys: np.ndarray) -> dict:
    groups = [values[keys == k] for k in dict.fromkeys(keys)]
    groups = [g for g in groups if len(g) >= 2]
    if len(groups) < 2:
        return {"error": "fewer than two groups with at least two values"}
    return _result(anova_oneway(groups))


def _ftest(a: np.ndarray, b: np.ndarray) -> dict:
    try:
        return _result(var_ftest(a, b))
    except ValueError as exc:
        return {"error": str(exc)}


def _pairwise_ftests(values: np.ndarray, keys: np.ndarray, alpha: float = 0.05) -> dict:
    uniq = list(dict.fromkeys(keys))
    ps = []
    for i in range(len(uniq)):
        for j in range(i + 1, len(uniq)):
            r = _ftest(values[keys == uniq[i]], values[keys == uniq[j]])
            if "p" in r:
                ps.append(r["p"])
    return {"n_pairs": len(ps), "n_significant": int(sum(p < alpha for p in ps)),
            "min_p": min(ps) if ps else None, "alpha": alpha}


def read_game_bounds(path: Path) -> dict[tuple[str, str], tuple[float, float]]:
    """CSV with participant_id, session_id, start_s, end_s per session."""
    df = pd.read_csv(path, dtype={"participant_id": str, "session_id": str})
    need = {"participant_id", "session_id", "start_s", "end_s"}
    if not need <= set(df.columns):
        raise DataError(f"{path}: game bounds need columns {sorted(need)}")
    return {(r.participant_id, r.session_id): (float(r.start_s), float(r.end_s)) for r in df.itertuples()}


STEPS = ("synth", "preprocess", "train", "evaluate", "sequences", "policy", "stats")


def run(command: str, cfg: RunConfig) -> Pipeline:
    """Run one command (or ``all``) and refresh the report."""
    pipe = Pipeline(cfg)
    if command == "all":
        todo = [s for s in STEPS if s != "synth" or cfg.source == "synth"]
    elif command in STEPS or command == "report":
        todo = [command]
    else:
        raise StepError(f"unknown command {command!r}")
    for step in todo:
        getattr(pipe, step)()
    pipe.report()
    return pipe
