"""Consolidated markdown report assembled from the artifacts in an output directory."""

from __future__ import annotations

import json
import math
from pathlib import Path

import pandas as pd

EXPECTED = {
    "evaluation": ["eval_reports.json"],
    "sequences": ["segments.csv", "sequence_stats.json"],
    "policy": ["policy_sweep_generalized.csv", "policy_generalized.json"],
    "statistics": ["stats.json", "pca.csv"],
}


def _fmt(v, digits: int = 3) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def markdown_table(df: pd.DataFrame, digits: int = 3) -> str:
    head = "| " + " | ".join(map(str, df.columns)) + " |"
    rule = "|" + "---|" * len(df.columns)
    rows = ["| " + " | ".join(_fmt(v, digits) for v in row) + " |" for row in df.itertuples(index=False)]
    return "\n".join([head, rule, *rows])


def _read_csv(path: Path) -> pd.DataFrame:
    return pd.read_csv(path, dtype={"participant_id": str, "session_id": str}, keep_default_na=False,
                       na_values=[""])


def _evaluation(out: Path) -> list[str]:
    lines = []
    for family in ("generalized", "individualized", "random"):
        p = out / f"eval_{family}.csv"
        if p.is_file():
            lines += [f"### {family.capitalize()} models", "", markdown_table(_read_csv(p)), ""]
    return lines


def _sequences(out: Path) -> list[str]:
    doc = json.loads((out / "sequence_stats.json").read_text())
    s = doc["stats"]
    rows = pd.DataFrame(
        [["ES", s["n_es"], s["es_q1"], s["es_median"], s["es_q3"]],
         ["DS", s["n_ds"], s["ds_q1"], s["ds_median"], s["ds_q3"]]],
        columns=["Kind", "Count", "Q1 (s)", "Median (s)", "Q3 (s)"],
    )
    lines = [markdown_table(rows, 2), ""]
    lines.append(
        f"Disengaged time in long / mid / short DS: {_fmt(s['long_share'])} / {_fmt(s['mid_share'])} / "
        f"{_fmt(s['short_share'])} (long share with a strict boundary: {_fmt(s['long_share_strict'])})."
    )
    lines.append(f"Engaged fraction of windows: {_fmt(doc['engaged_fraction'])}.")
    trend = doc["trend"]
    if "error" in trend:
        lines.append(f"Engagement trend not computed: {trend['error']}.")
    else:
        t = pd.DataFrame([[p, v["slope"], v["p"]] for p, v in trend.items()], columns=["Participant", "Slope", "p"])
        lines += ["", "Engagement trend per participant:", "", markdown_table(t, 4)]
    sp = doc["robot_speech"]
    if "error" not in sp:
        lines += ["", f"Engagement with recent robot speech {_fmt(sp['rate_recent_speech'])}, "
                      f"without {_fmt(sp['rate_no_recent_speech'])}."]
    return lines + [""]


def _policy(out: Path) -> list[str]:
    lines = []
    for family in ("generalized", "individualized"):
        p = out / f"policy_sweep_{family}.csv"
        if not p.is_file():
            continue
        meta = json.loads((out / f"policy_{family}.json").read_text())
        lines += [f"### Policy sweep on {family} predictions", "", markdown_table(_read_csv(p), 2), ""]
        corr = meta["correlations"]
        rows = [[k, corr["threshold"].get(k), corr["window"].get(k)] for k in corr["threshold"]]
        lines += ["Rank correlations with the swept parameter:", "",
                  markdown_table(pd.DataFrame(rows, columns=["Metric", "Threshold", "Window"]), 2), ""]
    return lines


def _statistics(out: Path) -> list[str]:
    doc = json.loads((out / "stats.json").read_text())
    ex = doc["pca"]["explained"]
    lines = [f"PCA explained variance: {', '.join(_fmt(v) for v in ex)}.", ""]
    rows = []
    for pc, tests in doc["tests"].items():
        for name, r in tests.items():
            if "p" in r:
                rows.append([pc, name, r["statistic"], r["p"]])
            elif "n_pairs" in r:
                rows.append([pc, name, f"{r['n_significant']}/{r['n_pairs']} pairs", r["min_p"]])
    if rows:
        lines += [markdown_table(pd.DataFrame(rows, columns=["Axis", "Test", "Statistic", "p"]), 4), ""]
    lines.append("Key features (|r| > 0.20): " + (", ".join(doc["key_features"]) or "none") + ".")
    if "fleiss_kappa" in doc:
        lines.append(f"Fleiss' kappa of the annotations: {_fmt(doc['fleiss_kappa'])}.")
    return lines + [""]


SECTIONS = {
    "evaluation": ("Evaluation", _evaluation),
    "sequences": ("Engagement sequences", _sequences),
    "policy": ("Re-engagement policy", _policy),
    "statistics": ("Statistics", _statistics),
}


def emit_report(out: str | Path) -> str:
    """Markdown report of every section whose artifacts exist; absent sections say "not run"."""
    out = Path(out)
    lines = ["# Engagement pipeline report", ""]
    missing = []
    for key, (title, render) in SECTIONS.items():
        lines += [f"## {title}", ""]
        absent = [n for n in EXPECTED[key] if not (out / n).is_file()]
        if absent:
            missing += absent
            lines += ["not run", ""]
            continue
        lines += render(out)
    if missing:
        lines += ["## Missing artifacts", ""] + [f"- {n}" for n in missing] + [""]
    lines += ["---", "", "Provenance:", ""]
    manifest = out / "manifest.json"
    if manifest.is_file():
        m = json.loads(manifest.read_text())
        lines.append(f"- config hash: {m.get('config_hash')}")
        lines.append(f"- seed: {m.get('seed')}")
        lines.append("- versions: " + ", ".join(f"{k} {v}" for k, v in sorted(m.get("versions", {}).items())))
        for name, entry in sorted(m.get("artifacts", {}).items()):
            if name != "report.md":
                lines.append(f"- {name}: sha256 {entry['sha256'][:16]}")
    else:
        lines.append("- no manifest found")
    return "\n".join(lines) + "\n"
