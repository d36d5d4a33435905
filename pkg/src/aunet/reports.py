"""Ablation report assembly: aggregate per-fold metrics into one table with
published benchmark F1 numbers alongside for reference.

The reference columns reproduce per-AU F1 scores reported in the AU
detection literature on BP4D and DISFA (3-fold subject splits); they are
display-only anchors, never targets the synthetic runs are graded against.
"""

from __future__ import annotations

import json
import os
from typing import Dict, List, Optional

import numpy as np

# published per-AU F1 (percent) on BP4D, 3-fold subject cross-validation
BP4D_REFERENCE_F1 = {
    "au_order": (1, 2, 4, 6, 7, 10, 12, 14, 15, 17, 23, 24),
    "LSVM": (23.2, 22.8, 23.1, 27.2, 47.1, 77.2, 63.7, 64.3, 18.4, 33.0, 19.4, 20.7),
    "JPML": (32.6, 25.6, 37.4, 42.3, 50.5, 72.2, 74.1, 65.7, 38.1, 40.0, 30.4, 42.3),
    "DRML": (36.4, 41.8, 43.0, 55.0, 67.0, 66.3, 65.8, 54.1, 36.7, 48.0, 31.7, 30.0),
    "CPM": (43.4, 40.7, 43.4, 59.2, 61.3, 62.1, 68.5, 52.5, 34.0, 54.3, 39.5, 37.8),
    "CNN+LSTM": (31.4, 31.1, 71.4, 63.3, 77.1, 45.0, 82.6, 72.9, 33.2, 53.9, 38.6, 37.0),
    "FVGG": (27.8, 27.6, 18.3, 69.7, 69.1, 78.1, 63.2, 36.4, 26.1, 50.7, 22.8, 35.9),
    "ROI": (36.2, 31.6, 43.4, 77.1, 73.7, 85.0, 87.0, 62.6, 45.7, 58.0, 38.3, 37.4),
    "R-T1": (47.1, 56.2, 52.4, 78.5, 80.8, 87.8, 89.4, 74.8, 58.5, 68.4, 40.4, 59.4),
    "R-T2": (45.8, 48.0, 45.9, 76.7, 79.6, 85.3, 87.2, 71.6, 48.0, 59.5, 37.5, 51.1),
    "FERA": (28.0, 28.0, 34.0, 70.0, 78.0, 81.0, 78.0, 75.0, 20.0, 36.0, 41.0, None),
}

# published per-AU F1 (percent) on DISFA, frozen-feature transfer protocol
DISFA_REFERENCE_F1 = {
    "au_order": (1, 2, 4, 6, 9, 12, 25, 26),
    "LSVM": (10.8, 10.0, 21.8, 15.7, 11.5, 70.4, 12.0, 22.1),
    "APL": (11.4, 12.0, 30.1, 12.4, 10.1, 65.9, 21.4, 26.9),
    "DRML": (17.3, 17.7, 37.4, 29.0, 10.7, 37.7, 38.5, 20.1),
    "FVGG": (32.5, 24.3, 61.0, 34.2, 1.67, 72.1, 87.3, 7.1),
    "ROI": (41.5, 26.4, 66.4, 50.7, 8.5, 89.3, 88.9, 15.6),
    "R-T1": (42.6, 27.2, 65.5, 55.5, 22.8, 82.9, 88.3, 25.9),
}


def reference_average(table: Dict, method: str) -> float:
    values = [v for v in table[method] if v is not None]
    return round(float(np.mean(values)), 1)


def collect_metric_records(runs_dir) -> List[dict]:
    """All metrics.json files under a directory tree, sorted by path."""
    records = []
    for dirpath, _, files in sorted(os.walk(runs_dir)):
        if "metrics.json" in files:
            path = os.path.join(dirpath, "metrics.json")
            with open(path, "r", encoding="utf-8") as fh:
                record = json.load(fh)
            record["_path"] = os.path.relpath(path, runs_dir)
            records.append(record)
    return records


def aggregate_by_mode(records: List[dict]) -> Dict[str, dict]:
    """Unweighted mean of per-fold F1 vectors per mode (the fold average)."""
    by_mode: Dict[str, List[dict]] = {}
    for record in records:
        by_mode.setdefault(record["mode"], []).append(record)
    out = {}
    for mode, group in sorted(by_mode.items()):
        f1 = np.mean([g["f1"] for g in group], axis=0)
        out[mode] = {
            "au_list": group[0]["au_list"],
            "folds": sorted({g["fold"] for g in group}),
            "runs": len(group),
            "f1": [float(v) for v in f1],
            "average_f1": float(np.mean([g["average_f1"] for g in group])),
        }
    return out


def render_report(aggregated: Dict[str, dict]) -> str:
    """Table 2 style text: one AU per row, one column per trained mode, plus
    the strongest published reference averages for side-by-side context."""
    if not aggregated:
        return "no metric records found\n"
    modes = list(aggregated)
    au_list = aggregated[modes[0]]["au_list"]
    width = max(len(m) for m in modes) + 2
    header = f"{'AU':>4}" + "".join(f"{m:>{width}}" for m in modes)
    lines = [header]
    for row, au in enumerate(au_list):
        cells = "".join(f"{100 * aggregated[m]['f1'][row]:>{width}.1f}" for m in modes)
        lines.append(f"{au:>4}" + cells)
    lines.append(f"{'Avg':>4}" + "".join(
        f"{100 * aggregated[m]['average_f1']:>{width}.1f}" for m in modes))
    lines.append("")
    lines.append("published reference averages (percent F1):")
    lines.append(f"  BP4D  R-T1 {reference_average(BP4D_REFERENCE_F1, 'R-T1'):.1f}"
                 f"  ROI {reference_average(BP4D_REFERENCE_F1, 'ROI'):.1f}"
                 f"  FVGG {reference_average(BP4D_REFERENCE_F1, 'FVGG'):.1f}")
    lines.append(f"  DISFA R-T1 {reference_average(DISFA_REFERENCE_F1, 'R-T1'):.1f}"
                 f"  ROI {reference_average(DISFA_REFERENCE_F1, 'ROI'):.1f}"
                 f"  FVGG {reference_average(DISFA_REFERENCE_F1, 'FVGG'):.1f}")
    return "\n".join(lines) + "\n"


def write_report(runs_dir, out_path: Optional[str] = None) -> dict:
    records = collect_metric_records(runs_dir)
    aggregated = aggregate_by_mode(records)
    payload = {
        "modes": aggregated,
        "records": [r["_path"] for r in records],
        "reference": {
            "bp4d_rt1_average": reference_average(BP4D_REFERENCE_F1, "R-T1"),
            "disfa_rt1_average": reference_average(DISFA_REFERENCE_F1, "R-T1"),
        },
    }
    text = render_report(aggregated)
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        with open(str(out_path) + ".json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return payload
