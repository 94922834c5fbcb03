"""
Report Writer Module

Serializes evaluation and benchmark reports: a YAML document with stable key
order, one CSV per report block and gnuplot-ready ``.dat`` files for the
curves. Floats are rounded to 6 decimals, so identical reports always give
identical bytes.
"""
from typing import Any, Dict, List, Optional
from collections import OrderedDict
import logging
import math
import os

import numpy as np
import pandas as pd
import yaml

logger = logging.getLogger(__name__)

FLOAT_DIGITS = 6
CSV_FLOAT_FORMAT = "%.6f"

REPORT_FILENAME = "report.yaml"
BENCH_FILENAME = "bench.yaml"


def _plain(value: Any) -> Any:
    """Recursively convert to YAML-safe builtins, rounding floats."""
    if isinstance(value, dict):
        return {str(k): _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if not math.isfinite(value):
            return None
        rounded = round(value, FLOAT_DIGITS)
        return 0.0 if rounded == 0 else rounded
    return value


def report_yaml(report: Dict[str, Any]) -> bytes:
    """Deterministic YAML bytes of a report mapping."""
    text = yaml.safe_dump(_plain(report), sort_keys=False, default_flow_style=False, width=1000)
    return text.encode("utf-8")


def _write_csv(frame: pd.DataFrame, path: str) -> str:
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def _write_dat(columns: List[np.ndarray], header: str, path: str) -> str:
    np.savetxt(path, np.column_stack(columns), fmt="%.6f", header=header, comments="# ")
    return path


def flatten_report(report: Dict[str, Any]) -> "OrderedDict[str, pd.DataFrame]":
    """One table per report block."""
    tables: "OrderedDict[str, pd.DataFrame]" = OrderedDict()
    tables["overall"] = pd.DataFrame([report["overall"]])
    tables["quadrants"] = pd.DataFrame(
        [OrderedDict(quadrant=q, **block) for q, block in report["quadrants"].items()]
    )
    tables["grid"] = pd.DataFrame(report["grid"]["cells"])
    if report.get("pose"):
        tables["pose"] = pd.DataFrame(
            [OrderedDict(bin=name, **block) for name, block in report["pose"]["bins"].items()]
        )
    rows = []
    for mode, curves in report["leave_n_in"].items():
        if mode == "spearman":
            continue
        for dimension, points in curves.items():
            rows.extend(OrderedDict(mode=mode, dimension=dimension, **p) for p in points)
    tables["leave_n_in"] = pd.DataFrame(rows)
    if report.get("raters"):
        raters = report["raters"]
        tables["raters"] = pd.DataFrame(
            [OrderedDict(rater_id=r, reliability=w) for r, w in raters["reliabilities"].items()]
        )
    return tables


def write_eval_report(report: Dict[str, Any], out_dir: str) -> List[str]:
    """
    Write ``report.yaml``, block CSVs, the leave-N-in curves and the grid MAE
    maps into ``out_dir``.

    Returns:
        Paths written, in write order
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, REPORT_FILENAME)
    with open(path, "wb") as fh:
        fh.write(report_yaml(report))
    written.append(path)

    for name, table in flatten_report(report).items():
        written.append(_write_csv(table, os.path.join(out_dir, f"{name}.csv")))

    for mode, curves in report["leave_n_in"].items():
        if mode == "spearman":
            continue
        for dimension, points in curves.items():
            columns = [np.array([p["n"] for p in points], dtype=float),
                       np.array([p["ccc"] for p in points], dtype=float),
                       np.array([p["mae"] for p in points], dtype=float)]
            written.append(_write_dat(columns, "n ccc mae", os.path.join(out_dir, f"leave_n_in_{mode}_{dimension}.dat")))

    grid = report["grid"]
    resolution = grid["resolution"]
    for short in ("v", "a"):
        mae_map = np.full((resolution, resolution), np.nan)
        for cell in grid["cells"]:
            if cell[f"mae_{short}"] is not None:
                mae_map[cell["row"], cell["col"]] = cell[f"mae_{short}"]
        path = os.path.join(out_dir, f"grid_mae_{short}.dat")
        np.savetxt(path, mae_map, fmt="%.6f", header="rows: arousal bins (low to high), cols: valence bins", comments="# ")
        written.append(path)
    counts = np.zeros((resolution, resolution), dtype=int)
    for cell in grid["cells"]:
        counts[cell["row"], cell["col"]] = cell["count"]
    path = os.path.join(out_dir, "grid_counts.dat")
    np.savetxt(path, counts, fmt="%d", header="sample count per VA bin", comments="# ")
    written.append(path)

    logger.info(f"Report written to {out_dir}")
    return written


def write_bench_report(report: Dict[str, Any], out_dir: str) -> List[str]:
    """Write ``bench.yaml``, the per-AU ICC table and the CED curve."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    path = os.path.join(out_dir, BENCH_FILENAME)
    with open(path, "wb") as fh:
        fh.write(report_yaml(report))
    written.append(path)

    ced = report["landmarks"]["ced"]
    written.append(_write_dat(
        [np.asarray(ced["error"]), np.asarray(ced["fraction"])],
        "nme fraction_of_images",
        os.path.join(out_dir, "ced.dat"),
    ))
    if report.get("au_icc"):
        table = pd.DataFrame([OrderedDict(au=k, icc=v) for k, v in report["au_icc"].items()])
        written.append(_write_csv(table, os.path.join(out_dir, "au_icc.csv")))
    logger.info(f"Benchmark written to {out_dir}")
    return written


def load_report(path: str) -> Optional[Dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as fh:
        return yaml.safe_load(fh)
