"""
Report Export
Write plot-ready CSV and JSON artifacts for parameters, clouds, models,
critical points and statistics.

CSV files use "\n" line endings and an empty field for missing values; JSON
files are indented with sorted keys and carry no timestamps, so repeated runs
produce identical bytes.
"""

import json
import math
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from src.errors import OnhError
from src.parameters import PARAMETER_COLUMNS, ExtractionResult
from src.volume_io import TISSUES


def _jsonable(value):
    """numpy scalars and arrays to plain Python; NaN and inf to None."""
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    return value


def write_json(data, output_path, verbose: bool = False) -> Path:
    output_path = Path(output_path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", newline="\n") as f:
            json.dump(_jsonable(data), f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise OnhError("export", "IO_FAILURE", f"cannot write {output_path}: {e}", field=str(output_path))
    if verbose:
        print(f"Exported {output_path}")
    return output_path


def write_csv(df: pd.DataFrame, output_path, verbose: bool = False) -> Path:
    output_path = Path(output_path)
    try:
        output_path.parent.mkdir(parents=True, exist_ok=True)
        df.to_csv(output_path, index=False, na_rep="", lineterminator="\n", float_format="%.10g")
    except OSError as e:
        raise OnhError("export", "IO_FAILURE", f"cannot write {output_path}: {e}", field=str(output_path))
    if verbose:
        print(f"Exported {output_path} ({len(df)} rows)")
    return output_path


def parameter_table(results: Dict[str, ExtractionResult],
                    groups: Optional[Dict[str, str]] = None) -> pd.DataFrame:
    """One row per eye: eye_id, group (empty when unknown), then the fixed parameter columns."""
    groups = groups or {}
    rows = []
    for eye_id in sorted(results):
        row = {"eye_id": eye_id, "group": groups.get(eye_id) or ""}
        row.update(results[eye_id].parameters.to_row())
        rows.append(row)
    return pd.DataFrame(rows, columns=["eye_id", "group"] + PARAMETER_COLUMNS)


def diagnostics_table(results: Dict[str, ExtractionResult]) -> pd.DataFrame:
    rows = [
        {"eye_id": eye_id, **d.to_dict()}
        for eye_id in sorted(results)
        for d in results[eye_id].diagnostics
    ]
    return pd.DataFrame(rows, columns=["eye_id", "parameter", "code", "message"])


def export_parameters(results: Dict[str, ExtractionResult], output_path,
                      groups: Optional[Dict[str, str]] = None, verbose: bool = False) -> Path:
    """Parameter CSV plus a sibling <stem>_diagnostics.csv."""
    output_path = Path(output_path)
    write_csv(parameter_table(results, groups), output_path, verbose)
    write_csv(diagnostics_table(results), output_path.with_name(f"{output_path.stem}_diagnostics.csv"), verbose)
    return output_path


def export_summary(report, output_dir, verbose: bool = False) -> List[Path]:
    """sector_table.csv, boxplot.csv, tukey.csv and summary.json."""
    output_dir = Path(output_dir)
    paths = [
        write_csv(report.sector_table, output_dir / "sector_table.csv", verbose),
        write_csv(report.boxplot, output_dir / "boxplot.csv", verbose),
        write_csv(report.tukey, output_dir / "tukey.csv", verbose),
        write_json(report.to_dict(), output_dir / "summary.json", verbose),
    ]
    return paths


def export_density(density_map, geometry, breakdown, output_dir, task: str, verbose: bool = False) -> List[Path]:
    """
    Pooled and per-tissue density CSVs, the average geometry CSV and the
    tissue breakdown JSON for one classification task.
    """
    output_dir = Path(output_dir)
    paths = [write_csv(density_map.to_frame(), output_dir / f"density_{task}.csv", verbose)]
    for tissue in TISSUES:
        part = density_map.for_tissue(int(tissue))
        if len(part):
            paths.append(write_csv(part.to_frame(), output_dir / f"density_{task}_{tissue.name.lower()}.csv",
                                   verbose))
    paths.append(write_csv(geometry.to_frame(), output_dir / f"average_geometry_{task}.csv", verbose))
    paths.append(write_json(breakdown.to_dict(), output_dir / f"breakdown_{task}.json", verbose))
    return paths


def export_critical_sets(sets: Sequence, output_path, verbose: bool = False) -> Path:
    frames = [s.to_frame() for s in sets]
    df = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(
        columns=["eye_id", "index", "tissue", "x_um", "y_um", "z_um", "n_dims"])
    return write_csv(df, output_path, verbose)


def export_eval_report(report, output_path, verbose: bool = False) -> Path:
    return write_json(report.to_dict(), output_path, verbose)


def print_banner(title: str, lines: Sequence[str]) -> None:
    print("\n" + "=" * 60)
    print(title)
    print("=" * 60)
    for line in lines:
        print(line)
    print("=" * 60)
