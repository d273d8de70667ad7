"""
Tests for CSV/JSON report export.
"""

import json
import math
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from src.errors import OnhError
from src.export_reports import export_parameters, write_csv, write_json
from src.parameters import Diagnostic, ExtractionResult, OnhParameters


def _result(lcd=450.0, diagnostics=()) -> ExtractionResult:
    params = OnhParameters(
        rnflt_um=np.full(8, 100.0), mrw_um=np.full(8, 300.0), gcct_um=np.full(8, 170.0),
        cht_um=np.array([150.0] * 7 + [math.nan]),
        pld_um=250.0, mpt_um=200.0, lcd_um=lcd, lc_gsi=-0.5, ppsa_deg=4.0, bmoa_mm2=1.9,
    )
    return ExtractionResult(params, list(diagnostics))


def test_json_is_plain_and_sorted():
    with tempfile.TemporaryDirectory() as tmp:
        path = write_json({"b": np.float64(math.nan), "a": np.arange(3), "c": np.bool_(True),
                           "d": {"x": np.int64(4), "y": (1.5, math.inf)}}, Path(tmp) / "nested" / "r.json")
        text = path.read_text()
        assert json.loads(text) == {"a": [0, 1, 2], "b": None, "c": True, "d": {"x": 4, "y": [1.5, None]}}
        assert text.index('"a"') < text.index('"b"') and text.endswith("}\n")
    print("   [OK] numpy values become JSON, NaN and inf become null, keys sorted")


def test_parameter_csv():
    hidden = Diagnostic("lcd_um", "LC_NOT_VISIBLE", "no LC voxels")
    results = {"eye_b": _result(), "eye_a": _result(lcd=math.nan, diagnostics=[hidden])}
    with tempfile.TemporaryDirectory() as tmp:
        out = export_parameters(results, Path(tmp) / "params.csv", groups={"eye_b": "MILD"})
        lines = out.read_text().split("\n")
        assert lines[1].startswith("eye_a,") and lines[2].startswith("eye_b,MILD,")
        df = pd.read_csv(out)
        assert len(df.columns) == 44 and math.isnan(df.loc[0, "lcd_um"])
        assert math.isnan(df.loc[0, "cht_IT_um"]) and df.loc[0, "cht_avg_um"] == 150.0
        assert ",," in lines[1], "missing values are empty fields"
        diag = pd.read_csv(Path(tmp) / "params_diagnostics.csv")
        assert diag.to_dict("records") == [
            {"eye_id": "eye_a", "parameter": "lcd_um", "code": "LC_NOT_VISIBLE", "message": "no LC voxels"}]
    print("   [OK] one sorted row per eye, empty fields for NaN, diagnostics alongside")


def test_write_failure():
    with tempfile.TemporaryDirectory() as tmp:
        blocker = Path(tmp) / "file"
        blocker.write_text("x")
        try:
            write_csv(pd.DataFrame({"a": [1]}), blocker / "inside.csv")
            assert False, "Should have raised IO_FAILURE"
        except OnhError as e:
            assert e.qualified_code == "export.IO_FAILURE"
    print("   [OK] unwritable paths raise export.IO_FAILURE")


if __name__ == "__main__":
    print("=" * 60)
    print("EXPORT REPORTS TEST")
    print("=" * 60)
    tests = [
        test_json_is_plain_and_sorted,
        test_parameter_csv,
        test_write_failure,
    ]
    for i, test in enumerate(tests, 1):
        print(f"\n{i}. {test.__name__}...")
        test()
    print("\n" + "=" * 60)
    print("ALL TESTS PASSED [OK]")
    print("=" * 60)
