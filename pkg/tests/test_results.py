import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from core.errors import DataError
from ui.charts import ChartGenerator
from ui.results import ResultsExporter, companion_path, export_report


@pytest.fixture
def table():
    return pd.DataFrame({"strategy": ["none", "multi"], "test_BAcc": [0.5, 0.91]})


def test_json_accepts_numpy_values(tmp_path):
    data = {"ap": np.float32(0.25), "counts": np.array([1, 2]), "path": Path("a/b"), 3: (np.int64(4),)}
    path = ResultsExporter.export_to_json(data, tmp_path / "nested" / "out.json")
    loaded = json.loads(path.read_text())
    assert loaded == {"ap": 0.25, "counts": [1, 2], "path": "a/b", "3": [4]}


def test_csv_round_trip(tmp_path, table):
    path = ResultsExporter.export_to_csv(table, tmp_path / "t.csv")
    pd.testing.assert_frame_equal(pd.read_csv(path), table)


def test_pdf_is_written(tmp_path, table):
    long_table = pd.concat([table] * 30, ignore_index=True)
    path = ResultsExporter.export_to_pdf("Ablation", {"AP": 0.5, "n": 3}, tmp_path / "r.pdf",
                                         table=long_table, notes=["baseline averaged over repeats"])
    assert path.read_bytes().startswith(b"%PDF")


def test_unwritable_target(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(DataError):
        ResultsExporter.export_to_json({}, blocker / "out.json")


def test_companion_path():
    assert companion_path(Path("runs/report.json"), ".csv") == Path("runs/report.csv")
    assert companion_path(Path("runs/report.json"), ".json", ".manifest") == Path("runs/report.manifest.json")


def test_export_report_all_formats(tmp_path, table):
    figure = ChartGenerator().create_comparison_chart(table, "strategy", ["test_BAcc"])
    written = export_report({"rows": 2}, tmp_path / "report.json", ["json", "csv", "pdf", "html"],
                            table=table, title="Report", summary={"rows": 2}, figure=figure)
    assert [p.name for p in written] == ["report.json", "report.csv", "report.pdf", "report.html"]
    assert all(p.exists() for p in written)


def test_export_report_skips_companions_without_content(tmp_path):
    written = export_report({"rows": 0}, tmp_path / "report.json", ["csv", " HTML ", ""])
    assert [p.name for p in written] == ["report.json"]
