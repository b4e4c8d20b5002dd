import json

import pytest

from results_handler import ResultsHandler
from utils import PACKAGE_MAPPING, check_dependencies, chunk_ranges, package_versions, parallel_map, save_run_manifest, sha256_file


def test_metrics_overwrite_and_reload(tmp_path):
    handler = ResultsHandler(tmp_path)
    assert not handler.load_data()
    handler.add_metric("train", "final_val_loss", 0.5)
    handler.add_metrics("evaluate", {"wedge_raw": 0.2, "wedge_restored": 0.1})
    handler.add_metric("train", "final_val_loss", 0.25, note="rerun")
    assert handler.get_metric("train", "final_val_loss") == 0.25
    assert handler.get_metric("train", "missing") is None
    path = handler.save_data()
    assert path.read_text().splitlines()[0] == "stage,metric,value,note"

    reloaded = ResultsHandler(tmp_path)
    assert reloaded.load_data()
    assert reloaded.get_metric("evaluate", "wedge_restored") == pytest.approx(0.1)
    stats = reloaded.get_statistics()
    assert stats["total_metrics"] == 3
    assert stats["stages"] == ["evaluate", "train"]
    assert stats["non_finite"] == 0


def test_empty_handler_saves_nothing(tmp_path):
    handler = ResultsHandler(tmp_path)
    assert handler.save_data() is None
    assert handler.get_statistics() == {}


def test_parallel_map_keeps_order():
    items = list(range(20))
    assert parallel_map(lambda x: x * x, items, threads=4) == [x * x for x in items]
    assert parallel_map(lambda x: x + 1, [], threads=4) == []


def test_chunk_ranges():
    assert chunk_ranges(10, 4) == [range(0, 4), range(4, 8), range(8, 10)]


def test_run_manifest_hashes_outputs(tmp_path):
    csv = tmp_path / "metrics" / "fsc.csv"
    csv.parent.mkdir()
    csv.write_text("frequency\n0\n")
    svg = tmp_path / "plot.svg"
    svg.write_text("<svg/>")
    manifest = save_run_manifest(tmp_path / "run_manifest.json", "abc", 7, 2, [csv, svg], {"command": "fsc"})
    assert manifest["outputs"] == {"metrics/fsc.csv": sha256_file(csv)}
    stored = json.loads((tmp_path / "run_manifest.json").read_text(encoding="utf-8"))
    assert stored["seed"] == 7 and stored["command"] == "fsc"
    assert "numpy" in stored["versions"]


def test_dependency_check_reports_versions():
    versions = package_versions()
    assert set(PACKAGE_MAPPING) <= set(versions)
    assert "python" in versions
    assert check_dependencies()
