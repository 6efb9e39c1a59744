import csv
import json

import pytest

from relaxed_align.experiment_report import AccuracyTableReport, cell_label


def _record(variant, beta, seed, target, success=True):
    return {'variant': variant, 'beta': beta, 'seed': seed, 'success': success,
            'target_accuracy': target if success else None,
            'source_accuracy': 0.99 if success else None,
            'message': '' if success else 'Failed: diverged', 'metrics': object()}


@pytest.fixture
def report():
    generator = AccuracyTableReport()
    generator.set_results([
        _record("Source", 0.0, 0, 0.80),
        _record("Source", 0.0, 1, 0.90),
        _record("sDANN", 2.0, 0, 0.98),
        _record("sDANN", 2.0, 1, None, success=False),
        _record("WDANN", 0.0, 0, None, success=False),
    ], dataset_name="mixture")
    return generator


def test_cell_label():
    assert cell_label("DANN", 0.0) == "DANN"
    assert cell_label("sDANN", 2.0) == "sDANN-2"
    assert cell_label("sWDANN", 0.5) == "sWDANN-0.5"
    assert cell_label("fDANN", 0.0) == "fDANN-0"


def test_cell_rows(report):
    rows = {row['cell']: row for row in report.cell_rows()}
    assert list(rows) == ["Source", "sDANN-2", "WDANN"]
    assert rows["Source"]['target_mean'] == pytest.approx(0.85)
    assert rows["Source"]['target_std'] == pytest.approx(0.05)  # population std
    assert rows["sDANN-2"]['runs'] == 2
    assert rows["sDANN-2"]['failed'] == 1
    assert rows["sDANN-2"]['target_std'] == 0.0
    assert rows["WDANN"]['target_mean'] is None


def test_summary(report):
    assert report.summary() == {'dataset': 'mixture', 'cells': 3, 'runs': 5, 'successful': 3, 'failed': 2}


def test_csv(report, tmp_path):
    path = tmp_path / "out" / "accuracy_table.csv"
    assert report.generate_csv_report(path)
    with open(path, newline='') as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["# relaxed-align accuracy-table v1"]
    assert rows[1][0] == 'cell'
    assert rows[2][:5] == ['Source', 'Source', '0.0', '2', '0']
    assert rows[4][5:] == ['', '', '']


def test_json(report, tmp_path):
    path = tmp_path / "accuracy_table.json"
    assert report.generate_json_report(path)
    loaded = json.loads(path.read_text())
    assert loaded['summary']['failed'] == 2
    assert len(loaded['cells']) == 3
    assert len(loaded['runs']) == 5
    assert 'metrics' not in loaded['runs'][0]


def test_format_table(report):
    lines = report.format_table().splitlines()
    assert lines[0].split()[0] == 'cell'
    assert "85.0 +/- 5.0" in lines[1]
    assert lines[3].split()[1] == "failed"


def test_empty_results(tmp_path):
    generator = AccuracyTableReport()
    assert not generator.generate_csv_report(tmp_path / "t.csv")
    assert not generator.generate_json_report(tmp_path / "t.json")
    assert not (tmp_path / "t.csv").exists()
