import json
import os

import numpy as np

from flowguide import report


def test_json_is_sorted_and_nan_safe(tmp_path):
    p = tmp_path / "a.json"
    report.write_json(p, {"b": np.float64(np.nan), "a": np.arange(3), "c": np.bool_(True)})
    text = p.read_text()
    assert json.loads(text) == {"a": [0, 1, 2], "b": None, "c": True}
    assert text.index('"a"') < text.index('"b"')


def test_csv_round_trips_floats(tmp_path):
    p = tmp_path / "a.csv"
    x = 0.1 + 0.2
    report.write_csv(p, ["x", "n"], [[x, np.int64(3)]])
    row = p.read_text().splitlines()[1].split(",")
    assert float(row[0]) == x and row[1] == "3"


def test_atomic_write_leaves_no_temp_files(tmp_path):
    report.atomic_write_bytes(tmp_path / "w.bin", b"abc")
    report.atomic_write_text(tmp_path / "w.txt", "abc")
    assert sorted(os.listdir(tmp_path)) == ["w.bin", "w.txt"]
    mode = (tmp_path / "w.txt").stat().st_mode & 0o777
    mask = os.umask(0)
    os.umask(mask)
    assert mode == 0o666 & ~mask


def test_svgs(tmp_path):
    hs = np.geomspace(1, 1e-2, 5)
    report.loglog_svg(tmp_path / "a.svg", hs, hs**2, title="t", reference_slope=2)
    report.scatter_svg(tmp_path / "b.svg", np.random.default_rng(0).normal(size=(10, 2)), marks=[np.zeros(2)])
    for name in ("a.svg", "b.svg"):
        text = (tmp_path / name).read_text()
        assert text.startswith("<svg") and text.rstrip().endswith("</svg>")
