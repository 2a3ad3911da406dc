import numpy as np
import pytest

from physbed.data import RadarPicks
from physbed.errors import ParseError
from physbed.grid import GridGeometry, RasterGrid
from physbed.io import read_picks, read_raster, write_picks, write_raster

HEADER = "ncols 3\nnrows 2\nxllcorner 100\nyllcorner 200\ncellsize 10\nNODATA_value -9999\n"


def test_first_data_row_is_north(tmp_path):
    p = tmp_path / "a.asc"
    p.write_text(HEADER + "1 2 3\n4 5 -9999\n")
    g = read_raster(p)
    assert g.values[1].tolist() == [1, 2, 3]  # north row stored last
    assert g.values[0, 0] == 4 and np.isnan(g.values[0, 2])
    assert g.origin == (100.0, 200.0) and g.spacing == 10.0


def test_round_trip_within_format_precision(tmp_path):
    rng = np.random.default_rng(0)
    g = RasterGrid(rng.normal(1000, 300, (7, 5)), 150.0, (-3.0e5, 1.2e6))
    vals = g.values.copy()
    vals[2, 3] = np.nan
    g = g.with_values(vals)
    write_raster(tmp_path / "g.asc", g)
    h = read_raster(tmp_path / "g.asc")
    assert h.geometry == g.geometry
    ok = np.isfinite(vals)
    assert np.array_equal(np.isfinite(h.values), ok)
    assert np.allclose(h.values[ok], vals[ok], rtol=1e-8)


def test_center_registered_header(tmp_path):
    p = tmp_path / "c.asc"
    p.write_text("NCOLS 2\nNROWS 1\nXLLCENTER 5\nYLLCENTER 5\nCELLSIZE 10\n1 2\n")
    assert read_raster(p).origin == (0.0, 0.0)


@pytest.mark.parametrize("body, line", [
    ("ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 2 3\n4 5\n", 7),
    ("ncols 3\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize x\n1 2 3\n4 5 6\n", 5),
    ("ncols 2\nnrows 1\nxllcorner 0\nyllcorner 0\ncellsize 1\n1 a\n", 6),
])
def test_parse_errors_carry_line_numbers(tmp_path, body, line):
    p = tmp_path / "bad.asc"
    p.write_text(body)
    with pytest.raises(ParseError) as exc:
        read_raster(p)
    assert exc.value.lineno == line
    assert f":{line}:" in str(exc.value)


def test_missing_header_key(tmp_path):
    p = tmp_path / "m.asc"
    p.write_text("ncols 1\nnrows 1\nxllcorner 0\nyllcorner 0\n1\n")
    with pytest.raises(ParseError, match="cellsize"):
        read_raster(p)


def test_row_count_mismatch(tmp_path):
    p = tmp_path / "r.asc"
    p.write_text(HEADER + "1 2 3\n")
    with pytest.raises(ParseError, match="rows"):
        read_raster(p)


def test_picks_round_trip_and_extent(tmp_path):
    picks = RadarPicks([1.5, 2.5, 99.0], [0.5, 1.5, 0.5], [-10.25, 3.0, 7.0])
    write_picks(tmp_path / "p.csv", picks)
    back = read_picks(tmp_path / "p.csv")
    assert np.array_equal(back.x, picks.x) and np.array_equal(back.bed, picks.bed)
    inside = read_picks(tmp_path / "p.csv", GridGeometry(3, 3, 1.0))
    assert inside.count == 2 and inside.n_dropped == 1


def test_picks_bad_record(tmp_path):
    p = tmp_path / "p.csv"
    p.write_text("x,y,bed\n1,2,3\n1,oops,3\n")
    with pytest.raises(ParseError) as exc:
        read_picks(p)
    assert exc.value.lineno == 3
    p.write_text("a,b\n1,2\n")
    with pytest.raises(ParseError):
        read_picks(p)
