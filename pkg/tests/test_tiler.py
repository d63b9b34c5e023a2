import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from multiscale_wsi.raster import Raster
from multiscale_wsi.tiler import (ManifestRow, TileManifest, TilingError, build_multiscale_set,
                                  extract_centered, make_intermediate, region_of, tile_id_for)
from oracles import inside_fraction


def patterned(w, h):
    x = np.arange(w, dtype=np.int32)
    y = np.arange(h, dtype=np.int32)[:, None]
    data = np.empty((h, w, 3), np.uint8)
    data[..., 0] = (x * 7 % 251 + y) % 251
    data[..., 1] = (y * 3 % 253 + x // 5) % 253
    data[..., 2] = (x ^ y) & 255
    return Raster(data)


@pytest.fixture(scope="module")
def big():
    return patterned(8000, 8000)


def test_interior_origin(big):
    t = extract_centered(big, (4000, 4000), 2000)
    assert t.origin == (3000, 3000)
    assert t.pad_fraction == 0.0
    assert np.array_equal(t.pixels.data, big.data[3000:5000, 3000:5000])


def test_2000_inside_4000(big):
    small, large = build_multiscale_set(big, (4000, 4000), [2000, 4000])
    assert np.array_equal(small.pixels.data, large.pixels.data[1000:3000, 1000:3000])


def test_near_corner_pad_fraction():
    src = Raster.constant(3000, 3000, 10)
    t = extract_centered(src, (100, 100), 2000)
    assert t.origin == (-900, -900)
    assert t.pad_fraction == pytest.approx(1 - 1100 * 1100 / 2000 ** 2, abs=1e-15)
    assert t.pad_fraction == pytest.approx(0.6975)
    assert (t.pixels.data[:900] == 255).all() and (t.pixels.data[900:, 900:] == 10).all()


@given(st.integers(1, 40), st.integers(1, 40), st.data())
def test_pad_fraction_matches_count(w, h, data):
    center = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    size = data.draw(st.integers(1, 50))
    t = extract_centered(Raster.constant(w, h, 3), center, size)
    assert t.pad_fraction == pytest.approx(1 - inside_fraction(w, h, center, size), abs=1e-12)
    x0, y0 = t.origin
    fully_inside = x0 >= 0 and y0 >= 0 and x0 + size <= w and y0 + size <= h
    assert (t.pad_fraction == 0) == fully_inside


def test_multiscale_interior_unpadded(big):
    tiles = build_multiscale_set(big, (4000, 4000), [2000, 4000, 8000])
    assert [t.tile_size for t in tiles] == [2000, 4000, 8000]
    assert all(t.pad_fraction == 0 for t in tiles)


def test_single_size_matches_extract(big):
    (t,) = build_multiscale_set(big, (1234, 5678), [2000])
    assert np.array_equal(t.pixels.data, extract_centered(big, (1234, 5678), 2000).pixels.data)


def test_pad_grows_with_size_near_corner():
    src = patterned(9000, 9000)
    tiles = build_multiscale_set(src, (700, 300), [2000, 4000, 8000])
    pads = [t.pad_fraction for t in tiles]
    assert pads[0] < pads[1] < pads[2]
    for t in tiles:
        x0, y0 = t.origin
        cols = sum(1 for x in range(x0, x0 + t.tile_size) if 0 <= x < 9000)
        rows = sum(1 for y in range(y0, y0 + t.tile_size) if 0 <= y < 9000)
        assert t.pad_fraction == pytest.approx(1 - cols * rows / t.tile_size ** 2)


@given(st.integers(5, 60), st.integers(5, 60), st.data())
def test_nesting(w, h, data):
    src = patterned(w, h)
    center = (data.draw(st.integers(0, w - 1)), data.draw(st.integers(0, h - 1)))
    s1 = data.draw(st.integers(1, 40))
    s2 = data.draw(st.integers(s1 + 1, 80))
    inner = extract_centered(src, center, s1)
    outer = extract_centered(src, center, s2)
    off = s2 // 2 - s1 // 2
    window = outer.pixels.data[off:off + s1, off:off + s1]
    x0, y0 = inner.origin
    ys, xs = np.mgrid[y0:y0 + s1, x0:x0 + s1]
    unpadded = (xs >= 0) & (ys >= 0) & (xs < w) & (ys < h)
    assert np.array_equal(window[unpadded], inner.pixels.data[unpadded])
    assert np.array_equal(window, inner.pixels.data)


def test_sizes_must_ascend(big):
    with pytest.raises(TilingError):
        build_multiscale_set(big, (10, 10), [4000, 2000])


def test_center_outside_source():
    with pytest.raises(TilingError):
        extract_centered(Raster.constant(10, 10), (10, 3), 4)


def test_intermediate_same_size_is_identical():
    t = extract_centered(patterned(300, 300), (150, 150), 200)
    assert np.array_equal(make_intermediate(t, 200).pixels.data, t.pixels.data)


def test_intermediate_constant():
    t = extract_centered(Raster.constant(4000, 4000, 200), (2000, 2000), 4000)
    inter = make_intermediate(t, 1000)
    assert inter.pixels.shape == (1000, 1000) and (inter.pixels.data == 200).all()


def test_intermediate_8000_to_456_mean(big):
    t = extract_centered(big, (4000, 4000), 8000)
    inter = make_intermediate(t, 456)
    assert inter.pixels.shape == (456, 456)
    src_mean = t.pixels.data.sum(axis=(0, 1), dtype=np.int64) / 8000 ** 2
    out_mean = inter.pixels.data.sum(axis=(0, 1), dtype=np.int64) / 456 ** 2
    assert np.all(np.abs(src_mean - out_mean) <= 1)


def test_intermediate_larger_than_tile():
    t = extract_centered(Raster.constant(10, 10), (5, 5), 4)
    with pytest.raises(TilingError):
        make_intermediate(t, 5)


def test_ids():
    tid = tile_id_for("P01-r0", 4000)
    assert tid == "P01-r0@4000" and region_of(tid) == "P01-r0"


def _manifest(root):
    src = patterned(100, 100)
    rows = []
    for pid, c in (("B", (50, 50)), ("A", (5, 90))):
        for t in build_multiscale_set(src, c, [20, 40], region_id=f"{pid}-r0", patient_id=pid,
                                      label="CMB"):
            rows.append(ManifestRow.from_record(t, f"{t.tile_id}.png"))
    return TileManifest(rows, root)


def test_manifest_round_trip(tmp_path):
    m = _manifest(tmp_path)
    m.write(tmp_path / "m.csv", "# config_hash=x seed=1\n")
    back = TileManifest.read(tmp_path / "m.csv")
    assert back.rows == m.rows
    assert [r.tile_id for r in back.rows] == sorted(r.tile_id for r in m.rows)


def test_manifest_bytes_deterministic(tmp_path):
    assert _manifest(tmp_path).to_csv() == _manifest(tmp_path).to_csv()


def test_manifest_duplicates_and_missing(tmp_path):
    m = _manifest(tmp_path)
    with pytest.raises(TilingError):
        TileManifest(m.rows + m.rows[:1], tmp_path)
    with pytest.raises(TilingError):
        m.validate()
