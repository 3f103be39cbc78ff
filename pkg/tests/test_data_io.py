import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from egc import io as eio
from egc.data import (
    IDX_IMAGES,
    IDX_LABELS,
    DatasetError,
    DatasetSpec,
    IDXError,
    from_unit,
    gen_dataset,
    idx_bytes,
    idx_load,
    moons_distance,
    octagon_means,
    to_unit,
)


def test_two_moons_noiseless_on_circles():
    x, y = gen_dataset(DatasetSpec(size=500, noise=0.0), 0)
    raw = from_unit("two_moons", x)
    up, lo = raw[y == 0], raw[y == 1]
    np.testing.assert_allclose(np.hypot(up[:, 0], up[:, 1]), 1.0, atol=1e-12)
    assert np.all(up[:, 1] >= 0)
    np.testing.assert_allclose(np.hypot(lo[:, 0] - 1, lo[:, 1] - 0.5), 1.0, atol=1e-12)
    assert np.all(lo[:, 1] <= 0.5)
    np.testing.assert_allclose(moons_distance(raw), 0.0, atol=1e-12)


def test_unit_box():
    for kind in ("two_moons", "eight_gaussians", "checkerboard"):
        x, _ = gen_dataset(DatasetSpec(kind=kind, size=4000, noise=0.0), 1)
        assert np.all(np.abs(x) <= 1.0), kind
        np.testing.assert_allclose(from_unit(kind, to_unit(kind, x)), x, atol=1e-15)


def test_octagon_chords():
    m = octagon_means()
    for i, j in itertools.combinations(range(8), 2):
        k = min(j - i, 8 - (j - i))
        assert np.linalg.norm(m[i] - m[j]) == pytest.approx(2 * math.sin(k * math.pi / 8), abs=1e-12)


@pytest.mark.parametrize("kind,C", [("two_moons", 2), ("eight_gaussians", 8), ("checkerboard", 2)])
def test_label_balance(kind, C):
    _, y = gen_dataset(DatasetSpec(kind=kind, size=10_000), 3)
    counts = np.bincount(y, minlength=C) / len(y)
    assert np.all(np.abs(counts - 1 / C) < 0.02)
    assert set(np.unique(y)) == set(range(C))


def test_checkerboard_parity():
    x, y = gen_dataset(DatasetSpec(kind="checkerboard", size=2000, noise=0.0), 4)
    raw = from_unit("checkerboard", x)
    cell = np.floor(raw + 2).astype(int)
    assert np.all((cell[:, 0] + cell[:, 1]) % 2 == y)


def test_datasets_are_seeded():
    a = gen_dataset(DatasetSpec(size=100), 5)
    b = gen_dataset(DatasetSpec(size=100), 5)
    c = gen_dataset(DatasetSpec(size=100), 6)
    assert a[0].tobytes() == b[0].tobytes() and np.array_equal(a[1], b[1])
    assert a[0].tobytes() != c[0].tobytes()


def test_dataset_errors():
    with pytest.raises(DatasetError):
        DatasetSpec(kind="spirals")
    with pytest.raises(DatasetError):
        DatasetSpec(size=0)


def test_moons_distance_hand_values():
    pts = np.array([[0.0, 1.3], [0.0, 0.0], [1.0, 0.5], [-1.2, -0.3]])
    d = moons_distance(pts)
    assert d[0] == pytest.approx(0.3)
    # origin sits on the lower moon (centre (1, 0.5), radius 1): distance |sqrt(1.25) - 1|
    assert d[1] == pytest.approx(math.sqrt(1.25) - 1)
    assert d[2] == pytest.approx(min(abs(math.hypot(1, 0.5) - 1), 1.0))
    # below the upper moon's left tip: nearest point is the tip (-1, 0) or the lower arc
    assert d[3] == pytest.approx(min(math.hypot(0.2, 0.3), abs(math.hypot(2.2, 0.8) - 1)))


def test_idx_fixture_round_trip(tmp_path):
    imgs = np.array([[[0, 255], [128, 7]], [[1, 2], [3, 254]]], dtype=np.uint8)
    labels = np.array([3, 9], dtype=np.uint8)
    (tmp_path / "i.idx").write_bytes(idx_bytes(imgs, IDX_IMAGES))
    (tmp_path / "l.idx").write_bytes(idx_bytes(labels, IDX_LABELS))
    x, y = idx_load(tmp_path / "i.idx", tmp_path / "l.idx")
    assert x.shape == (2, 1, 2, 2)
    assert x[0, 0, 0, 0] == -1.0 and x[0, 0, 0, 1] == 1.0
    np.testing.assert_array_equal(eio.quantize(x[:, 0]), imgs)
    assert y.tolist() == [3, 9]


def test_idx_errors(tmp_path):
    imgs = np.zeros((2, 2, 2), dtype=np.uint8)
    good_i = tmp_path / "i.idx"
    good_i.write_bytes(idx_bytes(imgs, IDX_IMAGES))
    wrong = tmp_path / "wrong.idx"
    wrong.write_bytes(idx_bytes(np.zeros((2, 2, 2), dtype=np.uint8), IDX_IMAGES))
    with pytest.raises(IDXError, match="magic"):
        idx_load(good_i, wrong)
    empty = tmp_path / "empty.idx"
    empty.write_bytes(b"")
    with pytest.raises(IDXError, match="truncated"):
        idx_load(empty, good_i)
    short = tmp_path / "short.idx"
    short.write_bytes(idx_bytes(imgs, IDX_IMAGES)[:-1])
    with pytest.raises(IDXError):
        idx_load(short, good_i)
    three = tmp_path / "three.idx"
    three.write_bytes(idx_bytes(np.zeros(3, dtype=np.uint8), IDX_LABELS))
    with pytest.raises(IDXError, match="labels"):
        idx_load(good_i, three)
    with pytest.raises(IDXError, match="not found"):
        idx_load(tmp_path / "missing", three)


def test_pgm_endpoints(tmp_path):
    img = np.array([[-1.0, 1.0], [0.0, 2.0]])
    path = eio.write_pgm(tmp_path / "a.pgm", img)
    data = path.read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    back = eio.read_pgm(path)
    assert back.tolist() == [[0, 255], [128, 255]]


def test_scatter_origin_pixel():
    img = eio.scatter_raster(np.array([[0.0, 0.0]]), size=64)
    lit = np.argwhere(img == 1.0)
    assert lit.tolist() == [[32, 32]]
    assert np.sum(img == 1.0) == 1
    corner = eio.scatter_raster(np.array([[-1.0, 0.999]]), size=64)
    assert np.argwhere(corner == 1.0).tolist() == [[0, 0]]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=20))
def test_csv_round_trip(values):
    buf = eio.csv_bytes(["v"], [[v] for v in values])
    text = buf.decode()
    assert "\r" not in text and text.endswith("\n")
    back = [float(line) for line in text.splitlines()[1:]]
    for a, b in zip(values, back):
        assert abs(a - b) <= 1e-12 * max(1.0, abs(a))


def test_csv_file_round_trip(tmp_path):
    rows = [[0.1, "a", 3], [1e-300, "b", -7]]
    eio.write_csv(tmp_path / "t.csv", ["x", "name", "n"], rows)
    header, body = eio.read_csv(tmp_path / "t.csv")
    assert header == ["x", "name", "n"]
    assert float(body[0][0]) == 0.1 and body[1][2] == "-7"


def test_emit_dispatch(tmp_path):
    eio.emit("csv", [[1.0]], tmp_path / "a.csv", header=["v"])
    eio.emit("pgm_image", np.zeros((3, 4)), tmp_path / "b.pgm")
    eio.emit("scatter_plot", np.zeros((1, 2)), tmp_path / "c.pgm")
    assert eio.read_pgm(tmp_path / "b.pgm").shape == (3, 4)
    assert eio.read_pgm(tmp_path / "c.pgm").shape == (64, 64)
    with pytest.raises(ValueError):
        eio.emit("csv", [[1.0]], tmp_path / "d.csv")
    with pytest.raises(ValueError):
        eio.emit("svg", [], tmp_path / "e")


def test_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        eio.write_csv(blocker / "sub" / "a.csv", ["v"], [[1]])


def test_heatmap_range():
    h = eio.heatmap(np.array([[1.0, 3.0], [2.0, 5.0]]))
    assert h.min() == -1.0 and h.max() == 1.0
    assert np.all(eio.heatmap(np.ones((2, 2))) == 0)
