import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from a2gnn import io
from a2gnn.affinity import build_graph
from a2gnn.gnn import GnnParams, init_params
from a2gnn.labels import Box


def test_pgm_canonical_header(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(3, 4)
    io.write_pgm(tmp_path / "a.pgm", img)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw == b"P5\n4 3\n255\n" + img.tobytes()
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "a.pgm"), img)


def test_ppm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 3, 3)).astype(np.uint8)
    io.write_ppm(tmp_path / "a.ppm", img)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n3 5\n255\n")
    np.testing.assert_array_equal(io.read_ppm(tmp_path / "a.ppm"), img)


def test_pgm_reader_tolerates_comments(tmp_path):
    (tmp_path / "c.pgm").write_bytes(b"P5\n# made by hand\n2  1\n255\n\x07\x09")
    np.testing.assert_array_equal(io.read_pgm(tmp_path / "c.pgm"), [[7, 9]])


@pytest.mark.parametrize("data", [b"P6\n1 1\n255\n\0\0\0", b"P5\n2 2\n255\n\0", b"P5\n1 1\n65535\n\0\0"])
def test_pgm_rejects_bad_files(tmp_path, data):
    (tmp_path / "bad.pgm").write_bytes(data)
    with pytest.raises(io.FormatError):
        io.read_pgm(tmp_path / "bad.pgm")


def test_tnsr_layout_by_hand():
    blob = io.encode_tnsr({"x": np.array([1.5, -2.0], np.float32)})
    want = (b"A2GTNSR\0" + struct.pack("<II", 1, 1) + struct.pack("<I", 1) + b"x"
            + struct.pack("<I", 1) + struct.pack("<Q", 2) + b"\x00"
            + np.array([1.5, -2.0], "<f4").tobytes())
    assert blob == want


arrays = st.one_of(
    hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(allow_nan=False, width=64)),
    hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
               elements=st.floats(allow_nan=False, width=32)),
    hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4)),
)


@given(st.dictionaries(st.text(min_size=1, max_size=6), arrays, max_size=4))
@settings(max_examples=80, deadline=None)
def test_tnsr_round_trip_bitwise(sections):
    blob = io.encode_tnsr(sections)
    back = io.decode_tnsr(blob)
    assert list(back) == list(sections)
    for k, v in sections.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()
    assert io.encode_tnsr(back) == blob


def test_tnsr_integers_stored_as_f64():
    back = io.decode_tnsr(io.encode_tnsr({"n": np.array([3, 4], np.int64)}))
    assert back["n"].dtype == np.float64 and back["n"].tolist() == [3.0, 4.0]


@pytest.mark.parametrize("cut", [4, 20, -1])
def test_tnsr_truncation_detected(cut):
    blob = io.encode_tnsr({"a": np.zeros(3)})
    with pytest.raises(io.FormatError):
        io.decode_tnsr(blob[:cut])


def test_params_round_trip(tmp_path):
    p = init_params(5, 3, hidden=4, n_layers=3, rng=1)
    io.write_tnsr(tmp_path / "p.tnsr", p.to_sections())
    q = GnnParams.from_sections(io.read_tnsr(tmp_path / "p.tnsr"))
    for a, b in zip(p.arrays().values(), q.arrays().values()):
        assert np.asarray(a).tobytes() == np.asarray(b).tobytes()
    assert set(p.to_sections()) == {"W0", "w1", "w2", "w3", "WL1", "beta"}


def test_boxes_round_trip(tmp_path):
    boxes = [Box(1, 0, 1, 3, 4), Box(2, 2, 2, 5, 6)]
    io.write_boxes(tmp_path / "b.json", boxes)
    assert io.read_boxes(tmp_path / "b.json") == boxes


def test_edge_list_sorted(tmp_path):
    rng = np.random.default_rng(0)
    g = build_graph(rng.random((3, 3, 4)), rng.random((3, 3, 3)), r=1)
    io.write_edge_list(tmp_path / "e.txt", g)
    rows = [line.split() for line in (tmp_path / "e.txt").read_text().splitlines()]
    keys = [(int(i), int(j)) for i, j, _ in rows]
    assert keys == sorted(keys) and len(keys) == g.E.nnz
    dense = g.E.toarray()
    assert all(float(wt) == dense[i, j] for (i, j), (_, _, wt) in zip(keys, rows))
