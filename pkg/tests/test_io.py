import struct

import numpy as np
import pytest

from codats import data as D
from codats import io as dio


def ds(N=5, H=7, K=3, L=4, domain=2, seed=0):
    rng = np.random.default_rng(seed)
    return D.DomainDataset(rng.normal(size=(N, H, K)).astype(np.float32), rng.integers(0, L, N), domain, L)


def test_tsdb_round_trip(tmp_path):
    a = ds()
    p = tmp_path / "d.tsdb"
    dio.write_tsdb(p, a)
    b = dio.read_tsdb(p)
    assert b.X.tobytes() == a.X.tobytes()
    np.testing.assert_array_equal(b.y, a.y)
    assert (b.domain_id, b.n_labels) == (2, 4)


def test_tsdb_byte_layout():
    a = ds(N=2, H=3, K=2, L=3, domain=7)
    buf = dio.tsdb_bytes(a)
    assert buf[:4] == b"TSDB"
    assert struct.unpack_from("<H", buf, 4) == (1,)
    assert struct.unpack_from("<IIII", buf, 6) == (2, 3, 2, 3)
    vals = struct.unpack_from("<12f", buf, 22)
    np.testing.assert_array_equal(np.array(vals, np.float32), a.X.ravel())
    # step varies slower than channel
    assert vals[1] == a.X[0, 0, 1] and vals[2] == a.X[0, 1, 0]
    assert struct.unpack_from("<2i", buf, 22 + 48) == tuple(a.y)
    assert struct.unpack_from("<I", buf, 22 + 56) == (7,)
    assert len(buf) == 22 + 56 + 4


def test_tsdb_errors():
    buf = dio.tsdb_bytes(ds())
    with pytest.raises(dio.FormatError, match="magic"):
        dio.parse_tsdb(b"XXXX" + buf[4:])
    with pytest.raises(dio.FormatError, match="version"):
        dio.parse_tsdb(buf[:4] + struct.pack("<H", 2) + buf[6:])
    with pytest.raises(dio.FormatError, match="size"):
        dio.parse_tsdb(buf[:-1])
    with pytest.raises(dio.FormatError, match="header"):
        dio.parse_tsdb(buf[:10])


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "x.bin"
    dio.atomic_write(p, b"abc")
    dio.atomic_write(p, b"de")
    assert p.read_bytes() == b"de"
    assert [f.name for f in tmp_path.iterdir()] == ["x.bin"]


def write_csv(path, rows, K=2):
    head = ",".join(["window_id", "step"] + [f"feature_{i}" for i in range(K)] + ["label"])
    path.write_text(head + "\n" + "\n".join(",".join(map(str, r)) for r in rows) + "\n")
    return path


def test_csv_import(tmp_path):
    rows = [("a", 0, 1.0, 2.0, "walk"), ("a", 1, 3.0, 4.0, "walk"),
            ("b", 0, 5.0, 6.0, "run"), ("b", 1, 7.0, 8.0, "run")]
    out, labels = dio.read_csv(write_csv(tmp_path / "d.csv", rows), 3)
    assert labels == {"run": 0, "walk": 1}
    assert out.X.shape == (2, 2, 2) and out.domain_id == 3
    np.testing.assert_array_equal(out.X[1], [[5, 6], [7, 8]])
    np.testing.assert_array_equal(out.y, [1, 0])


def test_csv_numeric_labels_and_shared_map(tmp_path):
    rows = [(0, 0, 1, 1, 10), (1, 0, 2, 2, 2), (2, 0, 3, 3, 10)]
    out, labels = dio.read_csv(write_csv(tmp_path / "a.csv", rows), 1)
    assert labels == {"2": 0, "10": 1}
    other, same = dio.read_csv(write_csv(tmp_path / "b.csv", [(0, 0, 1, 1, 2)]), 2, labels)
    assert same is labels and other.n_labels == 2


@pytest.mark.parametrize("rows, match", [
    ([("a", 0, 1, 1, "x"), ("b", 0, 1, 1, "x"), ("a", 1, 1, 1, "x")], "contiguous"),
    ([("a", 0, 1, 1, "x"), ("a", 2, 1, 1, "x")], "sequence"),
    ([("a", 0, 1, 1, "x"), ("a", 1, 1, 1, "y")], "mixes"),
    ([("a", 0, 1, 1, "x"), ("a", 1, 1, 1, "x"), ("b", 0, 1, 1, "x")], "steps"),
    ([("a", 0, 1, "x")], "fields"),
    ([("a", 0, 1, "q", "x")], "could not convert"),
])
def test_csv_errors(tmp_path, rows, match):
    with pytest.raises(dio.FormatError, match=match):
        dio.read_csv(write_csv(tmp_path / "d.csv", rows), 1)


def test_csv_header_and_label_map_errors(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("id,step,feature_0,label\n")
    with pytest.raises(dio.FormatError, match="header"):
        dio.read_csv(p, 1)
    with pytest.raises(dio.FormatError, match="label map"):
        dio.read_csv(write_csv(tmp_path / "e.csv", [(0, 0, 1, 1, "z")]), 1, {"x": 0})
