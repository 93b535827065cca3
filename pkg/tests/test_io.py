import numpy as np
import pytest

from atvsnet.io import ParseError, read_camera, read_pfm, read_ply, write_camera, write_pfm, write_ply
from conftest import camera, rotation


def test_pfm_round_trip_bit_exact(tmp_path, rng):
    data = rng.standard_normal((5, 7)).astype(np.float32)
    data[0, 0] = np.inf
    write_pfm(tmp_path / "a.pfm", data)
    back = read_pfm(tmp_path / "a.pfm")
    assert back.dtype == np.float32
    assert np.array_equal(back.view(np.uint32), data.view(np.uint32))


def test_pfm_header_and_endianness(tmp_path):
    data = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_pfm(tmp_path / "a.pfm", data)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 2\n-1.0\n")
    # negative scale: little-endian rows from bottom to top
    payload = np.frombuffer(raw[len(b"Pf\n3 2\n-1.0\n"):], dtype="<f4")
    assert payload.tolist() == [3, 4, 5, 0, 1, 2]


def test_pfm_big_endian_read(tmp_path):
    data = np.array([[1.5, -2.0]], dtype=">f4")
    (tmp_path / "b.pfm").write_bytes(b"Pf\n2 1\n1.0\n" + data.tobytes())
    assert read_pfm(tmp_path / "b.pfm").tolist() == [[1.5, -2.0]]


@pytest.mark.parametrize(
    "content, line",
    [(b"PX\n2 1\n-1.0\n", "line 1"), (b"Pf\n2 x\n-1.0\n", "line 2"), (b"Pf\n2 1\nabc\n", "line 3"), (b"Pf\n2 1\n", "line 3")],
)
def test_pfm_malformed_names_line(tmp_path, content, line):
    path = tmp_path / "bad.pfm"
    path.write_bytes(content + b"\0" * 8)
    with pytest.raises(ParseError, match=line):
        read_pfm(path)


def test_pfm_truncated_payload(tmp_path):
    path = tmp_path / "short.pfm"
    path.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\0" * 8)
    with pytest.raises(ParseError, match="short.pfm"):
        read_pfm(path)


def test_camera_round_trip(tmp_path):
    cam = camera(rotation(0.1, -0.2, 0.05), t=(0.3, -0.1, 2.0))
    write_camera(tmp_path / "c.txt", cam)
    back = read_camera(tmp_path / "c.txt", cam.image_size)
    assert np.array_equal(back.intrinsics, cam.intrinsics)
    assert np.array_equal(back.world_to_cam, cam.world_to_cam)


def test_camera_malformed(tmp_path):
    path = tmp_path / "c.txt"
    path.write_text("1 0 0\n0 1 0\n0 0 1\n1 0 0 0\n0 1 0\n0 0 1 0\n0 0 0 1\n")
    with pytest.raises(ParseError, match="line 5"):
        read_camera(path, (4, 4))
    path.write_text("1 0 0\n")
    with pytest.raises(ParseError, match="7 rows"):
        read_camera(path, (4, 4))
    with pytest.raises(ParseError, match="missing"):
        read_camera(tmp_path / "none.txt", (4, 4))


def test_ply_round_trip(tmp_path, rng):
    pts = rng.standard_normal((10, 3)).astype(np.float32)
    cols = rng.integers(0, 256, (10, 3)).astype(np.uint8)
    write_ply(tmp_path / "c.ply", pts, cols)
    text = (tmp_path / "c.ply").read_text()
    assert text.startswith("ply\nformat ascii 1.0\nelement vertex 10\n")
    p, c = read_ply(tmp_path / "c.ply")
    assert np.array_equal(p, pts) and np.array_equal(c, cols)


def test_ply_empty(tmp_path):
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)), np.zeros((0, 3)))
    p, c = read_ply(tmp_path / "e.ply")
    assert p.shape == (0, 3) and c.shape == (0, 3)
