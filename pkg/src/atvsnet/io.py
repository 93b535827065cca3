"""Readers and writers for PFM maps, camera text files, PNG images and PLY clouds."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from atvsnet.geometry import CameraModel


class ParseError(ValueError):
    """A malformed input file; the message names the file and line."""


def write_pfm(path, data: np.ndarray) -> None:
    """Write a single-channel float map as little-endian ``Pf`` PFM."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim != 2:
        raise ValueError("PFM writer expects a 2-D array")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        # PFM stores rows bottom to top
        f.write(np.ascontiguousarray(np.flipud(data)).tobytes())


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    lines = []
    pos = 0
    while len(lines) < 3:
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ParseError(f"{path}: line {len(lines) + 1}: truncated header")
        line = raw[pos:end].decode("ascii", errors="replace").strip()
        pos = end + 1
        if line.startswith("#"):
            continue
        lines.append(line)
    ident, dims, scale_s = lines
    if ident == "PF":
        channels = 3
    elif ident == "Pf":
        channels = 1
    else:
        raise ParseError(f"{path}: line 1: unknown identifier {ident!r}")
    m = re.fullmatch(r"(\d+)\s+(\d+)", dims)
    if not m:
        raise ParseError(f"{path}: line 2: could not parse dimensions {dims!r}")
    w, h = int(m.group(1)), int(m.group(2))
    try:
        scale = float(scale_s)
    except ValueError:
        raise ParseError(f"{path}: line 3: could not parse scale {scale_s!r}") from None
    if scale == 0:
        raise ParseError(f"{path}: line 3: scale must be non-zero")
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    payload = raw[pos:]
    if len(payload) < 4 * count:
        raise ParseError(f"{path}: payload holds {len(payload)} bytes, expected {4 * count}")
    data = np.frombuffer(payload[: 4 * count], dtype=dtype).astype(np.float32)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.ascontiguousarray(np.flipud(data.reshape(shape)))


def format_camera(cam: CameraModel) -> str:
    rows = [*cam.intrinsics, *cam.world_to_cam]
    return "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in rows)


def write_camera(path, cam: CameraModel) -> None:
    Path(path).write_text(format_camera(cam))


def read_camera(path, image_size: tuple[int, int]) -> CameraModel:
    """Parse a camera file: 3 intrinsics rows then 4 world-to-camera rows."""
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: camera file missing")
    lines = [ln for ln in path.read_text().splitlines() if ln.strip()]
    if len(lines) != 7:
        raise ParseError(f"{path}: expected 7 rows, found {len(lines)}")
    rows = []
    for i, ln in enumerate(lines):
        parts = ln.split()
        want = 3 if i < 3 else 4
        if len(parts) != want:
            raise ParseError(f"{path}: line {i + 1}: expected {want} values, found {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"{path}: line {i + 1}: non-numeric value in {ln!r}") from None
    try:
        return CameraModel(np.array(rows[:3]), np.array(rows[3:]), image_size)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def write_png(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image)).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise ParseError(f"{path}: image file missing")
    with Image.open(path) as im:
        return np.array(im)


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    """ASCII PLY 1.0 with float x, y, z and uchar red, green, blue."""
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    with open(path, "w") as f:
        f.write(header)
        for p, c in zip(points, colors):
            f.write(f"{p[0]:.9g} {p[1]:.9g} {p[2]:.9g} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise ParseError(f"{path}: line 1: not a PLY file")
    count = None
    for i, ln in enumerate(lines):
        if ln.startswith("element vertex"):
            count = int(ln.split()[2])
        if ln == "end_header":
            body = lines[i + 1 : i + 1 + (count or 0)]
            break
    else:
        raise ParseError(f"{path}: missing end_header")
    if count is None:
        raise ParseError(f"{path}: missing vertex element")
    if not body:
        return np.zeros((0, 3), np.float32), np.zeros((0, 3), np.uint8)
    arr = np.array([ln.split() for ln in body], dtype=np.float64)
    return arr[:, :3].astype(np.float32), arr[:, 3:6].astype(np.uint8)
