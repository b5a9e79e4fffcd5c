"""On-disk formats: binary PGM/PPM, the TNSR tensor container, box JSON and
graph edge lists.

TNSR layout (all integers little-endian)::

    magic      8 bytes  b"A2GTNSR\\0"
    version    u32      1
    n_sections u32
    per section:
        name_len u32, name (UTF-8, name_len bytes)
        ndim     u32, dims u64[ndim]
        dtype    u8   (0 = f32, 1 = f64, 2 = u8)
        payload  row-major, product(dims) * itemsize bytes
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TNSR_MAGIC = b"A2GTNSR\0"
TNSR_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------- PNM


def _read_pnm_header(data: bytes, magic: bytes):
    if data[:2] != magic:
        raise FormatError(f"expected {magic!r} file, got {data[:2]!r}")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header")
        fields.append(int(data[start:pos]))
    # exactly one whitespace byte separates maxval from the raster
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError("non-positive dimensions")
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    return width, height, pos


def read_pgm(path) -> np.ndarray:
    """Read a binary (P5) 8-bit graymap as an (H, W) uint8 array."""
    data = Path(path).read_bytes()
    width, height, pos = _read_pnm_header(data, b"P5")
    raster = data[pos : pos + width * height]
    if len(raster) != width * height:
        raise FormatError("truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width).copy()


def write_pgm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 2:
        raise FormatError("PGM needs a 2-D array")
    if image.min(initial=0) < 0 or image.max(initial=0) > 255:
        raise FormatError("PGM values must lie in 0..255")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.astype(np.uint8).tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary (P6) 8-bit pixmap as an (H, W, 3) uint8 array."""
    data = Path(path).read_bytes()
    width, height, pos = _read_pnm_header(data, b"P6")
    raster = data[pos : pos + width * height * 3]
    if len(raster) != width * height * 3:
        raise FormatError("truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError("PPM needs an (H, W, 3) array")
    h, w, _ = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.astype(np.uint8).tobytes())


# ---------------------------------------------------------------- TNSR


def _as_tnsr_array(value) -> np.ndarray:
    arr = np.asarray(value)
    if arr.dtype == np.float32:
        return arr.astype("<f4", copy=False)
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return arr.astype("u1", copy=False)
    if np.issubdtype(arr.dtype, np.integer) or np.issubdtype(arr.dtype, np.floating):
        out = arr.astype("<f8")
        if not np.array_equal(out, arr):
            raise FormatError("integer values not exactly representable as f64")
        return out
    raise FormatError(f"unsupported dtype {arr.dtype}")


def encode_tnsr(sections: dict) -> bytes:
    parts = [TNSR_MAGIC, struct.pack("<II", TNSR_VERSION, len(sections))]
    for name, value in sections.items():
        arr = np.asarray(_as_tnsr_array(value), order="C")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_tnsr(data: bytes) -> dict:
    if data[:8] != TNSR_MAGIC:
        raise FormatError("bad TNSR magic")
    version, count = struct.unpack_from("<II", data, 8)
    if version != TNSR_VERSION:
        raise FormatError(f"unsupported TNSR version {version}")
    pos = 16
    out = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            (tag,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dtype = _TAG_DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            if pos + nbytes > len(data):
                raise FormatError(f"section {name!r} payload truncated")
            out[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize,
                                      offset=pos).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError) as exc:
        raise FormatError(f"corrupt TNSR file: {exc}") from exc
    if pos != len(data):
        raise FormatError("trailing bytes after last section")
    return out


def write_tnsr(path, sections: dict) -> None:
    Path(path).write_bytes(encode_tnsr(sections))


def read_tnsr(path) -> dict:
    return decode_tnsr(Path(path).read_bytes())


# ---------------------------------------------------------------- boxes / edges


def read_boxes(path):
    from a2gnn.labels import Box

    items = json.loads(Path(path).read_text())
    if not isinstance(items, list):
        raise FormatError("box file must hold a JSON array")
    return [Box(int(b["class"]), int(b["x0"]), int(b["y0"]), int(b["x1"]), int(b["y1"]))
            for b in items]


def write_boxes(path, boxes) -> None:
    items = [{"class": b.cls, "x0": b.x0, "y0": b.y0, "x1": b.x1, "y1": b.y1} for b in boxes]
    Path(path).write_text(json.dumps(items) + "\n")


def write_edge_list(path, graph) -> None:
    """One ``i j weight`` line per stored edge, sorted by (i, j)."""
    coo = graph.E.tocoo()
    order = np.lexsort((coo.col, coo.row))
    lines = [f"{coo.row[k]} {coo.col[k]} {coo.data[k]:.17g}\n" for k in order]
    Path(path).write_text("".join(lines))
