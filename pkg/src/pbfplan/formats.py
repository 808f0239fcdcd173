"""File formats: mask images, power-field CSV."""

from __future__ import annotations

import csv
import io
from importlib import resources

import numpy as np


class MaskParseError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = str(path)
    if path.startswith("builtin:"):
        name = path.split(":", 1)[1]
        return resources.files("pbfplan.data").joinpath(name).read_bytes()
    with open(path, "rb") as f:
        return f.read()


def _pgm_tokens(data: bytes, count: int, pos: int):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MaskParseError(f"PGM header truncated at byte {pos}")
        tok = data[start:pos]
        if not tok.isdigit():
            raise MaskParseError(f"bad PGM header token {tok!r} at byte {start}")
        out.append(int(tok))
    return out, pos


def _line_of(data: bytes, pos: int) -> int:
    return data.count(b"\n", 0, pos) + 1


def parse_mask(data: bytes) -> np.ndarray:
    """Decode a PGM (P2/P5) or ASCII 0/1 image into a boolean (rows, cols) array.

    PGM pixels above 127 (after rescaling to 8 bits) are in the mask; in the
    ASCII form each row is a line of ``0``/``1`` characters.
    """
    if data[:2] in (b"P2", b"P5"):
        return _parse_pgm(data)
    if data[:1] == b"P":
        raise MaskParseError(f"unsupported image magic {data[:2]!r} at byte 0")
    return _parse_ascii(data)


def _parse_pgm(data: bytes) -> np.ndarray:
    binary = data[:2] == b"P5"
    (w, h, maxval), pos = _pgm_tokens(data, 3, 2)
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise MaskParseError(f"invalid PGM size {w}x{h} or maxval {maxval}")
    if binary:
        pos += 1  # single whitespace after maxval
        depth = 1 if maxval < 256 else 2
        need = w * h * depth
        body = data[pos : pos + need]
        if len(body) < need:
            raise MaskParseError(f"PGM raster truncated at byte {pos + len(body)}, expected {need} bytes")
        vals = np.frombuffer(body, dtype=np.uint8 if depth == 1 else ">u2").astype(float)
    else:
        vals = []
        rest = data[pos:]
        offset = pos
        for tok_start, tok in _tokens(rest):
            if not tok.isdigit():
                p = offset + tok_start
                raise MaskParseError(f"bad pixel {tok!r} on line {_line_of(data, p)} (byte {p})")
            vals.append(int(tok))
        if len(vals) != w * h:
            raise MaskParseError(f"PGM has {len(vals)} pixels, header says {w * h}")
        vals = np.array(vals, dtype=float)
    if np.any(vals > maxval):
        raise MaskParseError("pixel value exceeds maxval")
    return (vals * 255.0 / maxval > 127).reshape(h, w)


def _tokens(buf: bytes):
    i, n = 0, len(buf)
    while i < n:
        if buf[i : i + 1].isspace():
            i += 1
            continue
        if buf[i : i + 1] == b"#":
            while i < n and buf[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < n and not buf[j : j + 1].isspace():
            j += 1
        yield i, buf[i:j]
        i = j


def _parse_ascii(data: bytes) -> np.ndarray:
    rows = []
    width = None
    offset = 0
    for lineno, raw in enumerate(data.split(b"\n"), start=1):
        line = raw.rstrip(b"\r")
        start = offset
        offset += len(raw) + 1
        if not line.strip():
            continue
        for k, ch in enumerate(line):
            if ch not in (ord("0"), ord("1")):
                raise MaskParseError(
                    f"unexpected character {chr(ch)!r} on line {lineno}, column {k + 1} (byte {start + k})"
                )
        if width is None:
            width = len(line)
        elif len(line) != width:
            raise MaskParseError(f"line {lineno} has {len(line)} cells, expected {width} (byte {start})")
        rows.append([c == ord("1") for c in line])
    if not rows:
        raise MaskParseError("mask file is empty")
    return np.array(rows, dtype=bool)


def read_mask(path) -> np.ndarray:
    """Boolean image, rows along y and columns along x."""
    return parse_mask(_read_bytes(path))


def extrude_mask(image: np.ndarray, layers: int):
    """Full ``(nx, ny, layers)`` box domain and its melt mask (image on the top layer)."""
    if layers < 1:
        raise ValueError("need at least one layer")
    plane = np.asarray(image, dtype=bool).T  # (nx, ny)
    domain = np.ones(plane.shape + (layers,), dtype=bool)
    melt = np.zeros_like(domain)
    melt[:, :, -1] = plane
    return domain, melt


def fields_to_csv(u: np.ndarray, times_us, build, surface_ij) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["knot", "t_us", "phase"] + [f"P_{i}_{j}" for i, j in surface_ij])
    for k, row in enumerate(u):
        w.writerow(
            [k, f"{times_us[k]:.6f}", "build" if build[k] else "cool"] + [f"{v:.9g}" for v in row]
        )
    return buf.getvalue()


def fields_from_csv(text: str) -> np.ndarray:
    rows = list(csv.reader(io.StringIO(text)))
    return np.array([[float(v) for v in r[3:]] for r in rows[1:]], dtype=float)
