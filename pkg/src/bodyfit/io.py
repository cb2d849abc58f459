"""File formats: JSON records, binary PGM masks, OBJ meshes. All writes are atomic."""

from __future__ import annotations

import json
import os
import tempfile

import numpy as np

from .errors import InvalidArgument


def _atomic_write(path, data: bytes):
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text):
    _atomic_write(path, text.encode("utf-8"))


def write_json(path, obj):
    _atomic_write(path, (json.dumps(obj, indent=2) + "\n").encode("utf-8"))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_pgm(path, image):
    """Write an 8-bit binary PGM. Float images in [0, 1] are scaled to 0..255."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise InvalidArgument("PGM images must be 2D")
    if img.dtype == bool:
        data = img.astype(np.uint8) * 255
    elif np.issubdtype(img.dtype, np.integer):
        data = np.clip(img, 0, 255).astype(np.uint8)
    else:
        data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = data.shape
    _atomic_write(path, f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _pgm_tokens(buf):
    """Header tokens of a PGM and the offset of the raster start."""
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(buf) and buf[i:i + 1].isspace():
            i += 1
        if buf[i:i + 1] == b"#":
            while i < len(buf) and buf[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j:j + 1].isspace():
            j += 1
        if j == i:
            raise InvalidArgument("truncated PGM header")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1


def read_pgm(path):
    """Read an 8-bit binary (P5) PGM as a uint8 array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, start = _pgm_tokens(buf)
    if tokens[0] != b"P5":
        raise InvalidArgument(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise InvalidArgument(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=start)
    return data.reshape(h, w).copy()


def read_mask(path):
    return read_pgm(path) >= 128


def write_obj(path, vertices, faces):
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in np.asarray(vertices, dtype=float)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=np.int64)]
    write_text(path, "\n".join(lines) + "\n")


def read_obj(path):
    verts, faces = [], []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(v) for v in parts[1:4]])
            elif parts[0] == "f":
                faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)
