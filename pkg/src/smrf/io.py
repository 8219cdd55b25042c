"""File formats: PGM images and masks, PFM probability maps, landmark JSON,
and the on-disk dataset layout."""
from __future__ import annotations

import hashlib
import json
import re
from pathlib import Path

import numpy as np

from .synth import Phantom, PhantomSpec


class DataFormatError(ValueError):
    pass


_PGM_HEADER = re.compile(rb"\A(P5)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+"
                         rb"(?:#[^\n]*\n\s*)*(\d+)\s")


def encode_pgm(img) -> bytes:
    """Binary 8-bit PGM. Float input in [0, 1] is scaled by 255; integers are kept."""
    a = np.asarray(img)
    if a.ndim != 2:
        raise DataFormatError("PGM needs a 2D array")
    if np.issubdtype(a.dtype, np.floating):
        a = np.round(np.clip(a, 0.0, 1.0) * 255.0)
    elif a.min(initial=0) < 0 or a.max(initial=0) > 255:
        raise DataFormatError("integer PGM values must lie in [0, 255]")
    h, w = a.shape
    return b"P5\n%d %d\n255\n" % (w, h) + a.astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    """Raw 8-bit values as ``uint8`` of shape ``(height, width)``."""
    m = _PGM_HEADER.match(data)
    if not m:
        raise DataFormatError("not a binary (P5) PGM file")
    w, h, maxval = int(m.group(2)), int(m.group(3)), int(m.group(4))
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise DataFormatError(f"unsupported PGM geometry {w}x{h} maxval {maxval}")
    body = data[m.end():]
    if len(body) < w * h:
        raise DataFormatError("truncated PGM data")
    return np.frombuffer(body[:w * h], dtype=np.uint8).reshape(h, w).copy()


def encode_pfm(arr) -> bytes:
    """Greyscale little-endian PFM (scale -1.0, rows stored bottom to top)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2:
        raise DataFormatError("PFM needs a 2D array")
    h, w = a.shape
    return b"Pf\n%d %d\n-1.0\n" % (w, h) + np.flipud(a).astype("<f4").tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) < 4 or parts[0].strip() != b"Pf":
        raise DataFormatError("not a greyscale PFM file")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise DataFormatError(f"bad PFM header: {exc}") from exc
    if scale == 0 or w < 1 or h < 1:
        raise DataFormatError("bad PFM header")
    dtype = "<f4" if scale < 0 else ">f4"
    body = parts[3]
    if len(body) < 4 * w * h:
        raise DataFormatError("truncated PFM data")
    a = np.frombuffer(body[:4 * w * h], dtype=dtype).reshape(h, w)
    return np.flipud(a).astype(np.float64)


def landmarks_json(points) -> str:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return json.dumps({"n": int(len(pts)), "points": pts.tolist()}) + "\n"


def parse_landmarks(text: str) -> np.ndarray:
    try:
        d = json.loads(text)
        pts = np.asarray(d["points"], dtype=np.float64)
        n = int(d.get("n", len(pts)))
    except (ValueError, KeyError, TypeError) as exc:
        raise DataFormatError(f"malformed landmark file: {exc}") from exc
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) != n:
        raise DataFormatError("landmark points must be a list of n [x, y] pairs")
    return pts


# -- files

def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise DataFormatError(f"cannot read {path}: {exc.strerror}") from exc


def read_image(path) -> np.ndarray:
    """A PGM as floats in [0, 1] (value / 255)."""
    return decode_pgm(_read(path)).astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    return (decode_pgm(_read(path)) > 0).astype(np.uint8)


def write_mask(path, mask):
    Path(path).write_bytes(encode_pgm((np.asarray(mask) > 0).astype(np.uint8) * 255))


def read_map(path) -> np.ndarray:
    """A probability map from PFM, or from PGM scaled to [0, 1]."""
    data = _read(path)
    return decode_pfm(data) if data[:2] == b"Pf" else decode_pgm(data) / 255.0


def read_landmarks(path) -> np.ndarray:
    return parse_landmarks(_read(path).decode("utf-8", errors="replace"))


# -- dataset directory

def item_names(i: int) -> tuple[str, str, str]:
    return f"img_{i:04d}.pgm", f"mask_{i:04d}.pgm", f"landmarks_{i:04d}.json"


def write_dataset(root, spec: PhantomSpec, phantoms: list[Phantom]) -> str:
    """Write the layout and return the manifest checksum (sha256 over all files)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = {"spec.json": (json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n").encode()}
    for i, p in enumerate(phantoms):
        img, mask, lm = item_names(i)
        files[img] = encode_pgm(p.image)
        files[mask] = encode_pgm(p.mask.astype(np.uint8) * 255)
        files[lm] = landmarks_json(p.landmarks).encode()
    for name, data in files.items():
        (root / name).write_bytes(data)
    return manifest_checksum(files)


def manifest_checksum(files: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(files):
        h.update(name.encode() + b"\0" + hashlib.sha256(files[name]).digest())
    return h.hexdigest()


def read_dataset(root):
    """``(spec or None, [(image, mask, landmarks), ...])`` in index order."""
    root = Path(root)
    if not root.is_dir():
        raise DataFormatError(f"dataset directory {root} does not exist")
    spec = None
    if (root / "spec.json").exists():
        try:
            spec = PhantomSpec.from_dict(json.loads(_read(root / "spec.json")))
        except ValueError as exc:
            raise DataFormatError(f"bad spec.json: {exc}") from exc
    items = []
    i = 0
    while (root / item_names(i)[0]).exists():
        img, mask, lm = (root / n for n in item_names(i))
        items.append((read_image(img), read_mask(mask), read_landmarks(lm)))
        i += 1
    if not items:
        raise DataFormatError(f"no img_0000.pgm in {root}")
    return spec, items
