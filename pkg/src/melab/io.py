"""On-disk formats: raw float image files, f32 PCM waveforms, the
checkpoint container, and canonical (byte-stable) JSON/CSV helpers.

All formats are little-endian and fully deterministic so that identical
inputs always produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x4D454C49  # "ILEM" little-endian on disk
CHECKPOINT_MAGIC = b"MELABCK1"


class FormatError(ValueError):
    """A file does not match the expected container format."""


# ---------------------------------------------------------------------------
# Canonical JSON / hashing
# ---------------------------------------------------------------------------

def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def write_json(path: Path, obj) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path: Path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


def write_csv(path: Path, header: list[str], rows, meta: dict | None = None) -> None:
    """CSV with an optional leading comment line carrying run metadata."""
    lines = []
    if meta:
        pairs = " ".join(f"{k}={meta[k]}" for k in sorted(meta))
        lines.append(f"# {pairs}")
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(_csv_cell(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    return str(v)


# ---------------------------------------------------------------------------
# Waveform files: raw float32 PCM plus a JSON sidecar with the sample rate
# ---------------------------------------------------------------------------

def write_waveform(path: Path, samples: np.ndarray, sample_rate: int) -> None:
    path = Path(path)
    path.write_bytes(np.asarray(samples, dtype="<f4").tobytes())
    write_json(path.with_suffix(".json"), {"sample_rate": int(sample_rate)})


def read_waveform(path: Path) -> tuple[np.ndarray, int]:
    path = Path(path)
    samples = np.frombuffer(path.read_bytes(), dtype="<f4").astype(np.float64)
    meta = read_json(path.with_suffix(".json"))
    return samples, int(meta["sample_rate"])


# ---------------------------------------------------------------------------
# Image files: 16-byte header (magic, H, W, channels) + float32 planes
# ---------------------------------------------------------------------------

def write_image(path: Path, pixels: np.ndarray) -> None:
    """pixels: (C, H, W) float array, stored as little-endian float32."""
    c, h, w = pixels.shape
    header = struct.pack("<IIII", IMAGE_MAGIC, h, w, c)
    Path(path).write_bytes(header + np.asarray(pixels, dtype="<f4").tobytes())


def read_image(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated image file")
    magic, h, w, c = struct.unpack("<IIII", blob[:16])
    if magic != IMAGE_MAGIC:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}")
    data = np.frombuffer(blob[16:], dtype="<f4")
    if data.size != c * h * w:
        raise FormatError(f"{path}: payload size {data.size} != {c}x{h}x{w}")
    return data.reshape(c, h, w).astype(np.float64)


# ---------------------------------------------------------------------------
# Checkpoint container: JSON header + concatenated float64 payloads
# ---------------------------------------------------------------------------

def write_array_container(path: Path, header: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned container: magic, header length, JSON header, float64 payload.

    The header's ``entries`` list declares name/shape order; payloads are
    concatenated little-endian float64 in exactly that order.
    """
    entries = [{"name": name, "shape": list(arr.shape)} for name, arr in arrays.items()]
    full_header = dict(header)
    full_header["entries"] = entries
    blob = canonical_json(full_header).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in arrays.items():
            f.write(np.asarray(arr, dtype="<f8").tobytes())


def read_array_container(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(count * 8)
            if len(buf) != count * 8:
                raise FormatError(f"{path}: truncated payload for {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, arrays
