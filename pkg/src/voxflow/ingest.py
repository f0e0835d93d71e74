"""Volume I/O, dataset manifests and the CT preprocessing pipeline.

VVOL file layout (all little-endian)::

    offset  size  field
    0       4     magic b"VVOL"
    4       2     version (u16, = 1)
    6       1     dtype code: 1 = u8, 2 = i16, 3 = f32
    7       1     channels C (u8, >= 1)
    8       12    dims D, H, W (3 x u32, each >= 1)
    20      24    voxel spacing in mm along D, H, W (3 x f64)
    44      ...   voxels, D-major / H / W / C-minor

Manifest layout (plain text, one record per line)::

    # voxflow manifest v1
    [train]
    <subject_id> <age_years> <relative/path.vvol>
    [test]
    ...

Paths are relative to the manifest's directory.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, ContractError, DimOverflowError, FormatError, TruncatedFileError

VVOL_MAGIC = b"VVOL"
VVOL_VERSION = 1
HEADER = struct.Struct("<4sHBB3I3d")
DTYPE_CODES = {1: np.dtype("<u1"), 2: np.dtype("<i2"), 3: np.dtype("<f4")}
CODE_FOR = {np.dtype(v).str: k for k, v in DTYPE_CODES.items()}
MAX_VOXELS = 2 ** 32

HU_OFFSET = 80


@dataclass
class Volume:
    """Voxel array of shape (D, H, W, C) plus spacing in mm per spatial axis."""

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4 or min(self.data.shape) < 1:
            raise ContractError(f"volume data must be (D,H,W,C) with dims >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ContractError(f"spacing must be three positive numbers, got {self.spacing}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def voxel_mm3(self):
        return float(np.prod(self.spacing))


# ------------------------------------------------------------------------ VVOL


def encode_volume(vol: Volume) -> bytes:
    code = CODE_FOR.get(vol.data.dtype.newbyteorder("<").str)
    if code is None:
        raise ContractError(f"unsupported voxel dtype {vol.data.dtype}; use uint8, int16 or float32")
    d, h, w, c = vol.shape
    if c > 255:
        raise ContractError(f"too many channels for VVOL: {c}")
    head = HEADER.pack(VVOL_MAGIC, VVOL_VERSION, code, c, d, h, w, *vol.spacing)
    return head + np.ascontiguousarray(vol.data, dtype=DTYPE_CODES[code]).tobytes()


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < 4 or buf[:4] != VVOL_MAGIC:
        raise BadMagicError(f"not a VVOL file (magic {bytes(buf[:4])!r})")
    if len(buf) < HEADER.size:
        raise TruncatedFileError(f"VVOL header needs {HEADER.size} bytes, file has {len(buf)}")
    _, version, code, c, d, h, w, sd, sh, sw = HEADER.unpack_from(buf)
    if version != VVOL_VERSION:
        raise FormatError(f"unsupported VVOL version {version}")
    if code not in DTYPE_CODES:
        raise FormatError(f"unknown VVOL dtype code {code}")
    if min(d, h, w, c) < 1:
        raise DimOverflowError(f"VVOL dims must be >= 1, got {(d, h, w, c)}")
    n = d * h * w * c
    if n > MAX_VOXELS:
        raise DimOverflowError(f"VVOL dims {(d, h, w, c)} exceed {MAX_VOXELS} voxels")
    dt = DTYPE_CODES[code]
    need = HEADER.size + n * dt.itemsize
    if len(buf) < need:
        raise TruncatedFileError(f"VVOL payload truncated: need {need} bytes, have {len(buf)}")
    if len(buf) > need:
        raise FormatError(f"VVOL has {len(buf) - need} trailing bytes")
    data = np.frombuffer(buf, dtype=dt, count=n, offset=HEADER.size).reshape(d, h, w, c)
    return Volume(data.astype(dt.newbyteorder("=")), (sd, sh, sw))


def write_volume(path, vol: Volume):
    Path(path).write_bytes(encode_volume(vol))


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


# -------------------------------------------------------------------- manifest


@dataclass
class DatasetManifest:
    """Longitudinal records: split -> subject_id -> [(age, path), ...]."""

    root: Path = field(default_factory=Path)
    splits: dict = field(default_factory=dict)

    def add(self, split, subject, age, path):
        series = self.splits.setdefault(split, {}).setdefault(subject, [])
        if series and age <= series[-1][0]:
            raise ContractError(f"ages must increase strictly for {subject}: {series[-1][0]} then {age}")
        series.append((age, str(path)))

    def subjects(self, split):
        return self.splits.get(split, {})

    def path(self, rel):
        return self.root / rel

    def validate(self):
        dims = None
        for split, subjects in self.splits.items():
            for subject, series in subjects.items():
                ages = [a for a, _ in series]
                if any(b <= a for a, b in zip(ages, ages[1:])):
                    raise ContractError(f"ages not strictly increasing for {subject}")
                for _, rel in series:
                    p = self.path(rel)
                    if not p.exists():
                        raise FileNotFoundError(p)
                    with open(p, "rb") as f:
                        head = f.read(HEADER.size)
                    if len(head) < HEADER.size:
                        raise TruncatedFileError(f"{p}: header truncated")
                    shape = HEADER.unpack(head)[3:7]
                    if dims is None:
                        dims = shape
                    elif shape != dims:
                        raise ContractError(f"{p} has dims {shape}, dataset uses {dims}")

    def dumps(self):
        lines = ["# voxflow manifest v1"]
        for split in sorted(self.splits):
            lines.append(f"[{split}]")
            for subject in sorted(self.splits[split]):
                for age, rel in self.splits[split][subject]:
                    lines.append(f"{subject} {_fmt_age(age)} {rel}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.dumps())


def _fmt_age(age):
    return str(int(age)) if float(age).is_integer() else repr(float(age))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    man = DatasetManifest(root=path.parent)
    split = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            split = line[1:-1].strip()
            man.splits.setdefault(split, {})
            continue
        parts = line.split()
        if split is None or len(parts) != 3:
            raise FormatError(f"{path}:{lineno}: expected 'subject age path' under a [split] header")
        man.add(split, parts[0], float(parts[1]), parts[2])
    return man


# ---------------------------------------------------------------- preprocessing


def window_hu(src: Volume) -> Volume:
    """CT numbers (HU) -> 8-bit brain-window bytes: clip(v + 80, 0, 255)."""
    v = np.clip(src.data.astype(np.int32) + HU_OFFSET, 0, 255)
    return Volume(v.astype(np.uint8), src.spacing)


def center_of_gravity(vol: Volume):
    """Intensity-weighted mean voxel index along (D, H, W)."""
    w = vol.data.astype(np.float64).sum(axis=-1)
    total = w.sum()
    if total <= 0:
        raise ContractError("center of gravity is undefined for an all-zero volume")
    coords = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        profile = w.sum(axis=other)
        coords.append(float((profile * np.arange(w.shape[axis])).sum() / total))
    return tuple(coords)


def round_center(center):
    """Nearest integer, ties toward the lower index."""
    return tuple(int(np.ceil(c - 0.5)) for c in center)


def crop_offsets(center, size):
    """Input index of output voxel 0 along each axis."""
    return tuple(c - (size - 1) // 2 for c in round_center(center))


def crop_centered(vol: Volume, center, size) -> Volume:
    """Extract a size^3 cube around ``center``; outside voxels are 0.

    Output voxel ``o`` reads input voxel ``o + start`` with
    ``start = round(center) - (size - 1) // 2`` per axis.
    """
    if size < 1:
        raise ContractError(f"crop size must be >= 1, got {size}")
    out = np.zeros((size, size, size, vol.shape[3]), dtype=vol.data.dtype)
    src, dst = [], []
    for axis, start in enumerate(crop_offsets(center, size)):
        n = vol.shape[axis]
        lo, hi = max(start, 0), min(start + size, n)
        if hi <= lo:
            return Volume(out, vol.spacing)
        src.append(slice(lo, hi))
        dst.append(slice(lo - start, hi - start))
    out[tuple(dst)] = vol.data[tuple(src)]
    return Volume(out, vol.spacing)


def downsample(vol: Volume, k: int) -> Volume:
    """k x k x k mean pooling; integer volumes round half up."""
    d, h, w, c = vol.shape
    if k < 1 or d % k or h % k or w % k:
        raise ContractError(f"dims {vol.shape[:3]} are not divisible by downsample factor {k}")
    blocks = vol.data.reshape(d // k, k, h // k, k, w // k, k, c)
    spacing = tuple(s * k for s in vol.spacing)
    if np.issubdtype(vol.data.dtype, np.integer):
        n = k ** 3
        total = blocks.astype(np.int64).sum(axis=(1, 3, 5))
        pooled = (2 * total + n) // (2 * n)
        return Volume(pooled.astype(vol.data.dtype), spacing)
    return Volume(blocks.mean(axis=(1, 3, 5)).astype(vol.data.dtype), spacing)


def preprocess(src: Volume, size: int, factor: int) -> Volume:
    """window (if HU) -> centre-of-gravity crop -> downsample."""
    vol = window_hu(src) if src.data.dtype == np.int16 else src
    if vol.data.dtype != np.uint8:
        raise ContractError(f"preprocess expects int16 HU or uint8 input, got {vol.data.dtype}")
    vol = crop_centered(vol, center_of_gravity(vol), size)
    return downsample(vol, factor)


def ingest_dir(src_dir, dst_dir, size, factor):
    """Preprocess every .vvol under ``src_dir`` into ``dst_dir`` (same relative paths).

    A manifest found at ``src_dir/manifest.txt`` is copied alongside.
    Returns the list of written relative paths.
    """
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    written = []
    for p in sorted(src_dir.rglob("*.vvol")):
        rel = p.relative_to(src_dir)
        out = dst_dir / rel
        out.parent.mkdir(parents=True, exist_ok=True)
        write_volume(out, preprocess(read_volume(p), size, factor))
        written.append(str(rel))
    man = src_dir / "manifest.txt"
    if man.exists():
        os.makedirs(dst_dir, exist_ok=True)
        (dst_dir / "manifest.txt").write_text(man.read_text())
    return written
