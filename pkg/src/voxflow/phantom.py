"""Synthetic longitudinal head phantoms with analytically known ventricle volumes.

Geometry: a spherical skull shell around a spherical brain, with a centred
ellipsoidal ventricle whose semi-axes grow by a per-subject factor ``g`` each
year. Voxel ``(i, j, k)`` has its centre at index coordinates; a structure
contains a voxel when it contains the voxel centre.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .ingest import DatasetManifest, Volume, write_volume

DEFAULT_GROWTH = 1.08 ** (1 / 3)  # 8 %/year in volume


@dataclass(frozen=True)
class PhantomSpec:
    resolution: int = 32
    skull_outer: float = 14.4
    skull_inner: float = 11.8
    skull_intensity: float = 255.0
    brain_intensity: float = 150.0
    texture_sigma: float = 6.0
    ventricle_axes: tuple = (6.4, 5.2, 4.4)
    ventricle_intensity: float = 30.0
    axis_jitter: float = 0.12
    growth: float = DEFAULT_GROWTH
    growth_jitter: float = 0.004
    accel_onset: int | None = None
    accel_growth: float = 1.0
    scan_noise: float = 0.0
    spacing_mm: float = 1.0
    supersample: int = 1

    @classmethod
    def for_resolution(cls, resolution, **overrides):
        """Defaults scaled to a cubic grid of side ``resolution``."""
        r = resolution
        base = dict(resolution=r, skull_outer=0.45 * r, skull_inner=0.37 * r,
                    ventricle_axes=(0.2 * r, 0.165 * r, 0.14 * r))
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.resolution < 2:
            raise ContractError("phantom resolution must be >= 2")
        if not self.skull_outer > self.skull_inner > max(self.ventricle_axes) > 0:
            raise ContractError(
                f"need skull_outer > skull_inner > max ventricle semi-axis, got "
                f"{self.skull_outer}, {self.skull_inner}, {self.ventricle_axes}")
        for name in ("skull_intensity", "brain_intensity", "ventricle_intensity"):
            if not 0 <= getattr(self, name) <= 255:
                raise ContractError(f"{name} must lie in [0, 255]")
        if self.growth <= 0 or self.accel_growth <= 0:
            raise ContractError("growth rates must be positive")
        if self.supersample < 1:
            raise ContractError("supersample must be >= 1")


@dataclass
class SubjectRecord:
    age: int
    volume: Volume
    semi_axes: tuple
    ventricle_analytic: float
    brain_analytic: float


@dataclass
class SubjectSeries:
    subject_id: str
    records: list = field(default_factory=list)
    growth: float = 1.0


def ellipsoid_volume(axes):
    a, b, c = axes
    return 4.0 / 3.0 * math.pi * a * b * c


def axes_at(base, growth, year, accel_onset=None, accel_growth=1.0):
    """Semi-axes after ``year`` years of multiplicative growth."""
    if accel_onset is None or year <= accel_onset:
        f = growth ** year
    else:
        f = growth ** accel_onset * (growth * accel_growth) ** (year - accel_onset)
    return tuple(a * f for a in base)


def _grid(r, sub=1):
    """Sample coordinates relative to the volume centre; ``sub`` points per voxel per axis."""
    c = (r - 1) / 2.0
    offsets = (np.arange(sub) + 0.5) / sub - 0.5
    idx = (np.arange(r)[:, None] + offsets[None, :]).ravel() - c
    return np.meshgrid(idx, idx, idx, indexing="ij")


def _coverage(inside, r, sub):
    if sub == 1:
        return inside.astype(np.float64)
    return inside.reshape(r, sub, r, sub, r, sub).mean(axis=(1, 3, 5))


def ellipsoid_mask(resolution, axes):
    """Centre-inclusion voxelization of a centred ellipsoid."""
    d, h, w = _grid(resolution)
    a, b, c = axes
    return (d / a) ** 2 + (h / b) ** 2 + (w / c) ** 2 <= 1.0


def render(spec: PhantomSpec, axes, texture, rng=None):
    """Rasterise one scan to uint8 (D, H, W, 1).

    With ``supersample == 1`` each voxel takes the intensity of the structure
    containing its centre. Larger values mix intensities by the fraction of
    ``supersample^3`` sub-samples each structure covers (partial volume).
    """
    r, sub = spec.resolution, spec.supersample
    d, h, w = _grid(r, sub)
    rad = np.sqrt(d * d + h * h + w * w)
    a, b, c = axes
    f_out = _coverage(rad <= spec.skull_outer, r, sub)
    f_in = _coverage(rad <= spec.skull_inner, r, sub)
    f_v = _coverage((d / a) ** 2 + (h / b) ** 2 + (w / c) ** 2 <= 1.0, r, sub)
    img = (spec.skull_intensity * (f_out - f_in)
           + (spec.brain_intensity + texture) * (f_in - f_v)
           + (spec.ventricle_intensity + texture) * f_v)
    if spec.scan_noise and rng is not None:
        img += f_in * rng.normal(0, spec.scan_noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)[..., None]


def gen_subject(spec: PhantomSpec, subject_seed, years, subject_id="s0000") -> SubjectSeries:
    """One subject scanned yearly at ages 0..years-1."""
    spec.validate()
    if years < 1:
        raise ContractError("years must be >= 1")
    rng = np.random.default_rng(subject_seed)
    base = tuple(a * math.exp(spec.axis_jitter * rng.standard_normal()) for a in spec.ventricle_axes)
    g = spec.growth * math.exp(spec.growth_jitter * rng.standard_normal())
    texture = rng.normal(0, spec.texture_sigma, size=(spec.resolution,) * 3)
    final = axes_at(base, g, years - 1, spec.accel_onset, spec.accel_growth)
    if max(final) >= spec.skull_inner:
        raise ContractError(
            f"{subject_id}: ventricle semi-axes {tuple(round(a, 2) for a in final)} escape the brain "
            f"(radius {spec.skull_inner}) by year {years - 1}")
    brain_vol = 4.0 / 3.0 * math.pi * spec.skull_inner ** 3
    series = SubjectSeries(subject_id, growth=g)
    spacing = (spec.spacing_mm,) * 3
    for year in range(years):
        axes = axes_at(base, g, year, spec.accel_onset, spec.accel_growth)
        vol = Volume(render(spec, axes, texture, rng), spacing)
        series.records.append(SubjectRecord(year, vol, axes, ellipsoid_volume(axes), brain_vol))
    return series


def subject_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def gen_dataset(spec: PhantomSpec, n_subjects, years, seed, out_dir, n_test=0):
    """Write ``n_subjects`` series as VVOL files plus ``manifest.txt`` and ``truth.csv``.

    The last ``n_test`` subjects form the test split.
    """
    if not 0 <= n_test <= n_subjects:
        raise ContractError(f"n_test={n_test} must be within [0, {n_subjects}]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(root=out)
    truth = []
    for i, s in enumerate(subject_seeds(seed, n_subjects)):
        sid = f"s{i:04d}"
        split = "test" if i >= n_subjects - n_test else "train"
        series = gen_subject(spec, s, years, sid)
        (out / sid).mkdir(exist_ok=True)
        for rec in series.records:
            rel = f"{sid}/y{rec.age:02d}.vvol"
            write_volume(out / rel, rec.volume)
            man.add(split, sid, rec.age, rel)
            truth.append((sid, rec.age, rec.ventricle_analytic, rec.brain_analytic, series.growth))
    man.save(out / "manifest.txt")
    with open(out / "truth.csv", "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["subject", "year", "ventricle_analytic_vox", "brain_analytic_vox", "axis_growth"])
        for sid, age, v, b, g in truth:
            wr.writerow([sid, age, f"{v:.6f}", f"{b:.6f}", f"{g:.8f}"])
    return man


def load_truth(path):
    rows = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            rows[(row["subject"], int(row["year"]))] = (
                float(row["ventricle_analytic_vox"]), float(row["brain_analytic_vox"]))
    return rows
