"""Ventricle segmentation, normalized volume curves and MAE-by-year.

All thresholds are on the windowed 0-255 scale. Connectivity is 6 (face
neighbours). The brain region, used both as the segmentation domain and as
the normalization denominator, includes the ventricles.
"""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError

log = logging.getLogger(__name__)

T_VENTRICLE = 80
T_AIR = 40
T_SKULL = 200
MIN_COMPONENT_FRACTION = 0.01
POLICIES = ("min-fraction", "largest")

SIX = ndimage.generate_binary_structure(3, 1)


@dataclass
class SegmentationMask:
    mask: np.ndarray
    method: str
    threshold: float

    @property
    def voxels(self):
        return int(self.mask.sum())

    def volume_mm3(self, spacing):
        return self.voxels * float(np.prod(spacing))


def _image(v):
    v = np.asarray(getattr(v, "data", v))
    return v[..., 0] if v.ndim == 4 else v


def brain_mask(v, t_air=T_AIR, t_skull=T_SKULL) -> SegmentationMask:
    """Intracranial region: tissue above ``t_air`` that is not skull, holes filled.

    Steps: head = img > t_air; fill holes (recovers dark ventricles enclosed
    by tissue); drop skull voxels (img >= t_skull); keep the largest
    6-connected component; fill holes again.
    """
    img = _image(v)
    head = ndimage.binary_fill_holes(img > t_air, structure=SIX)
    inside = head & (img < t_skull)
    lab, n = ndimage.label(inside, structure=SIX)
    if n == 0:
        raise ContractError("brain mask is empty")
    sizes = np.bincount(lab.ravel())[1:]
    best = int(np.argmax(sizes)) + 1
    mask = ndimage.binary_fill_holes(lab == best, structure=SIX)
    return SegmentationMask(mask, "threshold-fill-largest", t_air)


def segment_ventricles(v, brain: SegmentationMask, t_ventricle=T_VENTRICLE,
                       policy="min-fraction", min_fraction=MIN_COMPONENT_FRACTION) -> SegmentationMask:
    """Dark voxels inside the brain, filtered by connected component.

    ``policy="min-fraction"`` keeps every component holding at least
    ``min_fraction`` of the brain volume; ``"largest"`` keeps only the biggest.
    An empty result is returned (with a log warning), not raised.
    """
    if policy not in POLICIES:
        raise ContractError(f"unknown component policy {policy!r}")
    if not brain.mask.any():
        raise ContractError("brain mask is empty")
    img = _image(v)
    if img.shape != brain.mask.shape:
        raise ContractError(f"volume {img.shape} and brain mask {brain.mask.shape} differ")
    cand = (img < t_ventricle) & brain.mask
    lab, n = ndimage.label(cand, structure=SIX)
    keep = np.zeros(n + 1, dtype=bool)
    if n:
        sizes = np.bincount(lab.ravel(), minlength=n + 1)[1:]
        if policy == "largest":
            keep[int(np.argmax(sizes)) + 1] = True
        else:
            keep[1:] = sizes >= min_fraction * brain.voxels
    mask = keep[lab]
    if not mask.any():
        log.warning("ventricle segmentation is empty")
    return SegmentationMask(mask, f"threshold-cc6-{policy}", t_ventricle)


def partial_volume_ventricle(v, brain: SegmentationMask, tissue=150.0, csf=30.0):
    """Soft ventricle volume in voxel units: sum of clip((tissue - v) / (tissue - csf), 0, 1) over the brain.

    Resolves sub-voxel boundary motion that a thresholded count rounds away
    on coarse grids. Assumes two-class partial-volume mixing.
    """
    if tissue <= csf:
        raise ContractError("tissue intensity must exceed csf intensity")
    img = _image(v).astype(np.float64)
    if img.shape != brain.mask.shape:
        raise ContractError(f"volume {img.shape} and brain mask {brain.mask.shape} differ")
    frac = np.clip((tissue - img) / (tissue - csf), 0.0, 1.0)
    return float(frac[brain.mask].sum())


# ------------------------------------------------------------------- curves


@dataclass
class VolumeCurve:
    """Rows of (subject, year, ventricle_vox, brain0_vox, percent)."""

    rows: list = field(default_factory=list)

    def by_key(self):
        return {(r[0], r[1]): r[4] for r in self.rows}

    def extend(self, other):
        self.rows.extend(other.rows)
        return self


def normalized_volume_curve(subject, ventricle_voxels, brain0_voxels) -> VolumeCurve:
    """percent(t) = 100 * ventricle(t) / brain(year 0).

    ``ventricle_voxels`` maps year -> voxel count (or SegmentationMask).
    """
    if brain0_voxels <= 0:
        raise ContractError(f"{subject}: year-0 brain volume must be positive")
    rows = []
    for year in sorted(ventricle_voxels):
        vv = ventricle_voxels[year]
        vv = vv.voxels if isinstance(vv, SegmentationMask) else int(vv)
        rows.append((subject, int(year), vv, int(brain0_voxels), 100.0 * vv / brain0_voxels))
    return VolumeCurve(rows)


def mae_by_year(pred: VolumeCurve, gt: VolumeCurve):
    """[(year, mean |pred% - gt%| over subjects, n_subjects), ...] sorted by year."""
    p, g = pred.by_key(), gt.by_key()
    if p.keys() != g.keys():
        missing_pred = sorted(g.keys() - p.keys())
        missing_gt = sorted(p.keys() - g.keys())
        raise ContractError(f"curve keys differ; missing in prediction: {missing_pred}, "
                            f"missing in ground truth: {missing_gt}")
    per_year = defaultdict(list)
    for key in sorted(p):
        per_year[key[1]].append(abs(p[key] - g[key]))
    return [(year, float(np.mean(errs)), len(errs)) for year, errs in sorted(per_year.items())]


# ---------------------------------------------------------------------- I/O


def write_curve_csv(path, curve: VolumeCurve):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["subject", "year", "ventricle_vox", "brain0_vox", "percent"])
        for s, y, v, b, pct in curve.rows:
            wr.writerow([s, y, v, b, f"{pct:.6f}"])


def write_mae_csv(path, mae, extra=None):
    """``extra`` maps a column name to a per-year list aligned with ``mae``."""
    extra = extra or {}
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(["year", "mae_percent", "n_subjects", *extra])
        for i, (year, m, n) in enumerate(mae):
            wr.writerow([year, f"{m:.6f}", n, *(f"{extra[k][i]:.6f}" for k in extra)])


def write_pgm(path, slice2d):
    """Binary portable graymap (P5) of a 2D uint8 or boolean array."""
    a = np.asarray(slice2d)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    a = np.ascontiguousarray(a, dtype=np.uint8)
    h, w = a.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode())
        f.write(a.tobytes())


def overlay_slice(v, mask, axis=0):
    """Central slice with the mask burned in at 255 for eyeballing."""
    img = _image(v).copy()
    img[mask.mask] = 255
    idx = img.shape[axis] // 2
    return np.take(img, idx, axis=axis)
