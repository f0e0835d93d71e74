import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from voxflow.errors import ContractError
from voxflow.phantom import PhantomSpec, gen_subject, subject_seeds
from voxflow.quantify import (SegmentationMask, VolumeCurve, brain_mask, mae_by_year, normalized_volume_curve,
                              overlay_slice, partial_volume_ventricle, segment_ventricles, write_curve_csv,
                              write_mae_csv, write_pgm)


def full_mask(shape):
    return SegmentationMask(np.ones(shape, bool), "all", 0)


def test_phantom_ventricle_near_analytic():
    spec = PhantomSpec.for_resolution(32)
    for s in subject_seeds(1, 5):
        rec = gen_subject(spec, s, 1).records[0]
        seg = segment_ventricles(rec.volume, brain_mask(rec.volume))
        assert seg.voxels == pytest.approx(rec.ventricle_analytic, rel=0.10)
        assert not np.any(seg.mask & ~brain_mask(rec.volume).mask)


def test_uniform_brain_has_no_ventricle():
    v = np.full((8, 8, 8), 150, np.uint8)
    seg = segment_ventricles(v, full_mask(v.shape))
    assert seg.voxels == 0


def test_policies_on_two_blobs():
    v = np.full((12, 12, 12), 150, np.uint8)
    v[1:5, 1:5, 1:5] = 20     # 64 voxels
    v[7:10, 7:10, 7:10] = 20  # 27 voxels
    v[11, 11, 11] = 20        # 1 voxel, under 1% of the 1728-voxel brain
    m = full_mask(v.shape)
    assert segment_ventricles(v, m, policy="largest").voxels == 64
    assert segment_ventricles(v, m, policy="min-fraction").voxels == 64 + 27
    assert segment_ventricles(v, m, min_fraction=0.02).voxels == 64
    with pytest.raises(ContractError):
        segment_ventricles(v, m, policy="nope")


def test_six_connectivity():
    v = np.full((4, 4, 4), 150, np.uint8)
    v[0, 0, 0] = v[1, 1, 0] = 10  # diagonal neighbours only
    assert segment_ventricles(v, full_mask(v.shape), policy="largest").voxels == 1


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10000), t1=st.integers(1, 254), dt=st.integers(0, 100))
def test_threshold_monotone(seed, t1, dt):
    v = np.random.default_rng(seed).integers(0, 256, (6, 6, 6)).astype(np.uint8)
    m = full_mask(v.shape)
    lo = segment_ventricles(v, m, t_ventricle=t1, min_fraction=0.0).mask
    hi = segment_ventricles(v, m, t_ventricle=min(t1 + dt, 255), min_fraction=0.0).mask
    assert not np.any(lo & ~hi)


def test_brain_mask_errors_and_skull():
    with pytest.raises(ContractError):
        brain_mask(np.zeros((6, 6, 6), np.uint8))
    rec = gen_subject(PhantomSpec.for_resolution(32), 2, 1).records[0]
    img = rec.volume.data[..., 0]
    assert not np.any(brain_mask(rec.volume).mask & (img >= 250))
    with pytest.raises(ContractError):
        segment_ventricles(img, SegmentationMask(np.zeros(img.shape, bool), "x", 0))


def test_segmentation_deterministic():
    rec = gen_subject(PhantomSpec.for_resolution(16), 2, 1).records[0]
    a = segment_ventricles(rec.volume, brain_mask(rec.volume)).mask
    b = segment_ventricles(rec.volume, brain_mask(rec.volume)).mask
    assert np.array_equal(a, b)


def test_volume_mm3():
    m = SegmentationMask(np.ones((2, 2, 2), bool), "x", 0)
    assert m.volume_mm3((0.5, 0.5, 2.0)) == 4.0


# ----------------------------------------------------------------- soft measure


def test_partial_volume_measure():
    v = np.array([150, 30, 90, 0, 200], np.uint8).reshape(5, 1, 1)
    assert partial_volume_ventricle(v, full_mask((5, 1, 1))) == pytest.approx(0 + 1 + 0.5 + 1 + 0)
    with pytest.raises(ContractError):
        partial_volume_ventricle(v, full_mask((5, 1, 1)), tissue=10, csf=30)


def test_partial_volume_tracks_growth_on_coarse_grid():
    spec = PhantomSpec.for_resolution(16, texture_sigma=0.0, supersample=4)
    recs = gen_subject(spec, 4, 3).records
    soft = [partial_volume_ventricle(r.volume, brain_mask(recs[0].volume)) for r in recs]
    assert soft[0] < soft[1] < soft[2]
    for s, r in zip(soft, recs):
        assert s == pytest.approx(r.ventricle_analytic, rel=0.05)


# ----------------------------------------------------------------------- curves


def test_curve_examples():
    c = normalized_volume_curve("s", {0: 500}, 500)
    assert c.rows[0][4] == 100.0
    assert normalized_volume_curve("s", {0: 0, 1: 0}, 500).by_key() == {("s", 0): 0.0, ("s", 1): 0.0}
    with pytest.raises(ContractError):
        normalized_volume_curve("s", {0: 1}, 0)


def test_curve_growth_follows_law():
    spec = PhantomSpec.for_resolution(48, growth=1.1 ** (1 / 3), growth_jitter=0.0, texture_sigma=2.0)
    recs = gen_subject(spec, 6, 3).records
    b0 = brain_mask(recs[0].volume).voxels
    counts = {r.age: segment_ventricles(r.volume, brain_mask(r.volume)) for r in recs}
    pct = [p for _, _, _, _, p in normalized_volume_curve("s", counts, b0).rows]
    for a, b in zip(pct, pct[1:]):
        assert b / a == pytest.approx(1.1, abs=0.03)


def _curve(vals):
    return VolumeCurve([(s, y, 0, 1, v) for (s, y), v in vals.items()])


def test_mae_examples():
    gt = {("a", 0): 2.0, ("a", 1): 3.0, ("b", 0): 1.0, ("b", 1): 4.0}
    assert [m for _, m, _ in mae_by_year(_curve(gt), _curve(gt))] == [0.0, 0.0]
    shifted = {k: v + 1.5 for k, v in gt.items()}
    assert mae_by_year(_curve(shifted), _curve(gt)) == [(0, 1.5, 2), (1, 1.5, 2)]
    with pytest.raises(ContractError, match="missing in prediction"):
        mae_by_year(_curve({("a", 0): 1.0}), _curve(gt))


def test_frozen_baseline_error_grows():
    spec = PhantomSpec.for_resolution(32)
    pred, gt = VolumeCurve(), VolumeCurve()
    for i, s in enumerate(subject_seeds(5, 4)):
        recs = gen_subject(spec, s, 4).records
        b0 = brain_mask(recs[0].volume).voxels
        counts = {r.age: segment_ventricles(r.volume, brain_mask(r.volume)).voxels for r in recs}
        gt.extend(normalized_volume_curve(f"s{i}", counts, b0))
        pred.extend(normalized_volume_curve(f"s{i}", {y: counts[0] for y in counts}, b0))
    mae = [m for _, m, _ in mae_by_year(pred, gt)]
    assert mae[0] == 0.0
    assert all(b > a for a, b in zip(mae, mae[1:]))


# -------------------------------------------------------------------------- I/O


def test_csv_writers(tmp_path):
    write_curve_csv(tmp_path / "c.csv", normalized_volume_curve("s", {0: 5, 1: 6}, 100))
    assert (tmp_path / "c.csv").read_text().splitlines() == [
        "subject,year,ventricle_vox,brain0_vox,percent", "s,0,5,100,5.000000", "s,1,6,100,6.000000"]
    write_mae_csv(tmp_path / "m.csv", [(1, 0.25, 8)], {"frozen_mae_percent": [0.5]})
    assert (tmp_path / "m.csv").read_text().splitlines() == [
        "year,mae_percent,n_subjects,frozen_mae_percent", "1,0.250000,8,0.500000"]


def test_pgm_and_overlay(tmp_path):
    v = np.arange(27, dtype=np.uint8).reshape(3, 3, 3)
    mask = SegmentationMask(v == 13, "x", 0)
    sl = overlay_slice(v, mask)
    assert sl.shape == (3, 3) and sl[1, 1] == 255 and sl[0, 0] == 9
    write_pgm(tmp_path / "a.pgm", sl)
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n3 3\n255\n") and len(raw) == 11 + 9
    write_pgm(tmp_path / "b.pgm", mask.mask[1])
    assert (tmp_path / "b.pgm").read_bytes()[-5] == 255


def test_scipy_label_agrees_with_flood_fill():
    # independent BFS on a random field as a cross-check of the 6-connected labelling used above
    rng = np.random.default_rng(0)
    cand = rng.random((7, 7, 7)) < 0.35
    _, n = ndimage.label(cand, structure=ndimage.generate_binary_structure(3, 1))
    seen = np.zeros_like(cand)
    comps = 0
    for start in zip(*np.nonzero(cand)):
        if seen[start]:
            continue
        comps += 1
        stack = [start]
        seen[start] = True
        while stack:
            p = stack.pop()
            for ax in range(3):
                for d in (-1, 1):
                    q = list(p)
                    q[ax] += d
                    q = tuple(q)
                    if all(0 <= q[i] < 7 for i in range(3)) and cand[q] and not seen[q]:
                        seen[q] = True
                        stack.append(q)
    assert comps == n
