import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxflow.errors import BadMagicError, ContractError, DimOverflowError, FormatError, TruncatedFileError
from voxflow.ingest import (DatasetManifest, Volume, center_of_gravity, crop_centered, crop_offsets, decode_volume,
                            downsample, encode_volume, ingest_dir, load_manifest, preprocess, read_volume,
                            round_center, window_hu, write_volume)

from oracles import block_mean_round_half_up, crop_loops

# hand-assembled 2x2x2 u8 file, spacing (1.0, 1.0, 2.5), voxels 0..7
FIXTURE = bytes.fromhex(
    "56564f4c"            # VVOL
    "0100"                # version 1
    "01"                  # u8
    "01"                  # 1 channel
    "02000000" "02000000" "02000000"
    "000000000000f03f" "000000000000f03f" "0000000000000440"
    "0001020304050607"
)


# -------------------------------------------------------------------- window


def test_window_examples():
    v = window_hu(Volume(np.array([-200, 100, 300, -80, 175], dtype=np.int16).reshape(5, 1, 1)))
    assert v.data.ravel().tolist() == [0, 180, 255, 0, 255]
    assert v.data.dtype == np.uint8


def test_window_monotone_and_affine_in_range():
    hu = np.arange(-1024, 1024, dtype=np.int16).reshape(-1, 1, 1)
    out = window_hu(Volume(hu)).data.ravel().astype(int)
    assert np.all(np.diff(out) >= 0)
    mid = (hu.ravel() > -80) & (hu.ravel() < 175)
    np.testing.assert_array_equal(out[mid], hu.ravel()[mid] + 80)


# ----------------------------------------------------------------------- CoG


def test_cog_examples():
    v = np.zeros((8, 8, 8), np.uint8)
    v[3, 4, 5] = 9
    assert center_of_gravity(Volume(v)) == (3.0, 4.0, 5.0)
    v = np.zeros((3, 1, 1), np.uint8)
    v[0] = v[2] = 7
    assert center_of_gravity(Volume(v)) == (1.0, 0.0, 0.0)
    assert center_of_gravity(Volume(np.full((4, 5, 6), 3, np.uint8))) == (1.5, 2.0, 2.5)
    with pytest.raises(ContractError):
        center_of_gravity(Volume(np.zeros((2, 2, 2), np.uint8)))


def test_round_center_ties_low():
    assert round_center((1.5, 2.5, 2.51)) == (1, 2, 3)
    assert round_center((-0.5, 0.49, 3.0)) == (-1, 0, 3)


# ---------------------------------------------------------------------- crop


def test_crop_identity_and_corner(rng):
    v = Volume(rng.integers(1, 255, (6, 6, 6, 1)).astype(np.uint8))
    np.testing.assert_array_equal(crop_centered(v, (2.5, 2.5, 2.5), 6).data, v.data)
    c = crop_centered(v, (0, 0, 0), 4).data
    assert crop_offsets((0, 0, 0), 4) == (-1, -1, -1)
    assert not c[0].any() and not c[:, 0].any() and not c[:, :, 0].any()
    np.testing.assert_array_equal(c[1:, 1:, 1:], v.data[:3, :3, :3])


@settings(max_examples=60, deadline=None)
@given(shape=st.tuples(st.integers(1, 7), st.integers(1, 7), st.integers(1, 7)),
       center=st.tuples(*[st.floats(-6, 12, allow_nan=False)] * 3), size=st.integers(1, 9),
       seed=st.integers(0, 999))
def test_crop_matches_index_oracle(shape, center, size, seed):
    v = np.random.default_rng(seed).integers(0, 256, shape + (2,)).astype(np.uint8)
    got = crop_centered(Volume(v), center, size).data
    np.testing.assert_array_equal(got, crop_loops(v, crop_offsets(center, size), size))


# ---------------------------------------------------------------- downsample


def test_downsample_examples():
    assert np.all(downsample(Volume(np.full((4, 4, 4), 77, np.uint8)), 2).data == 77)
    block = np.array([0, 0, 0, 0, 255, 255, 255, 255], np.uint8).reshape(2, 2, 2)
    out = downsample(Volume(block, (1.0, 1.0, 0.5)), 2)
    assert out.data.ravel().tolist() == [128]
    assert out.spacing == (2.0, 2.0, 1.0)
    with pytest.raises(ContractError):
        downsample(Volume(np.zeros((4, 4, 6), np.uint8)), 4)


@pytest.mark.parametrize("seed", range(5))
def test_downsample_matches_oracle(seed):
    v = np.random.default_rng(seed).integers(0, 256, (8, 8, 8, 1)).astype(np.uint8)
    for k in (2, 4):
        np.testing.assert_array_equal(downsample(Volume(v), k).data, block_mean_round_half_up(v, k))


def test_downsample_float():
    v = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    assert downsample(Volume(v), 2).data.ravel().tolist() == [3.5]


# ---------------------------------------------------------------------- VVOL


def test_fixture_parses():
    vol = decode_volume(FIXTURE)
    assert vol.shape == (2, 2, 2, 1) and vol.data.dtype == np.uint8
    assert vol.spacing == (1.0, 1.0, 2.5)
    assert vol.data[1, 0, 1, 0] == 5
    assert vol.data.ravel().tolist() == list(range(8))
    assert encode_volume(vol) == FIXTURE


@pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
def test_roundtrip_bitwise(tmp_path, rng, dtype):
    v = Volume((rng.standard_normal((3, 4, 5, 2)) * 100).astype(dtype), (0.5, 1.0, 2.0))
    write_volume(tmp_path / "v.vvol", v)
    back = read_volume(tmp_path / "v.vvol")
    assert back.data.dtype == v.data.dtype and back.data.tobytes() == v.data.tobytes()
    assert back.spacing == v.spacing


def test_vvol_error_kinds():
    with pytest.raises(BadMagicError):
        decode_volume(b"VVOX" + FIXTURE[4:])
    with pytest.raises(TruncatedFileError):
        decode_volume(FIXTURE[:44])
    with pytest.raises(TruncatedFileError):
        decode_volume(FIXTURE[:20])
    with pytest.raises(FormatError):
        decode_volume(FIXTURE + b"\0")
    huge = bytearray(FIXTURE)
    huge[8:20] = bytes.fromhex("ffffffff" "ffffffff" "02000000")
    with pytest.raises(DimOverflowError):
        decode_volume(bytes(huge))
    zero = bytearray(FIXTURE)
    zero[8:12] = bytes(4)
    with pytest.raises(DimOverflowError):
        decode_volume(bytes(zero))
    # distinct kinds, one family
    assert not issubclass(BadMagicError, TruncatedFileError)
    assert issubclass(DimOverflowError, FormatError)


def test_volume_contracts():
    with pytest.raises(ContractError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ContractError):
        encode_volume(Volume(np.zeros((2, 2, 2), np.float64)))


# ------------------------------------------------------------------ manifest


def test_manifest_roundtrip(tmp_path):
    man = DatasetManifest(root=tmp_path)
    man.add("train", "s0001", 0, "s0001/y00.vvol")
    man.add("train", "s0001", 1.5, "s0001/y01.vvol")
    man.add("test", "s0009", 3, "s0009/y03.vvol")
    man.save(tmp_path / "manifest.txt")
    back = load_manifest(tmp_path / "manifest.txt")
    assert back.splits == {"test": {"s0009": [(3.0, "s0009/y03.vvol")]},
                           "train": {"s0001": [(0.0, "s0001/y00.vvol"), (1.5, "s0001/y01.vvol")]}}
    assert back.dumps() == man.dumps()
    with pytest.raises(ContractError):
        man.add("train", "s0001", 1.5, "x.vvol")


def test_manifest_validate(tmp_path):
    man = DatasetManifest(root=tmp_path)
    write_volume(tmp_path / "a.vvol", Volume(np.zeros((2, 2, 2), np.uint8)))
    write_volume(tmp_path / "b.vvol", Volume(np.zeros((2, 2, 4), np.uint8)))
    man.add("train", "s", 0, "a.vvol")
    man.validate()
    man.add("train", "s", 1, "b.vvol")
    with pytest.raises(ContractError, match="dims"):
        man.validate()
    man.add("train", "t", 0, "missing.vvol")
    with pytest.raises((FileNotFoundError, ContractError)):
        man.validate()


def test_manifest_parse_error(tmp_path):
    (tmp_path / "m.txt").write_text("s0 0 a.vvol\n")
    with pytest.raises(FormatError, match="m.txt:1"):
        load_manifest(tmp_path / "m.txt")


# ---------------------------------------------------------------- pipeline


def _head(rng, shift=(3, -2, 1)):
    hu = np.full((24, 24, 24), -1000, np.int16)
    d, h, w = np.meshgrid(*[np.arange(24)] * 3, indexing="ij")
    c = np.array([11.5, 11.5, 11.5]) + shift
    inside = (d - c[0]) ** 2 + (h - c[1]) ** 2 + (w - c[2]) ** 2 <= 36
    hu[inside] = rng.integers(0, 60, inside.sum())
    return Volume(hu, (0.5, 0.5, 0.5))


def test_preprocess_centres_head(rng):
    out = preprocess(_head(rng), 16, 2)
    assert out.shape == (8, 8, 8, 1) and out.data.dtype == np.uint8
    assert out.spacing == (1.0, 1.0, 1.0)
    cog = center_of_gravity(out)
    assert all(abs(c - 3.5) < 0.6 for c in cog)


def test_pipeline_deterministic(tmp_path, rng):
    src = tmp_path / "src"
    (src / "s0").mkdir(parents=True)
    write_volume(src / "s0" / "y00.vvol", _head(rng))
    (src / "manifest.txt").write_text("[train]\ns0 0 s0/y00.vvol\n")
    a = ingest_dir(src, tmp_path / "a", 16, 2)
    ingest_dir(src, tmp_path / "b", 16, 2)
    assert a == ["s0/y00.vvol"]
    assert (tmp_path / "a/s0/y00.vvol").read_bytes() == (tmp_path / "b/s0/y00.vvol").read_bytes()
    assert load_manifest(tmp_path / "a/manifest.txt").subjects("train") == {"s0": [(0.0, "s0/y00.vvol")]}
