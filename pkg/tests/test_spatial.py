import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from voxflow import diffcore as dc
from voxflow.errors import ContractError, FormatError
from voxflow.flow import FlowConfig, FlowModel, save_flow
from voxflow.phantom import PhantomSpec, gen_subject, subject_seeds
from voxflow.spatial import (Adam, TrainSchedule, bits_per_dim, dequantize, parse_schedule, quantize_bits,
                             to_uint8, train_spatial, write_metrics)


def phantom_set(n, res=16, seed=0):
    spec = PhantomSpec.for_resolution(res)
    return [gen_subject(spec, s, 1).records[0].volume.data for s in subject_seeds(seed, n)]


# ------------------------------------------------------------- quantization


def test_quantize_examples():
    v = np.arange(256, dtype=np.uint8)
    np.testing.assert_array_equal(quantize_bits(v, 8), v)
    assert quantize_bits(np.uint8(127), 1) == 0
    assert quantize_bits(np.uint8(128), 1) == 1
    assert quantize_bits(np.uint8(200), 2) == 3


def test_quantize_contract():
    with pytest.raises(ContractError):
        quantize_bits(np.zeros(3, np.uint8), 0)
    with pytest.raises(ContractError):
        quantize_bits(np.zeros(3, np.uint8), 9)
    with pytest.raises(ContractError):
        quantize_bits(np.zeros(3, np.int16), 4)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 8), data=st.lists(st.integers(0, 255), min_size=1, max_size=50))
def test_quantize_properties(n, data):
    v = np.array(data, dtype=np.uint8)
    q = quantize_bits(v, n)
    assert q.max() <= 2 ** n - 1
    np.testing.assert_array_equal(q, v // 2 ** (8 - n))
    # idempotent once the data already fits n bits
    np.testing.assert_array_equal(quantize_bits(q.astype(np.uint8), 8), q)


def test_dequantize_examples():
    assert dequantize(np.array([128]), 8, u=0.0)[0] == 0.0
    assert dequantize(np.array([1]), 1, u=0.0)[0] == 0.0
    assert dequantize(np.array([0]), 1, u=0.0)[0] == -0.5


def test_dequantize_range_and_errors(rng):
    x = dequantize(np.array([0, 255] * 500), 8, rng)
    assert x.min() >= -0.5 and x.max() < 0.5
    with pytest.raises(ContractError):
        dequantize(np.array([4]), 2, rng)
    with pytest.raises(ContractError):
        dequantize(np.array([1]), 2)


def test_dequantize_uniform_within_bin():
    rng = np.random.default_rng(42)
    n = 2
    x = dequantize(np.full(40000, 2), n, rng).astype(np.float64)
    lo, hi = 2 / 4 - 0.5, 3 / 4 - 0.5
    assert x.min() >= lo and x.max() < hi
    counts, _ = np.histogram(x, bins=20, range=(lo, hi))
    chi2 = stats.chisquare(counts)
    assert chi2.pvalue > 0.001


def test_to_uint8_inverts_dequantize(rng):
    v = rng.integers(0, 256, size=1000).astype(np.uint8)
    np.testing.assert_array_equal(to_uint8(dequantize(v, 8, rng)), v)
    np.testing.assert_array_equal(to_uint8(dequantize(v, 8, u=0.5)), v)


# ---------------------------------------------------------------------- bpd


def test_bpd_examples():
    assert bits_per_dim(0.0, 8, 100) == 8.0
    # uniform density on [-0.5, 0.5)^dims has density 1, so nll = 0 and bpd = n
    for n in (1, 3, 8):
        assert bits_per_dim(0.0, n, 10) == n
    assert bits_per_dim(100 * math.log(2), 0, 100) == pytest.approx(1.0)
    with pytest.raises(ContractError):
        bits_per_dim(1.0, 8, 0)


# ----------------------------------------------------------------- schedule


def test_schedule_full_scale_values():
    s = TrainSchedule.full_scale()
    assert [(x.bits, x.epochs) for x in s.stages] == [(1, 70), (2, 30), (3, 10), (4, 20), (5, 10),
                                                      (6, 10), (7, 10), (8, 200)]
    assert s.total_epochs == 360
    assert s.resolved_warmup() == 100
    assert s.stages[-1].lr == 1e-4


def test_schedule_warmup_scales_with_length():
    s = TrainSchedule(((1, 18, 1e-3), (8, 18, 1e-3)))
    assert s.resolved_warmup() == pytest.approx(10.0)


def test_schedule_contracts():
    with pytest.raises(ContractError):
        TrainSchedule(((2, 1, 1e-3), (2, 1, 1e-3)))
    with pytest.raises(ContractError):
        TrainSchedule(((3, 1, 1e-3), (1, 1, 1e-3)))
    with pytest.raises(ContractError):
        TrainSchedule(((1, 1, 0.0),))
    with pytest.raises(ContractError):
        TrainSchedule(((1, 1, 1e-3),), batch_size=4)


def test_parse_schedule_roundtrip():
    text = "# desk\n1 5 0.001\n2 5 0.001\n\n8 10 0.0001  # final\nwarmup 2.5\n"
    s = parse_schedule(text)
    assert [(x.bits, x.epochs, x.lr) for x in s.stages] == [(1, 5, 1e-3), (2, 5, 1e-3), (8, 10, 1e-4)]
    assert s.warmup_epochs == 2.5
    assert parse_schedule(s.dumps()) == s


def test_parse_schedule_errors():
    with pytest.raises(FormatError, match="line 2"):
        parse_schedule("1 5 0.001\n2 five 0.001\n")
    with pytest.raises(FormatError):
        parse_schedule("1 5\n")


# ------------------------------------------------------------------ optimizer


def test_adam_first_step_is_lr_sign(f64):
    from voxflow.diffcore import Tensor

    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    Adam([p]).step([np.array([0.5, -4.0, 0.0])], lr=0.1)
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-7)


# ------------------------------------------------------------------ training


def test_zero_epoch_stage_initializes_only():
    data = phantom_set(2, res=8)
    cfg = FlowConfig(levels=2, depth=1, width=4, resolution=8)
    res = train_spatial(data, cfg, TrainSchedule(((8, 0, 1e-3),)), seed=0)
    assert res.steps == 0 and res.metrics == []
    assert res.model.initialized
    fresh = FlowModel(cfg, seed=0)
    assert sum(p.data.size for p in res.model.params()) == sum(p.data.size for p in fresh.params())


def test_dataset_shape_checked():
    cfg = FlowConfig(levels=1, depth=1, width=4, resolution=8)
    with pytest.raises(ContractError, match="item 0"):
        train_spatial([np.zeros((4, 4, 4, 1), np.uint8)], cfg, TrainSchedule(((8, 1, 1e-3),)))
    with pytest.raises(ContractError):
        train_spatial([], cfg, TrainSchedule(((8, 1, 1e-3),)))


def test_constant_phantoms_reach_low_bpd_at_one_bit():
    data = [np.full((4, 4, 4, 1), 200, np.uint8) for _ in range(8)]
    cfg = FlowConfig(levels=1, depth=1, width=4, resolution=4)
    res = train_spatial(data, cfg, TrainSchedule(((1, 15, 1e-2),), warmup_epochs=1), seed=0)
    assert res.metrics[-1]["bpd"] < 1.0


def test_warmup_ramp_is_linear():
    data = phantom_set(4, res=8)
    cfg = FlowConfig(levels=1, depth=1, width=4, resolution=8)
    res = train_spatial(data, cfg, TrainSchedule(((1, 3, 1e-3),), warmup_epochs=2), seed=0)
    # lr column holds the rate of the epoch's last step: 4/8, 8/8, then flat
    assert [r["lr"] for r in res.metrics] == pytest.approx([5e-4, 1e-3, 1e-3])


@pytest.fixture(scope="module")
def desk_run():
    data = phantom_set(32, res=16, seed=3)
    cfg = FlowConfig(levels=2, depth=2, width=16, resolution=16)
    sched = TrainSchedule(((1, 5, 1e-3), (2, 5, 1e-3)))
    return data, cfg, sched, train_spatial(data, cfg, sched, seed=11)


def test_two_stage_smoke_run_improves(desk_run):
    _, _, _, res = desk_run
    nll = [r["nll"] for r in res.metrics]
    assert len(nll) == 10
    assert nll[-1] < nll[0]
    # each stage improves within itself as well
    assert nll[4] < nll[0] and nll[9] < nll[5]
    assert res.metrics[4]["bpd"] < 1.0
    assert [r["stage_bits"] for r in res.metrics] == [1] * 5 + [2] * 5
    assert res.steps == 320


def test_training_is_deterministic(desk_run, tmp_path):
    data, cfg, sched, res = desk_run
    again = train_spatial(data[:4], cfg, TrainSchedule(((1, 1, 1e-3),)), seed=5)
    twice = train_spatial(data[:4], cfg, TrainSchedule(((1, 1, 1e-3),)), seed=5)
    save_flow(again.model, tmp_path / "a.vfck")
    save_flow(twice.model, tmp_path / "b.vfck")
    assert (tmp_path / "a.vfck").read_bytes() == (tmp_path / "b.vfck").read_bytes()


def test_param_count_constant_across_stages(desk_run):
    _, cfg, _, res = desk_run
    assert sum(p.data.size for p in res.model.params()) == \
        sum(p.data.size for p in FlowModel(cfg).params())


def test_metrics_csv(desk_run, tmp_path):
    _, _, _, res = desk_run
    write_metrics(tmp_path / "m.csv", res.metrics)
    rows = list(csv.DictReader(open(tmp_path / "m.csv")))
    assert list(rows[0]) == ["epoch", "stage_bits", "nll", "bpd", "lr", "wall_seconds"]
    assert len(rows) == 10 and rows[-1]["epoch"] == "10"


def test_training_keeps_precision():
    data = phantom_set(2, res=8)
    cfg = FlowConfig(levels=1, depth=1, width=4, resolution=8)
    with dc.precision("float64"):
        res = train_spatial(data, cfg, TrainSchedule(((1, 1, 1e-3),)), seed=0)
    assert all(p.data.dtype == np.float64 for p in res.model.params())


def test_snapshots_are_frozen_copies():
    data = phantom_set(3, res=8)
    cfg = FlowConfig(levels=1, depth=1, width=4, resolution=8)
    res = train_spatial(data, cfg, TrainSchedule(((1, 2, 1e-3),)), seed=0, snapshots={1})
    assert set(res.snapshots) == {1}
    snap = res.snapshots[1]
    assert snap is not res.model and snap.initialized
    assert any(a.data.tobytes() != b.data.tobytes() for a, b in zip(snap.params(), res.model.params()))
