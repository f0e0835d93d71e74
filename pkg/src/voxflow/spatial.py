"""Exact-likelihood training of the flow with a progressive bit-depth curriculum."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .errors import ContractError, FormatError, NonFiniteError, TrainingDiverged
from .flow import FlowConfig, FlowModel

FULL_TOTAL_EPOCHS = 360
FULL_WARMUP_EPOCHS = 100

METRIC_FIELDS = ["epoch", "stage_bits", "nll", "bpd", "lr", "wall_seconds"]


@dataclass(frozen=True)
class Stage:
    bits: int
    epochs: int
    lr: float


@dataclass(frozen=True)
class TrainSchedule:
    stages: tuple
    warmup_epochs: float | None = None
    batch_size: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(Stage(*s) if not isinstance(s, Stage) else s
                                                 for s in self.stages))
        bits = [s.bits for s in self.stages]
        if any(b <= a for a, b in zip(bits, bits[1:])):
            raise ContractError(f"stage bit depths must increase strictly, got {bits}")
        for s in self.stages:
            if not 1 <= s.bits <= 8:
                raise ContractError(f"bit depth {s.bits} outside 1..8")
            if s.epochs < 0 or s.lr <= 0:
                raise ContractError(f"bad stage {s}: epochs must be >= 0 and lr > 0")
        if self.batch_size != 1:
            raise ContractError("only minibatch size 1 is supported")

    @classmethod
    def full_scale(cls):
        return cls(((1, 70, 1e-3), (2, 30, 1e-3), (3, 10, 1e-3), (4, 20, 1e-3), (5, 10, 1e-3),
                    (6, 10, 1e-3), (7, 10, 1e-3), (8, 200, 1e-4)), warmup_epochs=FULL_WARMUP_EPOCHS)

    @property
    def total_epochs(self):
        return sum(s.epochs for s in self.stages)

    def resolved_warmup(self):
        """Warm-up length in epochs; by default 100 warm-up epochs per 360 total."""
        if self.warmup_epochs is not None:
            return float(self.warmup_epochs)
        return FULL_WARMUP_EPOCHS * self.total_epochs / FULL_TOTAL_EPOCHS

    def dumps(self):
        lines = [f"{s.bits} {s.epochs} {s.lr!r}" for s in self.stages]
        if self.warmup_epochs is not None:
            lines.append(f"warmup {self.warmup_epochs!r}")
        return "\n".join(lines) + "\n"


def parse_schedule(text):
    """Parse ``bits epochs lr`` lines; ``warmup E`` optionally sets the warm-up epochs."""
    stages, warmup = [], None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if parts[0] == "warmup" and len(parts) == 2:
                warmup = float(parts[1])
            elif len(parts) == 3:
                stages.append((int(parts[0]), int(parts[1]), float(parts[2])))
            else:
                raise ValueError
        except ValueError:
            raise FormatError(f"schedule line {lineno}: expected 'bits epochs lr', got {line!r}") from None
    return TrainSchedule(tuple(stages), warmup_epochs=warmup)


def load_schedule(path):
    return parse_schedule(Path(path).read_text())


# ------------------------------------------------------------------ data prep


def quantize_bits(v, n):
    """Keep the top ``n`` bits of 8-bit data: floor(v / 2^(8-n))."""
    if not 1 <= n <= 8:
        raise ContractError(f"bit depth must be in 1..8, got {n}")
    v = np.asarray(v)
    if v.dtype != np.uint8:
        raise ContractError(f"quantize_bits expects uint8 data, got {v.dtype}")
    return v >> (8 - n)


def dequantize(v, n, rng=None, u=None):
    """Integer levels -> reals in [-0.5, 0.5): (v + u) / 2^n - 0.5 with u ~ U[0, 1)."""
    v = np.asarray(v)
    if v.min() < 0 or v.max() > 2 ** n - 1:
        raise ContractError(f"values outside [0, {2 ** n - 1}] for {n}-bit data")
    if u is None:
        if rng is None:
            raise ContractError("dequantize needs an rng or explicit noise u")
        u = rng.random(v.shape)
    x = (v.astype(np.float64) + u) / 2 ** n - 0.5
    return x.astype(dc.default_dtype())


def to_uint8(x):
    """Invert the 8-bit dequantization map (bin index of each real value)."""
    return np.clip(np.floor((np.asarray(x, dtype=np.float64) + 0.5) * 256), 0, 255).astype(np.uint8)


def bits_per_dim(nll, n, dims):
    """Discrete bits/dim from a continuous NLL (nats) of data scaled by 1/2^n."""
    if dims <= 0:
        raise ContractError("dims must be positive")
    return nll / (dims * math.log(2)) + n


# ------------------------------------------------------------------ optimizer


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        updates = []
        for m, v, g in zip(self.m, self.v, grads):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            updates.append(lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        if not all(np.isfinite(u).all() for u in updates):
            raise NonFiniteError("optimizer produced a non-finite update")
        for p, u in zip(self.params, updates):
            p.data = (p.data - u).astype(p.data.dtype)


# -------------------------------------------------------------------- training


@dataclass
class TrainResult:
    model: FlowModel
    metrics: list = field(default_factory=list)
    steps: int = 0
    snapshots: dict = field(default_factory=dict)


def _as_array(v):
    data = getattr(v, "data", v)
    return np.asarray(data)


def train_spatial(dataset, config: FlowConfig, schedule: TrainSchedule, seed=0,
                  model=None, on_epoch=None, snapshots=()) -> TrainResult:
    """Minimise NLL stage by stage, re-quantizing the data at each stage.

    ``dataset`` holds uint8 volumes of shape (R, R, R, C). The learning rate
    ramps linearly from 0 over the warm-up epochs counted from the very first
    step. Parameters carry over between stages untouched. A copy of the model
    is kept after each epoch listed in ``snapshots`` (1-based).
    """
    vols = [_as_array(v) for v in dataset]
    want = (config.resolution,) * 3 + (config.channels,)
    for i, v in enumerate(vols):
        if v.shape != want or v.dtype != np.uint8:
            raise ContractError(f"dataset item {i}: {v.dtype}{v.shape}, expected uint8{want}")
    if not vols:
        raise ContractError("empty dataset")

    seeds = np.random.SeedSequence(seed).spawn(2)
    rng = np.random.default_rng(seeds[1])
    if model is None:
        model = FlowModel(config, seed=int(seeds[0].generate_state(1)[0]))
    params = [p for p in model.params() if p.requires_grad]
    opt = Adam(params)
    dims = config.dims
    result = TrainResult(model)

    if not model.initialized and schedule.stages:
        first = schedule.stages[0].bits
        x0 = dequantize(quantize_bits(vols[0], first), first, rng)
        model.forward(x0)  # data-dependent actnorm init, no parameter step

    warmup_steps = schedule.resolved_warmup() * len(vols)
    step = 0
    epoch = 0
    for stage in schedule.stages:
        for _ in range(stage.epochs):
            epoch += 1
            t0 = time.perf_counter()
            order = rng.permutation(len(vols))
            total_nll = 0.0
            lr = stage.lr
            for idx in order:
                x = dequantize(quantize_bits(vols[idx], stage.bits), stage.bits, rng)
                ramp = min(1.0, (step + 1) / warmup_steps) if warmup_steps > 0 else 1.0
                lr = stage.lr * ramp
                try:
                    nll = model.nll_tensor(x)
                    loss = dc.scale(nll, 1.0 / dims)
                    grads = dc.grad(loss, params)
                    opt.step(grads, lr)
                except NonFiniteError as exc:
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} ({stage.bits}-bit stage): {exc}",
                        last_good=model, where=f"{stage.bits}-bit stage") from exc
                total_nll += float(nll.data)
                step += 1
            mean_nll = total_nll / len(vols)
            row = dict(epoch=epoch, stage_bits=stage.bits, nll=mean_nll,
                       bpd=bits_per_dim(mean_nll, stage.bits, dims), lr=lr,
                       wall_seconds=time.perf_counter() - t0)
            result.metrics.append(row)
            if epoch in snapshots:
                result.snapshots[epoch] = model.copy()
            if on_epoch is not None:
                on_epoch(row)
    result.steps = step
    return result


def write_metrics(path, metrics):
    with open(path, "w", newline="") as f:
        wr = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        wr.writeheader()
        for row in metrics:
            wr.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})
