"""Latent-space aging predictor: one residual conv stack per pyramid level.

Each level ``l`` maps its normalized latent ``z`` to ``f_l(z) + z`` where
``f_l`` is a stack of ``min(2^(l-1), 4)`` same-padded 3x3x3 convolutions, each
followed by relu (including the last one), with as many filters as the level
has channels. The relu on the last layer means increments are never negative;
``final_activation="linear"`` drops it.

Latents enter in normalized form ``clip((z + a) / b, 0, 1)`` with a = 24,
b = 48 by default (``NormalizationParams.fit`` picks them from data instead),
and the loss is the MSE in that space.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import BadMagicError, ContractError, FormatError, NonFiniteError, TrainingDiverged

FINAL_ACTIVATIONS = ("relu", "linear")


@dataclass(frozen=True)
class NormalizationParams:
    a: float = 24.0
    b: float = 48.0

    def __post_init__(self):
        if self.b <= 0:
            raise ContractError(f"normalization divisor b must be > 0, got {self.b}")

    @classmethod
    def fit(cls, pyramids, coverage=0.999):
        """Pick ``a`` so a ``coverage`` fraction of |z| lies below it; ``b = 2a``.

        Puts almost all elements inside (-a, a), the rule by which a and b
        were chosen empirically for the original latents (24 and 48).
        """
        if not 0 < coverage < 1:
            raise ContractError(f"coverage must lie in (0, 1), got {coverage}")
        flat = [np.abs(np.asarray(z, dtype=np.float64)).ravel() for zs in pyramids for z in zs]
        if not flat:
            raise ContractError("no latents to fit normalization on")
        a = float(np.quantile(np.concatenate(flat), coverage))
        if a <= 0:
            raise ContractError("latents are all zero; cannot fit normalization")
        return cls(round(a, 4), round(2 * a, 4))

    def saturated_fraction(self, pyramids):
        """Fraction of elements outside (-a, b - a), i.e. clipped by normalization."""
        n = hit = 0
        for zs in pyramids:
            for z in zs:
                z = np.asarray(z)
                n += z.size
                hit += int(np.count_nonzero((z <= -self.a) | (z >= self.b - self.a)))
        return hit / max(n, 1)


def normalize_latent(zs, p=NormalizationParams()):
    """Each element -> clip((z + a) / b, 0, 1)."""
    return [np.clip((np.asarray(z) + p.a) / p.b, 0.0, 1.0).astype(np.asarray(z).dtype) for z in zs]


def denormalize_latent(zn, p=NormalizationParams()):
    """Inverse of ``normalize_latent`` on its unclipped range: z = zn * b - a."""
    out = []
    for l, z in enumerate(zn, start=1):
        z = np.asarray(z)
        if z.min() < 0 or z.max() > 1:
            raise ContractError(f"level {l}: normalized latent outside [0, 1] "
                                f"(range {z.min():.4g}..{z.max():.4g})")
        out.append((z * p.b - p.a).astype(z.dtype))
    return out


def layer_count(level):
    """1, 2, 4, 4, 4, ... for levels 1, 2, 3, 4, 5, ..."""
    return min(2 ** (level - 1), 4)


@dataclass(frozen=True)
class TemporalConfig:
    widths: tuple
    layers: tuple
    final_activation: str = "relu"

    def __post_init__(self):
        if len(self.widths) != len(self.layers):
            raise ContractError("widths and layers must have one entry per level")
        if self.final_activation not in FINAL_ACTIVATIONS:
            raise ContractError(f"final_activation must be one of {FINAL_ACTIVATIONS}")

    @classmethod
    def for_flow(cls, flow_config, final_activation="relu"):
        widths = tuple(s[-1] for s in flow_config.level_shapes())
        layers = tuple(layer_count(l) for l in range(1, len(widths) + 1))
        return cls(widths, layers, final_activation)

    @property
    def levels(self):
        return len(self.widths)


class TemporalModel:
    """Parameters and forward pass of the per-level predictors."""

    def __init__(self, config: TemporalConfig, init="random", seed=0, init_scale=0.02):
        self.config = config
        rng = np.random.default_rng(seed)
        self.kernels = []
        self.biases = []
        for width, n in zip(config.widths, config.layers):
            ks, bs = [], []
            for i in range(n):
                if init == "zero":
                    k = np.zeros((3, 3, 3, width, width))
                elif init == "random":
                    fan_in = 27 * width
                    if i < n - 1:
                        std = np.sqrt(2.0 / fan_in)
                    elif config.final_activation == "relu":
                        # relu'(0) = 0, so an all-zero last layer could never leave identity
                        std = init_scale / np.sqrt(fan_in)
                    else:
                        std = 0.0
                    k = rng.standard_normal((3, 3, 3, width, width)) * std
                else:
                    raise ContractError(f"unknown init {init!r}")
                ks.append(Tensor(k, requires_grad=True))
                bs.append(Tensor(np.zeros(width), requires_grad=True))
            self.kernels.append(ks)
            self.biases.append(bs)

    def level_params(self, l):
        return [p for pair in zip(self.kernels[l], self.biases[l]) for p in pair]

    def params(self):
        return [p for l in range(self.config.levels) for p in self.level_params(l)]

    def astype(self, dtype):
        for p in self.params():
            p.data = p.data.astype(dtype)
        return self

    def level_tensor(self, z, l):
        """Differentiable residual stack for level ``l`` (0-based)."""
        width = self.config.widths[l]
        if z.data.ndim != 4 or z.shape[-1] != width:
            raise ContractError(f"level {l + 1}: latent {z.shape} does not match predictor width {width}")
        h = z
        n = self.config.layers[l]
        for i, (k, b) in enumerate(zip(self.kernels[l], self.biases[l])):
            h = dc.conv3d(h, k, b)
            if i < n - 1 or self.config.final_activation == "relu":
                h = dc.relu(h)
        return dc.add(h, z)

    def predict_level(self, z, l):
        dtype = self.kernels[l][0].dtype
        with dc.no_grad():
            return self.level_tensor(Tensor(z, dtype=dtype), l).data

    def predict(self, zn):
        """Normalized pyramid -> predicted normalized pyramid (unclipped)."""
        if len(zn) != self.config.levels:
            raise ContractError(f"pyramid has {len(zn)} levels, predictor has {self.config.levels}")
        return [self.predict_level(z, l) for l, z in enumerate(zn)]


def predict_clipped(model, zn):
    return [np.clip(z, 0.0, 1.0) for z in model.predict(zn)]


# -------------------------------------------------------------------- training


def level_mse(model, pairs, l):
    """Mean over pairs of the per-element MSE at level ``l``."""
    total = 0.0
    for zm, zp in pairs:
        pred = model.predict_level(zm[l], l)
        total += float(np.mean((pred.astype(np.float64) - zp[l]) ** 2))
    return total / len(pairs)


def identity_mse(pairs, l):
    return sum(float(np.mean((zm[l].astype(np.float64) - zp[l]) ** 2)) for zm, zp in pairs) / len(pairs)


def train_temporal(pairs, model: TemporalModel, seed=0, lr=1.0, epochs=20, on_epoch=None):
    """Plain SGD (batch 1) on the per-level MSE between prediction and target.

    ``pairs`` are (z_minus, z_plus) normalized pyramids. Levels train
    independently with their own shuffling streams. Returns
    ``losses[level][epoch]`` (mean training loss of each epoch).
    """
    if not pairs:
        raise ContractError("no training pairs")
    levels = model.config.levels
    for i, (zm, zp) in enumerate(pairs):
        if len(zm) != levels or len(zp) != levels:
            raise ContractError(f"pair {i} does not have {levels} levels")
        for l in range(levels):
            if zm[l].shape != zp[l].shape:
                raise ContractError(f"pair {i} level {l + 1}: shapes {zm[l].shape} vs {zp[l].shape}")
    dtype = model.kernels[0][0].dtype
    level_seeds = np.random.SeedSequence(seed).spawn(levels)
    losses = []
    for l in range(levels):
        rng = np.random.default_rng(level_seeds[l])
        params = model.level_params(l)
        curve = []
        for epoch in range(epochs):
            total = 0.0
            for idx in rng.permutation(len(pairs)):
                zm, zp = pairs[idx]
                try:
                    # overflow surfaces as NonFiniteError below; silence numpy's duplicate warning
                    with np.errstate(over="ignore", invalid="ignore"):
                        pred = model.level_tensor(Tensor(zm[l], dtype=dtype), l)
                        loss = dc.mean(dc.square(dc.sub(pred, Tensor(zp[l], dtype=dtype))))
                        grads = dc.grad(loss, params)
                        new = [(p.data - lr * g).astype(dtype) for p, g in zip(params, grads)]
                    if not all(np.isfinite(n).all() for n in new):
                        raise NonFiniteError("non-finite parameter update")
                except NonFiniteError as exc:
                    raise TrainingDiverged(f"temporal training diverged at level {l + 1}, "
                                           f"epoch {epoch + 1}: {exc}", last_good=model,
                                           where=f"level {l + 1}") from exc
                for p, n in zip(params, new):
                    p.data = n
                total += float(loss.data)
            curve.append(total / len(pairs))
            if on_epoch is not None:
                on_epoch(l + 1, epoch + 1, curve[-1])
        losses.append(curve)
    return losses


# ------------------------------------------------------------------ checkpoint
#
# Layout (little-endian):
#   b"VFTP"  u32 version  u32 levels  u8 final_activation (0 relu, 1 linear)
#   f64 a  f64 b
#   levels x (u32 layers, u32 width)
#   then per level, per layer: kernel (3,3,3,W,W) float32, bias (W,) float32

TEMPORAL_MAGIC = b"VFTP"
TEMPORAL_VERSION = 1


def save_temporal(model: TemporalModel, path, norm=NormalizationParams()):
    cfg = model.config
    with open(path, "wb") as f:
        f.write(TEMPORAL_MAGIC)
        f.write(struct.pack("<IIB", TEMPORAL_VERSION, cfg.levels,
                            FINAL_ACTIVATIONS.index(cfg.final_activation)))
        f.write(struct.pack("<dd", norm.a, norm.b))
        for n, w in zip(cfg.layers, cfg.widths):
            f.write(struct.pack("<II", n, w))
        for p in model.params():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_temporal(path, dtype=None):
    """Returns (model, normalization params)."""
    from .flow import _read_exact

    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != TEMPORAL_MAGIC:
            raise BadMagicError(f"not a temporal checkpoint (magic {magic!r})")
        version, levels, act = struct.unpack("<IIB", _read_exact(f, 9))
        if version != TEMPORAL_VERSION:
            raise FormatError(f"unsupported temporal checkpoint version {version}")
        if act >= len(FINAL_ACTIVATIONS):
            raise FormatError(f"unknown final activation code {act}")
        a, b = struct.unpack("<dd", _read_exact(f, 16))
        table = [struct.unpack("<II", _read_exact(f, 8)) for _ in range(levels)]
        cfg = TemporalConfig(tuple(w for _, w in table), tuple(n for n, _ in table),
                             FINAL_ACTIVATIONS[act])
        model = TemporalModel(cfg, init="zero")
        for p in model.params():
            n = p.data.size
            p.data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(p.shape).astype(
                dtype or dc.default_dtype())
        if f.read(1):
            raise FormatError("trailing bytes after temporal parameters")
    return model, NormalizationParams(a, b)
