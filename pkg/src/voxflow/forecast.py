"""One-interval step operator decode . predict . encode and its N-step recursion.

The recursive path (decode and re-encode between steps) is the reference.
The telescoped path stays in latent space, applying the predictor N times
before a single decode; its per-step max-abs voxel gap to the recursive path
is recorded on every step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .temporal import NormalizationParams, denormalize_latent, normalize_latent, predict_clipped


@dataclass
class ForecastStep:
    index: int
    volume: np.ndarray
    latents: list
    telescoped_gap: float = 0.0


@dataclass
class ForecastResult:
    steps: list = field(default_factory=list)
    provenance: dict = field(default_factory=dict)

    @property
    def volumes(self):
        return [s.volume for s in self.steps]

    @property
    def gaps(self):
        return [s.telescoped_gap for s in self.steps]


def _stage(name, fn, *args):
    try:
        return fn(*args)
    except ContractError as exc:
        raise ContractError(f"{name}: {exc}") from exc


def step_latent(x, flow, temporal, norm=NormalizationParams()):
    """Advance ``x`` one interval; returns (volume, predicted latents)."""
    zs, _ = _stage("encode", flow.encode, x)
    zn = normalize_latent(zs, norm)
    zn_next = _stage("predict", predict_clipped, temporal, zn)
    z_next = denormalize_latent(zn_next, norm)
    return _stage("decode", flow.decode, z_next), z_next


def step(x, flow, temporal, norm=NormalizationParams()):
    """decode(denormalize(clip(predict(normalize(encode(x))))))"""
    return step_latent(x, flow, temporal, norm)[0]


def forecast_n(x, n_steps, flow, temporal, norm=NormalizationParams(), provenance=None) -> ForecastResult:
    """Entries 0..N: the reconstruction of ``x`` followed by N recursive steps.

    Entry 1 is ``step(x)`` and entry k+1 is ``step`` of entry k's volume.
    """
    if n_steps < 0:
        raise ContractError(f"number of steps must be >= 0, got {n_steps}")
    x = np.asarray(x)
    zs, _ = _stage("encode", flow.encode, x)
    recon = _stage("decode", flow.decode, zs)
    result = ForecastResult(provenance=dict(provenance or {}))
    result.steps.append(ForecastStep(0, recon, zs, 0.0))

    tele = normalize_latent(zs, norm)
    cur = x
    for i in range(1, n_steps + 1):
        cur, z_next = step_latent(cur, flow, temporal, norm)
        tele = predict_clipped(temporal, tele)
        tele_vol = flow.decode(denormalize_latent(tele, norm))
        gap = float(np.max(np.abs(cur.astype(np.float64) - tele_vol)))
        result.steps.append(ForecastStep(i, cur, z_next, gap))
    return result
