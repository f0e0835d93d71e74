"""Invariant suites: invertibility, exact log-det and gradient checks.

Each check returns a ``CheckResult``. The finite-difference references here
(dense Jacobians, central-difference gradients) never touch the backward
pass or the per-layer log-det formulas they audit.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .flow import FlowConfig, FlowModel
from .temporal import TemporalConfig, TemporalModel

log = logging.getLogger(__name__)

TOL_ROUNDTRIP = {"float32": 1e-4, "float64": 1e-8}


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""

    def __post_init__(self):
        self.value, self.passed = float(self.value), bool(self.passed)

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name}: {self.value:.3e} (tol {self.tol:.0e}, {self.seconds:.1f}s) {self.detail}".rstrip()


def randomize(model: FlowModel, seed=0, scale=0.1):
    """Perturb every parameter so no layer sits at its identity-like init.

    Invertible-conv weights get a small additive perturbation (they stay
    well conditioned); all actnorms are marked initialized.
    """
    rng = np.random.default_rng(seed)
    for name, p in model.named_params():
        noise = rng.standard_normal(p.shape) * scale
        if name.endswith("invconv.weight"):
            noise *= 0.5
        p.data = (p.data + noise).astype(p.dtype)
    model.mark_initialized()
    return model


def random_volumes(config: FlowConfig, n, seed=0, dtype=np.float32):
    """Dequantized uniform-noise volumes in [-0.5, 0.5)."""
    rng = np.random.default_rng(seed)
    shape = (config.resolution,) * 3 + (config.channels,)
    return [(rng.integers(0, 256, shape) + rng.random(shape)) / 256.0 - 0.5 for _ in range(n)]


def roundtrip_error(model: FlowModel, volumes):
    worst = 0.0
    dtype = model.dtype
    for x in volumes:
        x = np.asarray(x, dtype=dtype)
        zs, _ = model.encode(x)
        back = model.decode(zs)
        worst = max(worst, float(np.max(np.abs(back.astype(np.float64) - x))))
    return worst


def check_invertibility(model: FlowModel, volumes, label="") -> CheckResult:
    t0 = time.perf_counter()
    err = roundtrip_error(model, volumes)
    tol = TOL_ROUNDTRIP[np.dtype(model.dtype).name]
    return CheckResult(f"invertibility{label}", err, tol, err < tol, time.perf_counter() - t0,
                       f"{len(volumes)} volumes")


def _flat_encode(model, x):
    zs, _ = model.encode(x)
    return np.concatenate([z.ravel() for z in zs])


def dense_jacobian(f, x, h=1e-5):
    """Central-difference Jacobian of ``f`` (array -> flat array) at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        e = e.reshape(x.shape)
        cols.append((f(x + e) - f(x - e)) / (2 * h))
    return np.stack(cols, axis=1)


def check_logdet(model: FlowModel, x, h=1e-5, tol=1e-3) -> CheckResult:
    """Total log-det from ``encode`` vs log|det| of the finite-difference Jacobian."""
    t0 = time.perf_counter()
    x = np.asarray(x, dtype=np.float64)
    _, logdet = model.encode(x)
    jac = dense_jacobian(lambda v: _flat_encode(model, v), x, h)
    sign, ref = np.linalg.slogdet(jac)
    err = abs(logdet - ref) if sign != 0 else float("inf")
    return CheckResult("logdet-vs-jacobian", err, tol, err < tol, time.perf_counter() - t0,
                       f"dims {x.size}, logdet {logdet:.6f}")


def _rel_err(a, b, floor):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def fd_gradients(loss_fn, params, h=1e-4):
    """Central differences of the scalar ``loss_fn()`` w.r.t. every entry of ``params``."""
    out = []
    for p in params:
        g = np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = loss_fn()
            flat[i] = old - h
            down = loss_fn()
            flat[i] = old
            g.reshape(-1)[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def compare_gradients(name, analytic, numeric, tol=1e-4, floor=1e-6, t0=None) -> CheckResult:
    worst, where = 0.0, ""
    for k, (a, n) in enumerate(zip(analytic, numeric)):
        e = _rel_err(np.asarray(a, dtype=np.float64), n, floor)
        if e.size and e.max() > worst:
            worst, where = float(e.max()), f"param {k}"
    n_entries = sum(np.size(a) for a in analytic)
    secs = time.perf_counter() - t0 if t0 else 0.0
    return CheckResult(name, worst, tol, worst < tol, secs, f"{n_entries} entries {where}".strip())


def check_flow_gradients(config: FlowConfig, seed=0, h=1e-4, tol=1e-4) -> CheckResult:
    """dNLL/dtheta by backprop vs central differences, 64-bit, randomized params."""
    t0 = time.perf_counter()
    with dc.precision("float64"):
        model = randomize(FlowModel(config, seed=seed).astype(np.float64), seed=seed + 1)
        x = random_volumes(config, 1, seed=seed + 2)[0]
        params = model.params()
        analytic = dc.grad(model.nll_tensor(x), params)

        def loss():
            with dc.no_grad():
                return float(model.nll_tensor(x).data)

        numeric = fd_gradients(loss, params, h)
    return compare_gradients("flow-nll-gradient", analytic, numeric, tol, t0=t0)


def check_temporal_gradients(width=4, layers=2, spatial=3, final_activation="relu", seed=0,
                             h=1e-4, tol=1e-4) -> CheckResult:
    """dMSE/dphi of one residual stack vs central differences, 64-bit."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    with dc.precision("float64"):
        model = TemporalModel(TemporalConfig((width,), (layers,), final_activation), seed=seed)
        for p in model.params():
            p.data = p.data + rng.standard_normal(p.shape) * 0.1
        zm = rng.random((spatial,) * 3 + (width,))
        zp = rng.random((spatial,) * 3 + (width,))

        def graph():
            pred = model.level_tensor(Tensor(zm), 0)
            return dc.mean(dc.square(dc.sub(pred, Tensor(zp))))

        params = model.params()
        analytic = dc.grad(graph(), params)

        def loss():
            with dc.no_grad():
                return float(graph().data)

        numeric = fd_gradients(loss, params, h)
    return compare_gradients(f"temporal-mse-gradient-{final_activation}", analytic, numeric, tol, t0=t0)


def run_suite(resolution=8, levels=2, depth=2, width=8, n_volumes=100, seed=0, trained=None):
    """Full invariant suite at desk scale. ``trained`` adds a caller-supplied model."""
    results = []
    cfg = FlowConfig(levels=levels, depth=depth, width=width, resolution=resolution)
    for mode in ("float32", "float64"):
        dtype = np.dtype(mode)
        with dc.precision(mode):
            vols = random_volumes(cfg, n_volumes, seed=seed)
            fresh = FlowModel(cfg, seed=seed).astype(dtype)
            fresh.forward(np.asarray(vols[0], dtype=dtype))  # data-dependent init
            results.append(check_invertibility(fresh, vols, f"-R{resolution}-fresh-{mode}"))
            rand = randomize(FlowModel(cfg, seed=seed).astype(dtype), seed=seed + 1)
            results.append(check_invertibility(rand, vols, f"-R{resolution}-random-{mode}"))
            if trained is not None:
                tcfg = trained.config
                m = trained.copy().astype(dtype)
                results.append(check_invertibility(m, random_volumes(tcfg, n_volumes, seed=seed),
                                                   f"-R{tcfg.resolution}-trained-{mode}"))
    with dc.precision("float64"):
        for lv in (1, 2):
            small = FlowConfig(levels=lv, depth=2, width=4, resolution=4)
            m = randomize(FlowModel(small, seed=seed).astype(np.float64), seed=seed + 3)
            x = random_volumes(small, 1, seed=seed + 4)[0]
            r = check_logdet(m, x)
            r.name += f"-L{lv}"
            results.append(r)
    results.append(check_flow_gradients(FlowConfig(levels=1, depth=1, width=4, resolution=4), seed=seed))
    for act in ("relu", "linear"):
        results.append(check_temporal_gradients(final_activation=act, seed=seed))
    for r in results:
        log.info(r.line())
    return results
