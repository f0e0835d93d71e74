"""Invertible multiscale 3D flow: volume <-> latent pyramid with exact log-det.

Level structure (``L`` levels, ``K`` steps each)::

    for l in 1..L:
        squeeze                       (D, H, W, C) -> (D/2, H/2, W/2, 8C)
        K x [actnorm -> 1x1x1 invertible conv -> affine coupling]
        if l < L: split channels into (kept, emitted); emit z_l, continue with kept
        else:     emit everything as z_L

With input ``(R, R, R, C)`` this yields z_l of shape ``(R/2^l)^3 x C*4^l`` for
l < L and ``(R/2^L)^3 x 2*C*4^L`` at the top, so the pyramid holds exactly
``R^3 * C`` numbers.

Priors are diagonal Gaussians. At each split a zero-initialised conv of the
kept half produces ``(mu, log_sigma)`` for the emitted half. The top prior is
that same conv applied to a constant zero input, which reduces to a learned
per-channel ``(mu, log_sigma)`` bias; only the bias is stored.

Squeeze ordering: the 2x2x2 block offset ``(i, j, k)`` and input channel ``c``
go to output channel ``((i*2 + j)*2 + k)*C + c``.
"""

from __future__ import annotations

import copy
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import BadMagicError, ContractError, FormatError, NonFiniteError, TruncatedFileError

LOG_2PI = math.log(2 * math.pi)
SCALE_OFFSET = 2.0


@dataclass(frozen=True)
class FlowConfig:
    levels: int = 5
    depth: int = 8
    width: int = 512
    resolution: int = 32
    channels: int = 1
    coupling: str = "affine"
    permutation: str = "invconv"
    learn_top: bool = True

    def __post_init__(self):
        if min(self.levels, self.depth, self.width, self.channels) < 1:
            raise ContractError(f"levels, depth, width and channels must be >= 1: {self}")
        if self.resolution % (2 ** self.levels):
            raise ContractError(
                f"resolution {self.resolution} is not divisible by 2^levels = {2 ** self.levels}")
        if self.coupling != "affine":
            raise ContractError(f"unsupported coupling {self.coupling!r}")
        if self.permutation != "invconv":
            raise ContractError(f"unsupported permutation {self.permutation!r}")

    @classmethod
    def full_scale(cls):
        return cls(levels=5, depth=8, width=512, resolution=128)

    def level_shapes(self):
        """Shapes of z_1..z_L as (D, H, W, C) tuples."""
        shapes = []
        for l in range(1, self.levels + 1):
            s = self.resolution // 2 ** l
            c = self.channels * 4 ** l
            if l == self.levels:
                c *= 2
            shapes.append((s, s, s, c))
        return shapes

    def step_channels(self, level):
        """Channel count inside the steps of ``level`` (1-based)."""
        return 2 * self.channels * 4 ** level

    @property
    def dims(self):
        return self.resolution ** 3 * self.channels


# ---------------------------------------------------------------------- squeeze


def squeeze_array(x):
    d, h, w, c = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ContractError(f"squeeze needs even spatial dims, got {x.shape}")
    y = x.reshape(d // 2, 2, h // 2, 2, w // 2, 2, c).transpose(0, 2, 4, 1, 3, 5, 6)
    return np.ascontiguousarray(y).reshape(d // 2, h // 2, w // 2, 8 * c)


def unsqueeze_array(y):
    d, h, w, c8 = y.shape
    if c8 % 8:
        raise ContractError(f"unsqueeze needs channels divisible by 8, got {y.shape}")
    c = c8 // 8
    x = y.reshape(d, h, w, 2, 2, 2, c).transpose(0, 3, 1, 4, 2, 5, 6)
    return np.ascontiguousarray(x).reshape(2 * d, 2 * h, 2 * w, c)


def squeeze(x: Tensor) -> Tensor:
    d, h, w, c = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ContractError(f"squeeze needs even spatial dims, got {x.shape}")
    y = dc.reshape(x, (d // 2, 2, h // 2, 2, w // 2, 2, c))
    y = dc.permute(y, (0, 2, 4, 1, 3, 5, 6))
    return dc.reshape(y, (d // 2, h // 2, w // 2, 8 * c))


def unsqueeze(y: Tensor) -> Tensor:
    d, h, w, c8 = y.shape
    if c8 % 8:
        raise ContractError(f"unsqueeze needs channels divisible by 8, got {y.shape}")
    c = c8 // 8
    x = dc.reshape(y, (d, h, w, 2, 2, 2, c))
    x = dc.permute(x, (0, 3, 1, 4, 2, 5, 6))
    return dc.reshape(x, (2 * d, 2 * h, 2 * w, c))


# ----------------------------------------------------------------------- layers


def _param(arr):
    return Tensor(arr, requires_grad=True)


class ActNorm:
    """Per-channel ``y = s * (x + b)`` with ``s = exp(logs)``."""

    def __init__(self, channels, name="actnorm"):
        self.name = name
        self.logs = _param(np.zeros(channels))
        self.bias = _param(np.zeros(channels))
        self.initialized = False

    def params(self):
        return [(f"{self.name}.logs", self.logs), (f"{self.name}.bias", self.bias)]

    def set_scale(self, scale, bias):
        scale = np.asarray(scale, dtype=np.float64)
        if (scale == 0).any():
            raise ContractError(f"{self.name}: zero scale")
        if (scale < 0).any():
            raise ContractError(f"{self.name}: scales are stored as log-magnitudes and must be > 0")
        self.logs.data[...] = np.log(scale)
        self.bias.data[...] = bias
        self.initialized = True

    def data_init(self, x):
        """Set bias/scale so this batch leaves with zero mean and unit variance."""
        flat = x.reshape(-1, x.shape[-1]).astype(np.float64)
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        self.bias.data[...] = -mean
        self.logs.data[...] = -np.log(std + 1e-6)
        self.initialized = True

    def forward(self, x):
        if not self.initialized and dc.grad_enabled():
            self.data_init(x.data)
        y = dc.mul_channels(dc.add_channel_bias(x, self.bias), dc.exp(self.logs))
        voxels = int(np.prod(x.shape[:-1]))
        return y, dc.scale(dc.sum(self.logs), voxels)

    def inverse(self, y):
        return dc.add_channel_bias(dc.mul_channels(y, dc.exp(dc.neg(self.logs))), dc.neg(self.bias))


class InvConv:
    """Invertible 1x1x1 convolution ``y = W x`` per voxel."""

    def __init__(self, channels, rng, name="invconv"):
        self.name = name
        q, r = np.linalg.qr(rng.standard_normal((channels, channels)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        self.weight = _param(q)

    def params(self):
        return [(f"{self.name}.weight", self.weight)]

    def forward(self, x):
        ld = dc.logabsdet(self.weight, name=self.name)
        voxels = int(np.prod(x.shape[:-1]))
        return dc.channel_matmul(x, self.weight), dc.scale(ld, voxels)

    def inverse(self, y):
        dc.logabsdet(self.weight, name=self.name)  # singularity check
        w_inv = np.linalg.inv(self.weight.data.astype(np.float64)).astype(self.weight.dtype)
        return dc.channel_matmul(y, Tensor(w_inv, dtype=self.weight.dtype))


class Conv:
    def __init__(self, cin, cout, rng, k=3, zero=False, name="conv"):
        self.name = name
        if zero:
            kernel = np.zeros((k, k, k, cin, cout))
        else:
            kernel = rng.standard_normal((k, k, k, cin, cout)) * 0.05
        self.kernel = _param(kernel)
        self.bias = _param(np.zeros(cout))

    def params(self):
        return [(f"{self.name}.kernel", self.kernel), (f"{self.name}.bias", self.bias)]

    def __call__(self, x):
        return dc.conv3d(x, self.kernel, self.bias)


class AffineCoupling:
    """Scale-and-shift the second channel half conditioned on the first.

    ``(t, raw) = net(x_a)``, ``y_b = s * x_b + t`` with ``s = sigmoid(raw + 2)``.
    The net is conv3-relu-conv3-relu-conv3 with a zero-initialised last layer;
    its first ``C/2`` output channels are ``t`` and the rest are ``raw``.
    """

    def __init__(self, channels, width, rng, name="coupling"):
        if channels % 2:
            raise ContractError(f"{name}: affine coupling needs an even channel count, got {channels}")
        self.name = name
        self.half = channels // 2
        self.convs = [
            Conv(self.half, width, rng, name=f"{name}.conv1"),
            Conv(width, width, rng, name=f"{name}.conv2"),
            Conv(width, 2 * self.half, rng, zero=True, name=f"{name}.conv3"),
        ]

    def params(self):
        return [p for c in self.convs for p in c.params()]

    def _net(self, xa):
        h = dc.relu(self.convs[0](xa))
        h = dc.relu(self.convs[1](h))
        h = self.convs[2](h)
        t = dc.channel_slice(h, 0, self.half)
        raw = dc.shift(dc.channel_slice(h, self.half, 2 * self.half), SCALE_OFFSET)
        return t, raw

    def forward(self, x):
        if x.shape[-1] != 2 * self.half:
            raise ContractError(f"{self.name}: expected {2 * self.half} channels, got {x.shape}")
        xa = dc.channel_slice(x, 0, self.half)
        xb = dc.channel_slice(x, self.half, 2 * self.half)
        t, raw = self._net(xa)
        yb = dc.add(dc.mul(dc.sigmoid(raw), xb), t)
        return dc.concat_channels(xa, yb), dc.sum(dc.log_sigmoid(raw))

    def inverse(self, y):
        ya = dc.channel_slice(y, 0, self.half)
        yb = dc.channel_slice(y, self.half, 2 * self.half)
        t, raw = self._net(ya)
        # 1/sigmoid(r) = 1 + exp(-r)
        inv_s = dc.shift(dc.exp(dc.neg(raw)), 1.0)
        return dc.concat_channels(ya, dc.mul(dc.sub(yb, t), inv_s))


class FlowStep:
    def __init__(self, channels, width, rng, name):
        self.actnorm = ActNorm(channels, name=f"{name}.actnorm")
        self.invconv = InvConv(channels, rng, name=f"{name}.invconv")
        self.coupling = AffineCoupling(channels, width, rng, name=f"{name}.coupling")

    def params(self):
        return self.actnorm.params() + self.invconv.params() + self.coupling.params()

    def forward(self, x):
        x, ld1 = self.actnorm.forward(x)
        x, ld2 = self.invconv.forward(x)
        x, ld3 = self.coupling.forward(x)
        return x, dc.add(dc.add(ld1, ld2), ld3)

    def inverse(self, y):
        return self.actnorm.inverse(self.invconv.inverse(self.coupling.inverse(y)))


def gaussian_logp(z, mu, log_sigma):
    """Sum of elementwise N(mu, sigma^2) log-densities (all tensors same shape)."""
    u = dc.mul(dc.sub(z, mu), dc.exp(dc.neg(log_sigma)))
    per = dc.add(dc.scale(dc.square(u), 0.5), log_sigma)
    return dc.neg(dc.shift(dc.sum(per), 0.5 * LOG_2PI * z.data.size))


# ------------------------------------------------------------------------ model


class FlowModel:
    """The invertible generator: ``encode`` (x -> z), ``decode`` (z -> x)."""

    def __init__(self, config: FlowConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        self.steps = []
        self.priors = []
        for l in range(1, config.levels + 1):
            c = config.step_channels(l)
            self.steps.append([FlowStep(c, config.width, rng, f"level{l}.step{k + 1}")
                               for k in range(config.depth)])
            if l < config.levels:
                self.priors.append(Conv(c // 2, c, rng, zero=True, name=f"level{l}.prior"))
        top_c = config.level_shapes()[-1][-1]
        self.top_prior = Tensor(np.zeros(2 * top_c), requires_grad=config.learn_top)

    # -- parameters

    def named_params(self):
        out = []
        for l, steps in enumerate(self.steps):
            for step in steps:
                out += step.params()
            if l < len(self.priors):
                out += self.priors[l].params()
        out.append(("top.prior.bias", self.top_prior))
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def num_params(self):
        return int(sum(p.data.size for p in self.params()))

    def actnorms(self):
        return [s.actnorm for steps in self.steps for s in steps]

    @property
    def initialized(self):
        return all(a.initialized for a in self.actnorms())

    def mark_initialized(self):
        for a in self.actnorms():
            a.initialized = True

    def astype(self, dtype):
        """Cast every parameter in place (e.g. to float64 for verification)."""
        for p in self.params():
            p.data = p.data.astype(dtype)
        return self

    @property
    def dtype(self):
        return self.top_prior.dtype

    def copy(self):
        return copy.deepcopy(self)

    # -- forward

    def _check_input(self, x):
        cfg = self.config
        want = (cfg.resolution,) * 3 + (cfg.channels,)
        if tuple(x.shape) != want:
            raise ContractError(f"input shape {tuple(x.shape)} does not match flow config {want}")

    def _top_prior(self, spatial):
        top_c = self.top_prior.shape[0] // 2
        mu = dc.broadcast_channels(dc.channel_slice(self.top_prior, 0, top_c), spatial)
        ls = dc.broadcast_channels(dc.channel_slice(self.top_prior, top_c, 2 * top_c), spatial)
        return mu, ls

    def _split_prior(self, level_idx, kept):
        h = self.priors[level_idx](kept)
        c = h.shape[-1] // 2
        return dc.channel_slice(h, 0, c), dc.channel_slice(h, c, 2 * c)

    def forward(self, x):
        """Return (latents, total_logdet, prior_logp) as tensors."""
        x = dc.as_tensor(x)
        self._check_input(x)
        h = x
        logdet = None
        logp = None
        zs = []
        n_levels = self.config.levels
        for l in range(n_levels):
            h = squeeze(h)
            for step in self.steps[l]:
                h, ld = step.forward(h)
                logdet = ld if logdet is None else dc.add(logdet, ld)
            if l < n_levels - 1:
                c = h.shape[-1] // 2
                kept = dc.channel_slice(h, 0, c)
                z = dc.channel_slice(h, c, 2 * c)
                mu, ls = self._split_prior(l, kept)
                h = kept
            else:
                z = h
                mu, ls = self._top_prior(h.shape[:-1])
            lp = gaussian_logp(z, mu, ls)
            logp = lp if logp is None else dc.add(logp, lp)
            zs.append(z)
        return zs, logdet, logp

    def encode(self, x):
        """Volume -> (list of latent arrays, total log|det dz/dx|)."""
        with dc.no_grad():
            if not self.initialized:
                raise ContractError("flow is not initialized (run training or load a checkpoint)")
            zs, logdet, _ = self.forward(x)
        return [z.data for z in zs], float(logdet.data)

    def log_likelihood(self, x):
        """log p(x) = log p(z) + log|det dz/dx| (nats, continuous density)."""
        if not self.initialized:
            raise ContractError("flow is not initialized (run training or load a checkpoint)")
        with dc.no_grad():
            zs, logdet, logp = self.forward(x)
        value = float(logp.data) + float(logdet.data)
        if not math.isfinite(value):
            raise NonFiniteError("log-likelihood is not finite")
        return value

    def nll_tensor(self, x):
        """Differentiable negative log-likelihood (nats) for training."""
        _, logdet, logp = self.forward(x)
        return dc.neg(dc.add(logp, logdet))

    # -- inverse

    def check_pyramid(self, zs):
        shapes = self.config.level_shapes()
        if len(zs) != len(shapes):
            raise ContractError(f"pyramid has {len(zs)} levels, flow expects {len(shapes)}")
        for l, (z, want) in enumerate(zip(zs, shapes), start=1):
            if tuple(np.shape(z)) != want:
                raise ContractError(f"pyramid level {l} has shape {tuple(np.shape(z))}, expected {want}")

    def decode(self, zs):
        """Latent pyramid -> volume (exact inverse of ``encode``)."""
        self.check_pyramid(zs)
        return self._run_inverse(lambda l, kept: zs[l])

    def sample(self, temperature=1.0, rng=None):
        """Draw z from the learned priors (scaled by ``temperature``) and decode.

        Returns (volume, pyramid). Temperature 0 decodes the prior means.
        """
        if temperature and rng is None:
            raise ContractError("sampling with temperature > 0 needs an rng")
        drawn = {}

        def draw(l, kept):
            if kept is None:
                shape = self.config.level_shapes()[-1]
                mu, ls = self._top_prior(shape[:-1])
            else:
                mu, ls = self._split_prior(l, kept)
            z = mu.data
            if temperature:
                z = z + temperature * np.exp(ls.data) * rng.standard_normal(z.shape).astype(z.dtype)
            drawn[l] = z
            return z

        x = self._run_inverse(draw)
        return x, [drawn[l] for l in range(self.config.levels)]

    def _run_inverse(self, latent_for):
        dtype = self.dtype
        with dc.no_grad():
            n_levels = self.config.levels
            h = Tensor(latent_for(n_levels - 1, None), dtype=dtype)
            for l in reversed(range(n_levels)):
                if l < n_levels - 1:
                    z = Tensor(latent_for(l, h), dtype=dtype)
                    h = dc.concat_channels(h, z)
                for step in reversed(self.steps[l]):
                    h = step.inverse(h)
                h = unsqueeze(h)
        return h.data


# ------------------------------------------------------------------ checkpoint
#
# Layout (little-endian):
#   b"VFCK"  u32 version
#   u32 levels, depth, width, resolution, channels
#   u8 coupling code (1 = affine), u8 permutation code (1 = invconv),
#   u8 learn_top, u8 initialized
#   u32 parameter count N, then N records: u16 name length, utf-8 name,
#       u8 ndim, ndim x u32 dims, float32 data (C order)
# Parameters appear in ``FlowModel.named_params`` order.

FLOW_MAGIC = b"VFCK"
FLOW_VERSION = 1


def _write_params(f, named):
    f.write(struct.pack("<I", len(named)))
    for name, p in named:
        raw = name.encode()
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", p.data.ndim))
        f.write(struct.pack(f"<{p.data.ndim}I", *p.shape))
        f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def _read_exact(f, n):
    b = f.read(n)
    if len(b) != n:
        raise TruncatedFileError(f"expected {n} bytes, got {len(b)}")
    return b


def _read_params(f, named, dtype):
    (count,) = struct.unpack("<I", _read_exact(f, 4))
    if count != len(named):
        raise FormatError(f"checkpoint has {count} parameters, model expects {len(named)}")
    for name, p in named:
        (ln,) = struct.unpack("<H", _read_exact(f, 2))
        got = _read_exact(f, ln).decode()
        if got != name:
            raise FormatError(f"parameter order mismatch: {got!r} where {name!r} expected")
        (ndim,) = struct.unpack("<B", _read_exact(f, 1))
        shape = struct.unpack(f"<{ndim}I", _read_exact(f, 4 * ndim))
        if tuple(shape) != p.shape:
            raise FormatError(f"{name}: shape {shape} does not match model {p.shape}")
        n = int(np.prod(shape))
        p.data = np.frombuffer(_read_exact(f, 4 * n), dtype="<f4").reshape(shape).astype(dtype)


def save_flow(model: FlowModel, path_or_file):
    cfg = model.config
    header = FLOW_MAGIC + struct.pack(
        "<I5I4B", FLOW_VERSION, cfg.levels, cfg.depth, cfg.width, cfg.resolution, cfg.channels,
        1, 1, int(cfg.learn_top), int(model.initialized))
    if hasattr(path_or_file, "write"):
        f = path_or_file
        f.write(header)
        _write_params(f, model.named_params())
    else:
        with open(path_or_file, "wb") as f:
            f.write(header)
            _write_params(f, model.named_params())


def load_flow(path_or_file, dtype=None) -> FlowModel:
    if hasattr(path_or_file, "read"):
        return _load_flow(path_or_file, dtype)
    with open(path_or_file, "rb") as f:
        return _load_flow(f, dtype)


def _load_flow(f, dtype):
    magic = f.read(4)
    if magic != FLOW_MAGIC:
        raise BadMagicError(f"not a flow checkpoint (magic {magic!r})")
    version, levels, depth, width, res, ch, coup, perm, top, init = struct.unpack(
        "<I5I4B", _read_exact(f, 28))
    if version != FLOW_VERSION:
        raise FormatError(f"unsupported flow checkpoint version {version}")
    if coup != 1 or perm != 1:
        raise FormatError(f"unknown coupling/permutation codes {coup}/{perm}")
    cfg = FlowConfig(levels=levels, depth=depth, width=width, resolution=res, channels=ch,
                     learn_top=bool(top))
    model = FlowModel(cfg, seed=0)
    _read_params(f, model.named_params(), dtype or dc.default_dtype())
    if f.read(1):
        raise FormatError("trailing bytes after flow parameters")
    if init:
        model.mark_initialized()
    return model


def config_dict(cfg: FlowConfig):
    return asdict(cfg)
