"""Class-conditional density models: spline flows and regularized Gaussians.

A :class:`FlowModel` maps features ``f`` to a standard-normal latent through a
stack of blocks (actnorm -> invertible PLU linear map -> coupling).  Densities
use the data-to-latent direction, which carries gradients; sampling runs the
inverse direction in plain numpy.

Flow checkpoint layout (all little-endian)::

    8 bytes   b"GNRTFLW1"
    uint32    feature dim d
    uint32    block count
    int32     class id
    uint32    spline bins
    uint32    conditioner hidden width
    uint32    coupling kind (0 = spline, 1 = affine)
    float64   tail bound
    float64[] every array of ``FlowModel.state_arrays()`` in order, raw
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import diffcore as dc
from .diffcore import Tensor, no_grad
from .nn import MLP

LOG_2PI = math.log(2.0 * math.pi)
MIN_STD = 1e-6
FLOW_MAGIC = b"GNRTFLW1"
_HEADER = struct.Struct("<IIiIIId")
_COUPLINGS = {"spline": 0, "affine": 1}


# ----------------------------------------------------------------------
# actnorm


class ActNorm:
    """Per-dimension affine map ``y = exp(log_scale) * x + shift``."""

    def __init__(self, d: int):
        self.d = d
        self.log_scale = dc.parameter(np.zeros(d), name="actnorm.log_scale")
        self.shift = dc.parameter(np.zeros(d), name="actnorm.shift")
        self.initialized = False

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale.data)

    def set_scale(self, scale, shift=None) -> None:
        scale = np.asarray(scale, dtype=np.float64)
        if np.any(scale <= 0):
            raise ValueError("actnorm scales must be positive")
        self.log_scale.data[:] = np.log(scale)
        if shift is not None:
            self.shift.data[:] = shift

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        y = x * dc.exp(self.log_scale) + self.shift
        return y, dc.sum_(self.log_scale)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return (y - self.shift.data) * np.exp(-self.log_scale.data)

    def parameters(self) -> list[Tensor]:
        return [self.log_scale, self.shift]


def actnorm_data_init(norm: ActNorm, batch: np.ndarray) -> None:
    """Set scale/shift so ``batch`` leaves the layer with zero mean, unit std."""
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim != 2 or batch.shape[0] < 2:
        raise ValueError("actnorm data init needs a batch of at least 2 samples")
    mu = batch.mean(axis=0)
    std = np.maximum(batch.std(axis=0), MIN_STD)
    norm.log_scale.data[:] = -np.log(std)
    norm.shift.data[:] = -mu / std
    norm.initialized = True


# ----------------------------------------------------------------------
# invertible linear map in P L U form


class PLULinear:
    """``y = W x`` with ``W = P L U``; only L and U are trained.

    L is unit lower-triangular and U upper-triangular with diagonal
    ``sign * exp(log_diag)``, so W is invertible for any parameter values.
    """

    def __init__(self, d: int, rng: np.random.Generator | None = None, permute: bool = False):
        self.d = d
        self.perm = rng.permutation(d) if (permute and rng is not None) else np.arange(d)
        self.sign = np.ones(d)
        self.lower = dc.parameter(np.zeros((d, d)), name="linear.lower")
        self.upper = dc.parameter(np.zeros((d, d)), name="linear.upper")
        self.log_diag = dc.parameter(np.zeros(d), name="linear.log_diag")
        self._mask_l = np.tril(np.ones((d, d)), -1)
        self._mask_u = np.triu(np.ones((d, d)), 1)
        self._eye = np.eye(d)

    @property
    def P(self) -> np.ndarray:
        p = np.zeros((self.d, self.d))
        p[np.arange(self.d), self.perm] = 1.0
        return p

    def _factors(self) -> tuple[np.ndarray, np.ndarray]:
        L = self.lower.data * self._mask_l + self._eye
        U = self.upper.data * self._mask_u + np.diag(self.sign * np.exp(self.log_diag.data))
        return L, U

    def weight(self) -> np.ndarray:
        L, U = self._factors()
        return self.P @ L @ U

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        L = self.lower * self._mask_l + self._eye
        U = self.upper * self._mask_u + self._eye * (self.sign * dc.exp(self.log_diag))
        # row vectors: y = x W^T = x U^T L^T P^T
        y = dc.matmul(dc.matmul(dc.matmul(x, dc.transpose(U)), dc.transpose(L)), self.P.T)
        return y, dc.sum_(self.log_diag)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        L, U = self._factors()
        rhs = (y @ self.P).T  # P^T y^T
        t = solve_triangular(L, rhs, lower=True, unit_diagonal=True)
        return solve_triangular(U, t, lower=False).T

    def parameters(self) -> list[Tensor]:
        return [self.lower, self.upper, self.log_diag]


# ----------------------------------------------------------------------
# monotone rational-quadratic spline


@dataclass(frozen=True)
class SplineSpec:
    num_bins: int = 8
    tail_bound: float = 5.0
    min_bin_width: float = 1e-3
    min_bin_height: float = 1e-3
    min_derivative: float = 1e-3

    @property
    def params_per_dim(self) -> int:
        return 3 * self.num_bins - 1


def _knots(unnorm: Tensor, spec: SplineSpec, min_size: float) -> tuple[Tensor, Tensor]:
    """Bin sizes and knot positions on ``[-B, B]`` with exact endpoints."""
    K, B = spec.num_bins, spec.tail_bound
    frac = min_size + (1.0 - min_size * K) * dc.softmax_rows(unnorm)
    cum = dc.cumsum(frac, axis=-1)
    lead = unnorm.shape[:-1] + (1,)
    knots = dc.concat([np.full(lead, -B), 2.0 * B * cum[..., :-1] - B, np.full(lead, B)], axis=-1)
    sizes = knots[..., 1:] - knots[..., :-1]
    return sizes, knots


def spline_params(unnorm: Tensor, spec: SplineSpec):
    """Normalized widths, x-knots, heights, y-knots and knot derivatives."""
    K = spec.num_bins
    widths, xk = _knots(unnorm[..., :K], spec, spec.min_bin_width)
    heights, yk = _knots(unnorm[..., K:2 * K], spec, spec.min_bin_height)
    # derivative 1 at zero input, so a zero conditioner gives the identity
    shift = math.log(math.expm1(1.0 - spec.min_derivative))
    inner = spec.min_derivative + dc.softplus(unnorm[..., 2 * K:] + shift)
    lead = unnorm.shape[:-1] + (1,)
    derivs = dc.concat([np.ones(lead), inner, np.ones(lead)], axis=-1)
    return widths, xk, heights, yk, derivs


def _bin_index(knots: np.ndarray, v: np.ndarray) -> np.ndarray:
    return np.sum(v[..., None] >= knots[..., 1:-1], axis=-1)


def rq_spline_forward(x: Tensor, unnorm: Tensor, spec: SplineSpec) -> tuple[Tensor, Tensor]:
    """Elementwise monotone spline; returns outputs and per-element log|dy/dx|."""
    B = spec.tail_bound
    inside = (x.data >= -B) & (x.data <= B)
    xc = dc.where(inside, x, 0.0)
    widths, xk, heights, yk, derivs = spline_params(unnorm, spec)
    idx = _bin_index(xk.data, xc.data)
    x_lo = dc.take_last(xk, idx)
    w = dc.take_last(widths, idx)
    y_lo = dc.take_last(yk, idx)
    h = dc.take_last(heights, idx)
    d0 = dc.take_last(derivs, idx)
    d1 = dc.take_last(derivs, idx + 1)

    s = h / w
    xi = (xc - x_lo) / w
    one_m = 1.0 - xi
    t = xi * one_m
    xi2 = dc.square(xi)
    den = s + (d1 + d0 - 2.0 * s) * t
    y = y_lo + h * (s * xi2 + d0 * t) / den
    dnum = dc.square(s) * (d1 * xi2 + 2.0 * s * t + d0 * dc.square(one_m))
    lad = dc.log(dnum) - 2.0 * dc.log(den)
    return dc.where(inside, y, x), dc.where(inside, lad, 0.0)


def rq_spline_inverse(y: np.ndarray, unnorm: np.ndarray, spec: SplineSpec) -> np.ndarray:
    B = spec.tail_bound
    with no_grad():
        widths, xk, heights, yk, derivs = (p.data for p in spline_params(Tensor(unnorm), spec))
    inside = (y >= -B) & (y <= B)
    yc = np.where(inside, y, 0.0)
    idx = _bin_index(yk, yc)[..., None]

    def pick(a, shift=0):
        return np.take_along_axis(a, idx + shift, axis=-1)[..., 0]

    x_lo, w, y_lo, h = pick(xk), pick(widths), pick(yk), pick(heights)
    d0, d1 = pick(derivs), pick(derivs, 1)
    s = h / w
    dy = yc - y_lo
    c_mix = d1 + d0 - 2.0 * s
    a = h * (s - d0) + dy * c_mix
    b = h * d0 - dy * c_mix
    c = -s * dy
    disc = np.maximum(b * b - 4.0 * a * c, 0.0)
    xi = 2.0 * c / (-b - np.sqrt(disc))
    return np.where(inside, xi * w + x_lo, y)


# ----------------------------------------------------------------------
# coupling


class Coupling:
    """First ``d // 2`` dims condition a monotone map of the remaining dims."""

    def __init__(self, d: int, rng: np.random.Generator, hidden: int = 32,
                 kind: str = "spline", spline: SplineSpec = SplineSpec()):
        if d < 2:
            raise ValueError("coupling needs feature_dim >= 2")
        if kind not in _COUPLINGS:
            raise ValueError(f"unknown coupling kind {kind!r}")
        self.d, self.kind, self.spline = d, kind, spline
        self.d_a = d // 2
        self.d_b = d - self.d_a
        self.hidden = hidden
        per_dim = spline.params_per_dim if kind == "spline" else 2
        sizes = [self.d_a, hidden, hidden, hidden, self.d_b * per_dim]
        self.conditioner = MLP(sizes, rng, activation="tanh", name="coupling", zero_last=True)
        self.per_dim = per_dim

    def _params(self, xa: Tensor) -> Tensor:
        out = self.conditioner(xa)
        return out.reshape(out.shape[0], self.d_b, self.per_dim)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        xa, xb = x[:, :self.d_a], x[:, self.d_a:]
        p = self._params(xa)
        if self.kind == "spline":
            yb, lad = rq_spline_forward(xb, p, self.spline)
        else:
            log_s = dc.tanh(p[..., 0])
            yb = xb * dc.exp(log_s) + p[..., 1]
            lad = log_s
        return dc.concat([xa, yb], axis=-1), dc.sum_(lad, axis=-1)

    def inverse(self, y: np.ndarray) -> np.ndarray:
        ya, yb = y[:, :self.d_a], y[:, self.d_a:]
        with no_grad():
            p = self._params(Tensor(ya)).data
        if self.kind == "spline":
            xb = rq_spline_inverse(yb, p, self.spline)
        else:
            xb = (yb - p[..., 1]) * np.exp(-np.tanh(p[..., 0]))
        return np.concatenate([ya, xb], axis=1)

    def parameters(self) -> list[Tensor]:
        return self.conditioner.parameters()


class FlowBlock:
    def __init__(self, d: int, rng: np.random.Generator, hidden: int = 32, coupling: str = "spline",
                 spline: SplineSpec = SplineSpec(), permute: bool = False):
        self.actnorm = ActNorm(d)
        self.linear = PLULinear(d, rng, permute=permute)
        self.coupling = Coupling(d, rng, hidden=hidden, kind=coupling, spline=spline)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        x, ld_a = self.actnorm.forward(x)
        x, ld_l = self.linear.forward(x)
        x, ld_c = self.coupling.forward(x)
        return x, ld_c + (ld_a + ld_l)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        z = self.coupling.inverse(z)
        z = self.linear.inverse(z)
        return self.actnorm.inverse(z)

    def parameters(self) -> list[Tensor]:
        return self.actnorm.parameters() + self.linear.parameters() + self.coupling.parameters()


class FlowModel:
    """One class's density ``M_c``: a stack of blocks over a standard normal base."""

    def __init__(self, feature_dim: int, class_id: int = 0, rng: np.random.Generator | None = None,
                 n_blocks: int = 3, hidden: int = 32, coupling: str = "spline",
                 spline: SplineSpec = SplineSpec(), permute: bool = False):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d = feature_dim
        self.class_id = class_id
        self.hidden = hidden
        self.coupling = coupling
        self.spline = spline
        self.blocks = [FlowBlock(feature_dim, rng, hidden, coupling, spline, permute) for _ in range(n_blocks)]

    @property
    def initialized(self) -> bool:
        return all(b.actnorm.initialized for b in self.blocks)

    def parameters(self) -> list[Tensor]:
        return [p for b in self.blocks for p in b.parameters()]

    def transform(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Data -> latent; returns ``(z, log|det J|)`` per sample."""
        logdet = None
        for block in self.blocks:
            x, ld = block.forward(x)
            logdet = ld if logdet is None else logdet + ld
        return x, logdet

    def log_prob_tensor(self, x) -> Tensor:
        x = dc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.d:
            raise dc.ShapeError(f"flow_log_prob: expected (N, {self.d}) features, got {x.shape}")
        z, logdet = self.transform(x)
        base = -0.5 * dc.sum_(dc.square(z), axis=-1) - 0.5 * self.d * LOG_2PI
        return base + logdet

    def log_prob(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with no_grad():
            return self.log_prob_tensor(Tensor(x)).data

    def inverse(self, z: np.ndarray) -> np.ndarray:
        for block in reversed(self.blocks):
            z = block.inverse(z)
        return z

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return flow_sample(self, n, rng)

    def data_init(self, batch: np.ndarray) -> None:
        """Data-dependent actnorm init, block by block along the forward path."""
        x = np.asarray(batch, dtype=np.float64)
        for block in self.blocks:
            actnorm_data_init(block.actnorm, x)
            with no_grad():
                x, _ = block.forward(Tensor(x))
                x = x.data

    # serialization ----------------------------------------------------
    def state_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for b in self.blocks:
            out += [np.array([float(b.actnorm.initialized)]), b.actnorm.log_scale.data, b.actnorm.shift.data,
                    b.linear.perm.astype(np.float64), b.linear.sign,
                    b.linear.lower.data, b.linear.upper.data, b.linear.log_diag.data]
            out += [p.data for p in b.coupling.parameters()]
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(FLOW_MAGIC)
        buf.write(_HEADER.pack(self.d, len(self.blocks), self.class_id, self.spline.num_bins,
                               self.hidden, _COUPLINGS[self.coupling], self.spline.tail_bound))
        for arr in self.state_arrays():
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> FlowModel:
        if blob[:8] != FLOW_MAGIC:
            raise ValueError("not a flow checkpoint (bad magic)")
        d, n_blocks, class_id, bins, hidden, kind, tail = _HEADER.unpack_from(blob, 8)
        coupling = {v: k for k, v in _COUPLINGS.items()}[kind]
        model = cls(d, class_id, np.random.default_rng(0), n_blocks=n_blocks, hidden=hidden,
                    coupling=coupling, spline=SplineSpec(num_bins=bins, tail_bound=tail))
        arrays = model.state_arrays()
        offset = 8 + _HEADER.size
        loaded = []
        for arr in arrays:
            n = arr.size
            loaded.append(np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(arr.shape))
            offset += 8 * n
        if offset != len(blob):
            raise ValueError("flow checkpoint size does not match its header")
        it = iter(loaded)
        for b in model.blocks:
            b.actnorm.initialized = bool(next(it)[0])
            b.actnorm.log_scale.data[:] = next(it)
            b.actnorm.shift.data[:] = next(it)
            b.linear.perm = next(it).astype(np.intp)
            b.linear.sign = next(it).copy()
            b.linear.lower.data[:] = next(it)
            b.linear.upper.data[:] = next(it)
            b.linear.log_diag.data[:] = next(it)
            for p in b.coupling.parameters():
                p.data[:] = next(it)
        return model


def save_flow(model: FlowModel, path) -> None:
    Path(path).write_bytes(model.to_bytes())


def load_flow(path) -> FlowModel:
    return FlowModel.from_bytes(Path(path).read_bytes())


def flow_log_prob(model: FlowModel, f) -> np.ndarray:
    """Exact log-density of each row of ``f`` under ``model``."""
    f = np.atleast_2d(np.asarray(f, dtype=np.float64))
    if not np.all(np.isfinite(f)):
        raise ValueError("flow_log_prob: non-finite input")
    if f.shape[1] != model.d:
        raise dc.ShapeError(f"flow_log_prob: feature dim {f.shape[1]} != model dim {model.d}")
    return model.log_prob(f)


def flow_sample(model: FlowModel, n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("flow_sample: n must be >= 1")
    z = rng.standard_normal((n, model.d))
    return model.inverse(z)


def flow_nll_loss(models: Mapping[int, FlowModel] | Sequence[FlowModel], features, labels) -> Tensor | None:
    """``-(1/B) sum_i log p(f_i | M_{y_i})`` on gradient-free features.

    Returns ``None`` for an empty batch so the caller can skip the step.
    """
    feats = np.asarray(dc.detach(dc.as_tensor(features)).data)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    if n == 0:
        return None
    total = None
    for c in np.unique(labels):
        rows = feats[labels == c]
        lp = dc.sum_(models[int(c)].log_prob_tensor(Tensor(rows)))
        total = lp if total is None else total + lp
    return -total / n


def train_flow(model: FlowModel, data: np.ndarray, steps: int, rng: np.random.Generator,
               batch_size: int = 256, lr: float = 5e-3) -> list[float]:
    """Plain maximum-likelihood fit, used by tests and offline tooling."""
    data = np.asarray(data, dtype=np.float64)
    if not model.initialized:
        model.data_init(data[rng.choice(len(data), size=min(len(data), 512), replace=False)])
    opt = dc.Optimizer(model.parameters(), dc.OptimizerState("adam", lr))
    history = []
    for _ in range(steps):
        batch = data[rng.integers(0, len(data), size=min(batch_size, len(data)))]
        opt.zero_grad()
        loss = flow_nll_loss({model.class_id: model}, batch, np.full(len(batch), model.class_id))
        loss.backward()
        opt.step()
        history.append(loss.item())
    return history


# ----------------------------------------------------------------------
# Gaussian class model


@dataclass
class GaussianClassModel:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    chol: np.ndarray
    count: int

    @property
    def d(self) -> int:
        return len(self.mean)

    def log_prob(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = (x - self.mean).T
        sol = solve_triangular(self.chol, diff, lower=True)
        maha = np.sum(sol * sol, axis=0)
        logdet = 2.0 * np.sum(np.log(np.diag(self.chol)))
        return -0.5 * (maha + logdet + self.d * LOG_2PI)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.d))
        return self.mean + z @ self.chol.T


def gaussian_fit(features, class_id: int = 0, ridge: float = 1e-4, noise_var: float = 0.0) -> GaussianClassModel:
    """Sample mean and covariance plus a ``ridge * trace / d`` diagonal load.

    ``noise_var`` adds an isotropic term, the exact covariance of the data
    after additive ``N(0, noise_var I)`` jitter.
    """
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n, d = x.shape
    if n < 2:
        mu = x[0].copy() if n == 1 else np.zeros(d)
        cov = np.eye(d)
    else:
        mu = x.mean(axis=0)
        cov = np.cov(x, rowvar=False, bias=False).reshape(d, d)
        eps = ridge * np.trace(cov) / d
        cov = cov + (max(eps, 1e-12) + noise_var) * np.eye(d)
    return GaussianClassModel(class_id, mu, cov, np.linalg.cholesky(cov), n)
