"""Feature mixing (instance and distribution based), the generative classifier
built from per-class density models, the consistency losses and the
per-class feature memory."""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Mapping, Protocol

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor

MIX_MODES = ("none", "instance", "gaussian_dcfa", "nflow_dcfa")
APPLY_TO = ("source", "target", "both")
GDC_METRICS = ("l2", "l1", "kl")
GDC_SUBSETS = ("all", "disagreed")


class DensityModel(Protocol):
    def log_prob(self, x: np.ndarray) -> np.ndarray: ...

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray: ...


@dataclass(frozen=True)
class MixConfig:
    beta_a: float = 0.1
    beta_b: float = 0.1
    mode: str = "nflow_dcfa"
    apply_to: str = "both"

    def __post_init__(self):
        if self.beta_a <= 0 or self.beta_b <= 0:
            raise ValueError("Beta parameters must be positive")
        if self.mode not in MIX_MODES:
            raise ValueError(f"unknown mix mode {self.mode!r}")
        if self.apply_to not in APPLY_TO:
            raise ValueError(f"unknown apply_to {self.apply_to!r}")


def fold_alpha(alpha0):
    """``max(a, 1 - a)``: the original feature always keeps the larger weight."""
    return np.maximum(alpha0, 1.0 - np.asarray(alpha0))


def draw_alpha(cfg: MixConfig, rng: np.random.Generator, size=None):
    return fold_alpha(rng.beta(cfg.beta_a, cfg.beta_b, size=size))


def _blend(features: Tensor, partners: np.ndarray, alpha: np.ndarray) -> Tensor:
    a = alpha[:, None]
    return features * a + (1.0 - a) * partners


# ----------------------------------------------------------------------
# feature memory


class FeatureMemory:
    """Per-class FIFO buffers of the latest accepted target features.

    One writer (the training loop) and any number of readers; readers get
    copies taken under the lock.
    """

    def __init__(self, num_classes: int, capacity: int = 256, accepted_only: bool = True):
        if capacity < 1:
            raise ValueError("memory capacity must be >= 1")
        self.num_classes = num_classes
        self.capacity = capacity
        self.accepted_only = accepted_only
        self._buffers = [deque(maxlen=capacity) for _ in range(num_classes)]
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return sum(len(b) for b in self._buffers)

    def size(self, c: int) -> int:
        return len(self._buffers[c])

    def push(self, c: int, feature, step: int = 0) -> None:
        with self._lock:
            self._buffers[c].append((np.array(feature, dtype=np.float64), step))

    def update(self, pseudo, step: int = 0) -> None:
        """Append accepted rows of a :class:`~genrt.netmodel.PseudoBatch`."""
        feats = np.array(pseudo.features, dtype=np.float64)
        keep = pseudo.accepted if self.accepted_only else np.ones(len(feats), dtype=bool)
        with self._lock:
            for f, c in zip(feats[keep], np.asarray(pseudo.pseudo_label)[keep]):
                self._buffers[int(c)].append((f.copy(), step))

    def features(self, c: int) -> np.ndarray:
        with self._lock:
            items = [f for f, _ in self._buffers[c]]
        return np.array(items) if items else np.empty((0, 0))

    def steps(self, c: int) -> list[int]:
        with self._lock:
            return [s for _, s in self._buffers[c]]

    def snapshot(self) -> dict[int, np.ndarray]:
        return {c: self.features(c) for c in range(self.num_classes)}

    def sample(self, c: int, n: int, rng: np.random.Generator) -> np.ndarray:
        feats = self.features(c)
        if len(feats) == 0:
            return feats
        return feats[rng.integers(0, len(feats), size=n)]


memory_update = FeatureMemory.update


# ----------------------------------------------------------------------
# mixing


def mix_instance(features, labels, rng: np.random.Generator, cfg: MixConfig = MixConfig(mode="instance"),
                 memory: FeatureMemory | None = None, mask=None, alpha=None) -> Tensor:
    """Blend each selected row with a same-class partner from the batch or memory.

    Partners are drawn uniformly from other rows of the batch carrying the
    same label, then from ``memory``.  Rows without a partner (or outside
    ``mask``) pass through unchanged.  Partner values are constants.
    """
    f = dc.as_tensor(features)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    values = f.data
    partners = values.copy()
    a = draw_alpha(cfg, rng, size=n) if alpha is None else np.broadcast_to(np.asarray(alpha, float), (n,)).copy()
    for i in range(n):
        if not mask[i]:
            a[i] = 1.0
            continue
        pool = np.flatnonzero(mask & (labels == labels[i]))
        pool = pool[pool != i]
        mem = memory.features(labels[i]) if memory is not None else np.empty((0, 0))
        total = len(pool) + len(mem)
        if total == 0:
            a[i] = 1.0
            continue
        k = rng.integers(0, total)
        partners[i] = values[pool[k]] if k < len(pool) else mem[k - len(pool)]
    return _blend(f, partners, a)


def mix_distribution(features, labels, models: Mapping[int, DensityModel], rng: np.random.Generator,
                     cfg: MixConfig = MixConfig(), mask=None, alpha=None) -> Tensor:
    """Blend each selected row with one draw from its class's density model.

    Rows whose class has no model (or outside ``mask``) pass through.
    """
    f = dc.as_tensor(features)
    labels = np.asarray(labels, dtype=int)
    n = len(labels)
    mask = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    a = draw_alpha(cfg, rng, size=n) if alpha is None else np.broadcast_to(np.asarray(alpha, float), (n,)).copy()
    partners = f.data.copy()
    for c in np.unique(labels[mask]):
        rows = np.flatnonzero(mask & (labels == c))
        model = models.get(int(c))
        if model is None:
            a[rows] = 1.0
            continue
        partners[rows] = model.sample(len(rows), rng)
    a[~mask] = 1.0
    return _blend(f, partners, a)


# ----------------------------------------------------------------------
# generative classifier and consistency


class GenerativeClassifier:
    """Class posteriors from per-class likelihoods under a uniform prior."""

    def __init__(self, models: Mapping[int, DensityModel], num_classes: int):
        self.models = dict(models)
        self.num_classes = num_classes

    def log_likelihoods(self, f) -> np.ndarray:
        f = np.atleast_2d(np.asarray(f, dtype=np.float64))
        ll = np.full((len(f), self.num_classes), -np.inf)
        for c, m in self.models.items():
            with np.errstate(all="ignore"):
                ll[:, c] = m.log_prob(f)
        return ll

    def predict(self, f) -> np.ndarray:
        return posterior_from_loglik(self.log_likelihoods(f))


def posterior_from_loglik(ll, log_prior=None) -> np.ndarray:
    """Row-normalize ``exp(ll + log_prior)``; non-finite entries are excluded
    and an all-excluded row becomes uniform."""
    ll = np.array(ll, dtype=np.float64)
    if log_prior is not None:
        ll = ll + np.asarray(log_prior)
    ll[~np.isfinite(ll)] = -np.inf
    out = np.empty_like(ll)
    dead = np.all(np.isneginf(ll), axis=1)
    out[dead] = 1.0 / ll.shape[1]
    live = ll[~dead]
    if len(live):
        # shift by the row max first; adding log(sum) to a huge magnitude can be absorbed by rounding
        e = np.exp(live - live.max(axis=1, keepdims=True))
        out[~dead] = e / e.sum(axis=1, keepdims=True)
    return out


def generative_predict(gc: GenerativeClassifier, f) -> np.ndarray:
    """``p^G`` rows for features ``f``; a plain array, i.e. never differentiated."""
    if isinstance(f, Tensor):
        f = f.data
    return gc.predict(f)


def _check_rows(name: str, p: np.ndarray, tol: float = 1e-6) -> None:
    if p.ndim != 2:
        raise dc.ShapeError(f"{name}: expected a matrix of rows, got shape {p.shape}")
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=1) - 1.0) > tol):
        raise ValueError(f"{name}: rows are not probability distributions")


def gdc_loss(p_disc, p_gen, metric: str = "l2", subset: str = "all") -> Tensor:
    """Distance between discriminative rows and (constant) generative rows.

    l2: mean squared Euclidean distance; l1: mean absolute row difference;
    kl: mean KL(p_gen || p_disc).  ``subset="disagreed"`` averages only over
    rows whose argmaxes differ (0 when there are none).
    """
    if metric not in GDC_METRICS:
        raise ValueError(f"unknown GDC metric {metric!r}")
    if subset not in GDC_SUBSETS:
        raise ValueError(f"unknown GDC subset {subset!r}")
    pd = dc.as_tensor(p_disc)
    pg = np.asarray(dc.detach(dc.as_tensor(p_gen)).data)
    if pd.shape != pg.shape:
        raise dc.ShapeError(f"gdc_loss: shapes {pd.shape} and {pg.shape} differ")
    _check_rows("gdc_loss p_disc", pd.data)
    _check_rows("gdc_loss p_gen", pg)
    if subset == "disagreed":
        rows = np.flatnonzero(np.argmax(pd.data, axis=1) != np.argmax(pg, axis=1))
        if len(rows) == 0:
            return dc.sum_(pd * 0.0)
        pd, pg = pd[rows], pg[rows]
    if metric == "l2":
        per_row = dc.sum_(dc.square(pd - pg), axis=-1)
    elif metric == "l1":
        per_row = dc.sum_(dc.abs_(pd - pg), axis=-1)
    else:
        with np.errstate(divide="ignore", invalid="ignore"):
            ent = np.where(pg > 0, pg * np.log(pg), 0.0).sum(axis=1)
        per_row = ent - dc.sum_(dc.log(pd) * pg, axis=-1)
    return dc.mean(per_row)


def self_consistency_loss(p_disc, eps: float) -> Tensor:
    """Squared distance between rows and their label-smoothed (constant) copy."""
    if not 0.0 <= eps < 1.0:
        raise ValueError("smoothing eps must lie in [0, 1)")
    pd = dc.as_tensor(p_disc)
    C = pd.shape[1]
    target = (1.0 - eps) * pd.data + eps / C
    return dc.mean(dc.sum_(dc.square(pd - target), axis=-1))


def argmax_disagreement(p_a, p_b) -> float:
    a = np.argmax(np.asarray(p_a), axis=1)
    b = np.argmax(np.asarray(p_b), axis=1)
    return float(np.mean(a != b)) if len(a) else 0.0


def disagreement_rate(net, gc: GenerativeClassifier, x) -> float:
    """Fraction of inputs where discriminative and generative argmaxes differ."""
    feats = net.embed(x)
    p_disc = net.predict_proba(x)
    return argmax_disagreement(p_disc, generative_predict(gc, feats))

