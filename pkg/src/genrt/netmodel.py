"""Feature extractor, bottleneck and discriminative classifier, plus the
FixMatch-style pseudo-labelling and the supervised / unsupervised losses.

Network checkpoint layout (little-endian)::

    8 bytes   b"GNRTNET1"
    uint32    layer count n
    uint32[n+1]  layer widths (input_dim, hidden..., feature_dim, num_classes)
    float64[] weight then bias of every linear layer, in forward order
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor, no_grad
from .nn import MLP, Linear

NET_MAGIC = b"GNRTNET1"


class Network:
    """extractor MLP -> linear bottleneck (features) -> linear classifier."""

    def __init__(self, input_dim: int, num_classes: int, hidden=(64, 64), feature_dim: int = 8,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.extractor = MLP([input_dim, *self.hidden], rng, activation="relu", name="extractor")
        self.bottleneck = Linear(self.hidden[-1], feature_dim, rng, name="bottleneck")
        self.classifier = Linear(feature_dim, num_classes, rng, name="classifier")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden, self.feature_dim, self.num_classes]

    def _linears(self) -> list[Linear]:
        return [*self.extractor.layers, self.bottleneck, self.classifier]

    def parameters(self) -> list[Tensor]:
        return [p for layer in self._linears() for p in layer.parameters()]

    def features(self, x) -> Tensor:
        x = dc.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise dc.ShapeError(f"network: expected (N, {self.input_dim}) inputs, got {x.shape}")
        return self.bottleneck(dc.relu(self.extractor(x)))

    def logits(self, features) -> Tensor:
        return self.classifier(dc.as_tensor(features))

    def probs(self, features) -> Tensor:
        return dc.softmax_rows(self.logits(features))

    def predict_proba(self, x) -> np.ndarray:
        with no_grad():
            return self.probs(self.features(x)).data

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.predict_proba(x), axis=1)

    def embed(self, x) -> np.ndarray:
        with no_grad():
            return self.features(x).data

    # serialization ----------------------------------------------------
    def to_bytes(self) -> bytes:
        dims = self.dims
        buf = io.BytesIO()
        buf.write(NET_MAGIC)
        buf.write(struct.pack(f"<I{len(dims)}I", len(dims) - 1, *dims))
        for p in self.parameters():
            buf.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> Network:
        if blob[:8] != NET_MAGIC:
            raise ValueError("not a network checkpoint (bad magic)")
        (n_layers,) = struct.unpack_from("<I", blob, 8)
        dims = struct.unpack_from(f"<{n_layers + 1}I", blob, 12)
        net = cls(dims[0], dims[-1], hidden=dims[1:-2], feature_dim=dims[-2])
        offset = 12 + 4 * (n_layers + 1)
        for p in net.parameters():
            p.data[...] = np.frombuffer(blob, dtype="<f8", count=p.size, offset=offset).reshape(p.shape)
            offset += 8 * p.size
        if offset != len(blob):
            raise ValueError("network checkpoint size does not match its header")
        return net


def save_network(net: Network, path) -> None:
    Path(path).write_bytes(net.to_bytes())


def load_network(path) -> Network:
    return Network.from_bytes(Path(path).read_bytes())


# ----------------------------------------------------------------------
# input perturbation


@dataclass(frozen=True)
class AugmentConfig:
    sigma_weak: float = 0.02
    sigma_strong: float = 0.1
    dropout_strong: float = 0.1


def augment(x, strength: str, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    """Weak view: small Gaussian jitter.  Strong view: larger jitter plus
    coordinate dropout (dropped coordinates are zeroed, no rescaling)."""
    x = np.asarray(x, dtype=np.float64)
    if strength == "weak":
        return x + cfg.sigma_weak * rng.standard_normal(x.shape) if cfg.sigma_weak else x.copy()
    if strength != "strong":
        raise ValueError(f"unknown augmentation strength {strength!r}")
    noisy = x + cfg.sigma_strong * rng.standard_normal(x.shape)
    keep = rng.random(x.shape) >= cfg.dropout_strong
    return noisy * keep


# ----------------------------------------------------------------------
# pseudo labels and losses


@dataclass
class PseudoBatch:
    features: np.ndarray
    probs: np.ndarray
    pseudo_label: np.ndarray
    accepted: np.ndarray
    true_label: np.ndarray | None = None  # diagnostics only

    def __len__(self) -> int:
        return len(self.pseudo_label)

    @property
    def n_accepted(self) -> int:
        return int(self.accepted.sum())


def threshold(probs: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    label = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(label)), label]
    return label, conf > tau


def pseudo_label(net: Network, weak_batch, tau: float, true_label=None) -> PseudoBatch:
    """Label the weak view; accept rows whose top probability strictly exceeds ``tau``."""
    with no_grad():
        feats = net.features(weak_batch)
        probs = dc.softmax_rows(net.logits(feats)).data
    label, accepted = threshold(probs, tau)
    return PseudoBatch(feats.data.copy(), probs, label, accepted,
                       None if true_label is None else np.asarray(true_label))


def _check_labels(labels, n_classes: int, n_rows: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n_rows,):
        raise dc.ShapeError(f"labels shape {labels.shape} does not match {n_rows} rows")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.intp)


def source_ce_loss(logits, labels) -> Tensor:
    """Mean cross-entropy over all K*B source rows (pass the domains concatenated)."""
    logits = dc.as_tensor(logits)
    labels = _check_labels(labels, logits.shape[1], logits.shape[0])
    return -dc.mean(dc.take_last(dc.log_softmax_rows(logits), labels))


def target_ce_loss(logits_strong, pseudo: PseudoBatch) -> Tensor:
    """Masked cross-entropy on the strong view, divided by the full batch size."""
    logits = dc.as_tensor(logits_strong)
    labels = _check_labels(pseudo.pseudo_label, logits.shape[1], logits.shape[0])
    picked = dc.take_last(dc.log_softmax_rows(logits), labels)
    return -dc.sum_(picked * pseudo.accepted.astype(np.float64)) / len(labels)
