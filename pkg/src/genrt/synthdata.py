"""Synthetic multi-domain classification tasks and CSV ingestion.

All randomness comes from numpy's ``PCG64`` bit generator seeded with the
integer seed passed to :func:`generate`, so datasets are reproducible across
runs and platforms.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

GENERATORS = ("two_moons", "gaussian_blobs")
SPLITS = ("train", "test")


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass(frozen=True)
class DomainSpec:
    name: str = "domain"
    generator: str = "two_moons"
    rotation: float = 0.0
    translation: tuple[float, ...] = (0.0, 0.0)
    scale: float = 1.0
    noise_sigma: float = 0.1
    n_train: int = 256
    n_test: int = 256
    label_noise_rate: float = 0.0
    num_classes: int = 2

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}")
        if self.n_train <= 0 or self.n_test <= 0:
            raise ValueError("n_train and n_test must be positive")
        if self.generator == "two_moons" and self.num_classes != 2:
            raise ValueError("two_moons has exactly 2 classes")
        if self.scale == 0:
            raise ValueError("scale must be nonzero")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @classmethod
    def from_dict(cls, d: dict) -> DomainSpec:
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["translation"] = list(self.translation)
        return out


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    domain: str = "domain"
    split: str = "train"
    num_classes: int = 2
    flip_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.labels):
            raise ValueError("inputs must be (N, D) with one label per row")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        return h.hexdigest()

    def redacted(self) -> Dataset:
        """Copy with labels replaced by -1 (what training code may see)."""
        return replace(self, labels=np.full(len(self), -1), flip_mask=None)

    def equals(self, other: Dataset) -> bool:
        return (self.domain == other.domain and self.split == other.split
                and np.array_equal(self.inputs, other.inputs) and np.array_equal(self.labels, other.labels))


# ----------------------------------------------------------------------
# generators


def _balanced_labels(n: int, C: int) -> np.ndarray:
    return np.arange(n) % C


def _two_moons(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    t = rng.uniform(0.0, math.pi, size=len(labels))
    upper = np.stack([np.cos(t), np.sin(t)], axis=1)
    lower = np.stack([1.0 - np.cos(t), 0.5 - np.sin(t)], axis=1)
    return np.where(labels[:, None] == 0, upper, lower)


def _blob_centers(C: int, radius: float = 2.5) -> np.ndarray:
    ang = 2.0 * math.pi * np.arange(C) / C + math.pi / 4
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _gaussian_blobs(labels: np.ndarray, C: int, rng: np.random.Generator) -> np.ndarray:
    centers = _blob_centers(C)
    # elongated along the tangent of the ring, so rotation genuinely moves mass across boundaries
    ang = 2.0 * math.pi * labels / C + math.pi / 4 + math.pi / 2
    tangent = np.stack([np.cos(ang), np.sin(ang)], axis=1)
    normal = np.stack([-tangent[:, 1], tangent[:, 0]], axis=1)
    a = rng.standard_normal(len(labels)) * 0.9
    b = rng.standard_normal(len(labels)) * 0.35
    return centers[labels] + a[:, None] * tangent + b[:, None] * normal


def rotation_matrix(degrees: float) -> np.ndarray:
    th = math.radians(degrees % 360.0)
    c, s = math.cos(th), math.sin(th)
    return np.array([[c, -s], [s, c]])


def generate(spec: DomainSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Train and test splits of one domain.  Classes are balanced within 1."""
    rng = make_rng(seed)
    C = spec.num_classes
    labels = np.concatenate([rng.permutation(_balanced_labels(spec.n_train, C)),
                             rng.permutation(_balanced_labels(spec.n_test, C))])
    if spec.generator == "two_moons":
        clean = _two_moons(labels, rng)
    else:
        clean = _gaussian_blobs(labels, spec.num_classes, rng)
    noisy = clean + spec.noise_sigma * rng.standard_normal(clean.shape)
    # rotate about the centroid of the noiseless shape so a domain's geometry,
    # not its sample, sets the pivot
    centroid = clean.mean(axis=0)
    pts = (noisy - centroid) @ rotation_matrix(spec.rotation).T * spec.scale + centroid
    t = np.zeros(2)
    t[: len(spec.translation)] = spec.translation[:2]
    pts = pts + t
    tr = Dataset(pts[: spec.n_train], labels[: spec.n_train], spec.name, "train", C)
    te = Dataset(pts[spec.n_train:], labels[spec.n_train:], spec.name, "test", C)
    return tr, te


def inject_label_noise(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Flip exactly ``round(rate * N)`` labels, each to a different random class."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError("noise rate must lie in [0, 1]")
    rng = make_rng(seed)
    n = len(ds)
    k = int(round(rate * n))
    idx = rng.choice(n, size=k, replace=False)
    labels = ds.labels.copy()
    labels[idx] = (labels[idx] + rng.integers(1, ds.num_classes, size=k)) % ds.num_classes
    mask = np.zeros(n, dtype=bool)
    mask[idx] = True
    return replace(ds, labels=labels, flip_mask=mask)


# ----------------------------------------------------------------------
# CSV


class CsvFormatError(ValueError):
    pass


@dataclass
class CsvTable:
    datasets: list[Dataset]
    label_map: dict[str, int]
    feature_names: list[str]

    def get(self, domain: str, split: str) -> Dataset:
        for ds in self.datasets:
            if ds.domain == domain and ds.split == split:
                return ds
        raise KeyError(f"no rows for domain={domain!r} split={split!r}")

    @property
    def domains(self) -> list[str]:
        seen: list[str] = []
        for ds in self.datasets:
            if ds.domain not in seen:
                seen.append(ds.domain)
        return seen


def write_csv(datasets, path, feature_names=None) -> None:
    datasets = list(datasets)
    dim = datasets[0].input_dim
    names = list(feature_names) if feature_names else [f"x{i}" for i in range(dim)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([*names, "label", "domain", "split"])
        for ds in datasets:
            for row, y in zip(ds.inputs, ds.labels):
                w.writerow([repr(float(v)) for v in row] + [int(y), ds.domain, ds.split])


def _label_key(raw: str):
    try:
        return (0, float(raw), raw)
    except ValueError:
        return (1, 0.0, raw)


def load_csv(path, feature_columns=None) -> CsvTable:
    """Read ``feature..., label, domain, split`` rows.

    Labels are re-indexed densely (numeric order when numeric) and the map
    from original label text to index is returned alongside the datasets.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CsvFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if len(header) < 4 or header[-3:] != ["label", "domain", "split"]:
        raise CsvFormatError(f"{path}:1: header must end with label,domain,split")
    feats = header[:-3]
    if feature_columns is not None and list(feature_columns) != feats:
        raise CsvFormatError(f"{path}:1: feature columns {feats} != expected {list(feature_columns)}")
    groups: dict[tuple[str, str], tuple[list, list]] = {}
    raw_labels: list[str] = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise CsvFormatError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            x = [float(v) for v in row[: len(feats)]]
        except ValueError:
            raise CsvFormatError(f"{path}:{lineno}: non-numeric feature value") from None
        label, domain, split = row[-3].strip(), row[-2].strip(), row[-1].strip()
        if split not in SPLITS:
            raise CsvFormatError(f"{path}:{lineno}: unknown split {split!r}")
        g = groups.setdefault((domain, split), ([], []))
        g[0].append(x)
        g[1].append(label)
        raw_labels.append(label)
    if not groups:
        raise CsvFormatError(f"{path}: no data rows")
    uniq = sorted(set(raw_labels), key=_label_key)
    label_map = {lab: i for i, lab in enumerate(uniq)}
    C = len(uniq)
    datasets = [
        Dataset(np.array(xs).reshape(len(xs), len(feats)), np.array([label_map[l] for l in ls]), dom, split, C)
        for (dom, split), (xs, ls) in groups.items()
    ]
    return CsvTable(datasets, label_map, feats)


def dataset_manifest(specs, seed: int, datasets) -> dict:
    return {
        "rng": "numpy.PCG64",
        "seed": seed,
        "specs": [s.to_dict() for s in specs],
        "checksums": {f"{d.domain}/{d.split}": d.checksum() for d in datasets},
    }


def write_manifest(manifest: dict, path) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
