"""Run configuration: one flat JSON document whose keys are the field names."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..adaptation import APPLY_TO, GDC_METRICS, GDC_SUBSETS, MIX_MODES
from ..synthdata import DomainSpec


class ConfigError(ValueError):
    pass


def _moons(name: str, rotation: float, **kw) -> dict:
    return DomainSpec(name=name, generator="two_moons", rotation=rotation, **kw).to_dict()


def _blobs(name: str, rotation: float, **kw) -> dict:
    return DomainSpec(name=name, generator="gaussian_blobs", rotation=rotation, num_classes=4, **kw).to_dict()


# sources at 0/15/30 degrees, target at 60
TASKS: dict[str, dict[str, Any]] = {
    "msda_moons": {
        "sources": [_moons(f"src{r}", r, noise_sigma=0.1, n_train=256, n_test=256) for r in (0, 15, 30)],
        "target": _moons("tgt60", 60, noise_sigma=0.1, n_train=256, n_test=512),
    },
    "msda_blobs": {
        "sources": [_blobs(f"src{r}", r, noise_sigma=0.05, n_train=256, n_test=256) for r in (0, 15, 30)],
        "target": _blobs("tgt60", 60, noise_sigma=0.05, n_train=256, n_test=512),
    },
}

# image-benchmark settings, kept for reference runs at other scales
PRESETS: dict[str, dict[str, Any]] = {
    "digit_five": {"optimizer": "sgd", "lr": 0.05, "schedule": "cosine", "epochs": 30, "batch_size": 64, "tau": 0.75},
    "office_home": {"optimizer": "sgd", "lr": 0.001, "epochs": 100, "batch_size": 32, "tau": 0.95},
    "pacs": {"optimizer": "adam", "lr": 5e-4, "epochs": 100, "batch_size": 16, "tau": 0.95},
}


@dataclass
class RunConfig:
    # data
    task: str = "msda_moons"
    sources: list | None = None
    target: dict | None = None
    csv_path: str | None = None
    csv_target: str | None = None
    data_seed: int | None = None
    # network
    hidden: list = field(default_factory=lambda: [64, 64])
    feature_dim: int = 8
    # optimization
    optimizer: str = "adam"
    lr: float = 2e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    schedule: str = "constant"
    epochs: int = 30
    batch_size: int = 64
    steps_per_epoch: int | None = 10
    # pseudo-labelling and input perturbation
    tau: float = 0.95
    sigma_weak: float = 0.02
    sigma_strong: float = 0.1
    dropout_strong: float = 0.1
    # feature mixing and consistency
    mix_mode: str = "nflow_dcfa"
    mix_apply_to: str = "both"
    beta_a: float = 0.1
    beta_b: float = 0.1
    lambda_gdc: float = 0.5
    gdc_metric: str = "l2"
    gdc_subset: str = "all"
    consistency: str = "generative"
    gdc_view: str = "weak"
    smoothing: float = 0.1
    warmup_epochs: int = 10
    memory_capacity: int = 256
    model_all_domains: bool = False
    generative_backend: str = "auto"
    # density models
    flow_blocks: int = 3
    flow_bins: int = 8
    flow_tail_bound: float = 5.0
    flow_hidden: int = 32
    flow_coupling: str = "spline"
    flow_lr: float = 5e-3
    flow_batch: int = 64
    flow_min_init: int = 32
    flow_jitter: float = 1.0
    flow_reset_epochs: int | None = None
    # bookkeeping
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    redact_target_labels: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(0.0 < self.tau < 1.0, "tau must lie in (0, 1)")
        need(self.lambda_gdc >= 0.0, "lambda_gdc must be >= 0")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(0 <= self.warmup_epochs < self.epochs, "warmup_epochs must be < epochs")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        need(self.lr > 0 and self.flow_lr > 0, "learning rates must be positive")
        need(self.optimizer in ("adam", "sgd"), f"unknown optimizer {self.optimizer!r}")
        need(self.schedule in ("constant", "cosine"), f"unknown schedule {self.schedule!r}")
        need(self.mix_mode in MIX_MODES, f"unknown mix_mode {self.mix_mode!r}")
        need(self.mix_apply_to in APPLY_TO, f"unknown mix_apply_to {self.mix_apply_to!r}")
        need(self.gdc_metric in GDC_METRICS, f"unknown gdc_metric {self.gdc_metric!r}")
        need(self.gdc_subset in GDC_SUBSETS, f"unknown gdc_subset {self.gdc_subset!r}")
        need(self.consistency in ("generative", "self"), f"unknown consistency {self.consistency!r}")
        need(self.gdc_view in ("weak", "strong"), f"unknown gdc_view {self.gdc_view!r}")
        need(self.generative_backend in ("auto", "nflow", "gaussian"),
             f"unknown generative_backend {self.generative_backend!r}")
        need(self.flow_coupling in ("spline", "affine"), f"unknown flow_coupling {self.flow_coupling!r}")
        need(self.beta_a > 0 and self.beta_b > 0, "Beta parameters must be positive")
        need(self.flow_jitter >= 0.0, "flow_jitter must be >= 0")
        need(self.memory_capacity >= 1, "memory_capacity must be >= 1")
        need(0.0 <= self.smoothing < 1.0, "smoothing must lie in [0, 1)")
        need(self.feature_dim >= 2, "feature_dim must be >= 2")
        need(len(self.seeds) >= 1, "seeds must be non-empty")
        if self.csv_path is None and self.sources is None:
            need(self.task in TASKS, f"unknown task {self.task!r}")
        if self.sources is not None:
            need(self.target is not None, "explicit sources need an explicit target")
            try:
                for spec in [*self.sources, self.target]:
                    DomainSpec.from_dict(spec)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bad domain spec: {exc}") from None

    # derived ----------------------------------------------------------
    @property
    def backend(self) -> str:
        if self.generative_backend != "auto":
            return self.generative_backend
        return "gaussian" if self.mix_mode == "gaussian_dcfa" else "nflow"

    @property
    def uses_density(self) -> bool:
        dist_mix = self.mix_mode in ("gaussian_dcfa", "nflow_dcfa")
        gdc = self.lambda_gdc > 0 and self.consistency == "generative"
        # lambda = 0 with a distribution mix still trains the models, so
        # disagreement can be tracked against the same run with GDC on
        return dist_mix or gdc

    def domain_specs(self) -> tuple[list[DomainSpec], DomainSpec]:
        if self.sources is not None:
            return [DomainSpec.from_dict(s) for s in self.sources], DomainSpec.from_dict(self.target)
        task = TASKS[self.task]
        return [DomainSpec.from_dict(s) for s in task["sources"]], DomainSpec.from_dict(task["target"])

    # io ---------------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def with_overrides(self, overrides: dict) -> RunConfig:
        check_keys(overrides)
        return RunConfig.from_dict({**self.to_dict(), **overrides})

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        d = dict(d)
        preset = d.pop("preset", None)
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown preset {preset!r}")
            d = {**PRESETS[preset], **d}
        check_keys(d)
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def load(cls, path) -> RunConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


FIELD_NAMES = frozenset(f.name for f in dataclasses.fields(RunConfig))


def check_keys(overrides: dict) -> None:
    unknown = sorted(set(overrides) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
