"""The training loop, per-epoch diagnostics, evaluation and run directories."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .. import __version__
from .. import diffcore as dc
from ..adaptation import (FeatureMemory, GenerativeClassifier, MixConfig, argmax_disagreement, gdc_loss,
                          generative_predict, mix_distribution, mix_instance, self_consistency_loss)
from ..diffcore import Tensor, no_grad
from ..flows import FlowModel, SplineSpec, flow_nll_loss, gaussian_fit, load_flow
from ..netmodel import (AugmentConfig, Network, augment, load_network, pseudo_label, source_ce_loss,
                        target_ce_loss, threshold)
from ..synthdata import Dataset, generate, inject_label_noise, load_csv
from .config import ConfigError, RunConfig


class NumericFailure(RuntimeError):
    def __init__(self, step: int, component: str, value: float):
        super().__init__(f"non-finite {component} ({value}) at step {step}")
        self.step, self.component, self.value = step, component, value


@dataclass
class MetricsRecord:
    epoch: int
    rhcp: float | None = None
    noise_level: float | None = None
    acc_p: float | None = None
    test_acc: float | None = None
    disagree_src: float | None = None
    disagree_tgt: float | None = None
    L_s: float | None = None
    L_u: float | None = None
    L_GDC: float | None = None
    L_NFlow: float | None = None


METRIC_FIELDS = [f.name for f in fields(MetricsRecord)]


def total_loss(l_s, l_u, l_gdc, lam: float):
    return l_s + l_u + lam * l_gdc


# ----------------------------------------------------------------------
# data


@dataclass
class TaskData:
    sources: list[tuple[Dataset, Dataset]]
    target: tuple[Dataset, Dataset]

    @property
    def num_classes(self) -> int:
        return self.target[0].num_classes

    @property
    def input_dim(self) -> int:
        return self.target[0].input_dim

    def all_datasets(self) -> list[Dataset]:
        return [d for pair in [*self.sources, self.target] for d in pair]


def build_task(cfg: RunConfig, seed: int) -> TaskData:
    data_seed = cfg.data_seed if cfg.data_seed is not None else seed
    if cfg.csv_path is not None:
        table = load_csv(cfg.csv_path)
        target_name = cfg.csv_target or table.domains[-1]
        if target_name not in table.domains:
            raise ConfigError(f"csv target domain {target_name!r} not in file")
        src = [(table.get(d, "train"), table.get(d, "test")) for d in table.domains if d != target_name]
        return TaskData(src, (table.get(target_name, "train"), table.get(target_name, "test")))
    specs, tspec = cfg.domain_specs()
    classes = {s.num_classes for s in [*specs, tspec]}
    if len(classes) != 1:
        raise ConfigError("all domains must share one label space")
    sources = []
    for k, spec in enumerate(specs):
        tr, te = generate(spec, 1000 * data_seed + k)
        if spec.label_noise_rate > 0:
            tr = inject_label_noise(tr, spec.label_noise_rate, 1000 * data_seed + 500 + k)
        sources.append((tr, te))
    target = generate(tspec, 1000 * data_seed + 999)
    return TaskData(sources, target)


class _Cycler:
    """Epoch-wise shuffled index stream over one dataset."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n, self.rng = n, rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self.pos >= self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            chunk = self.order[self.pos:self.pos + k]
            out.append(chunk)
            self.pos += len(chunk)
            k -= len(chunk)
        return np.concatenate(out)


# ----------------------------------------------------------------------
# trainer


class Trainer:
    """Owns the network, density models, memory and optimizers of one run.

    Target labels are never handed to the training path; only
    :meth:`diagnostics` reads them.
    """

    def __init__(self, cfg: RunConfig, data: TaskData, seed: int):
        self.cfg, self.data, self.seed = cfg, data, seed
        ss = np.random.SeedSequence(seed)
        init_ss, batch_ss, aug_ss, mix_ss, flow_ss = ss.spawn(5)
        self.rng_batch = np.random.default_rng(batch_ss)
        self.rng_aug = np.random.default_rng(aug_ss)
        self.rng_mix = np.random.default_rng(mix_ss)
        self.rng_flow = np.random.default_rng(flow_ss)
        init_rng = np.random.default_rng(init_ss)
        C = data.num_classes
        self.num_classes = C
        self.net = Network(data.input_dim, C, cfg.hidden, cfg.feature_dim, rng=init_rng)
        self.flow_init_rng = np.random.default_rng(init_ss.spawn(1)[0])
        self.memory = FeatureMemory(C, cfg.memory_capacity)
        self.aug = AugmentConfig(cfg.sigma_weak, cfg.sigma_strong, cfg.dropout_strong)
        self.mix_cfg = MixConfig(cfg.beta_a, cfg.beta_b, cfg.mix_mode, cfg.mix_apply_to)
        n_tgt = len(data.target[0])
        self.steps_per_epoch = cfg.steps_per_epoch or max(1, math.ceil(n_tgt / cfg.batch_size))
        total = self.steps_per_epoch * cfg.epochs
        self.opt = dc.Optimizer(self.net.parameters(), dc.OptimizerState(
            "sgd_momentum" if cfg.optimizer == "sgd" else "adam", cfg.lr,
            momentum=cfg.momentum if cfg.optimizer == "sgd" else 0.0,
            weight_decay=cfg.weight_decay, schedule=cfg.schedule, total_steps=total))
        self.src_cyclers = [_Cycler(len(tr), self.rng_batch) for tr, _ in data.sources]
        self.tgt_cycler = _Cycler(n_tgt, self.rng_batch)
        self.flows: dict[int, FlowModel] = {}
        self.flow_opts: dict[int, dc.Optimizer] = {}
        self.gaussians: dict = {}
        if cfg.uses_density and cfg.backend == "nflow":
            self._build_flows()
        self.step_count = 0
        self.epoch = 0

    def _build_flows(self) -> None:
        cfg = self.cfg
        spec = SplineSpec(num_bins=cfg.flow_bins, tail_bound=cfg.flow_tail_bound)
        self.flows = {c: FlowModel(cfg.feature_dim, c, self.flow_init_rng, n_blocks=cfg.flow_blocks,
                                   hidden=cfg.flow_hidden, coupling=cfg.flow_coupling, spline=spec)
                      for c in range(self.num_classes)}
        self.flow_opts = {c: dc.Optimizer(m.parameters(), dc.OptimizerState("adam", cfg.flow_lr))
                          for c, m in self.flows.items()}

    # density models -------------------------------------------------
    def density_models(self) -> dict:
        if self.cfg.backend == "nflow":
            return {c: m for c, m in self.flows.items() if m.initialized}
        return dict(self.gaussians)

    def generative_classifier(self) -> GenerativeClassifier | None:
        models = self.density_models()
        if not models:
            return None
        return GenerativeClassifier(models, self.num_classes)

    def _density_batch(self, pseudo, src_feats, src_labels):
        feats = [pseudo.features[pseudo.accepted]]
        labels = [pseudo.pseudo_label[pseudo.accepted]]
        if self.cfg.model_all_domains:
            feats.append(src_feats)
            labels.append(src_labels)
        return np.concatenate(feats), np.concatenate(labels)

    def _jitter(self, f: np.ndarray) -> np.ndarray:
        # bottleneck features of low-dimensional inputs sit on a thin manifold;
        # jitter keeps the fitted densities from collapsing onto it
        if self.cfg.flow_jitter <= 0:
            return f
        return f + self.cfg.flow_jitter * self.rng_flow.standard_normal(f.shape)

    def _flow_step(self, feats: np.ndarray, labels: np.ndarray) -> float | None:
        cfg = self.cfg
        rows_f, rows_y = [], []
        for c in range(self.num_classes):
            model = self.flows[c]
            live = feats[labels == c]
            if not model.initialized:
                if self.memory.size(c) < cfg.flow_min_init:
                    continue
                model.data_init(self._jitter(self.memory.features(c)))
            need = cfg.flow_batch - len(live)
            if need > 0 and self.memory.size(c):
                live = np.concatenate([live.reshape(-1, cfg.feature_dim),
                                       self.memory.sample(c, need, self.rng_flow)])
            rows_f.append(live)
            rows_y.append(np.full(len(live), c))
        if not rows_f:
            return None
        f, y = np.concatenate(rows_f), np.concatenate(rows_y)
        f = self._jitter(f)
        loss = flow_nll_loss(self.flows, f, y)
        if loss is None:
            return None
        self._check(loss, "L_NFlow")
        present = np.unique(y)
        for c in present:
            self.flow_opts[int(c)].zero_grad()
        loss.backward()
        for c in present:
            self.flow_opts[int(c)].step()
        return loss.item()

    def _refit_gaussians(self) -> None:
        for c in range(self.num_classes):
            feats = self.memory.features(c)
            if len(feats) >= 2:
                self.gaussians[c] = gaussian_fit(feats, c, noise_var=self.cfg.flow_jitter ** 2)

    def _check(self, t: Tensor, component: str) -> None:
        v = float(t.data)
        if not math.isfinite(v):
            raise NumericFailure(self.step_count, component, v)

    # one optimisation step ------------------------------------------
    def step(self) -> dict[str, float]:
        cfg = self.cfg
        active = self.epoch >= cfg.warmup_epochs
        xs, ys = [], []
        for (tr, _), cyc in zip(self.data.sources, self.src_cyclers):
            idx = cyc.take(cfg.batch_size)
            xs.append(tr.inputs[idx])
            ys.append(tr.labels[idx])
        xs, ys = np.concatenate(xs), np.concatenate(ys)
        xt = self.data.target[0].inputs[self.tgt_cycler.take(cfg.batch_size)]
        x_weak = augment(xt, "weak", self.rng_aug, self.aug)
        x_strong = augment(xt, "strong", self.rng_aug, self.aug)

        pseudo = pseudo_label(self.net, x_weak, cfg.tau)
        self.memory.update(pseudo, self.step_count)
        out = {}
        if cfg.uses_density:
            src_feats = self.net.embed(xs) if cfg.model_all_domains else None
            feats, labels = self._density_batch(pseudo, src_feats, ys)
            if cfg.model_all_domains:
                for f, c in zip(src_feats, ys):
                    self.memory.push(int(c), f, self.step_count)
            if cfg.backend == "nflow":
                nll = self._flow_step(feats, labels)
                if nll is not None:
                    out["L_NFlow"] = nll
            else:
                self._refit_gaussians()

        f_src = self.net.features(xs)
        f_tgt = self.net.features(x_strong)
        f_src_in, f_tgt_in = f_src, f_tgt
        mix_src = cfg.mix_apply_to in ("source", "both")
        mix_tgt = cfg.mix_apply_to in ("target", "both")
        if cfg.mix_mode == "instance":
            pool_f = dc.concat([f_src, f_tgt], axis=0)
            pool_y = np.concatenate([ys, pseudo.pseudo_label])
            pool_mask = np.concatenate([np.full(len(ys), mix_src), pseudo.accepted & mix_tgt])
            mixed = mix_instance(pool_f, pool_y, self.rng_mix, self.mix_cfg, memory=self.memory, mask=pool_mask)
            f_src_in, f_tgt_in = mixed[:len(ys)], mixed[len(ys):]
        elif cfg.mix_mode in ("gaussian_dcfa", "nflow_dcfa") and active:
            models = self.density_models()
            if models:
                if mix_src:
                    f_src_in = mix_distribution(f_src, ys, models, self.rng_mix, self.mix_cfg)
                if mix_tgt:
                    f_tgt_in = mix_distribution(f_tgt, pseudo.pseudo_label, models, self.rng_mix, self.mix_cfg,
                                                mask=pseudo.accepted)

        l_s = source_ce_loss(self.net.logits(f_src_in), ys)
        l_u = target_ce_loss(self.net.logits(f_tgt_in), pseudo)
        l_gdc = Tensor(0.0)
        if active and cfg.lambda_gdc > 0:
            f_gdc = f_tgt if cfg.gdc_view == "strong" else self.net.features(x_weak)
            p_disc = self.net.probs(f_gdc)
            if cfg.consistency == "self":
                l_gdc = self_consistency_loss(p_disc, cfg.smoothing)
            else:
                gc = self.generative_classifier()
                if gc is not None:
                    p_gen = generative_predict(gc, f_gdc.data)
                    l_gdc = gdc_loss(p_disc, p_gen, cfg.gdc_metric, cfg.gdc_subset)
        for name, t in (("L_s", l_s), ("L_u", l_u), ("L_GDC", l_gdc)):
            self._check(t, name)
        loss = total_loss(l_s, l_u, l_gdc, cfg.lambda_gdc)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        self.step_count += 1
        out.update(L_s=l_s.item(), L_u=l_u.item(), L_GDC=l_gdc.item())
        return out

    def run_epoch(self) -> dict[str, float]:
        cfg = self.cfg
        if cfg.flow_reset_epochs and self.flows and self.epoch > 0 and self.epoch % cfg.flow_reset_epochs == 0:
            self._build_flows()
        sums: dict[str, list[float]] = {}
        for _ in range(self.steps_per_epoch):
            for k, v in self.step().items():
                sums.setdefault(k, []).append(v)
        self.epoch += 1
        return {k: float(np.mean(v)) for k, v in sums.items()}

    # diagnostics (read-only; consumes no randomness) ------------------
    def diagnostics(self, target_labels_visible: bool = True) -> dict[str, float | None]:
        return compute_diagnostics(self.net, self.generative_classifier(), self.data, self.cfg.tau,
                                   target_labels_visible)


def compute_diagnostics(net: Network, gc: GenerativeClassifier | None, data: TaskData, tau: float,
                        target_labels_visible: bool = True) -> dict[str, float | None]:
    """Pseudo-label quality on target train plus test accuracy and disagreement."""
    tgt_tr, tgt_te = data.target
    probs = net.predict_proba(tgt_tr.inputs)
    pred, accepted = threshold(probs, tau)
    out: dict[str, float | None] = {"rhcp": float(accepted.mean()), "noise_level": None, "acc_p": None,
                                    "test_acc": None, "disagree_src": None, "disagree_tgt": None}
    if target_labels_visible and np.all(tgt_tr.labels >= 0):
        y = tgt_tr.labels
        out["acc_p"] = float(np.mean(pred == y))
        if accepted.any():
            out["noise_level"] = float(np.mean(pred[accepted] != y[accepted]))
    if target_labels_visible and np.all(tgt_te.labels >= 0):
        out["test_acc"] = float(np.mean(net.predict(tgt_te.inputs) == tgt_te.labels))
    if gc is not None:
        x_src = np.concatenate([tr.inputs for tr, _ in data.sources])
        out["disagree_src"] = _disagree(net, gc, x_src)
        out["disagree_tgt"] = _disagree(net, gc, tgt_tr.inputs)
    return out


def _disagree(net, gc, x) -> float:
    with no_grad():
        f = net.features(x)
        p_disc = net.probs(f).data
    return argmax_disagreement(p_disc, generative_predict(gc, f.data))


# ----------------------------------------------------------------------
# run directories


def _fmt(v) -> str:
    return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)


def metrics_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
    return buf.getvalue()


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (None if v == "" else int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


@dataclass
class RunResult:
    run_dir: Path
    records: list[MetricsRecord]
    summary: dict

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def train(cfg: RunConfig, out_dir, seed: int | None = None, data: TaskData | None = None,
          trainer_hook=None) -> RunResult:
    """Train one seed and write ``metrics.csv``, ``summary.json``,
    ``manifest.json`` and checkpoints into ``out_dir``.

    Raises :class:`NumericFailure` (after writing what was recorded) when a
    loss becomes non-finite.
    """
    seed = cfg.seeds[0] if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data if data is not None else build_task(cfg, seed)
    visible = not cfg.redact_target_labels
    train_data = data
    if not visible:
        train_data = TaskData(data.sources, (data.target[0].redacted(), data.target[1].redacted()))
    trainer = Trainer(cfg, train_data, seed)
    manifest = {
        "package_version": __version__,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seed": seed,
        "rng": "numpy.PCG64 via SeedSequence(seed).spawn",
        "datasets": {f"{d.domain}/{d.split}": d.checksum() for d in data.all_datasets()},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    records: list[MetricsRecord] = []
    failure = None
    try:
        for epoch in range(cfg.epochs):
            losses = trainer.run_epoch()
            diag = trainer.diagnostics(visible)
            records.append(MetricsRecord(epoch=epoch, **diag, **{k: losses.get(k) for k in
                                                                 ("L_s", "L_u", "L_GDC", "L_NFlow")}))
            if trainer_hook is not None:
                trainer_hook(trainer, records[-1])
    except NumericFailure as exc:
        failure = exc
    (out / "metrics.csv").write_text(metrics_csv(records), encoding="utf-8")
    save_checkpoints(trainer, out)
    summary = {
        "seed": seed,
        "config_hash": cfg.hash(),
        "epochs_completed": len(records),
        "final": asdict(records[-1]) if records else None,
        "warmup": asdict(records[cfg.warmup_epochs - 1]) if 0 < cfg.warmup_epochs <= len(records) else None,
        "failure": None if failure is None else {"step": failure.step, "component": failure.component,
                                                 "value": repr(failure.value)},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    if failure is not None:
        raise failure
    return RunResult(out, records, summary)


def save_checkpoints(trainer: Trainer, out: Path) -> None:
    (out / "network.ckpt").write_bytes(trainer.net.to_bytes())
    for c, m in trainer.flows.items():
        (out / f"flow_{c}.ckpt").write_bytes(m.to_bytes())


def load_run(run_dir) -> RunResult:
    run_dir = Path(run_dir)
    rows = read_metrics(run_dir / "metrics.csv")
    records = [MetricsRecord(**r) for r in rows]
    summary = json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))
    return RunResult(run_dir, records, summary)


def train_cached(cfg: RunConfig, run_dir, seed: int) -> RunResult:
    """Reuse ``run_dir`` when it already holds a completed run of this config and seed."""
    run_dir = Path(run_dir)
    summary_path = run_dir / "summary.json"
    if summary_path.exists():
        s = json.loads(summary_path.read_text(encoding="utf-8"))
        if s.get("config_hash") == cfg.hash() and s.get("seed") == seed and s.get("failure") is None \
                and s.get("epochs_completed") == cfg.epochs:
            return load_run(run_dir)
    return train(cfg, run_dir, seed)


def rerun_from_manifest(manifest_path, out_dir) -> RunResult:
    manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(manifest["config"])
    seed = manifest["seed"]
    data = build_task(cfg, seed)
    got = {f"{d.domain}/{d.split}": d.checksum() for d in data.all_datasets()}
    if got != manifest["datasets"]:
        raise ConfigError("regenerated datasets do not match the manifest checksums")
    return train(cfg, out_dir, seed, data=data)


# ----------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist()}


def evaluate(net: Network | str | Path, dataset: Dataset) -> Evaluation:
    """Accuracy and confusion counts (rows: true class, columns: predicted)."""
    if not isinstance(net, Network):
        net = load_network(net)
    if dataset.input_dim != net.input_dim:
        raise dc.ShapeError(f"checkpoint expects input dim {net.input_dim}, dataset has {dataset.input_dim}")
    C = max(net.num_classes, dataset.num_classes)
    conf = np.zeros((C, C), dtype=np.int64)
    if len(dataset):
        pred = net.predict(dataset.inputs)
        np.add.at(conf, (dataset.labels, pred), 1)
    acc = float(np.trace(conf) / len(dataset)) if len(dataset) else 0.0
    return Evaluation(acc, conf)


def load_flows(run_dir) -> dict[int, FlowModel]:
    out = {}
    for p in sorted(Path(run_dir).glob("flow_*.ckpt")):
        m = load_flow(p)
        out[m.class_id] = m
    return out
