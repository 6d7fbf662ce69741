"""Ablation matrices and the GDC-weight sweep, built on cached single-seed runs."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, check_keys
from .plots import line_svg
from .train import train_cached

FINAL_FIELDS = ("rhcp", "noise_level", "acc_p", "test_acc", "disagree_src", "disagree_tgt")
ROW_FIELDS = ("variant", "seed", *FINAL_FIELDS, "disagree_tgt_warmup", "config_hash")


@dataclass
class Variant:
    name: str
    overrides: dict = field(default_factory=dict)


def parse_matrix(matrix) -> list[Variant]:
    """Accept ``[{"name": ..., <field>: value, ...}]``, ``[(name, overrides)]`` or ``{name: overrides}``.

    Unknown keys and duplicate names raise :class:`ConfigError` before anything runs.
    """
    if isinstance(matrix, dict):
        items = [Variant(str(k), dict(v)) for k, v in matrix.items()]
    else:
        items = []
        for entry in matrix:
            if isinstance(entry, Variant):
                items.append(entry)
            elif isinstance(entry, dict):
                entry = dict(entry)
                if "name" not in entry:
                    raise ConfigError("every matrix entry needs a name")
                name = str(entry.pop("name"))
                items.append(Variant(name, entry.pop("overrides", entry)))
            else:
                name, over = entry
                items.append(Variant(str(name), dict(over)))
    seen = set()
    for v in items:
        if v.name in seen:
            raise ConfigError(f"duplicate variant name {v.name!r}")
        seen.add(v.name)
        check_keys(v.overrides)
    return items


def _run_one(job) -> dict:
    name, cfg_dict, seed, run_dir = job
    cfg = RunConfig.from_dict(cfg_dict)
    res = train_cached(cfg, run_dir, seed)
    final = res.final
    row = {"variant": name, "seed": seed, "config_hash": cfg.hash()}
    for k in FINAL_FIELDS:
        row[k] = getattr(final, k)
    w = cfg.warmup_epochs - 1
    row["disagree_tgt_warmup"] = res.records[w].disagree_tgt if 0 <= w < len(res.records) else None
    return row


def _stats(values) -> tuple[float | None, float | None, int]:
    v = np.array([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    if not len(v):
        return None, None, 0
    return float(v.mean()), float(v.std()), len(v)


@dataclass
class ComparisonTable:
    rows: list[dict]
    variants: list[str]
    seeds: list[int]

    def summary(self) -> list[dict]:
        out = []
        for name in self.variants:
            mine = [r for r in self.rows if r["variant"] == name]
            entry = {"variant": name, "n_seeds": len(mine)}
            for k in (*FINAL_FIELDS, "disagree_tgt_warmup"):
                mean, std, n = _stats(r[k] for r in mine)
                entry[f"{k}_mean"], entry[f"{k}_std"] = mean, std
                entry[f"{k}_n"] = n
            out.append(entry)
        return out

    def values(self, variant: str, key: str) -> np.ndarray:
        """Per-seed values in seed order (NaN where absent)."""
        by_seed = {r["seed"]: r[key] for r in self.rows if r["variant"] == variant}
        return np.array([np.nan if by_seed.get(s) is None else by_seed[s] for s in self.seeds], dtype=np.float64)

    def mean(self, variant: str, key: str) -> float:
        return float(np.nanmean(self.values(variant, key)))

    def std(self, variant: str, key: str) -> float:
        return float(np.nanstd(self.values(variant, key)))

    def to_json(self) -> dict:
        return {"seeds": self.seeds, "variants": self.variants, "rows": self.rows, "summary": self.summary()}

    def write(self, out_dir, stem: str = "ablation") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROW_FIELDS)
            for r in self.rows:
                w.writerow(["" if r[k] is None else r[k] for k in ROW_FIELDS])
            w.writerow([])
            keys = list(self.summary()[0]) if self.variants else ["variant"]
            w.writerow(keys)
            for s in self.summary():
                w.writerow(["" if s[k] is None else s[k] for k in keys])
        json_path.write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")
        return csv_path, json_path


def ablate(base: RunConfig, matrix, out_dir, seeds=None, workers: int = 1, stem: str = "ablation") -> ComparisonTable:
    """Run every variant over one shared seed list and write ``<stem>.csv`` / ``<stem>.json``.

    An empty matrix runs the base config alone as variant ``base``.  Finished
    runs found under ``out_dir/runs`` with a matching config hash are reused.
    """
    variants = parse_matrix(matrix)
    if not variants:
        variants = [Variant("base", {})]
    seeds = list(base.seeds if seeds is None else seeds)
    configs = {v.name: base.with_overrides(v.overrides) for v in variants}
    out = Path(out_dir)
    jobs = [(v.name, configs[v.name].to_dict(), s, str(out / "runs" / _slug(v.name) / f"seed{s}"))
            for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_run_one, jobs))
    else:
        rows = [_run_one(j) for j in jobs]
    table = ComparisonTable(rows, [v.name for v in variants], seeds)
    table.write(out, stem)
    return table


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)


def lambda_name(value: float) -> str:
    return f"lambda={value:g}"


def sweep_lambda(base: RunConfig, values, out_dir, seeds=None, workers: int = 1) -> ComparisonTable:
    """Mean target test accuracy per GDC weight, plus ``lambda_sweep.svg``."""
    values = [float(v) for v in values]
    if not values:
        raise ConfigError("sweep needs at least one lambda value")
    if any(v < 0 for v in values):
        raise ConfigError("lambda values must be >= 0")
    matrix = [Variant(lambda_name(v), {"lambda_gdc": v}) for v in values]
    table = ablate(base, matrix, out_dir, seeds=seeds, workers=workers, stem="lambda_sweep")
    means = [table.mean(lambda_name(v), "test_acc") for v in values]
    order = np.argsort(values, kind="stable")
    svg = line_svg({"test accuracy": ([values[i] for i in order], [means[i] for i in order])},
                   title="GDC weight sweep", xlabel="lambda", ylabel="mean target test accuracy")
    (Path(out_dir) / "lambda_sweep.svg").write_text(svg, encoding="utf-8")
    return table


# variants mirroring the component ablation grid
TABLE_MATRIX = [
    Variant("baseline", {"mix_mode": "none", "lambda_gdc": 0.0}),
    Variant("instance", {"mix_mode": "instance", "lambda_gdc": 0.0}),
    Variant("gaussian+gdc", {"mix_mode": "gaussian_dcfa"}),
    Variant("nflow+gdc", {"mix_mode": "nflow_dcfa"}),
]

NOISE_MATRIX = [
    Variant("baseline", {"mix_mode": "none", "lambda_gdc": 0.0}),
    Variant("dcfa", {"mix_mode": "nflow_dcfa", "lambda_gdc": 0.0}),
    Variant("dcfa+gdc", {"mix_mode": "nflow_dcfa"}),
]
