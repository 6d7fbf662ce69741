"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from ..netmodel import load_network
from ..synthdata import CsvFormatError, DomainSpec, dataset_manifest, generate, load_csv, write_csv, write_manifest
from .config import TASKS, ConfigError, RunConfig
from .experiments import NOISE_MATRIX, TABLE_MATRIX, ablate, sweep_lambda
from .plots import line_svg, plot_features
from .train import NumericFailure, build_task, evaluate, read_metrics, rerun_from_manifest, train

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


def _config(args) -> RunConfig:
    base = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            over[key] = json.loads(raw)
        except json.JSONDecodeError:
            over[key] = raw
    return base.with_overrides(over) if over else base


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.spec:
        specs = [DomainSpec.from_dict(d) for d in json.loads(Path(args.spec).read_text(encoding="utf-8"))]
    else:
        task = TASKS[args.task] if args.task in TASKS else None
        if task is None:
            raise ConfigError(f"unknown task {args.task!r}")
        specs = [DomainSpec.from_dict(d) for d in [*task["sources"], task["target"]]]
    datasets = []
    for k, spec in enumerate(specs):
        datasets.extend(generate(spec, 1000 * args.seed + (999 if k == len(specs) - 1 and not args.spec else k)))
    write_csv(datasets, out / "data.csv")
    write_manifest(dataset_manifest(specs, args.seed, datasets), out / "manifest.json")
    print(f"wrote {sum(len(d) for d in datasets)} rows to {out / 'data.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.manifest:
        res = rerun_from_manifest(args.manifest, args.out)
    else:
        cfg = _config(args)
        res = train(cfg, args.out, args.seed)
    f = res.final
    print(f"epochs={len(res.records)} test_acc={f.test_acc} noise_level={f.noise_level} rhcp={f.rhcp:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    net = load_network(args.checkpoint)
    if args.csv:
        table = load_csv(args.csv)
        ds = table.get(args.domain or table.domains[-1], args.split)
    else:
        cfg = _config(args)
        data = build_task(cfg, args.seed)
        ds = data.target[1] if args.split == "test" else data.target[0]
    ev = evaluate(net, ds)
    print(json.dumps(ev.to_dict()))
    return EXIT_OK


def _matrix(args):
    if args.matrix in ("table", "noise"):
        return TABLE_MATRIX if args.matrix == "table" else NOISE_MATRIX
    if args.matrix is None:
        return []
    return json.loads(Path(args.matrix).read_text(encoding="utf-8"))


def cmd_ablate(args) -> int:
    cfg = _config(args)
    try:
        matrix = _matrix(args)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read matrix: {exc}") from None
    table = ablate(cfg, matrix, args.out, seeds=args.seeds, workers=args.workers)
    _print_summary(table.summary())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    table = sweep_lambda(cfg, args.values, args.out, seeds=args.seeds, workers=args.workers)
    _print_summary(table.summary())
    return EXIT_OK


def _print_summary(summary) -> None:
    for s in summary:
        acc = "-" if s["test_acc_mean"] is None else f"{s['test_acc_mean']:.4f}±{s['test_acc_std']:.4f}"
        noise = "-" if s["noise_level_mean"] is None else f"{s['noise_level_mean']:.4f}"
        print(f"{s['variant']:<20} test_acc={acc} noise_level={noise} n={s['n_seeds']}")


def cmd_plot(args) -> int:
    run = Path(args.run)
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    manifest = json.loads((run / "manifest.json").read_text(encoding="utf-8"))
    cfg = RunConfig.from_dict(manifest["config"])
    data = build_task(cfg, manifest["seed"])
    net = load_network(run / "network.ckpt")
    plot_features(net, [tr for tr, _ in data.sources] + [data.target[0]], out / "features.svg")
    rows = read_metrics(run / "metrics.csv")
    epochs = [r["epoch"] for r in rows]
    series = {k: (epochs, [float("nan") if r[k] is None else r[k] for r in rows])
              for k in ("test_acc", "noise_level", "rhcp", "disagree_tgt")}
    (out / "metrics.svg").write_text(line_svg(series, title="training curves", xlabel="epoch"), encoding="utf-8")
    print(f"wrote {out / 'features.svg'} and {out / 'metrics.svg'}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.path)
    if path.is_dir() and (path / "summary.json").exists():
        summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
        final = summary.get("final") or {}
        for k in ("epoch", "rhcp", "noise_level", "acc_p", "test_acc", "disagree_src", "disagree_tgt"):
            print(f"{k:<14} {final.get(k)}")
        if summary.get("failure"):
            print(f"failure        {summary['failure']}")
        return EXIT_OK
    tables = sorted(path.glob("*.json")) if path.is_dir() else [path]
    for t in tables:
        doc = json.loads(t.read_text(encoding="utf-8"))
        if "summary" in doc:
            print(f"# {t.name}")
            _print_summary(doc["summary"])
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="genrt", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON file with RunConfig fields")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one field (JSON value)")

    sp = sub.add_parser("synth", help="write a synthetic task as CSV plus manifest")
    sp.add_argument("--task", default="msda_moons")
    sp.add_argument("--spec", help="JSON list of domain specs instead of a named task")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one seed")
    with_config(sp)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--manifest", help="re-run exactly what a manifest.json records")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="accuracy and confusion of a network checkpoint")
    with_config(sp)
    sp.add_argument("checkpoint")
    sp.add_argument("--csv")
    sp.add_argument("--domain")
    sp.add_argument("--split", choices=("train", "test"), default="test")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_eval)

    for name, func, helptext in (("ablate", cmd_ablate, "run a variant matrix over seeds"),
                                 ("sweep", cmd_sweep, "sweep the GDC weight")):
        sp = sub.add_parser(name, help=helptext)
        with_config(sp)
        if name == "ablate":
            sp.add_argument("--matrix", help="JSON file, or 'table' / 'noise' for the built-in grids")
        else:
            sp.add_argument("--values", type=float, nargs="+", default=[0.0, 0.1, 0.3, 0.5, 0.7, 1.0])
        sp.add_argument("--seeds", type=int, nargs="+")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("plot", help="feature scatter and training curves of a run directory")
    sp.add_argument("run")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_plot)

    sp = sub.add_parser("report", help="print a run summary or ablation tables")
    sp.add_argument("path")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CsvFormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
