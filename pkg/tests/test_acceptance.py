"""Acceptance criteria, one test each, printing one PASS/FAIL line per criterion.

Run under pytest (the lines are repeated in the terminal summary) or directly:
``python tests/test_acceptance.py``.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from genrt import diffcore as dc
from genrt.adaptation import (GenerativeClassifier, MixConfig, draw_alpha, gdc_loss, generative_predict,
                              mix_distribution, mix_instance, posterior_from_loglik)
from genrt.diffcore import Tensor
from genrt.flows import FlowModel, flow_nll_loss, train_flow
from genrt.harness.config import RunConfig
from genrt.harness.experiments import ablate
from genrt.harness.train import rerun_from_manifest, train
from genrt.netmodel import Network, PseudoBatch, source_ce_loss, target_ce_loss, threshold

sys.path.insert(0, str(Path(__file__).parent))
from conftest import ACCEPTANCE_LINES  # noqa: E402
from flowutil import fd_logdet, grid_mass, random_flow  # noqa: E402
from gradcheck import check_grads  # noqa: E402

SEEDS = list(range(10))


def report(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1

def test_criterion_01_flow_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    inv_err, trials = 0.0, 0
    for _ in range(1000):
        d = int(rng.integers(2, 7))
        m = random_flow(d, rng)
        x = rng.uniform(-5, 5, size=(1, d))
        with dc.no_grad():
            z = m.transform(Tensor(x))[0].data
        inv_err = max(inv_err, float(np.max(np.abs(m.inverse(z) - x))))
        trials += 1
    ld_err = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 5))
        m = random_flow(d, rng)
        x = rng.uniform(-3, 3, size=d)
        with dc.no_grad():
            ld = float(m.transform(Tensor(x[None]))[1].data[0])
        fd = fd_logdet(m, x)
        ld_err = max(ld_err, abs(ld - fd) / max(abs(fd), 1e-2))
    data = np.array([3.0, -2.0]) + rng.standard_normal((4000, 2)) @ np.array([[1.0, 0.0], [0.6, 0.5]])
    m = FlowModel(2, 0, rng, hidden=16)
    train_flow(m, data, steps=300, rng=rng, batch_size=256, lr=5e-3)
    mass = grid_mass(m, data)
    elapsed = time.perf_counter() - t0
    ok = inv_err < 1e-6 and trials >= 1000 and ld_err < 1e-3 and abs(mass - 1) < 0.01 and elapsed < 60
    report(1, "flow correctness", ok,
           f"inverse max err {inv_err:.2e} over {trials} trials; logdet rel err {ld_err:.2e}; "
           f"density mass {mass:.5f}; {elapsed:.1f}s")


# ---------------------------------------------------------------- 2

def _rows(rng, n, C):
    z = np.exp(rng.normal(scale=2, size=(n, C)))
    return z / z.sum(1, keepdims=True)


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {}
    trials = 100

    def run(name, make):
        w = 0.0
        for _ in range(trials):
            loss_fn, params = make()
            w = max(w, check_grads(loss_fn, params))
        worst[name] = w

    def ls():
        n, C = int(rng.integers(2, 12)), int(rng.integers(2, 5))
        logits = dc.parameter(rng.normal(scale=2, size=(n, C)))
        y = rng.integers(0, C, n)
        return (lambda: source_ce_loss(logits, y)), [logits]

    def lu():
        n, C = int(rng.integers(1, 8)), int(rng.integers(2, 5))
        logits = dc.parameter(rng.normal(scale=2, size=(n, C)))
        q = _rows(rng, n, C)
        lab, acc = threshold(q, 0.6)
        pb = PseudoBatch(np.zeros((n, 1)), q, lab, acc)
        return (lambda: target_ce_loss(logits, pb)), [logits]

    def gdc(metric):
        def make():
            n, C = int(rng.integers(1, 6)), int(rng.integers(2, 5))
            logits = dc.parameter(rng.normal(size=(n, C)))
            pg = _rows(rng, n, C)
            return (lambda: gdc_loss(dc.softmax_rows(logits), pg, metric)), [logits]
        return make

    def nflow():
        m = random_flow(2, rng, n_blocks=1, hidden=4)
        x = rng.normal(size=(3, 2))
        b = m.blocks[0]
        params = [b.coupling.parameters()[-2], b.coupling.parameters()[-1], b.linear.lower, b.linear.log_diag,
                  b.actnorm.log_scale, b.actnorm.shift]
        return (lambda: flow_nll_loss({0: m}, x, [0, 0, 0])), params

    run("L_s", ls)
    run("L_u", lu)
    for metric in ("l2", "l1", "kl"):
        run(f"L_GDC[{metric}]", gdc(metric))
    run("L_NFlow", nflow)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 120
    report(2, "gradient suite", ok,
           ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f" ({trials} trials each); {elapsed:.1f}s")


# ---------------------------------------------------------------- 3

def test_criterion_03_stop_gradient():
    rng = np.random.default_rng(3)
    net = Network(2, 2, hidden=(8, 8), feature_dim=2, rng=rng)
    flows = {c: random_flow(2, rng, n_blocks=2, hidden=8) for c in range(2)}
    flow_params = [p for m in flows.values() for p in m.parameters()]
    x = rng.normal(size=(32, 2))

    before = [p.data.tobytes() for p in flow_params]
    feats = net.features(x)
    p_gen = generative_predict(GenerativeClassifier(flows, 2), feats)
    for p in net.parameters() + flow_params:
        p.grad = None
    gdc_loss(net.probs(feats), p_gen).backward()
    flows_untouched_grad = all(p.grad is None for p in flow_params)
    dc.Optimizer(net.parameters(), dc.OptimizerState("adam", 1e-2)).step()
    flows_same = all(p.data.tobytes() == b for p, b in zip(flow_params, before))

    before = [p.data.tobytes() for p in net.parameters()]
    for p in net.parameters() + flow_params:
        p.grad = None
    flow_nll_loss(flows, net.features(x), np.arange(32) % 2).backward()
    net_untouched_grad = all(p.grad is None for p in net.parameters())
    dc.Optimizer(flow_params, dc.OptimizerState("adam", 1e-2)).step()
    net_same = all(p.data.tobytes() == b for p, b in zip(net.parameters(), before))
    ok = flows_untouched_grad and flows_same and net_untouched_grad and net_same
    report(3, "stop-gradient contracts", ok,
           f"GDC step: flow params bit-identical={flows_same}; flow-NLL step: network bit-identical={net_same}")


# ---------------------------------------------------------------- 4

def test_criterion_04_mixing():
    rng = np.random.default_rng(4)
    a = draw_alpha(MixConfig(), rng, size=1_000_000)
    in_range = bool(a.min() >= 0.5 and a.max() <= 1.0)
    f = rng.normal(size=(64, 3))
    y = rng.integers(0, 3, 64)
    identity = (np.array_equal(mix_instance(f, y, rng, alpha=1.0).data, f)
                and np.array_equal(mix_distribution(f, y, {c: random_flow(3, rng) for c in range(3)}, rng,
                                                    alpha=1.0).data, f))
    # labels ride along unchanged: each class sits at its own far-apart point, so any
    # cross-class partner would move a mixed row off its class point
    labels_kept = True
    for _ in range(200):
        y = rng.integers(0, 4, 32)
        pts = 100.0 * np.eye(4)[y] + 0.01 * rng.normal(size=(32, 4))
        out = mix_instance(pts, y, rng).data
        labels_kept &= bool(np.array_equal(np.argmax(out, 1), y))

        class Centered:
            def __init__(self, c):
                self.c = c

            def sample(self, n, r):
                return 100.0 * np.eye(4)[[self.c] * n] + 0.01 * r.normal(size=(n, 4))

        out = mix_distribution(pts, y, {c: Centered(c) for c in range(4)}, rng).data
        labels_kept &= bool(np.array_equal(np.argmax(out, 1), y))
    ok = in_range and identity and labels_kept
    report(4, "mixing contracts", ok,
           f"alpha in [{a.min():.4f}, {a.max():.4f}] over 1e6 draws; alpha=1 identity={identity}; "
           f"labels preserved={labels_kept}")


# ---------------------------------------------------------------- 5

def test_criterion_05_generative_classifier():
    rng = np.random.default_rng(5)
    gc = GenerativeClassifier({c: random_flow(4, rng) for c in range(3)}, 3)
    p = generative_predict(gc, rng.normal(size=(500, 4)) * 2)
    sum_err = float(np.max(np.abs(p.sum(1) - 1)))
    argmax_ok, prob_err = True, 0.0
    for _ in range(200):
        ll = rng.normal(scale=30, size=(50, 5))
        shift = rng.uniform(-1e3, 1e3)
        a, b = posterior_from_loglik(ll), posterior_from_loglik(ll + shift)
        argmax_ok &= bool(np.array_equal(np.argmax(a, 1), np.argmax(b, 1)))
        prob_err = max(prob_err, float(np.max(np.abs(a - b))))
    ok = sum_err < 1e-9 and argmax_ok and prob_err < 1e-9
    report(5, "generative classifier", ok,
           f"row-sum err {sum_err:.1e}; shift argmax exact={argmax_ok}; shift prob err {prob_err:.1e}")


# ---------------------------------------------------------------- 6-9 share one experiment

VARIANTS = [
    {"name": "baseline", "mix_mode": "none", "lambda_gdc": 0.0},
    {"name": "instance", "mix_mode": "instance", "lambda_gdc": 0.0},
    {"name": "dcfa", "mix_mode": "nflow_dcfa", "lambda_gdc": 0.0},
    {"name": "gaussian+gdc", "mix_mode": "gaussian_dcfa", "lambda_gdc": 0.5},
    {"name": "lambda=0.3", "mix_mode": "nflow_dcfa", "lambda_gdc": 0.3},
    {"name": "dcfa+gdc", "mix_mode": "nflow_dcfa", "lambda_gdc": 0.5},
    {"name": "lambda=0.7", "mix_mode": "nflow_dcfa", "lambda_gdc": 0.7},
]


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    out = Path(os.environ.get("GENRT_ACCEPTANCE_DIR") or tmp_path_factory.mktemp("acceptance"))
    t0 = time.perf_counter()
    table = ablate(RunConfig(), VARIANTS, out, seeds=SEEDS, workers=os.cpu_count() or 1)
    return table, time.perf_counter() - t0


def _paired(table, a, b, key):
    """Mean over seeds of (a - b), skipping seeds where either value is absent."""
    d = table.values(a, key) - table.values(b, key)
    return float(np.nanmean(d)), int(np.sum(np.isfinite(d)))


def test_criterion_06_noise_reduction(experiment):
    table, elapsed = experiment
    n1, k1 = _paired(table, "baseline", "dcfa", "noise_level")
    n2, k2 = _paired(table, "dcfa", "dcfa+gdc", "noise_level")
    a1, _ = _paired(table, "dcfa", "baseline", "test_acc")
    a2, _ = _paired(table, "dcfa+gdc", "dcfa", "test_acc")
    means = {v: (table.mean(v, "noise_level"), table.mean(v, "test_acc")) for v in ("baseline", "dcfa", "dcfa+gdc")}
    ok = n1 > 0 and n2 > 0 and a1 > 0 and a2 > 0 and len(SEEDS) >= 5 and elapsed < 15 * 60
    detail = "; ".join(f"{v} noise {n:.4f} acc {a:.4f}" for v, (n, a) in means.items())
    report(6, "noise-reduction trend", ok,
           f"{detail}; paired noise gaps {n1:+.4f} (n={k1}), {n2:+.4f} (n={k2}); "
           f"paired acc gaps {a1:+.4f}, {a2:+.4f}; {len(SEEDS)} seeds, {elapsed / 60:.1f} min for all variants")


def _at_least(table, a, b):
    ma, mb = table.mean(a, "test_acc"), table.mean(b, "test_acc")
    tol = max(table.std(a, "test_acc"), table.std(b, "test_acc"))
    return ma >= mb - tol, ma, mb, tol


def test_criterion_07_ablation_trend(experiment):
    table, _ = experiment
    ok1, i, b, t1 = _at_least(table, "instance", "baseline")
    ok2, n, g, t2 = _at_least(table, "dcfa+gdc", "gaussian+gdc")
    report(7, "ablation trend", ok1 and ok2,
           f"IFA {i:.4f} vs baseline {b:.4f} (tie band {t1:.4f}); nflow {n:.4f} vs gaussian {g:.4f} "
           f"(tie band {t2:.4f}); strict: IFA>=base {i >= b}, nflow>=gaussian {n >= g}")


def test_criterion_08_lambda_sweep(experiment):
    table, _ = experiment
    zero = table.mean("dcfa", "test_acc")
    vals = {lam: table.mean(name, "test_acc") for lam, name in
            ((0.3, "lambda=0.3"), (0.5, "dcfa+gdc"), (0.7, "lambda=0.7"))}
    ok = all(v >= zero for v in vals.values())
    report(8, "lambda sweep", ok,
           f"lambda=0 {zero:.4f}; " + ", ".join(f"lambda={k} {v:.4f}" for k, v in vals.items()))


def test_criterion_09_disagreement(experiment):
    table, _ = experiment
    w5, f5 = table.mean("dcfa+gdc", "disagree_tgt_warmup"), table.mean("dcfa+gdc", "disagree_tgt")
    w0, f0 = table.mean("dcfa", "disagree_tgt_warmup"), table.mean("dcfa", "disagree_tgt")
    report(9, "disagreement diagnostic", f5 < w5,
           f"lambda=0.5 warmup {w5:.4f} -> final {f5:.4f}; lambda=0 (reported only) warmup {w0:.4f} -> "
           f"final {f0:.4f}")


# ---------------------------------------------------------------- 10

def test_criterion_10_determinism_and_quarantine(tmp_path):
    cfg = RunConfig()
    train(cfg, tmp_path / "orig", 0)
    rerun_from_manifest(tmp_path / "orig/manifest.json", tmp_path / "rerun")
    same_metrics = (tmp_path / "orig/metrics.csv").read_bytes() == (tmp_path / "rerun/metrics.csv").read_bytes()
    train(cfg.with_overrides({"redact_target_labels": True}), tmp_path / "redacted", 0)
    ckpts = sorted(p.name for p in (tmp_path / "orig").glob("*.ckpt"))
    same_ckpts = len(ckpts) > 1 and all(
        (tmp_path / "orig" / n).read_bytes() == (tmp_path / "redacted" / n).read_bytes() for n in ckpts)
    report(10, "determinism and quarantine", same_metrics and same_ckpts,
           f"manifest re-run metrics.csv byte-identical={same_metrics}; "
           f"redacted run checkpoints byte-identical={same_ckpts} ({', '.join(ckpts)})")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s", "-p", "no:cacheprovider"]))
