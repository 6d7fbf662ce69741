import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from genrt import diffcore as dc
from genrt.adaptation import (FeatureMemory, GenerativeClassifier, MixConfig, argmax_disagreement, disagreement_rate,
                              draw_alpha, fold_alpha, gdc_loss, generative_predict, mix_distribution, mix_instance,
                              posterior_from_loglik, self_consistency_loss)
from genrt.diffcore import Tensor
from genrt.flows import GaussianClassModel, flow_nll_loss, gaussian_fit
from genrt.netmodel import Network, PseudoBatch, threshold
from genrt.synthdata import DomainSpec, generate, inject_label_noise

from flowutil import random_flow
from gradcheck import check_grads


class PointModel:
    """Density concentrated at one point."""

    def __init__(self, p, ll=0.0):
        self.p = np.asarray(p, dtype=np.float64)
        self.ll = ll

    def sample(self, n, rng):
        return np.repeat(self.p[None], n, axis=0)

    def log_prob(self, x):
        return np.full(len(x), self.ll)


class TableModel:
    """Returns preset log-likelihood columns, ignoring the features."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=np.float64)

    def log_prob(self, x):
        return self.values[: len(x)]


def _rows(rng, n, C, scale=2.0):
    z = np.exp(rng.normal(scale=scale, size=(n, C)))
    return z / z.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- alpha

@pytest.mark.parametrize("a0,expected", [(0.3, 0.7), (0.5, 0.5), (0.9, 0.9)])
def test_fold_alpha_examples(a0, expected):
    assert fold_alpha(a0) == pytest.approx(expected, abs=1e-15)


def test_drawn_alpha_in_upper_half():
    a = draw_alpha(MixConfig(), np.random.default_rng(0), size=1_000_000)
    assert a.min() >= 0.5 and a.max() <= 1.0


def test_mix_config_validation():
    with pytest.raises(ValueError):
        MixConfig(beta_a=0.0)
    with pytest.raises(ValueError):
        MixConfig(mode="mixup")
    with pytest.raises(ValueError):
        MixConfig(apply_to="neither")


# ---------------------------------------------------------------- instance mixing

def test_instance_mix_alpha_one_is_identity(rng):
    f = rng.normal(size=(8, 3))
    out = mix_instance(f, rng.integers(0, 2, 8), rng, alpha=1.0)
    np.testing.assert_array_equal(out.data, f)


def test_instance_mix_identical_partner_is_identity(rng):
    f = np.tile([[1.0, -2.0]], (6, 1))
    out = mix_instance(f, np.zeros(6, int), rng)
    np.testing.assert_allclose(out.data, f, atol=1e-15)


def test_instance_mix_convex_combination(rng):
    out = mix_instance(np.array([[0.0, 0.0], [2.0, 2.0]]), [1, 1], rng, alpha=0.7)
    np.testing.assert_allclose(out.data[0], [0.6, 0.6], atol=1e-15)


def test_instance_mix_partner_shares_label_and_index_differs(rng):
    # class c lives at (10c, 10c); a same-class partner keeps every mixed row at its own class point
    labels = rng.integers(0, 3, size=40)
    f = 10.0 * np.column_stack([labels, labels]).astype(float)
    f[:, 0] += np.arange(40) * 1e-3
    out = mix_instance(f, labels, rng, alpha=0.5).data
    np.testing.assert_allclose(np.round(out[:, 1] / 10), labels)
    moved = out[:, 0] != f[:, 0]
    assert moved.sum() >= 35


def test_instance_mix_falls_back_to_memory_then_passes_through(rng):
    mem = FeatureMemory(2, 4)
    mem.push(1, [4.0, 4.0])
    out = mix_instance(np.array([[0.0, 0.0], [1.0, 1.0]]), [1, 0], rng, memory=mem, alpha=0.5)
    np.testing.assert_allclose(out.data, [[2.0, 2.0], [1.0, 1.0]])


def test_instance_mix_respects_mask_and_gradient_flows_only_to_self(rng):
    f = dc.parameter(rng.normal(size=(4, 2)))
    out = mix_instance(f, [0, 0, 0, 0], rng, mask=[True, True, False, False], alpha=0.8)
    np.testing.assert_array_equal(out.data[2:], f.data[2:])
    dc.sum_(out).backward()
    np.testing.assert_allclose(f.grad, [[0.8, 0.8], [0.8, 0.8], [1, 1], [1, 1]])


# ---------------------------------------------------------------- distribution mixing

def test_distribution_mix_alpha_one_passes_through(rng):
    f = rng.normal(size=(5, 2))
    out = mix_distribution(f, np.zeros(5, int), {0: PointModel([9.0, 9.0])}, rng, alpha=1.0)
    np.testing.assert_array_equal(out.data, f)


def test_distribution_mix_point_model_example(rng):
    out = mix_distribution(np.zeros((1, 2)), [0], {0: PointModel([2.0, 0.0])}, rng, alpha=0.5)
    np.testing.assert_allclose(out.data, [[1.0, 0.0]])


def test_distribution_mix_missing_model_passes_through(rng):
    f = rng.normal(size=(3, 2))
    out = mix_distribution(f, [0, 1, 0], {0: PointModel([0.0, 0.0])}, rng, alpha=0.5)
    np.testing.assert_array_equal(out.data[1], f[1])
    np.testing.assert_allclose(out.data[[0, 2]], f[[0, 2]] * 0.5)


def test_distribution_mix_samples_are_constants(rng):
    f = dc.parameter(rng.normal(size=(6, 2)))
    out = mix_distribution(f, np.zeros(6, int), {0: gaussian_fit(rng.normal(size=(20, 2)))}, rng, alpha=0.75)
    dc.sum_(out).backward()
    np.testing.assert_allclose(f.grad, 0.75)


def test_distribution_mix_moves_noisy_labels_toward_class_centroid():
    """Centroid-distance oracle: 30% flipped labels on two-moons."""
    ds, _ = generate(DomainSpec(n_train=2000, noise_sigma=0.1), seed=4)
    noisy = inject_label_noise(ds, 0.3, seed=5)
    f, y = ds.inputs, noisy.labels
    models = {c: gaussian_fit(f[y == c]) for c in (0, 1)}
    centroids = np.array([f[y == c].mean(axis=0) for c in (0, 1)])
    rng = np.random.default_rng(6)
    mixed = mix_distribution(f, y, models, rng).data
    before = np.linalg.norm(f - centroids[y], axis=1).mean()
    after = np.linalg.norm(mixed - centroids[y], axis=1).mean()
    assert after < before
    # the gain is concentrated on the flipped rows
    flip = noisy.flip_mask
    assert (np.linalg.norm(mixed - centroids[y], axis=1)[flip].mean()
            < np.linalg.norm(f - centroids[y], axis=1)[flip].mean())


# ---------------------------------------------------------------- generative classifier

def test_generative_predict_equal_loglik():
    gc = GenerativeClassifier({0: TableModel([-3.0]), 1: TableModel([-3.0])}, 2)
    np.testing.assert_allclose(generative_predict(gc, np.zeros((1, 2))), [[0.5, 0.5]], atol=1e-15)


def test_generative_predict_log_three():
    gc = GenerativeClassifier({0: TableModel([0.0]), 1: TableModel([math.log(3)])}, 2)
    np.testing.assert_allclose(generative_predict(gc, np.zeros((1, 2))), [[0.25, 0.75]], atol=1e-15)


def test_generative_rows_sum_to_one_for_random_flows(rng):
    gc = GenerativeClassifier({c: random_flow(3, rng) for c in range(4)}, 4)
    p = generative_predict(gc, rng.normal(size=(200, 3)) * 3)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)
    assert np.all(p >= 0)


@given(st.integers(0, 2**32 - 1), st.floats(-700, 700))
def test_posterior_log_shift_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    ll = rng.normal(scale=20, size=(16, 5))
    a, b = posterior_from_loglik(ll), posterior_from_loglik(ll + shift)
    np.testing.assert_array_equal(np.argmax(a, 1), np.argmax(b, 1))
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_posterior_excludes_non_finite_and_uniform_when_all_excluded():
    ll = np.array([[np.nan, 0.0, np.inf], [-np.inf, np.nan, np.inf], [-1e308, -1e308, -np.inf]])
    p = posterior_from_loglik(ll)
    np.testing.assert_allclose(p[0], [0, 1, 0])
    np.testing.assert_allclose(p[1], [1 / 3] * 3)
    np.testing.assert_allclose(p[2], [0.5, 0.5, 0])


def test_generative_predict_output_is_plain_array(rng):
    gc = GenerativeClassifier({0: gaussian_fit(rng.normal(size=(9, 2))), 1: gaussian_fit(rng.normal(size=(9, 2)) + 3)}, 2)
    out = generative_predict(gc, dc.parameter(rng.normal(size=(3, 2))))
    assert isinstance(out, np.ndarray)


def test_missing_class_model_gets_zero_probability(rng):
    gc = GenerativeClassifier({0: gaussian_fit(rng.normal(size=(9, 2)))}, 3)
    np.testing.assert_allclose(gc.predict(rng.normal(size=(4, 2))), [[1, 0, 0]] * 4)


# ---------------------------------------------------------------- GDC

@pytest.mark.parametrize("metric", ["l2", "l1", "kl"])
def test_gdc_equal_rows_zero(metric, rng):
    p = _rows(rng, 7, 3)
    assert abs(gdc_loss(Tensor(p), p, metric).item()) < 1e-12


def test_gdc_l2_examples():
    assert gdc_loss(Tensor(np.array([[1.0, 0.0]])), np.array([[0.0, 1.0]])).item() == pytest.approx(2.0)
    assert gdc_loss(Tensor(np.array([[1.0, 0.0]])), np.array([[0.5, 0.5]])).item() == pytest.approx(0.5)


def test_gdc_l1_and_kl_values():
    pd, pg = np.array([[0.8, 0.2]]), np.array([[0.5, 0.5]])
    assert gdc_loss(Tensor(pd), pg, "l1").item() == pytest.approx(0.6)
    kl = 0.5 * math.log(0.5 / 0.8) + 0.5 * math.log(0.5 / 0.2)
    assert gdc_loss(Tensor(pd), pg, "kl").item() == pytest.approx(kl, rel=1e-12)


def test_gdc_rejects_non_distributions_and_bad_options():
    with pytest.raises(ValueError):
        gdc_loss(Tensor(np.array([[0.7, 0.7]])), np.array([[0.5, 0.5]]))
    with pytest.raises(ValueError):
        gdc_loss(Tensor(np.array([[0.5, 0.5]])), np.array([[1.2, -0.2]]))
    with pytest.raises(ValueError):
        gdc_loss(Tensor(np.array([[0.5, 0.5]])), np.array([[0.5, 0.5]]), metric="cos")
    with pytest.raises(dc.ShapeError):
        gdc_loss(Tensor(np.array([[0.5, 0.5]])), np.array([[0.5, 0.5], [0.5, 0.5]]))


def test_gdc_disagreed_subset_mean():
    pd = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
    pg = np.array([[0.8, 0.2], [0.7, 0.3], [0.3, 0.7]])
    expected = np.mean([np.sum((pd[i] - pg[i]) ** 2) for i in (1, 2)])
    assert gdc_loss(Tensor(pd), pg, subset="disagreed").item() == pytest.approx(expected, rel=1e-14)
    assert gdc_loss(Tensor(pd[:1]), pg[:1], subset="disagreed").item() == 0.0


@given(st.integers(0, 2**32 - 1), st.sampled_from(["l2", "l1", "kl"]))
def test_gdc_non_negative(seed, metric):
    rng = np.random.default_rng(seed)
    assert gdc_loss(Tensor(_rows(rng, 5, 3)), _rows(rng, 5, 3), metric).item() >= -1e-15


@pytest.mark.parametrize("metric", ["l2", "l1", "kl"])
def test_gdc_gradient_matches_finite_differences(metric):
    rng = np.random.default_rng({"l2": 1, "l1": 2, "kl": 3}[metric])
    worst = 0.0
    for _ in range(100):
        B, C = int(rng.integers(1, 6)), int(rng.integers(2, 5))
        logits = dc.parameter(rng.normal(size=(B, C)))
        pg = _rows(rng, B, C)
        worst = max(worst, check_grads(lambda: gdc_loss(dc.softmax_rows(logits), pg, metric), [logits]))
    assert worst < 1e-4, worst


def test_gdc_generative_side_gets_no_gradient(rng):
    pd = dc.parameter(_rows(rng, 3, 2))
    pg = dc.parameter(_rows(rng, 3, 2))
    gdc_loss(pd, pg).backward()
    assert pd.grad is not None and pg.grad is None


# ---------------------------------------------------------------- self consistency

def test_self_consistency_examples(rng):
    assert self_consistency_loss(Tensor(_rows(rng, 4, 3)), 0.0).item() == 0.0
    assert self_consistency_loss(Tensor(np.full((3, 4), 0.25)), 0.3).item() == pytest.approx(0.0, abs=1e-30)
    assert self_consistency_loss(Tensor(np.array([[1.0, 0.0]])), 0.2).item() == pytest.approx(0.02, rel=1e-12)
    with pytest.raises(ValueError):
        self_consistency_loss(Tensor(np.array([[1.0, 0.0]])), 1.0)


def test_self_consistency_gradient_uses_constant_target(rng):
    pd = dc.parameter(np.array([[1.0, 0.0]]))
    self_consistency_loss(pd, 0.2).backward()
    np.testing.assert_allclose(pd.grad, [[0.2, -0.2]])


# ---------------------------------------------------------------- disagreement

def test_argmax_disagreement_examples(rng):
    p = _rows(rng, 20, 2)
    assert argmax_disagreement(p, p) == 0.0
    assert argmax_disagreement(p, p[:, ::-1]) == 1.0
    assert argmax_disagreement(np.zeros((0, 2)), np.zeros((0, 2))) == 0.0


def test_disagreement_rate_against_network(rng):
    net = Network(2, 2, hidden=(4, 4), feature_dim=2, rng=rng)
    x = rng.normal(size=(30, 2))
    feats = net.embed(x)
    pred = net.predict(x)

    class Agree:
        def predict(self, f):
            return np.eye(2)[pred]

    class Opposite:
        def predict(self, f):
            return np.eye(2)[1 - pred]

    assert disagreement_rate(net, Agree(), x) == 0.0
    assert disagreement_rate(net, Opposite(), x) == 1.0
    assert feats.shape == (30, 2)


# ---------------------------------------------------------------- memory

def test_memory_fifo_capacity():
    mem = FeatureMemory(2, capacity=4)
    for k in range(5):
        mem.push(0, [float(k)], step=k)
    assert mem.size(0) == 4
    np.testing.assert_array_equal(mem.features(0)[:, 0], [1, 2, 3, 4])
    assert mem.steps(0) == [1, 2, 3, 4]


def test_memory_stores_only_accepted_rows():
    probs = np.array([[0.99, 0.01], [0.6, 0.4], [0.02, 0.98]])
    label, acc = threshold(probs, 0.95)
    pb = PseudoBatch(np.array([[1.0], [2.0], [3.0]]), probs, label, acc)
    mem = FeatureMemory(2, 8)
    mem.update(pb, step=7)
    np.testing.assert_array_equal(mem.features(0), [[1.0]])
    np.testing.assert_array_equal(mem.features(1), [[3.0]])
    assert len(mem) == 2


def test_memory_copies_are_detached(rng):
    net = Network(2, 2, hidden=(4, 4), feature_dim=3, rng=rng)
    x = rng.normal(size=(6, 2))
    feats = net.features(x)
    probs = np.tile([[0.99, 0.01]], (6, 1))
    label, acc = threshold(probs, 0.5)
    mem = FeatureMemory(2, 16)
    mem.update(PseudoBatch(feats.data, probs, label, acc))
    stored = mem.features(0).copy()
    dc.sum_(dc.square(feats)).backward()
    for p in net.parameters():
        if p.grad is not None:
            p.data -= 0.1 * p.grad
    feats.data += 5.0
    np.testing.assert_array_equal(mem.features(0), stored)
    out = mem.features(0)
    out += 1
    np.testing.assert_array_equal(mem.features(0), stored)


def test_memory_sample_and_validation(rng):
    mem = FeatureMemory(3, 2)
    assert mem.sample(0, 5, rng).size == 0
    mem.push(0, [1.0, 2.0])
    np.testing.assert_array_equal(mem.sample(0, 3, rng), [[1.0, 2.0]] * 3)
    with pytest.raises(ValueError):
        FeatureMemory(2, 0)


# ---------------------------------------------------------------- stop-gradient contracts

def _snapshot(params):
    return [p.data.copy() for p in params]


def _setup(rng):
    net = Network(2, 2, hidden=(8, 8), feature_dim=2, rng=rng)
    flows = {c: random_flow(2, rng, n_blocks=1, hidden=8) for c in range(2)}
    x = rng.normal(size=(16, 2))
    return net, flows, x


def test_gdc_step_leaves_flows_bit_identical(rng):
    net, flows, x = _setup(rng)
    flow_params = [p for m in flows.values() for p in m.parameters()]
    everything = net.parameters() + flow_params
    before = _snapshot(flow_params)
    feats = net.features(x)
    p_gen = generative_predict(GenerativeClassifier(flows, 2), feats)
    loss = gdc_loss(net.probs(feats), p_gen)
    loss.backward()
    assert all(p.grad is None for p in flow_params)
    assert any(np.any(p.grad) for p in net.parameters())
    net_before = _snapshot(net.parameters())
    dc.Optimizer(net.parameters(), dc.OptimizerState("sgd", 0.1)).step()
    for p, b in zip(flow_params, before):
        assert p.data.tobytes() == b.tobytes()
    assert any(not np.array_equal(p.data, b) for p, b in zip(net.parameters(), net_before))
    assert len(everything) == len(net.parameters()) + len(flow_params)


def test_flow_nll_step_leaves_network_bit_identical(rng):
    net, flows, x = _setup(rng)
    flow_params = [p for m in flows.values() for p in m.parameters()]
    before = _snapshot(net.parameters())
    feats = net.features(x)
    loss = flow_nll_loss(flows, feats, np.arange(16) % 2)
    loss.backward()
    assert all(p.grad is None for p in net.parameters())
    flow_before = _snapshot(flow_params)
    dc.Optimizer(flow_params, dc.OptimizerState("adam", 1e-2)).step()
    for p, b in zip(net.parameters(), before):
        assert p.data.tobytes() == b.tobytes()
    assert any(not np.array_equal(p.data, b) for p, b in zip(flow_params, flow_before))


def test_gaussian_backend_works_in_generative_classifier(rng):
    models = {0: gaussian_fit(rng.normal(size=(50, 2)) - 3), 1: gaussian_fit(rng.normal(size=(50, 2)) + 3)}
    assert all(isinstance(m, GaussianClassModel) for m in models.values())
    p = GenerativeClassifier(models, 2).predict(np.array([[-3.0, -3.0], [3.0, 3.0]]))
    np.testing.assert_array_equal(np.argmax(p, 1), [0, 1])
