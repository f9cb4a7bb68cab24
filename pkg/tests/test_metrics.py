from __future__ import annotations

import math

import numpy as np
import pytest

from flatnas.data import make_spirals
from flatnas.errors import NonFiniteLoss, ZeroVector
from flatnas.metrics import (
    FLAT_MAX,
    FlatnessConfig,
    MetricSpec,
    angle_score,
    combined_score,
    config_digest,
    eval_loss_acc,
    eval_subset,
    flatness_denominator,
    flatness_of,
    flatness_score,
    load_records,
    save_records,
    score_population,
    score_subnet,
)
from flatnas.nncore import Batch, OptimizerConfig, ParamSet
from flatnas.searchspace import Genotype, enumerate_all, encode
from flatnas.seeding import derive_seed
from flatnas.supernet import build_supernet, extract_initial_subnet, extract_subnet, train_supernet


def scalar(w=0.0):
    return ParamSet([("w", np.array([w]), "cell")])


def unit(params, rng):
    return {n: np.ones_like(a) for n, a in params.items()}


def quad(k=1.0, c=0.0):
    return lambda p: k * float(p["w"][0]) ** 2 + c


@pytest.fixture(scope="module")
def trained_net():
    from flatnas.searchspace import micro_space

    data = make_spirals(per_class=60, lift_dim=6)
    net = build_supernet(micro_space(), data.input_dim, data.num_classes, np.random.default_rng(0))
    net = train_supernet(net, data, OptimizerConfig(epochs=3, batch_size=16), np.random.default_rng(1))
    return net, data


def test_config_validation():
    with pytest.raises(ValueError):
        FlatnessConfig(sigmas=(0.1,))
    with pytest.raises(ValueError):
        FlatnessConfig(sigmas=(0.2, 0.1))
    with pytest.raises(ValueError):
        FlatnessConfig(epsilon=1e-3)
    with pytest.raises(ValueError):
        FlatnessConfig(alpha=-1)
    assert FlatnessConfig().sigmas == (2e-3, 1e-2, 2e-2) and FlatnessConfig().alpha == 1.0


def test_constant_surface():
    cfg = FlatnessConfig(sigmas=(0.1, 0.2), alpha=1.0, replicates=1)
    assert flatness_of(lambda p: 1.0, scalar(), cfg, np.random.default_rng(0)) == pytest.approx(0.1, rel=1e-12)
    flat = FlatnessConfig(sigmas=(0.1, 0.2), alpha=0.0, replicates=1)
    assert flatness_of(lambda p: 1.0, scalar(), flat, np.random.default_rng(0)) == FLAT_MAX


def test_quadratic_closed_form():
    cfg = FlatnessConfig(sigmas=(0.1, 0.2), alpha=1.0, replicates=1)
    score = flatness_of(quad(), scalar(), cfg, np.random.default_rng(0), unit)
    assert score == pytest.approx(2.5, rel=1e-9)


def test_ray_mode_matches_closed_form_on_sampled_direction():
    cfg = FlatnessConfig(sigmas=(0.05, 0.1, 0.3), alpha=0.7, replicates=1)
    theta = 0.4
    g = np.random.default_rng(11).standard_normal(1)[0]
    L = [(theta + s * g) ** 2 for s in cfg.sigmas]
    den = abs(L[1] - L[0]) / 0.05 + abs(L[2] - L[1]) / 0.2 + 0.7 * abs(L[0] / 0.05)
    assert flatness_of(quad(), scalar(theta), cfg, np.random.default_rng(11)) == pytest.approx(1 / den, rel=1e-9)


def test_independent_mode_draws_per_sigma():
    cfg = FlatnessConfig(sigmas=(0.1, 0.2), alpha=0.0, replicates=1, mode="independent", signed_variant=True)
    r = np.random.default_rng(5)
    g1, g2 = r.standard_normal(1)[0], r.standard_normal(1)[0]
    den = ((0.2 * g2) ** 2 - (0.1 * g1) ** 2) / 0.1
    got = flatness_of(quad(), scalar(), cfg, np.random.default_rng(5))
    assert got == (cfg.flat_max if den <= cfg.epsilon else pytest.approx(1 / den, rel=1e-9))


def test_sharper_is_less_flat():
    for signed in (False, True):
        cfg = FlatnessConfig(sigmas=(0.1, 0.2, 0.4), alpha=0.0, replicates=1, signed_variant=signed)
        scores = [flatness_of(quad(k), scalar(), cfg, np.random.default_rng(0), unit) for k in (0.5, 1, 2, 4)]
        assert all(b < a for a, b in zip(scores, scores[1:]))


def test_alpha_zero_ignores_constant_offset():
    cfg = FlatnessConfig(sigmas=(0.1, 0.2, 0.4), alpha=0.0, replicates=3)
    a = flatness_of(quad(1.0, 0.0), scalar(0.3), cfg, np.random.default_rng(2))
    b = flatness_of(quad(1.0, 5.0), scalar(0.3), cfg, np.random.default_rng(2))
    assert a == pytest.approx(b, rel=1e-9)


def test_signed_variant_drops_absolute_values():
    assert flatness_denominator([3.0, 1.0], [0.1, 0.2], 1.0, signed=False) == pytest.approx(20 + 30)
    assert flatness_denominator([3.0, 1.0], [0.1, 0.2], 1.0, signed=True) == pytest.approx(-20 + 30)


def test_nonfinite_loss_propagates():
    cfg = FlatnessConfig(sigmas=(0.1, 0.2), replicates=1)
    with pytest.raises(NonFiniteLoss):
        flatness_of(lambda p: math.inf, scalar(), cfg, np.random.default_rng(0))


def test_flatness_does_not_mutate(trained_net):
    net, data = trained_net
    g = Genotype((2, 1, 2))
    p = extract_subnet(net, g)
    before = p.copy()
    s = flatness_score(p, g, net.space, data.split("val"), FlatnessConfig(replicates=2), np.random.default_rng(0))
    assert math.isfinite(s) and s > 0
    assert p.bit_equal(before)


def test_eval_subset_is_fixed(trained_net):
    _, data = trained_net
    val = data.split("val")
    a, b = eval_subset(val, 10, 3), eval_subset(val, 10, 3)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    assert len(a) == 10
    assert eval_subset(val, 10_000, 3) is val


def test_zeroed_head_accuracy_is_class_zero_frequency(trained_net):
    net, data = trained_net
    g = Genotype((1, 1, 1))
    p = extract_subnet(net, g)
    p = p.replace({"head.W": np.zeros_like(p["head.W"]), "head.b": np.zeros_like(p["head.b"])})
    val = data.split("val")
    loss, acc = eval_loss_acc(p, g, net.space, val)
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert acc == float(np.mean(val.labels == 0))


def test_perfect_logits_accuracy():
    from flatnas.searchspace import SearchSpaceSpec

    space = SearchSpaceSpec(2, ((0, 1),), ("skip",), cells_per_network=1, channels=3)
    eye = np.eye(3)
    p = ParamSet([("stem.W", eye, "stem"), ("stem.b", np.zeros(3), "stem"), ("head.W", 10 * eye, "head"), ("head.b", np.zeros(3), "head")])
    batch = Batch(eye, np.arange(3))
    assert eval_loss_acc(p, Genotype((0,)), space, batch)[1] == 1.0


def test_eval_matches_independent_reimplementation(trained_net):
    net, data = trained_net
    g = Genotype((2, 2, 1))
    p = extract_subnet(net, g)
    val = data.split("val")
    h = val.inputs @ p["stem.W"] + p["stem.b"]
    for c in range(3):
        n1 = np.maximum(h @ p[f"cell{c}.e0.relu_linear.W"] + p[f"cell{c}.e0.relu_linear.b"], 0)
        n2 = np.maximum(h @ p[f"cell{c}.e1.relu_linear.W"] + p[f"cell{c}.e1.relu_linear.b"], 0) + n1
        h = n2
    z = h @ p["head.W"] + p["head.b"]
    logp = z - np.log(np.sum(np.exp(z - z.max(1, keepdims=True)), 1, keepdims=True)) - z.max(1, keepdims=True)
    loss = -np.mean(logp[np.arange(len(val)), val.labels])
    acc = np.mean(np.argmax(z, 1) == val.labels)
    got = eval_loss_acc(p, g, net.space, val)
    assert got[0] == pytest.approx(loss, rel=1e-10) and got[1] == pytest.approx(acc, abs=1e-12)


def test_angle_cases():
    def ps(*v):
        return ParamSet([("v", np.array(v, dtype=float), "cell")])

    assert angle_score(ps(1, 0), ps(1, 0)) == 0.0
    assert angle_score(ps(1, 0), ps(0, 1)) == pytest.approx(math.pi / 2, abs=1e-12)
    assert angle_score(ps(1, 0), ps(1, 1)) == pytest.approx(math.pi / 4, abs=1e-12)
    assert angle_score(ps(3, 1), ps(-2, 5)) == pytest.approx(angle_score(ps(6, 2), ps(-0.2, 0.5)), abs=1e-12)
    with pytest.raises(ZeroVector):
        angle_score(ps(0, 0), ps(1, 0))


def test_combined_score():
    assert combined_score(0.5, 2.5, 0.0, 0.1) == 0.5
    assert combined_score(0.5, 2.5, 1.0, 0.1) == pytest.approx(25.5, rel=1e-12)
    assert combined_score(0.5, 0.0, 3.0, 0.1) == 0.5
    with pytest.raises(ValueError):
        combined_score(0.5, 1.0, -1.0, 0.1)


def test_metric_spec_rules():
    with pytest.raises(ValueError):
        MetricSpec(name="combined", base="flatness", gamma=1.0)
    with pytest.raises(ValueError):
        MetricSpec(name="combined", base="accuracy", gamma=-1.0)
    assert MetricSpec().digest() == MetricSpec().digest()
    assert config_digest({"a": 1, "b": 2}) == config_digest({"b": 2, "a": 1})


def test_score_population(trained_net, tmp_path):
    net, data = trained_net
    val = data.split("val")
    gs = enumerate_all(net.space)[::5]
    spec = MetricSpec(flatness=FlatnessConfig(replicates=2))
    assert score_population(net, [], spec, val, 3) == []
    recs = score_population(net, gs, spec, val, 3)
    assert [r.genotype for r in recs] == gs
    assert recs == score_population(net, gs, spec, val, 3, jobs=3)
    for r in recs:
        seed = derive_seed(3, encode(r.genotype, net.space))
        single = score_subnet(spec, net.space, r.genotype, extract_subnet(net, r.genotype), None, val, seed)
        assert r.seed == seed and r.value == single
    path = tmp_path / "s.csv"
    save_records(recs, net.space, path)
    assert load_records(path, net.space) == recs


def test_angle_and_base_metrics(trained_net):
    net, data = trained_net
    val = data.split("val")
    g = Genotype((2, 2, 2))
    (r,) = score_population(net, [g], MetricSpec(name="angle"), val, 0)
    assert r.value == angle_score(extract_initial_subnet(net, g), extract_subnet(net, g))
    (loss,) = score_population(net, [g], MetricSpec(name="loss"), val, 0)
    assert loss.value == -eval_loss_acc(extract_subnet(net, g), g, net.space, val)[0]


def test_combined_gamma_zero_equals_base(trained_net):
    net, data = trained_net
    val = data.split("val")
    gs = enumerate_all(net.space)
    base = score_population(net, gs, MetricSpec(name="accuracy"), val, 1)
    comb = score_population(net, gs, MetricSpec(name="combined", base="accuracy", gamma=0.0), val, 1)
    assert [r.value for r in base] == [r.value for r in comb]
