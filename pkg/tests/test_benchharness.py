from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from flatnas import benchharness as bh
from flatnas.data import make_spirals
from flatnas.errors import GenotypeSetMismatch, LengthMismatch, NonFiniteLoss, Undefined
from flatnas.metrics import ScoreRecord, eval_loss_acc
from flatnas.nncore import OptimizerConfig, ParamSet, forward, init_params
from flatnas.searchspace import Genotype, enumerate_all, encode
from flatnas.seeding import derive_seed

QUICK = OptimizerConfig(epochs=2, batch_size=64)


@pytest.fixture(scope="module")
def data():
    return make_spirals(per_class=60, lift_dim=6)


def brute_tau(x, y):
    c = d = tx = ty = 0
    for i, j in itertools.combinations(range(len(x)), 2):
        a, b = np.sign(x[i] - x[j]), np.sign(y[i] - y[j])
        if a == 0 and b == 0:
            continue
        if a == 0:
            tx += 1
        elif b == 0:
            ty += 1
        elif a == b:
            c += 1
        else:
            d += 1
    if c + d + tx == 0 or c + d + ty == 0:
        return None
    return (c - d) / np.sqrt((c + d + tx) * (c + d + ty))


# ---------------------------------------------------------------- oracle training


def test_zero_epochs_is_init_accuracy(micro, data):
    g = Genotype((2, 1, 2))
    acc, loss, params = bh.train_from_scratch(g, micro, data, OptimizerConfig(epochs=0), seed=4)
    init = init_params(micro, data.input_dim, data.num_classes, np.random.default_rng(derive_seed(4, "init")), g)
    assert params.bit_equal(init)
    assert acc == eval_loss_acc(init, g, micro, data.split("test"))[1]
    assert loss == eval_loss_acc(init, g, micro, data.split("val"))[0]


def test_training_is_deterministic(micro, data):
    g = Genotype((2, 2, 2))
    assert bh.train_from_scratch(g, micro, data, QUICK, 1)[:2] == bh.train_from_scratch(g, micro, data, QUICK, 1)[:2]


def test_dead_cell_is_no_better_than_best(micro, spirals):
    cfg = OptimizerConfig(epochs=15)
    wins = 0
    for seed in range(3):
        dead = bh.train_from_scratch(Genotype((0, 0, 0)), micro, spirals, cfg, seed)[0]
        best = max(bh.train_from_scratch(g, micro, spirals, cfg, seed)[0] for g in (Genotype((2, 2, 2)), Genotype((2, 1, 2))))
        wins += dead <= best
    assert wins >= 2


def test_table_cardinality_and_resume(micro, data, tmp_path):
    full = bh.build_ground_truth_table(micro, data, QUICK, 1, 0, path=tmp_path / "full.csv")
    assert len(full) == 27 and full.complete
    part = tmp_path / "part.csv"
    partial = bh.build_ground_truth_table(micro, data, QUICK, 1, 0, path=part, max_new_entries=10)
    assert len(partial) == 10 and not partial.complete
    assert "# space_preset" not in part.read_text()
    ticks = []
    bh.build_ground_truth_table(micro, data, QUICK, 1, 0, path=part, progress=lambda i, n, k: ticks.append(i))
    assert part.read_bytes() == (tmp_path / "full.csv").read_bytes()
    assert ticks == list(range(1, 28))
    loaded = bh.load_table(part, micro)
    assert loaded.entries == full.entries and loaded.training_config_digest == full.training_config_digest


def test_resume_tolerates_cut_row(micro, data, tmp_path):
    full = bh.build_ground_truth_table(micro, data, QUICK, 1, 0, path=tmp_path / "full.csv")
    part = tmp_path / "cut.csv"
    bh.build_ground_truth_table(micro, data, QUICK, 1, 0, path=part, max_new_entries=5)
    part.write_text(part.read_text() + "skip|skip|ski")
    bh.build_ground_truth_table(micro, data, QUICK, 1, 0, path=part)
    assert part.read_bytes() == (tmp_path / "full.csv").read_bytes()
    assert full.complete


def test_parallel_table_matches_serial(micro, data):
    a = bh.build_ground_truth_table(micro, data, QUICK, 1, 3)
    b = bh.build_ground_truth_table(micro, data, QUICK, 1, 3, jobs=3)
    assert a.entries == b.entries


def test_two_seeds_are_averaged(micro, data):
    table = bh.build_ground_truth_table(micro, data, QUICK, 2, 7)
    for g in enumerate_all(micro)[::4]:
        key = encode(g, micro)
        runs = [bh.train_from_scratch(g, micro, data, QUICK, bh.oracle_seed(7, key, r)) for r in range(2)]
        entry = table.entries[key]
        assert entry.seed_count == 2
        assert entry.test_accuracy == float(np.mean([r[0] for r in runs]))
        assert entry.final_val_loss == float(np.mean([r[1] for r in runs]))


# ---------------------------------------------------------------- Kendall


def test_tau_examples():
    assert bh.kendall_tau([1, 2, 3, 4], [1, 2, 3, 4]) == 1.0
    assert bh.kendall_tau([1, 2, 3, 4], [4, 3, 2, 1]) == -1.0
    assert bh.kendall_tau([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(4 / 6, abs=1e-15)


def test_tau_errors():
    with pytest.raises(LengthMismatch):
        bh.kendall_tau([1, 2, 3], [1, 2])
    with pytest.raises(LengthMismatch):
        bh.kendall_tau([1], [1])
    with pytest.raises(Undefined):
        bh.kendall_tau([1, 1, 1], [1, 2, 3])
    with pytest.raises(Undefined):
        bh.kendall_tau([1, 2, 3], [5, 5, 5])


def test_tau_a_and_report():
    x, y = [1, 2, 2, 3], [1, 1, 2, 3]
    rep = bh.tau_report(x, y)
    assert rep["tau_b"] == bh.kendall_tau(x, y)
    assert rep["tau_a"] == bh.kendall_tau_a(x, y) == (rep["concordant"] - rep["discordant"]) / 6
    assert rep["ties_scores_only"] == 1 and rep["ties_truth_only"] == 1


def test_tau_equals_tau_a_without_ties(rng):
    x, y = rng.random(30), rng.random(30)
    assert bh.kendall_tau(x, y) == pytest.approx(bh.kendall_tau_a(x, y), abs=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 6)), min_size=2, max_size=40))
def test_tau_matches_brute_force_with_ties(pairs):
    x, y = [p[0] for p in pairs], [p[1] for p in pairs]
    ref = brute_tau(x, y)
    if ref is None:
        with pytest.raises(Undefined):
            bh.kendall_tau(x, y)
    else:
        assert bh.kendall_tau(x, y) == ref


def test_tau_matches_scipy(rng):
    for _ in range(20):
        x, y = rng.integers(0, 8, 60), rng.random(60)
        assert bh.kendall_tau(x, y) == pytest.approx(stats.kendalltau(x, y).statistic, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1000, 1000), min_size=2, max_size=30, unique=True), st.integers(0, 2**31))
def test_tau_invariances(values, seed):
    x = np.array(values, dtype=float)
    y = np.random.default_rng(seed).permutation(len(x)).astype(float)
    t = bh.kendall_tau(x, y)
    assert bh.kendall_tau(x**3 + 5 * x, y) == pytest.approx(t, abs=1e-12)
    assert bh.kendall_tau(np.exp(x / 100), y) == pytest.approx(t, abs=1e-12)
    assert bh.kendall_tau(-x, y) == pytest.approx(-t, abs=1e-12)


def records(values, genotypes):
    return [ScoreRecord(g, "m", float(v), 0, "") for g, v in zip(genotypes, values)]


def test_metric_rank_correlation(micro, rng):
    gs = enumerate_all(micro)
    a = rng.random(27)
    b = rng.random(27)
    ra = records(a, gs)
    assert bh.metric_rank_correlation(ra, ra) == 1.0
    assert bh.metric_rank_correlation(ra, records(-a, gs)) == -1.0
    perm = rng.permutation(27)
    shuffled = [records(b, gs)[i] for i in perm]
    assert bh.metric_rank_correlation(ra, shuffled) == bh.kendall_tau(a, b)
    with pytest.raises(GenotypeSetMismatch):
        bh.metric_rank_correlation(ra, records(b, gs)[:-1])


# ---------------------------------------------------------------- curvature


def test_profile_sigma_zero_and_immutability(micro, data):
    g = Genotype((2, 1, 2))
    p = init_params(micro, data.input_dim, data.num_classes, np.random.default_rng(0), g)
    before = p.copy()
    val = data.split("val")
    prof = bh.loss_curvature_profile(p, g, micro, val, [0.0, 0.01, 0.05], replicates=4, rng=np.random.default_rng(1))
    assert prof.mean_losses[0] == forward(p, g, micro, val)[1]
    assert prof.sigmas == (0.0, 0.01, 0.05) and len(prof.mean_losses) == 3
    assert p.bit_equal(before)
    lines = prof.to_csv().splitlines()
    assert lines[0] == "sigma,mean_loss" and len(lines) == 4


def test_profile_toys():
    w = ParamSet([("w", np.array([0.0]), "cell")])
    flat = bh.curvature_of(lambda p: 2.0, w, [0.1, 0.5, 1.0], 3, np.random.default_rng(0))
    assert flat == [2.0, 2.0, 2.0]
    plus = lambda params, rng: {"w": np.ones(1)}
    q = bh.curvature_of(lambda p: float(p["w"][0]) ** 2, w, [0.1, 0.2], 1, np.random.default_rng(0), plus)
    assert q == pytest.approx([0.01, 0.04], abs=1e-15)


def test_profile_validation():
    w = ParamSet([("w", np.array([0.0]), "cell")])
    with pytest.raises(ValueError):
        bh.curvature_of(lambda p: 1.0, w, [0.2, 0.1], 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        bh.curvature_of(lambda p: 1.0, w, [0.1], 0, np.random.default_rng(0))
    with pytest.raises(NonFiniteLoss):
        bh.curvature_of(lambda p: float("nan"), w, [0.1], 1, np.random.default_rng(0))
