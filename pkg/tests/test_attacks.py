import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbias.attacks import (AttackConfig, _minimal_flip, adversarial_train, group_energy, pgd, project, uap,
                           uap_transfer)
from sbias.datagen import generate_dataset, preset
from sbias.metrics import LinearScorer, accuracy
from sbias.mlp import TrainConfig, init_model, train


def _linear_case(seed, d=6, n=20):
    rng = np.random.default_rng(seed)
    w = rng.normal(size=d)
    return LinearScorer(w, 0.3), rng.normal(size=(n, d)), rng.choice([-1.0, 1.0], n), w


class TestProject:
    def test_l2_inside_unchanged(self):
        v = np.array([[0.3, 0.4]])
        np.testing.assert_array_equal(project(v, 1.0, "l2"), v)

    def test_l2_outside_scaled(self):
        np.testing.assert_allclose(project(np.array([[3.0, 4.0]]), 1.0, "l2"), [[0.6, 0.8]])

    def test_linf_clips(self):
        np.testing.assert_array_equal(project(np.array([[2.0, -0.1]]), 0.5, "linf"), [[0.5, -0.1]])


class TestPgd:
    @pytest.mark.parametrize("seed", range(5))
    def test_l2_matches_closed_form(self, seed):
        model, X, y, w = _linear_case(seed)
        eps = 0.5
        Xa = pgd(model, X, y, AttackConfig("l2", eps, steps=20, step_size=0.1))
        got = -y * model(Xa)
        best = -y * model(X) + eps * np.linalg.norm(w)
        np.testing.assert_allclose(got, best, rtol=1e-4)

    @pytest.mark.parametrize("seed", range(5))
    def test_linf_matches_closed_form(self, seed):
        model, X, y, w = _linear_case(seed)
        eps = 0.2
        Xa = pgd(model, X, y, AttackConfig("linf", eps, steps=5, step_size=0.1))
        got = -y * model(Xa)
        best = -y * model(X) + eps * np.abs(w).sum()
        np.testing.assert_allclose(got, best, rtol=1e-4)

    def test_zero_budget_identity(self):
        model, X, y, _ = _linear_case(0)
        np.testing.assert_array_equal(pgd(model, X, y, AttackConfig("l2", 0.0)), X)

    def test_single_example(self):
        model, X, y, w = _linear_case(1)
        xa = pgd(model, X[0], y[:1], AttackConfig("l2", 0.3, steps=10))
        assert xa.shape == X[0].shape

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 1000), eps=st.floats(0.01, 2.0), norm=st.sampled_from(["l2", "linf"]),
           restarts=st.integers(1, 3))
    def test_stays_within_budget(self, seed, eps, norm, restarts):
        m = init_model(5, (8, 2), seed=seed)
        X = np.random.default_rng(seed).normal(size=(10, 5))
        y = np.where(np.arange(10) % 2, 1.0, -1.0)
        Xa = pgd(m, X, y, AttackConfig(norm, eps, steps=5, step_size=eps / 2, restarts=restarts, seed=seed))
        dist = np.linalg.norm(Xa - X, axis=1) if norm == "l2" else np.abs(Xa - X).max(axis=1)
        assert np.all(dist <= eps * (1 + 1e-9))

    def test_never_worse_than_clean(self):
        m = init_model(5, (16, 2), seed=3)
        X = np.random.default_rng(0).normal(size=(30, 5))
        y = np.sign(X[:, 0]) + (X[:, 0] == 0)
        Xa = pgd(m, X, y, AttackConfig("l2", 0.5, steps=10, restarts=2, seed=1))
        assert np.all(-y * m(Xa) >= -y * m(X) - 1e-12)

    def test_monotone_trace(self):
        m = init_model(5, (16, 2), seed=3, activation="tanh")
        X = np.random.default_rng(0).normal(size=(30, 5))
        y = np.ones(30)
        trace = []
        pgd(m, X, y, AttackConfig("l2", 1.0, steps=15, step_size=0.3, monotone=True), trace)
        assert len(trace) == 16
        assert all(b >= a - 1e-12 for a, b in zip(trace, trace[1:]))

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            AttackConfig("l1", 0.1)
        with pytest.raises(ValueError):
            AttackConfig("l2", -0.1)


@pytest.fixture(scope="module")
def lms():
    return generate_dataset(preset("lms-5", 10, rotation_seed=2), 2000, 1)


class TestUap:
    def test_shared_delta_on_positives(self, lms):
        pos = lms.subset(np.flatnonzero(lms.labels == 1))
        scorer = LinearScorer(lms.rotation[:, 0])
        res = uap(scorer, pos, AttackConfig("l2", 1.0, steps=50, step_size=0.05))
        assert res.energy_by_group["S"] > 0.999 and res.fooled_fraction > 0.99

    def test_energy_on_linear_scorer(self, lms):
        scorer = LinearScorer(lms.rotation[:, 0])  # latent linear coordinate in the rotated basis
        res = uap(scorer, lms, AttackConfig("l2", 1.0, steps=50, step_size=0.05), per_class=True)
        assert res.energy_by_group["S"] > 0.999
        assert res.norm_used <= 1.0 + 1e-12

    def test_ascent_method_on_positives(self, lms):
        pos = lms.subset(np.flatnonzero(lms.labels == 1))
        scorer = LinearScorer(lms.rotation[:, 0])
        res = uap(scorer, pos, AttackConfig("l2", 1.0, steps=50, step_size=0.05), method="ascent")
        assert res.energy_by_group["S"] > 0.999 and res.fooled_fraction > 0.99

    def test_unknown_method(self, lms):
        with pytest.raises(ValueError):
            uap(LinearScorer(np.ones(lms.d)), lms, AttackConfig("l2", 1.0), method="newton")

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from(["l2", "linf"]))
    def test_minimal_flip_is_exact_on_linear_scores(self, seed, norm):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=5)
        f = float(rng.normal())
        r = _minimal_flip(f, w, norm, overshoot=0.02)
        assert f + w @ r == pytest.approx(-0.02 * f, abs=1e-12)
        # the flip is minimal in the attack norm: |f| / dual norm of w
        dual = np.linalg.norm(w) if norm == "l2" else np.abs(w).sum()
        size = np.linalg.norm(r) if norm == "l2" else np.abs(r).max()
        assert size == pytest.approx(1.02 * abs(f) / dual)

    def test_energy_rotation_consistency(self, lms):
        rng = np.random.default_rng(0)
        lat = rng.normal(size=lms.d)
        delta = lms.from_latent(lat[None])[0]
        e = group_energy(delta, lms)
        assert e["S"] == pytest.approx(lat[0] ** 2 / np.sum(lat ** 2))
        assert e["S"] + e["Sc"] == pytest.approx(1.0)

    def test_per_class_fools_linear_scorer(self, lms):
        scorer = LinearScorer(lms.rotation[:, 0])
        res = uap(scorer, lms, AttackConfig("l2", 1.05, steps=60, step_size=0.05), per_class=True)
        assert res.fooled_fraction > 0.99
        assert uap_transfer(res, scorer, lms) == pytest.approx(res.fooled_fraction)

    def test_transfer_zero_delta_is_clean_error(self, lms):
        m = init_model(lms.d, (8, 1), seed=0)
        err = uap_transfer(np.zeros(lms.d), m, lms)
        assert err == pytest.approx(1 - accuracy(m(lms.features), lms.labels))

    def test_transfer_dim_mismatch(self, lms):
        with pytest.raises(ValueError):
            uap_transfer(np.zeros(lms.d + 1), LinearScorer(np.ones(lms.d)), lms)


class TestAdversarialTrain:
    def test_zero_budget_equals_standard_training(self):
        data = generate_dataset(preset("lms-5", 10), 400, 0)
        m = init_model(10, (8, 1), seed=0)
        cfg = TrainConfig(epochs=2, seed=3)
        a, _ = adversarial_train(m, data, AttackConfig("l2", 0.0), cfg)
        b, _ = train(m, data, cfg)
        assert a.same_params(b)

    def test_positive_budget_changes_training(self):
        data = generate_dataset(preset("lms-5", 10), 400, 0)
        m = init_model(10, (8, 1), seed=0)
        cfg = TrainConfig(epochs=1, seed=3)
        a, _ = adversarial_train(m, data, AttackConfig("l2", 0.2, steps=3, step_size=0.1), cfg)
        b, _ = train(m, data, cfg)
        assert not a.same_params(b)
