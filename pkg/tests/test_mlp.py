import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sbias.datagen import generate_dataset, preset
from sbias.mlp import (
    ACTIVATIONS, Ensemble, InitSpec, Optimizer, OptimizerSpec, TrainConfig, ensemble_score, forward, init_model,
    interpolate, load_model, loss_and_grad, loss_value, predict, save_model, theorem_variance, train,
)


def _fd_check(model, X, y, loss, h=1e-5):
    """Max relative error over coordinates whose indicators are stable under +-h."""
    _, grads = loss_and_grad(model, X, y, loss)
    worst = 0.0
    for name, p in model.params.items():
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp, sp = loss_value(model(X), y, loss), _pattern(model, X, y)
            p[idx] = orig - h
            lm, sm = loss_value(model(X), y, loss), _pattern(model, X, y)
            p[idx] = orig
            if not (np.array_equal(sp, sm) and np.array_equal(sp, _pattern(model, X, y))):
                continue
            fd = (lp - lm) / (2 * h)
            an = grads[name][idx]
            denom = max(abs(fd), abs(an), 1e-7)
            worst = max(worst, abs(fd - an) / denom)
    return worst


def _pattern(model, X, y):
    """Indicator pattern (ReLU gates and hinge activity) for stability checks."""
    h = X
    gates = []
    for layer in range(1, model.depth + 1):
        z = h @ model.params[f"W{layer}"]
        if model.use_bias:
            z = z + model.params[f"b{layer}"]
        gates.append(z >= 0)
        h = np.where(z >= 0, z, 0.0) if model.activation == "relu" else np.tanh(z)
    return np.concatenate([g.ravel() for g in gates] + [(y * model(X) <= 1).ravel()])


class TestInit:
    def test_frozen_output_split(self):
        m = init_model(5, (4, 1), freeze_output=True, seed=3)
        assert sorted(m.params["Wout"]) == [-0.5, -0.5, 0.5, 0.5]

    def test_odd_width_frozen_rejected(self):
        with pytest.raises(ValueError):
            init_model(5, (5, 1), freeze_output=True)

    def test_zero_scale_custom(self):
        m = init_model(6, (8, 2), InitSpec("custom", scale=0.0, variance=1.0))
        assert all(not m.params[f"W{i}"].any() for i in (1, 2))

    def test_theorem_variance(self):
        m = init_model(100, (100, 1), InitSpec("theorem"), seed=1)
        target = 1.0 / (100 * 100 * math.log(100) ** 2)
        # the theorem scheme uses k = width
        assert theorem_variance(100, 100) == pytest.approx(target)
        assert abs(m.params["W1"].var() / target - 1) < 0.1

    def test_theorem_variance_k16(self):
        m = init_model(100, (16, 1), InitSpec("theorem"), seed=2)
        w = m.params["W1"]
        assert w.size == 1600
        big = np.concatenate([init_model(100, (16, 1), InitSpec("theorem"), seed=s).params["W1"].ravel()
                              for s in range(7)])
        assert abs(big.var() / theorem_variance(100, 16) - 1) < 0.1

    def test_log4_variant(self):
        assert theorem_variance(100, 16, 4) < theorem_variance(100, 16, 2)

    def test_deterministic(self):
        a, b = init_model(7, (9, 2), seed=11), init_model(7, (9, 2), seed=11)
        assert a.same_params(b)

    def test_negative_scale_rejected(self):
        with pytest.raises(ValueError):
            InitSpec("kaiming", scale=-1.0)


class TestForward:
    def test_zero_weights_give_zero(self):
        m = init_model(4, (6, 2), InitSpec("custom", 0.0, 1.0))
        np.testing.assert_array_equal(m(np.random.default_rng(0).normal(size=(5, 4))), 0.0)

    def test_single_relu_unit(self):
        m = init_model(3, (1, 1), use_bias=False)
        m.params["W1"][:] = [[1.0], [0.0], [0.0]]
        m.params["Wout"][:] = [1.0]
        assert m(np.array([-3.0, 1.0, 1.0]))[0] == 0.0
        assert m(np.array([2.0, 1.0, 1.0]))[0] == 2.0

    def test_unrolled_one_layer(self):
        rng = np.random.default_rng(1)
        m = init_model(6, (10, 1), seed=2)
        m.params["b1"][:] = rng.normal(size=10)
        m.params["bout"][:] = 0.3
        X = rng.normal(size=(20, 6))
        manual = np.array([sum(m.params["Wout"][j] * max(0.0, x @ m.params["W1"][:, j] + m.params["b1"][j])
                               for j in range(10)) + 0.3 for x in X])
        np.testing.assert_allclose(forward(m, X), manual, atol=1e-12, rtol=0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            init_model(4, (3, 1))(np.zeros((2, 5)))

    def test_tie_rule(self):
        assert list(predict(np.array([0.0, -1e-12, 1e-12]))) == [1, -1, 1]


class TestGradients:
    def test_inactive_hinge(self):
        m = init_model(1, (2, 1), use_bias=False)
        m.params["W1"][:] = [[1.0, -1.0]]
        m.params["Wout"][:] = [2.0, -2.0]
        X = np.array([[1.0], [-1.5]])
        y = np.array([1.0, -1.0])
        # s = 2x, so y*s >= 2 on both points
        loss, g = loss_and_grad(m, X, y, "hinge")
        assert loss == 0.0
        assert all(not v.any() for v in g.values())

    def test_single_example_closed_form(self):
        m = init_model(3, (2, 1), freeze_output=True, seed=0, use_bias=False)
        m.params["W1"][:] = [[0.3, -0.2], [0.1, 0.4], [-0.5, 0.2]]
        x = np.array([[1.0, 2.0, 0.5]])
        y = np.array([-1.0])
        _, g = loss_and_grad(m, x, y, "hinge")
        v = m.params["Wout"]
        active = float(y[0] * m(x)[0] <= 1)
        expected = np.array([[-active * v[j] * float(x[0] @ m.params["W1"][:, j] >= 0) * y[0] * x[0, i]
                              for j in range(2)] for i in range(3)])
        np.testing.assert_allclose(g["W1"], expected, atol=1e-12, rtol=0)
        assert not g["Wout"].any()

    @pytest.mark.parametrize("activation", ACTIVATIONS)
    @pytest.mark.parametrize("loss", ["hinge", "logistic"])
    def test_finite_differences(self, activation, loss):
        rng = np.random.default_rng(hash((activation, loss)) % 2**32)
        m = init_model(5, (4, 2), seed=int(rng.integers(1e6)), activation=activation)
        X = rng.normal(size=(7, 5))
        y = rng.choice([-1.0, 1.0], 7)
        assert _fd_check(m, X, y, loss) < 1e-5

    def test_nonfinite_rejected(self):
        m = init_model(2, (2, 1))
        with pytest.raises(ValueError):
            loss_and_grad(m, np.array([[np.nan, 0.0]]), np.array([1.0]))

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            loss_and_grad(init_model(2, (2, 1)), np.zeros((0, 2)), np.zeros(0))

    def test_input_grad_matches_fd(self):
        rng = np.random.default_rng(4)
        m = init_model(5, (8, 2), seed=1, activation="tanh")
        X = rng.normal(size=(3, 5))
        g = m.input_grad(X)
        h = 1e-6
        for i in range(5):
            e = np.zeros(5)
            e[i] = h
            np.testing.assert_allclose(g[:, i], (m(X + e) - m(X - e)) / (2 * h), rtol=1e-6, atol=1e-9)


class TestOptimizers:
    def test_plain_sgd_step(self):
        m = init_model(3, (4, 1), seed=0)
        rng = np.random.default_rng(0)
        X, y = rng.normal(size=(6, 3)), rng.choice([-1.0, 1.0], 6)
        before = {k: v.copy() for k, v in m.params.items()}
        _, g = loss_and_grad(m, X, y)
        Optimizer(OptimizerSpec("sgd", 0.3, momentum=0.0, weight_decay=0.0)).step(m.params, g)
        for k in before:
            np.testing.assert_array_equal(m.params[k], before[k] - 0.3 * g[k])

    def test_momentum_accumulates(self):
        p = {"w": np.array([1.0])}
        opt = Optimizer(OptimizerSpec("sgd", 0.1, momentum=0.9, weight_decay=0.0))
        opt.step(p, {"w": np.array([1.0])})
        opt.step(p, {"w": np.array([1.0])})
        assert p["w"][0] == pytest.approx(1.0 - 0.1 - 0.1 * 1.9)

    def test_adam_first_step_is_lr_sign(self):
        p = {"w": np.array([1.0, -2.0])}
        Optimizer(OptimizerSpec("adam", 0.01, weight_decay=0.0)).step(p, {"w": np.array([3.0, -0.5])})
        np.testing.assert_allclose(p["w"], [1.0 - 0.01, -2.0 + 0.01], atol=1e-7)

    def test_rmsprop_runs(self):
        p = {"w": np.array([1.0])}
        Optimizer(OptimizerSpec("rmsprop", 0.01, weight_decay=0.0)).step(p, {"w": np.array([2.0])})
        assert p["w"][0] < 1.0

    def test_parse(self):
        s = OptimizerSpec.parse("adam:0.003")
        assert s.name == "adam" and s.lr == 0.003
        with pytest.raises(ValueError):
            OptimizerSpec.parse("sgd:-1")

    @pytest.mark.parametrize("name", ["sgd", "adam", "rmsprop"])
    def test_frozen_output_untouched(self, name):
        data = generate_dataset(preset("lsn", 10), 200, 0)
        m0 = init_model(10, (6, 1), InitSpec("theorem"), freeze_output=True, seed=1, use_bias=False)
        cfg = TrainConfig(loss="hinge", optimizer=OptimizerSpec(name, 0.05, momentum=0.9 if name == "sgd" else 0.0),
                          batch_size=16, epochs=3, early_stop_loss=None)
        m1, _ = train(m0, data, cfg)
        assert m1.params["Wout"].tobytes() == m0.params["Wout"].tobytes()
        assert not np.array_equal(m1.params["W1"], m0.params["W1"])


class TestDropout:
    def test_expectation(self):
        from sbias.mlp import dropout_masks

        m = init_model(4, (3, 1), seed=0)
        rng = np.random.default_rng(0)
        masks = np.stack([dropout_masks(m, 1, 0.3, rng)[0][0] for _ in range(10_000)])
        np.testing.assert_allclose(masks.mean(axis=0), 1.0, atol=0.01 * 3)
        assert set(np.unique(masks)) <= {0.0, 1 / 0.7}

    def test_dropout_changes_training(self):
        data = generate_dataset(preset("lms-5", 10), 300, 0)
        m = init_model(10, (16, 1), seed=0)
        a, _ = train(m, data, TrainConfig(epochs=2, dropout=0.0))
        b, _ = train(m, data, TrainConfig(epochs=2, dropout=0.5))
        assert not a.same_params(b)


class TestTrain:
    def test_zero_steps_identity(self):
        data = generate_dataset(preset("lms-5", 10), 100, 0)
        m = init_model(10, (8, 1), seed=0)
        out, hist = train(m, data, TrainConfig(epochs=0))
        assert out.same_params(m) and hist.steps == 0
        out, hist = train(m, data, TrainConfig(max_steps=0))
        assert out.same_params(m)

    def test_deterministic(self):
        data = generate_dataset(preset("lms-5", 10), 500, 0)
        m = init_model(10, (8, 1), seed=0)
        cfg = TrainConfig(epochs=3, dropout=0.2, seed=5)
        a, ha = train(m, data, cfg)
        b, hb = train(m, data, cfg)
        assert a.same_params(b) and ha.step_loss == hb.step_loss

    def test_input_model_not_mutated(self):
        data = generate_dataset(preset("lms-5", 10), 200, 0)
        m = init_model(10, (8, 1), seed=0)
        snapshot = m.copy()
        train(m, data, TrainConfig(epochs=2))
        assert m.same_params(snapshot)

    def test_group_norms_recorded(self):
        data = generate_dataset(preset("lms-5", 10, rotation_seed=1), 512, 0)
        _, hist = train(init_model(10, (8, 1), seed=0), data, TrainConfig(epochs=1, batch_size=256))
        assert len(hist.group_norms["S"]) == hist.steps == 2

    def test_divergence_flagged(self):
        data = generate_dataset(preset("lms-5", 10), 256, 0)
        m = init_model(10, (32, 2), InitSpec("kaiming", scale=50.0), seed=0)
        _, hist = train(m, data, TrainConfig(loss="hinge", optimizer=OptimizerSpec("sgd", 1e4), epochs=20,
                                             divergence_loss=1e6))
        assert hist.diverged

    def test_early_stop(self):
        data = generate_dataset(preset("lms-5", 10), 2000, 0)
        _, hist = train(init_model(10, (32, 1), seed=0), data, TrainConfig(epochs=200))
        assert hist.stopped_early and hist.epoch_loss[-1] < 1e-2

    @pytest.mark.slow
    def test_lms5_accuracy(self):
        spec = preset("lms-5", 50)
        tr, te = generate_dataset(spec, 50_000, 1), generate_dataset(spec, 10_000, 2)
        m, _ = train(init_model(50, (100, 1), seed=0), tr, TrainConfig())
        assert np.mean(predict(m(te.features)) == te.labels) >= 0.99

    @pytest.mark.slow
    def test_lms5_without_linear(self):
        spec = preset("lms-5", 50).drop([0])
        tr, te = generate_dataset(spec, 50_000, 1), generate_dataset(spec, 10_000, 2)
        m, _ = train(init_model(49, (100, 1), seed=0), tr, TrainConfig(epochs=200))
        assert np.mean(predict(m(te.features)) == te.labels) >= 0.99


class TestEnsembleInterpolate:
    def test_single_member(self):
        m = init_model(4, (5, 1), seed=1)
        X = np.random.default_rng(0).normal(size=(9, 4))
        np.testing.assert_array_equal(ensemble_score([m], X), m(X))

    def test_opposite_members_tie_to_positive(self):
        a = init_model(2, (2, 1), seed=0)
        b = a.copy()
        b.params["Wout"] = -b.params["Wout"]
        b.params["bout"] = -b.params["bout"]
        X = np.array([[1.0, 2.0]])
        s = Ensemble([a, b])(X)
        assert s[0] == pytest.approx(0.0, abs=1e-15)
        assert predict(np.array([0.0]))[0] == 1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            ensemble_score([], np.zeros((1, 2)))

    def test_endpoints_exact(self):
        a, b = init_model(4, (5, 2), seed=1), init_model(4, (5, 2), seed=2)
        assert interpolate(a, b, 1.0).same_params(a)
        assert interpolate(a, b, 0.0).same_params(b)

    def test_midpoint(self):
        a, b = init_model(4, (5, 2), seed=1), init_model(4, (5, 2), seed=2)
        mid = interpolate(a, b, 0.5)
        for k in a.params:
            np.testing.assert_allclose(mid.params[k], (a.params[k] + b.params[k]) / 2, atol=1e-15, rtol=0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            interpolate(init_model(4, (5, 1)), init_model(4, (6, 1)), 0.5)

    @settings(max_examples=30, deadline=None)
    @given(alpha=st.floats(0, 1))
    def test_convex_combination(self, alpha):
        a, b = init_model(3, (4, 1), seed=1), init_model(3, (4, 1), seed=2)
        m = interpolate(a, b, alpha)
        lo = np.minimum(a.params["W1"], b.params["W1"]) - 1e-15
        hi = np.maximum(a.params["W1"], b.params["W1"]) + 1e-15
        assert np.all((m.params["W1"] >= lo) & (m.params["W1"] <= hi))


class TestCheckpoint:
    @pytest.mark.parametrize("activation", ACTIVATIONS)
    def test_round_trip(self, tmp_path, activation):
        m = init_model(6, (5, 2), seed=3, activation=activation, freeze_output=False)
        save_model(m, tmp_path / "m.ckpt")
        back = load_model(tmp_path / "m.ckpt")
        assert back.same_params(m) and back.activation == activation and back.arch == m.arch

    def test_truncated(self, tmp_path):
        m = init_model(6, (5, 2), seed=3)
        p = save_model(m, tmp_path / "m.ckpt")
        p.write_bytes(p.read_bytes()[:-16])
        with pytest.raises(IOError):
            load_model(p)
