import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import finite_difference, random_model, relative_error

from fuzzdistill import distill
from fuzzdistill.data_ingest import Dataset, SoftLabelSet
from fuzzdistill.distill import (
    TrainConfig,
    combine_losses,
    hard_loss,
    kd_loss,
    loss_and_grad,
    softened_distribution,
    total_loss,
)
from fuzzdistill.errors import ConfigError, ValidationError
from fuzzdistill.optim import Adam
from fuzzdistill.pca import PcaTransform
from fuzzdistill.tsk import backward, forward


class TestSoftened:
    def test_equal_logits_uniform(self):
        np.testing.assert_allclose(softened_distribution(np.full(7, 3.2), 2.5), 1 / 7)

    def test_high_temperature_limit(self):
        q = softened_distribution(np.array([30.0, -12.0, 4.0, 0.0]), 1e6)
        np.testing.assert_allclose(q, 0.25, atol=1e-5)

    def test_two_logits(self):
        e = math.e
        np.testing.assert_allclose(softened_distribution([1.0, 0.0], 1.0), [e / (e + 1), 1 / (e + 1)], rtol=1e-15)
        np.testing.assert_allclose(softened_distribution([1.0, 0.0], 1.0), [0.7311, 0.2689], atol=1e-4)

    @pytest.mark.parametrize("t", [0.0, -1.0])
    def test_bad_temperature(self, t):
        with pytest.raises(ValidationError):
            softened_distribution([1.0, 0.0], t)


class TestKdLoss:
    def test_matching_logits_give_entropy(self):
        p = math.e / (math.e + 1)
        entropy = -(p * math.log(p) + (1 - p) * math.log(1 - p))
        assert kd_loss([1.0, 0.0], [1.0, 0.0], 1.0, 1.0) == pytest.approx(entropy, rel=1e-12)
        assert entropy == pytest.approx(0.582203, abs=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-5, 5), min_size=2, max_size=6))
    def test_minimum_at_matching_student(self, shift_seed):
        teacher = np.array(shift_seed)
        base = kd_loss(teacher, teacher, 1.0, 1.0)
        rng = np.random.default_rng(len(shift_seed))
        for _ in range(5):
            assert kd_loss(teacher, teacher + rng.normal(size=len(teacher)), 1.0, 1.0) >= base - 1e-12
        assert kd_loss(teacher, teacher + 3.7, 1.0, 1.0) == pytest.approx(base, abs=1e-12)

    def test_uniform_teacher_gibbs(self):
        rng = np.random.default_rng(0)
        c = 10
        assert kd_loss(np.zeros(c), np.zeros(c), 2.0, 1.0) == pytest.approx(math.log(c), rel=1e-14)
        for _ in range(20):
            assert kd_loss(np.zeros(c), rng.normal(size=c), 2.0, 1.0) > math.log(c)

    def test_one_hot_teacher(self):
        z = np.array([50.0] + [0.0] * 9)
        assert kd_loss(z, z, 1.0, 1.0) < 1e-18

    def test_batch_mean(self):
        rng = np.random.default_rng(1)
        t, s = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        assert kd_loss(t, s, 2.0, 1.0) == pytest.approx(np.mean([kd_loss(t[i], s[i], 2.0, 1.0) for i in range(4)]))


class TestHardLoss:
    def test_uniform(self):
        assert hard_loss(np.zeros(10), 3) == pytest.approx(math.log(10), rel=1e-15)

    def test_confident(self):
        assert hard_loss(np.array([10.0, -10.0]), 0) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-6)
        assert hard_loss(np.array([10.0, -10.0]), 0) == pytest.approx(2.06e-9, rel=1e-3)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.integers(0, 7))
    def test_non_negative(self, logits, label):
        assert hard_loss(np.array(logits), label % len(logits)) >= 0


class TestTotalLoss:
    def test_arithmetic(self):
        assert combine_losses(2.0, 0.4, 0.5, 5.0, 1.0) == pytest.approx(2.0, abs=1e-15)

    @pytest.mark.parametrize("t", [1.0, 2.5, 5.0, 7.5, 0.3, 11.7])
    @pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.75, 1.0, 0.1])
    def test_single_temperature_identity_exact(self, t, alpha):
        rng = np.random.default_rng(int(t * 10 + alpha * 100))
        l_s, l_kd = rng.uniform(0, 3, size=2)
        assert combine_losses(l_s, l_kd, alpha, t, t) == (1 - alpha) * l_s + alpha * t**2 * l_kd
        assert distill.baseline_loss(l_s, l_kd, alpha, t) == combine_losses(l_s, l_kd, alpha, t, t)

    def _batch(self, seed=0):
        rng = np.random.default_rng(seed)
        model = random_model(rng, 3, 4, 5)
        x = rng.normal(size=(6, 4))
        y = rng.integers(0, 5, size=6)
        teacher = rng.normal(size=(6, 5)) * 3
        return model, x, y, teacher

    def test_alpha_zero_is_hard_loss(self):
        model, x, y, teacher = self._batch()
        z = forward(model, x).logits
        assert total_loss((x, y), model, None, TrainConfig()) == pytest.approx(hard_loss(z, y), rel=1e-15)

    def test_alpha_one_unit_temperature_is_kd(self):
        model, x, y, teacher = self._batch()
        z = forward(model, x).logits
        cfg = TrainConfig(mode="modified_kd", alpha=1.0)
        assert total_loss((x, y), model, teacher, cfg) == pytest.approx(kd_loss(teacher, z, 1, 1), rel=1e-15)

    def test_missing_soft_labels(self):
        model, x, y, _ = self._batch()
        with pytest.raises(ConfigError):
            total_loss((x, y), model, None, TrainConfig(mode="modified_kd", alpha=0.5))

    def test_hard_loss_gradient_identity(self):
        rng = np.random.default_rng(2)
        z = rng.normal(size=(1, 6))
        _, _, _, _, g = loss_and_grad(z, np.array([2]), None, TrainConfig())
        p = np.exp(z) / np.exp(z).sum()
        onehot = np.eye(6)[2]
        np.testing.assert_allclose(g[0], p[0] - onehot, atol=1e-15)
        num = finite_difference(lambda: hard_loss(z, 2), {"z": z})["z"]
        np.testing.assert_allclose(g, num, atol=1e-5)

    def test_kd_gradient_identity(self):
        rng = np.random.default_rng(3)
        z, t = rng.normal(size=(1, 6)), rng.normal(size=(1, 6))
        for t1 in (1.0, 4.0):
            cfg = TrainConfig(mode="modified_kd", alpha=1.0, temp_teacher=t1)
            _, _, _, _, g = loss_and_grad(z, np.array([0]), t, cfg)
            q_s = softened_distribution(z[0], 1.0)
            q_t = softened_distribution(t[0], t1)
            # the loss carries the T1*T2 weight, so its gradient is T1 (q_s - q_t)
            np.testing.assert_allclose(g[0] / t1, q_s - q_t, atol=1e-15)
            num = finite_difference(lambda: kd_loss(t, z, t1, 1.0), {"z": z})["z"]
            np.testing.assert_allclose(g / t1, num, atol=1e-5)

    @pytest.mark.parametrize("mode,t1,t2", [("baseline_kd", 2.5, 2.5), ("modified_kd", 5.0, 1.0), ("no_kd", 1, 1)])
    def test_parameter_gradients_match_finite_differences(self, mode, t1, t2):
        model, x, y, teacher = self._batch(seed=4)
        alpha = 0.0 if mode == "no_kd" else 0.4
        cfg = TrainConfig(mode=mode, alpha=alpha, temp_teacher=t1, temp_student=t2)
        tr = forward(model, x)
        _, _, _, _, g = loss_and_grad(tr.logits, y, teacher, cfg)
        analytic = backward(model, x, g, tr).as_dict()
        numeric = finite_difference(lambda: total_loss((x, y), model, teacher, cfg), model.params())
        for name in analytic:
            assert relative_error(analytic[name], numeric[name]) < 1e-4, name


class TestConfig:
    def test_invariants(self):
        with pytest.raises(ConfigError):
            TrainConfig(mode="baseline_kd", temp_teacher=2, temp_student=1, alpha=0.5).validate()
        with pytest.raises(ConfigError):
            TrainConfig(mode="no_kd", alpha=0.5).validate()
        with pytest.raises(ConfigError):
            TrainConfig(mode="modified_kd", alpha=1.5).validate()
        with pytest.raises(ConfigError):
            TrainConfig(temp_teacher=0.0).validate()
        with pytest.raises(ConfigError):
            TrainConfig(mode="bogus").validate()

    def test_lr_schedule(self):
        cfg = TrainConfig()
        assert [cfg.lr_at(e) for e in (0, 24, 25, 49, 50, 75, 99)] == [
            0.01, 0.01, 0.005, 0.005, 0.0025, 0.00125, 0.00125]


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        p = {"w": np.array([1.0, -2.0])}
        opt = Adam()
        for _ in range(100):
            opt.step(p, {"w": np.zeros(2)}, 0.1)
        np.testing.assert_array_equal(p["w"], [1.0, -2.0])

    def test_first_step_magnitude(self):
        p = {"w": np.zeros(3)}
        g = np.array([0.3, -7.0, 1e-3])
        Adam().step(p, {"w": g}, 0.01)
        # bias-corrected m/sqrt(v) = g/|g| at t=1
        np.testing.assert_allclose(p["w"], -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        np.testing.assert_allclose(np.abs(p["w"]), 0.01, rtol=1e-4)

    def test_quadratic_bowl(self):
        target = np.array([3.0, -1.5, 0.25])
        scale = np.array([1.0, 10.0, 0.1])
        p = {"w": np.zeros(3)}
        opt = Adam()
        for _ in range(2000):
            opt.step(p, {"w": scale * (p["w"] - target)}, 0.01)
        assert np.max(np.abs(p["w"] - target)) < 1e-3

    def test_sigma_clamp_after_step(self):
        rng = np.random.default_rng(0)
        model = random_model(rng, 2, 2, 2)
        model.sigmas[:] = 0.0011
        grads = {k: np.zeros_like(v) for k, v in model.params().items()}
        grads["sigmas"][:] = 1.0
        distill.adam_step(model, grads, Adam(), 0.1)
        assert model.sigmas.min() >= 1e-3


def blobs(n, seed, d=2):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    x = rng.normal(size=(n, d)) * 0.6 + np.where(y[:, None] == 1, 2.5, -2.5)
    return x, y


class TestTraining:
    def test_blob_problem(self):
        xt, yt = blobs(400, 0)
        xv, yv = blobs(200, 1)
        cfg = TrainConfig(rules=2, pca_dims=2, epochs=20, seed=0)
        model, reports = distill.fit_features(xt, yt, xv, yv, 2, cfg)
        assert max(r.val_acc for r in reports) >= 0.99
        assert distill.accuracy(model, xv, yv) >= 0.99

    def test_reports_follow_schedule_and_are_finite(self):
        xt, yt = blobs(128, 2)
        cfg = TrainConfig(rules=2, pca_dims=2, epochs=6, lr_halving_period=2)
        _, reports = distill.fit_features(xt, yt, xt, yt, 2, cfg)
        assert [r.lr for r in reports] == [0.01 * 2.0 ** -(e // 2) for e in range(6)]
        for r in reports:
            assert np.isfinite(r.loss) and r.loss >= 0 and r.loss_hard >= 0

    def test_deterministic(self):
        xt, yt = blobs(200, 3)
        rng = np.random.default_rng(9)
        teacher = rng.normal(size=(200, 2))
        cfg = TrainConfig(rules=3, pca_dims=2, epochs=3, mode="modified_kd", alpha=0.5, temp_teacher=5.0)
        a_model, a = distill.fit_features(xt, yt, xt, yt, 2, cfg, teacher)
        b_model, b = distill.fit_features(xt, yt, xt, yt, 2, cfg, teacher)
        strip = lambda rs: [replace(r, seconds=0.0) for r in rs]  # noqa: E731
        assert strip(a) == strip(b)
        for name, arr in a_model.params().items():
            assert arr.tobytes() == getattr(b_model, name).tobytes()

    def test_final_selection(self):
        xt, yt = blobs(100, 4)
        cfg = TrainConfig(rules=2, pca_dims=2, epochs=3, select="final")
        model, reports = distill.fit_features(xt, yt, xt, yt, 2, cfg)
        assert distill.accuracy(model, xt, yt) == reports[-1].val_acc

    def test_divergence_raises(self):
        xt, yt = blobs(100, 5)
        cfg = TrainConfig(rules=2, pca_dims=2, epochs=3, lr=1e308)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            with pytest.raises(distill.TrainingError) as info:
                distill.fit_features(xt, yt, xt, yt, 2, cfg)
        assert "param_norms" in info.value.diagnostics

    def test_kd_requires_soft_labels(self):
        xt, yt = blobs(50, 6)
        with pytest.raises(ConfigError):
            distill.fit_features(xt, yt, xt, yt, 2, TrainConfig(rules=2, pca_dims=2, mode="modified_kd", alpha=0.5))

    def test_report_jsonl_round_trip(self, tmp_path):
        xt, yt = blobs(80, 7)
        _, reports = distill.fit_features(xt, yt, xt, yt, 2, TrainConfig(rules=2, pca_dims=2, epochs=2))
        distill.write_reports(reports, tmp_path / "r.jsonl", timing=True)
        assert distill.read_reports(tmp_path / "r.jsonl") == reports
        distill.write_reports(reports, tmp_path / "s.jsonl")
        assert "seconds" not in (tmp_path / "s.jsonl").read_text()


def identity_pca(d):
    return PcaTransform(np.zeros(d), np.eye(d), np.ones(d))


class TestGridSearch:
    @pytest.fixture
    def data(self):
        xt, yt = blobs(160, 10)
        xv, yv = blobs(80, 11)
        # blobs live outside [0, 1]; squash them so they pass Dataset validation
        sq = lambda x: 1 / (1 + np.exp(-x))  # noqa: E731
        train, val = Dataset(sq(xt), yt, 2), Dataset(sq(xv), yv, 2)
        soft = SoftLabelSet(np.where(np.eye(2)[yt] > 0, 3.0, -3.0))
        return train, val, soft

    def test_single_cell_matches_train_student(self, data):
        train, val, soft = data
        base = TrainConfig(rules=2, pca_dims=2, epochs=3, mode="modified_kd", alpha=0.5, temp_teacher=2.5)
        res = distill.grid_search(train, val, identity_pca(2), soft, base, [2.5], [0.5])
        _, reports = distill.train_student(train, val, identity_pca(2), soft, base)
        best = distill.best_epoch(reports)
        assert res.rows == [{"T": 2.5, "alpha": 0.5, "rules": 2,
                             "best_val_acc": reports[best].val_acc, "epoch_of_best": best}]

    def test_full_grid_rows_sorted(self, data, tmp_path):
        train, val, soft = data
        base = TrainConfig(rules=2, pca_dims=2, epochs=1, mode="baseline_kd", alpha=0.5, temp_teacher=1, temp_student=1)
        res = distill.grid_search(train, val, identity_pca(2), soft, base, [1, 2.5, 5, 7.5], [0.25, 0.5, 0.75, 1])
        assert len(res.rows) == 16 and not res.errors
        keys = [(-r["best_val_acc"], r["T"], r["alpha"]) for r in res.rows]
        assert keys == sorted(keys)
        res.write_csv(tmp_path / "g.csv")
        lines = (tmp_path / "g.csv").read_text().splitlines()
        assert lines[0] == "T,alpha,rules,best_val_acc,epoch_of_best" and len(lines) == 17

    def test_all_cells_diverge(self, data):
        train, val, soft = data
        base = TrainConfig(rules=2, pca_dims=2, epochs=2, mode="modified_kd", alpha=0.5, lr=1e308)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            res = distill.grid_search(train, val, identity_pca(2), soft, base, [1, 2.5, 5, 7.5], [0.25, 0.5, 0.75, 1])
        assert res.rows == [] and len(res.errors) == 16

    def test_parallel_matches_serial(self, data):
        train, val, soft = data
        base = TrainConfig(rules=2, pca_dims=2, epochs=2, mode="modified_kd", alpha=0.5)
        a = distill.grid_search(train, val, identity_pca(2), soft, base, [1, 5], [0.5, 1])
        b = distill.grid_search(train, val, identity_pca(2), soft, base, [1, 5], [0.5, 1], jobs=2)
        assert a.rows == b.rows

    def test_empty_grid(self, data):
        train, val, soft = data
        with pytest.raises(ConfigError):
            distill.grid_search(train, val, identity_pca(2), soft, TrainConfig(mode="modified_kd", alpha=0.5), [], [1])
