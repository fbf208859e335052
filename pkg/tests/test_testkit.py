"""Testkit self-checks: synthetic cities, oracle hand cases, gradient checker."""

import math

import numpy as np
import pytest
import torch

from regionflow.ingest import INBOUND, OUTBOUND
from regionflow.probe import ProbeConfig, evaluate, ridge_fit, ridge_predict, r2_score
from regionflow.testkit.gradcheck import (
    analytic_grad,
    finite_diff_grad,
    gradient_check,
    max_relative_error,
)
from regionflow.testkit.oracle import OracleReport, oracle_cosine, oracle_instance_loss
from regionflow.testkit.synth import (
    WEEK_HOURS,
    CityProfile,
    default_profiles,
    gen_city,
)


class TestProfiles:
    def test_three_named_profiles(self):
        names = [p.name for p in default_profiles()]
        assert names == ["residential", "commercial", "entertainment"]

    def test_templates_non_negative_week_long(self):
        for profile in default_profiles():
            assert profile.inbound_template.shape == (WEEK_HOURS,)
            assert np.all(profile.inbound_template >= 0)
            assert np.all(profile.outbound_template >= 0)

    def test_residential_morning_out_evening_in(self):
        res = default_profiles()[0]
        weekday_out = res.outbound_template[:120].reshape(5, 24).mean(axis=0)
        weekday_in = res.inbound_template[:120].reshape(5, 24).mean(axis=0)
        assert 6 <= weekday_out.argmax() <= 10
        assert 16 <= weekday_in.argmax() <= 21

    def test_commercial_is_reversed(self):
        com = default_profiles()[1]
        weekday_out = com.outbound_template[:120].reshape(5, 24).mean(axis=0)
        weekday_in = com.inbound_template[:120].reshape(5, 24).mean(axis=0)
        assert 16 <= weekday_out.argmax() <= 21
        assert 6 <= weekday_in.argmax() <= 11

    def test_entertainment_weekend_peaked_inbound(self):
        ent = default_profiles()[2]
        weekday_max = ent.inbound_template[:120].max()
        weekend_max = ent.inbound_template[120:].max()
        assert weekend_max > weekday_max

    def test_bad_template_shape_rejected(self):
        with pytest.raises(ValueError):
            CityProfile("x", np.zeros(24), np.zeros(24))


class TestGenCity:
    def test_one_hot_zero_noise_reproduces_templates(self):
        profiles = default_profiles()
        weights = np.zeros((8, 3))
        weights[:, 1] = 1.0
        city = gen_city(8, horizon=168, noise_level=0.0, seed=0,
                        profiles=profiles, weights=weights)
        np.testing.assert_array_equal(
            city.series.counts[0, :, INBOUND], profiles[1].inbound_template
        )
        np.testing.assert_array_equal(
            city.series.counts[0, :, OUTBOUND], profiles[1].outbound_template
        )

    def test_same_seed_bitwise_identical(self):
        a = gen_city(10, horizon=48, noise_level=1.0, seed=42)
        b = gen_city(10, horizon=48, noise_level=1.0, seed=42)
        np.testing.assert_array_equal(a.series.counts, b.series.counts)
        np.testing.assert_array_equal(a.indicator, b.indicator)
        np.testing.assert_array_equal(a.weights, b.weights)

    def test_different_seeds_share_templates(self):
        a = gen_city(10, horizon=48, seed=1)
        b = gen_city(10, horizon=48, seed=2)
        assert a.profile_names == b.profile_names
        assert not np.array_equal(a.series.counts, b.series.counts)

    def test_weights_on_simplex(self):
        city = gen_city(20, horizon=24, seed=3)
        np.testing.assert_allclose(city.weights.sum(axis=1), 1.0)
        assert np.all(city.weights >= 0)

    def test_invalid_sizes_rejected(self):
        with pytest.raises(ValueError):
            gen_city(4, horizon=24)
        with pytest.raises(ValueError):
            gen_city(8, horizon=25)

    def test_indicator_linear_in_weights_at_zero_noise(self):
        # End-to-end protocol sanity: the true mixture weights predict the
        # indicator essentially perfectly when no noise is added (the probe's
        # smallest grid penalty, 0.1, leaves a sliver of shrinkage bias).
        city = gen_city(48, horizon=24, noise_level=0.0, seed=5)
        probe_cfg = ProbeConfig(runs=2, split_seeds=(0, 1))

        class WeightsAsEmbeddings:
            matrix = city.weights
            region_ids = city.series.region_ids

        report = evaluate(WeightsAsEmbeddings(), city.target_table(), probe_cfg)
        assert report.targets["indicator"].r2_mean >= 0.99
        # Without shrinkage the fit is exact.
        weights, intercept = ridge_fit(city.weights, city.indicator, alpha=1e-12)
        prediction = ridge_predict(city.weights, weights, intercept)
        assert r2_score(city.indicator, prediction) == pytest.approx(1.0, abs=1e-9)

    def test_counts_non_negative_integers(self):
        city = gen_city(12, horizon=48, noise_level=3.0, seed=6)
        assert city.series.counts.dtype == np.int64
        assert np.all(city.series.counts >= 0)


class TestOracle:
    def test_cosine_guard(self):
        assert oracle_cosine(np.zeros(3), np.ones(3)) == 0.0

    def test_hand_case(self):
        z = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
        matrix, mean = oracle_instance_loss(z, z.copy(), tau=1.0)
        assert mean == pytest.approx(math.log(math.e + 2) - 1, abs=1e-12)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        z = rng.normal(size=(3, 2, 4))
        za = rng.normal(size=(3, 2, 4))
        _, before = oracle_instance_loss(z, za, tau=1.0)
        z2 = z.copy()
        z2[1] *= 3.0
        _, after = oracle_instance_loss(z2, za, tau=1.0)
        assert abs(before - after) < 1e-9

    def test_report_pass_logic(self):
        good = OracleReport(term_discrepancies={"total": 1e-7}, grad_max_rel_error=1e-5)
        bad = OracleReport(term_discrepancies={"total": 1e-3})
        assert good.passed()
        assert not bad.passed()


class TestGradCheck:
    def test_quadratic(self):
        w = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
        grads = finite_diff_grad(lambda: (w ** 2).sum(), {"w": w})
        assert grads["w"][0] == pytest.approx(6.0, abs=1e-9)

    def test_matches_autograd_on_small_function(self):
        torch.manual_seed(0)
        a = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
        b = torch.randn(3, dtype=torch.float64, requires_grad=True)
        params = {"a": a, "b": b}

        def loss_fn():
            return torch.sin(a @ b).sum() + (a ** 2).sum() * 0.1

        report = gradient_check(loss_fn, params)
        assert report.max_rel_error < 1e-6
        assert report.n_scalars == 15

    def test_step_sweep_no_cancellation_cliff(self):
        torch.manual_seed(1)
        a = torch.randn(5, 5, dtype=torch.float64, requires_grad=True)

        def loss_fn():
            return torch.log1p((a @ a.T).abs().sum())

        for step in (1e-4, 1e-5, 1e-6):
            report = gradient_check(loss_fn, {"a": a}, step=step)
            assert report.max_rel_error < 1e-4, f"step {step}"

    def test_relative_error_floor(self):
        a = {"w": np.array([0.0])}
        b = {"w": np.array([1e-12])}
        worst, _ = max_relative_error(a, b)
        assert worst < 1e-3   # floored denominator keeps tiny noise benign

    def test_unused_parameter_gets_zero_analytic_grad(self):
        used = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
        unused = torch.tensor([5.0], dtype=torch.float64, requires_grad=True)
        grads = analytic_grad(lambda: (used ** 2).sum(), {"u": used, "v": unused})
        assert grads["v"][0] == 0.0


class TestProductionIndependence:
    @staticmethod
    def _imported_modules(path):
        import ast

        tree = ast.parse(path.read_text())
        names = []
        for node in ast.walk(tree):
            if isinstance(node, ast.Import):
                names += [alias.name for alias in node.names]
            elif isinstance(node, ast.ImportFrom):
                module = node.module or ""
                names += [f"{module}.{alias.name}" for alias in node.names]
        return names

    def test_oracle_and_gradcheck_never_on_production_paths(self):
        from pathlib import Path

        import regionflow

        package_root = Path(regionflow.__file__).parent
        for path in package_root.glob("*.py"):
            for name in self._imported_modules(path):
                assert "oracle" not in name and "gradcheck" not in name, (
                    f"{path.name} imports the verification oracle: {name}"
                )

    def test_only_cli_touches_the_synth_generator(self):
        # The synth command legitimately delegates to the generator; nothing
        # else in the production package may depend on the testkit.
        from pathlib import Path

        import regionflow

        package_root = Path(regionflow.__file__).parent
        for path in package_root.glob("*.py"):
            if path.name == "cli.py":
                continue
            for name in self._imported_modules(path):
                assert "testkit" not in name, f"{path.name} imports {name}"
