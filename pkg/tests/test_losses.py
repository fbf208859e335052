"""Objective mathematics: hand cases, oracle agreement, invariances."""

import math

import numpy as np
import pytest
import torch

from regionflow.losses import (
    BatchProjections,
    ProjectionPair,
    Temperatures,
    aux_pair_loss,
    aux_regularizer,
    cosine_sim,
    ntxent_timestep,
    temporal_mean_pool,
    total_loss,
)
from regionflow.testkit.oracle import (
    oracle_align_pair,
    oracle_instance_loss,
    oracle_total_loss,
)

HAND_NTXENT = math.log(math.e + 2.0) - 1.0            # 0.551444...
HAND_ALIGN = math.log(math.exp(10.0) + 2.0) - 10.0    # 9.0796e-5


def rand_projections(rng, B, T, F) -> BatchProjections:
    def pair():
        return ProjectionPair(
            torch.tensor(rng.normal(size=(B, T, F))),
            torch.tensor(rng.normal(size=(B, T, F))),
        )
    return BatchProjections(inbound=pair(), outbound=pair(), joint=pair())


class TestCosine:
    def test_identical_unit_vectors(self):
        v = torch.tensor([1.0, 0.0])
        assert float(cosine_sim(v, v)) == pytest.approx(1.0)

    def test_orthogonal(self):
        assert float(cosine_sim(torch.tensor([1.0, 0.0]),
                                torch.tensor([0.0, 1.0]))) == pytest.approx(0.0)

    def test_positive_scale_invariance(self):
        a = torch.tensor([1.0, 1.0])
        b = torch.tensor([2.0, 2.0])
        assert float(cosine_sim(a, b)) == pytest.approx(1.0, abs=1e-9)

    def test_zero_vector_guarded(self):
        zero = torch.zeros(3)
        out = float(cosine_sim(zero, torch.tensor([1.0, 0.0, 0.0])))
        assert out == 0.0


class TestPooling:
    def test_constant_rows(self):
        v = torch.tensor([2.0, -1.0, 3.0])
        z = v.expand(5, 3)
        assert torch.allclose(temporal_mean_pool(z), v)

    def test_single_timestep(self):
        z = torch.tensor([[1.0, 2.0]])
        assert torch.equal(temporal_mean_pool(z), z[0])

    def test_two_rows(self):
        z = torch.tensor([[0.0, 0.0], [2.0, 4.0]])
        assert torch.allclose(temporal_mean_pool(z), torch.tensor([1.0, 2.0]))


class TestInstanceLoss:
    def test_hand_case_orthonormal_pair(self):
        z = torch.tensor([[[1.0, 0.0]], [[0.0, 1.0]]], dtype=torch.float64)
        matrix, mean = ntxent_timestep(z, z.clone(), tau=1.0)
        assert float(matrix[0, 0]) == pytest.approx(HAND_NTXENT, abs=1e-9)
        assert float(mean) == pytest.approx(HAND_NTXENT, abs=1e-9)

    def test_matches_oracle_grid(self):
        rng = np.random.default_rng(0)
        for B in (2, 4, 8):
            for T in (1, 8, 32):
                for F in (4, 16):
                    z = torch.tensor(rng.normal(size=(B, T, F)))
                    za = torch.tensor(rng.normal(size=(B, T, F)))
                    matrix, mean = ntxent_timestep(z, za, tau=1.0)
                    o_matrix, o_mean = oracle_instance_loss(z, za, tau=1.0)
                    np.testing.assert_allclose(matrix.numpy(), o_matrix, atol=1e-6)
                    assert float(mean) == pytest.approx(o_mean, abs=1e-6)

    def test_batch_of_one_rejected(self):
        z = torch.randn(1, 4, 3)
        with pytest.raises(ValueError):
            ntxent_timestep(z, z.clone(), tau=1.0)

    def test_decreasing_in_positive_similarity(self):
        # Move the positive closer to the anchor with everything else fixed:
        # the anchor's loss must strictly drop.
        anchor = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)
        others = torch.tensor([0.0, 1.0, 0.0, 0.0], dtype=torch.float64)
        losses = []
        for angle in (0.9, 0.6, 0.3, 0.0):
            positive = torch.tensor(
                [math.cos(angle), 0.0, math.sin(angle), 0.0], dtype=torch.float64
            )
            z = torch.stack([anchor, others]).unsqueeze(1)
            za = torch.stack([positive, torch.tensor([0.0, 0.0, 0.0, 1.0],
                                                     dtype=torch.float64)]).unsqueeze(1)
            matrix, _ = ntxent_timestep(z, za, tau=1.0)
            losses.append(float(matrix[0, 0]))
        assert all(a > b for a, b in zip(losses, losses[1:]))


class TestAlignLoss:
    def test_hand_case_sharp_temperature(self):
        basis = torch.eye(2, dtype=torch.float64)
        out = aux_pair_loss(basis, basis.clone(), basis.clone(), tau_a=0.1)
        np.testing.assert_allclose(out.numpy(), HAND_ALIGN, atol=1e-9)

    def test_degenerate_all_similarities_equal(self):
        ones = torch.ones(2, 3, dtype=torch.float64)
        out = aux_pair_loss(ones, ones.clone(), ones.clone(), tau_a=0.1)
        np.testing.assert_allclose(out.numpy(), math.log(3.0), atol=1e-9)

    def test_matches_oracle(self):
        rng = np.random.default_rng(1)
        for B in (2, 4, 8):
            anchor = torch.tensor(rng.normal(size=(B, 16)))
            pos = torch.tensor(rng.normal(size=(B, 16)))
            out = aux_pair_loss(anchor, pos, anchor.clone(), tau_a=0.1)
            np.testing.assert_allclose(
                out.numpy(), oracle_align_pair(anchor, pos, anchor, 0.1), atol=1e-6
            )

    def test_regularizer_four_term_structure(self):
        rng = np.random.default_rng(2)
        batch = rand_projections(rng, 4, 6, 8)
        # Duplicate views: the regularizer must equal twice the one-view terms.
        for pair in (batch.inbound, batch.outbound, batch.joint):
            pair.z_aug = pair.z.clone()
        pooled = batch.pooled()
        value = float(aux_regularizer(pooled, tau_a=0.1))
        one_in = float(aux_pair_loss(pooled.joint.z, pooled.inbound.z,
                                     pooled.joint.z, 0.1).mean())
        one_out = float(aux_pair_loss(pooled.joint.z, pooled.outbound.z,
                                      pooled.joint.z, 0.1).mean())
        assert value == pytest.approx(2.0 * (one_in + one_out), abs=1e-9)

    def test_finite_for_random_inputs(self):
        rng = np.random.default_rng(3)
        pooled = rand_projections(rng, 8, 4, 16).pooled()
        assert math.isfinite(float(aux_regularizer(pooled, tau_a=0.1)))


class TestTotalLoss:
    def test_total_is_exact_sum(self):
        rng = np.random.default_rng(4)
        batch = rand_projections(rng, 4, 8, 16)
        breakdown = total_loss(batch, Temperatures())
        assert float(breakdown.total) == float(
            breakdown.inbound + breakdown.outbound + breakdown.align
        )

    def test_matches_full_oracle(self):
        rng = np.random.default_rng(5)
        temps = Temperatures()
        for _ in range(10):
            batch = rand_projections(rng, 4, 8, 16)
            breakdown = total_loss(batch, temps)
            reference = oracle_total_loss(batch, temps)
            assert float(breakdown.inbound) == pytest.approx(reference["inbound"], abs=1e-6)
            assert float(breakdown.outbound) == pytest.approx(reference["outbound"], abs=1e-6)
            assert float(breakdown.align) == pytest.approx(reference["align"], abs=1e-6)
            assert float(breakdown.total) == pytest.approx(reference["total"], abs=1e-5)

    def test_batch_permutation_invariance(self):
        rng = np.random.default_rng(6)
        batch = rand_projections(rng, 6, 4, 8)
        before = total_loss(batch, Temperatures())
        perm = torch.randperm(6)
        permuted = BatchProjections(
            inbound=ProjectionPair(batch.inbound.z[perm], batch.inbound.z_aug[perm]),
            outbound=ProjectionPair(batch.outbound.z[perm], batch.outbound.z_aug[perm]),
            joint=ProjectionPair(batch.joint.z[perm], batch.joint.z_aug[perm]),
        )
        after = total_loss(permuted, Temperatures())
        for key in ("inbound", "outbound", "align", "total"):
            assert float(getattr(before, key)) == pytest.approx(
                float(getattr(after, key)), abs=1e-9
            )

    def test_positive_scale_invariance_of_embeddings(self):
        # Scaling one region's projected series by lambda > 0 scales every
        # per-timestep vector and its temporal mean together, so no cosine
        # (hence no loss term) may move.
        rng = np.random.default_rng(7)
        batch = rand_projections(rng, 4, 4, 8)
        before = total_loss(batch, Temperatures())
        batch.joint.z[2] *= 3.0
        batch.inbound.z_aug[1] *= 0.5
        after = total_loss(batch, Temperatures())
        for key in ("inbound", "outbound", "align", "total"):
            assert abs(float(getattr(before, key)) - float(getattr(after, key))) < 1e-9

    def test_flags_zero_disabled_terms(self):
        rng = np.random.default_rng(8)
        batch = rand_projections(rng, 4, 4, 8)
        breakdown = total_loss(batch, Temperatures(), use_outbound=False, use_align=False)
        assert float(breakdown.outbound) == 0.0
        assert float(breakdown.align) == 0.0
        assert float(breakdown.total) == float(breakdown.inbound)

    def test_symmetric_flag_averages_directions(self):
        rng = np.random.default_rng(9)
        batch = rand_projections(rng, 4, 4, 8)
        plain = total_loss(batch, Temperatures(), use_align=False)
        flipped = BatchProjections(
            inbound=ProjectionPair(batch.inbound.z_aug, batch.inbound.z),
            outbound=ProjectionPair(batch.outbound.z_aug, batch.outbound.z),
            joint=batch.joint,
        )
        reverse = total_loss(flipped, Temperatures(), use_align=False)
        symmetric = total_loss(batch, Temperatures(), use_align=False, symmetric=True)
        expected = 0.5 * (float(plain.inbound) + float(reverse.inbound))
        assert float(symmetric.inbound) == pytest.approx(expected, abs=1e-9)

    def test_stability_at_sharp_temperature_extremes(self):
        # Logits hit +-1/tau_a = +-10; everything must stay finite.
        z = torch.tensor([[[1.0, 0.0]], [[-1.0, 0.0]]], dtype=torch.float64)
        batch = BatchProjections(
            inbound=ProjectionPair(z, z.clone()),
            outbound=ProjectionPair(z, z.clone()),
            joint=ProjectionPair(z, z.clone()),
        )
        breakdown = total_loss(batch, Temperatures(tau=1.0, tau_a=0.1))
        assert math.isfinite(float(breakdown.total))


class TestTemperatures:
    def test_defaults(self):
        temps = Temperatures()
        assert temps.tau == 1.0
        assert temps.tau_a == 0.1

    def test_positive_required(self):
        with pytest.raises(ValueError):
            Temperatures(tau=0.0)
        with pytest.raises(ValueError):
            Temperatures(tau_a=-1.0)
