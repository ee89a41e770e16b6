import math

import pytest
import torch

from cfrcsim import losses
from cfrcsim.losses import LossValue


def _stress_field(s11, s22, s12):
    return torch.stack([s11, s22, s12]).unsqueeze(0)


class TestMse:
    def test_constant_offset(self):
        pred = torch.full((1, 3, 4, 4), 2.0)
        target = torch.zeros((1, 3, 4, 4))
        assert losses.mse_stress(pred, target).item() == 4.0

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.mse_stress(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5))

    def test_increments_hand_value(self):
        pred = torch.tensor([[2.0, 0.0]])
        target = torch.zeros((1, 2))
        assert losses.mse_increments(pred, target).item() == 2.0

    def test_increments_require_two_features(self):
        with pytest.raises(ValueError):
            losses.mse_increments(torch.zeros(1, 3), torch.zeros(1, 3))


class TestEquilibrium:
    def test_linear_s11_gives_unit_residual(self):
        x = torch.arange(8, dtype=torch.float64).repeat(8, 1)
        field = _stress_field(x, torch.zeros_like(x), torch.zeros_like(x))
        assert losses.physics_residual(field).item() == pytest.approx(
            1.0, rel=1e-12)

    def test_equilibrated_linear_field_has_zero_residual(self):
        # s11 = y, s22 = x, s12 = 0 satisfies both balance equations
        y = torch.arange(8, dtype=torch.float64).view(8, 1).repeat(1, 8)
        x = torch.arange(8, dtype=torch.float64).repeat(8, 1)
        field = _stress_field(y, x, torch.zeros_like(x))
        assert losses.physics_residual(field).item() <= 1e-24

    def test_divergence_components_hand_value(self):
        x = torch.arange(6, dtype=torch.float64).repeat(6, 1)
        field = _stress_field(2.0 * x, torch.zeros_like(x),
                              torch.zeros_like(x))
        r1, r2 = losses.divergence_components(field)
        assert torch.allclose(r1, torch.full_like(r1, 2.0), atol=1e-12)
        assert torch.allclose(r2, torch.zeros_like(r2), atol=1e-12)

    def test_central_difference_exact_for_quadratic_interior(self):
        x = torch.arange(10, dtype=torch.float64).repeat(10, 1)
        field = _stress_field(x * x, torch.zeros_like(x), torch.zeros_like(x))
        r1, _ = losses.divergence_components(field)
        interior = r1[0, :, 1:-1]
        expected = 2.0 * x[:, 1:-1]
        assert torch.allclose(interior, expected, atol=1e-12)

    def test_channel_count_enforced(self):
        with pytest.raises(ValueError):
            losses.divergence_components(torch.zeros(1, 2, 4, 4))


class TestHybrid:
    def test_equal_weights(self):
        total = losses.hybrid_total(torch.tensor(2.0), torch.tensor(4.0))
        assert total.item() == 3.0

    def test_physics_scale(self):
        total = losses.hybrid_total(torch.tensor(2.0), torch.tensor(4.0),
                                    physics_scale=0.5)
        assert total.item() == 2.0

    def test_loss_value_parts(self):
        pred = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        target = torch.randn(2, 3, 8, 8, dtype=torch.float64)
        std = torch.tensor([2.0, 3.0, 4.0], dtype=torch.float64)
        mean = torch.tensor([1.0, -1.0, 0.0], dtype=torch.float64)
        lv = losses.hybrid_stress_loss(pred, target, std, mean,
                                       physics_scale=1e-3)
        assert isinstance(lv, LossValue)
        expect = 0.5 * lv.part("mse") + 0.5e-3 * lv.part("physics")
        assert lv.item() == pytest.approx(expect, rel=1e-12)

    def test_physics_part_lives_in_stress_units(self):
        # with identity normalization the residual matches the raw field's
        pred = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        target = torch.zeros_like(pred)
        std = torch.ones(3, dtype=torch.float64)
        mean = torch.zeros(3, dtype=torch.float64)
        lv = losses.hybrid_stress_loss(pred, target, std, mean, 1.0)
        direct = losses.physics_residual(pred)
        assert lv.part("physics") == pytest.approx(direct.item(), rel=1e-12)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(0)
        pred = torch.randn(1, 3, 8, 8, dtype=torch.float64,
                           requires_grad=True)
        target = torch.randn(1, 3, 8, 8, dtype=torch.float64)
        std = torch.tensor([30.0, 20.0, 10.0], dtype=torch.float64)
        mean = torch.tensor([5.0, 1.0, 0.0], dtype=torch.float64)
        lv = losses.hybrid_stress_loss(pred, target, std, mean, 1e-3)
        lv.total.backward()
        h = 1e-6
        rng_idx = [(0, 0, 0), (1, 3, 4), (2, 7, 7), (0, 4, 1), (2, 0, 5)]
        for c, i, j in rng_idx:
            with torch.no_grad():
                xp = pred.detach().clone()
                xp[0, c, i, j] += h
                xm = pred.detach().clone()
                xm[0, c, i, j] -= h
                lp = losses.hybrid_stress_loss(xp, target, std, mean, 1e-3)
                lm = losses.hybrid_stress_loss(xm, target, std, mean, 1e-3)
                fd = (lp.total - lm.total).item() / (2 * h)
            ag = pred.grad[0, c, i, j].item()
            assert fd == pytest.approx(ag, rel=1e-4, abs=1e-8)


class TestBce:
    def test_half_probability_gives_log_two(self):
        pred = torch.full((4, 4), 0.5, dtype=torch.float64)
        target = torch.zeros((4, 4), dtype=torch.float64)
        got = losses.bce_damage(pred, target).item()
        assert got == pytest.approx(math.log(2.0), rel=1e-12)

    def test_confident_and_correct_is_cheap(self):
        pred = torch.full((4, 4), 1e-7, dtype=torch.float64)
        target = torch.zeros((4, 4), dtype=torch.float64)
        assert losses.bce_damage(pred, target).item() < 1e-6

    def test_saturated_predictions_stay_finite(self):
        pred = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        got = losses.bce_damage(pred, target)
        assert torch.isfinite(got)
        assert got.item() == pytest.approx(-math.log(losses.BCE_CLAMP),
                                           rel=1e-6)

    def test_matches_torch_reference(self):
        torch.manual_seed(1)
        pred = torch.rand(3, 1, 6, 6, dtype=torch.float64) * 0.98 + 0.01
        target = (torch.rand(3, 1, 6, 6, dtype=torch.float64) > 0.5).double()
        ours = losses.bce_damage(pred, target).item()
        ref = torch.nn.functional.binary_cross_entropy(pred, target).item()
        assert ours == pytest.approx(ref, rel=1e-10)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            losses.bce_damage(torch.zeros(2, 2), torch.zeros(2, 3))
