import numpy as np
import pytest

from vibekit import ContractError, Rng, ShapeError, Tensor
from vibekit.flowmatch import interpolate
from vibekit.hfato import (
    DegradationConfig,
    HFATOBatch,
    degrade,
    hf_energy,
    hfato_forward,
    hfato_loss,
    reconstruct_x0,
)


def smooth_plus_noise(seed, h=8, w=8):
    # Moderate low-frequency layout plus dominant pixel noise. The
    # contraction property below is about removing high-frequency content;
    # on noise-free ramps the nearest-upsample staircase can add Laplacian
    # energy, so the test family keeps noise as the main HF carrier.
    rng = Rng(seed)
    ys, xs = np.mgrid[0:h, 0:w]
    base = 0.7 * np.sin(2 * np.pi * xs / w + 1.0) + 0.7 * np.cos(2 * np.pi * ys / h)
    return Tensor(base + 0.5 * rng.gaussian_array((h, w)))


class TestDegrade:
    def test_constant_fixed_point(self):
        x = Tensor(np.full((4, 4), 2.5))
        assert np.array_equal(degrade(x, DegradationConfig(2)).numpy(), x.numpy())

    def test_hand_case(self):
        x = Tensor([[0.0, 4.0], [8.0, 4.0]])
        out = degrade(x, DegradationConfig(2, "nearest"))
        assert np.array_equal(out.numpy(), np.full((2, 2), 4.0))

    def test_identity_factor(self):
        x = smooth_plus_noise(0)
        assert degrade(x, DegradationConfig(1)) is x

    def test_divisibility(self):
        with pytest.raises(ContractError):
            degrade(Tensor(np.zeros((5, 4))), DegradationConfig(2))

    def test_idempotent_nearest(self):
        x = smooth_plus_noise(1)
        once = degrade(x, DegradationConfig(2))
        twice = degrade(once, DegradationConfig(2))
        assert np.max(np.abs(twice.numpy() - once.numpy())) < 1e-12

    def test_mean_preserved(self):
        x = smooth_plus_noise(2)
        out = degrade(x, DegradationConfig(2))
        assert abs(out.numpy().mean() - x.numpy().mean()) < 1e-12

    @pytest.mark.parametrize("seed", range(20))
    def test_hf_energy_contraction(self, seed):
        x = smooth_plus_noise(seed)
        assert hf_energy(degrade(x, DegradationConfig(2))) <= hf_energy(x)

    def test_bilinear_available(self):
        x = smooth_plus_noise(3)
        out = degrade(x, DegradationConfig(2, "bilinear"))
        assert out.shape == x.shape


class TestHfatoForward:
    def test_t_zero_both_variants(self):
        x0, eps = smooth_plus_noise(4), Tensor(Rng(5).gaussian_array((8, 8)))
        cfg = DegradationConfig(2)
        for variant in ("interpolated", "literal_additive"):
            b = hfato_forward(x0, eps, 0.0, cfg, variant)
            assert np.array_equal(b.xt.numpy(), b.x0_deg.numpy())

    def test_t_one_variants_differ(self):
        x0, eps = smooth_plus_noise(6), Tensor(Rng(7).gaussian_array((8, 8)))
        cfg = DegradationConfig(2)
        interp = hfato_forward(x0, eps, 1.0, cfg, "interpolated")
        literal = hfato_forward(x0, eps, 1.0, cfg, "literal_additive")
        assert np.array_equal(interp.xt.numpy(), eps.numpy())
        assert np.array_equal(literal.xt.numpy(), literal.x0_deg.numpy() + eps.numpy())

    def test_factor_one_reduces_to_interpolate(self):
        x0, eps = smooth_plus_noise(8), Tensor(Rng(9).gaussian_array((8, 8)))
        b = hfato_forward(x0, eps, 0.37, DegradationConfig(1), "interpolated")
        assert np.array_equal(b.xt.numpy(), interpolate(x0, eps, 0.37).numpy())

    def test_batch_invariant_enforced(self):
        x0 = Tensor([[1.0, 2.0], [3.0, 4.0]])
        with pytest.raises(ContractError):
            HFATOBatch(x0, x0, x0, 0.5, Tensor(np.full((2, 2), 99.0)), "interpolated")


class TestReconstruct:
    def test_t_zero_identity(self):
        xt = smooth_plus_noise(10)
        v = Tensor(Rng(11).gaussian_array((8, 8)))
        assert np.array_equal(reconstruct_x0(xt, v, 0.0).numpy(), xt.numpy())

    def test_hand_example(self):
        # x0=[1], eps=[3]: xt=[2] at t=0.5, oracle v=[2], so x0_hat = [1]
        out = reconstruct_x0(Tensor([2.0]), Tensor([2.0]), 0.5)
        assert out.numpy().tolist() == [1.0]

    def test_oracle_velocity_recovers_degraded(self):
        x0, eps = smooth_plus_noise(12), Tensor(Rng(13).gaussian_array((8, 8)))
        cfg = DegradationConfig(2)
        for t in (0.1, 0.5, 0.9, 1.0):
            b = hfato_forward(x0, eps, t, cfg, "interpolated")
            v_star = Tensor(eps.numpy() - b.x0_deg.numpy())
            x0_hat = reconstruct_x0(b.xt, v_star, t)
            assert np.max(np.abs(x0_hat.numpy() - b.x0_deg.numpy())) < 1e-12

    def test_loss_equals_degradation_residual(self):
        # two-path check: oracle-velocity reconstruction loss must equal the
        # directly computed residual energy of the degradation
        x0, eps = smooth_plus_noise(14), Tensor(Rng(15).gaussian_array((8, 8)))
        cfg = DegradationConfig(2)
        b = hfato_forward(x0, eps, 0.6, cfg, "interpolated")
        v_star = Tensor(eps.numpy() - b.x0_deg.numpy())
        loss = hfato_loss(reconstruct_x0(b.xt, v_star, 0.6), x0).item()
        direct = float(np.mean((b.x0_deg.numpy() - x0.numpy()) ** 2))
        assert abs(loss - direct) < 1e-10


class TestHfatoLoss:
    def test_zero_on_equal(self):
        x = smooth_plus_noise(16)
        assert hfato_loss(x, x).item() == 0.0

    def test_unit_shift(self):
        x = smooth_plus_noise(17)
        shifted = Tensor(x.numpy() + 1.0)
        assert hfato_loss(shifted, x).item() == pytest.approx(1.0, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            hfato_loss(Tensor([1.0]), Tensor([1.0, 2.0]))


class TestHfEnergy:
    def test_constant_zero(self):
        assert hf_energy(Tensor(np.full((5, 5), 3.0))) == 0.0

    def test_checkerboard_exact(self):
        ys, xs = np.mgrid[0:6, 0:6]
        board = Tensor(np.where((xs + ys) % 2 == 0, 1.0, -1.0))
        assert hf_energy(board) == 64.0

    def test_too_small(self):
        with pytest.raises(ContractError):
            hf_energy(Tensor(np.zeros((2, 5))))

    def test_noise_has_energy(self):
        assert hf_energy(Tensor(Rng(18).gaussian_array((8, 8)))) > 0.0
