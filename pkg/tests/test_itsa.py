"""Tests for the shortcut perturbation and the Fisher surrogate loss."""

import numpy as np
import pytest

from itsa_lab import diffnet, itsa
from itsa_lab.data.constants import Reduction, Scalarization
from itsa_lab.data.domains import ScpConfig
from itsa_lab.diffnet import Linear, Sequential, Tanh


@pytest.fixture
def extractor():
    """Linear 3 -> 2 extractor with known weights."""
    w = np.array([[1.0, 2.0, 2.0], [0.0, 0.0, 0.0]])
    return Sequential([Linear.from_weights(w, name="f")], (3,))


class TestScpDirection:
    """Tests for scp_direction() and scp_perturb()."""

    def test_direction_is_normalized_input_gradient(self, extractor):
        """For a linear map the direction is the normalized column sum of W."""
        u, degenerate = itsa.scp_direction(extractor, np.zeros((2, 3)))
        np.testing.assert_allclose(u, np.tile([1 / 3, 2 / 3, 2 / 3], (2, 1)))
        assert not degenerate.any()

    def test_squared_norm_scalarization(self):
        """With cotangent z the direction follows W^T W x."""
        model = Sequential([Linear.from_weights(np.eye(2) * [1.0, 3.0])], (2,))
        scp = ScpConfig(scalarization=Scalarization.SQUARED_NORM)
        u, _ = itsa.scp_direction(model, np.array([[1.0, 1.0]]), scp)
        expected = np.array([1.0, 9.0]) / np.hypot(1.0, 9.0)
        np.testing.assert_allclose(u[0], expected)

    def test_zero_gradient_is_flagged_and_not_moved(self):
        """A sample whose gradient is below the floor gets u = 0."""
        model = Sequential([Linear.from_weights(np.zeros((2, 3)))], (3,))
        u, degenerate = itsa.scp_direction(model, np.ones((2, 3)))
        assert degenerate.all()
        assert not u.any()

    def test_direction_is_per_sample(self):
        """Each sample is normalized on its own."""
        rng = np.random.default_rng(0)
        model = Sequential(
            [Linear(3, 4, rng, np.float64), Tanh(), Linear(4, 2, rng, np.float64)],
            (3,),
        )
        u, _ = itsa.scp_direction(model, rng.standard_normal((5, 3)))
        np.testing.assert_allclose(np.linalg.norm(u, axis=1), np.ones(5))

    def test_perturb_moves_by_epsilon(self):
        """x* = x + eps u."""
        x = np.zeros((1, 3))
        u = np.array([[0.0, 0.6, 0.8]])
        np.testing.assert_allclose(itsa.scp_perturb(x, u, 0.5), [[0.0, 0.3, 0.4]])

    def test_perturb_rejects_negative_epsilon(self):
        """Negative magnitudes are not perturbations."""
        with pytest.raises(ValueError, match="epsilon"):
            itsa.scp_perturb(np.zeros((1, 2)), np.zeros((1, 2)), -0.1)

    def test_zero_epsilon_is_identity(self, extractor):
        """With eps = 0 the perturbed pair coincides with the clean one."""
        x = np.random.default_rng(1).standard_normal((3, 3))
        pair = itsa.make_perturbed_pair(extractor, x, ScpConfig(epsilon=0.0))
        np.testing.assert_array_equal(pair.x_star, x)
        np.testing.assert_array_equal(pair.z_star, pair.z)

    def test_frozen_direction_is_used_as_is(self, extractor):
        """A supplied u replaces the computed direction."""
        x = np.zeros((1, 3))
        u = np.array([[1.0, 0.0, 0.0]])
        pair = itsa.make_perturbed_pair(extractor, x, ScpConfig(epsilon=2.0), u=u)
        np.testing.assert_allclose(pair.x_star, [[2.0, 0.0, 0.0]])
        np.testing.assert_allclose(pair.z_star, [[2.0, 0.0]])


class TestFisherLoss:
    """Tests for fisher_loss() and its gradient."""

    def test_mean_of_per_sample_distances(self):
        """Distances 5 and 0 average to 2.5; summed they give 5."""
        z = np.array([[3.0, 4.0], [1.0, 1.0]])
        z_star = np.array([[0.0, 0.0], [1.0, 1.0]])
        assert itsa.fisher_loss(z, z_star) == pytest.approx(2.5)
        assert itsa.fisher_loss(z, z_star, Reduction.SUM) == pytest.approx(5.0)

    def test_gradient_is_unit_difference(self):
        """d/dz ||z - z*|| is the unit difference, divided by n for the mean."""
        z = np.array([[3.0, 4.0], [1.0, 1.0]])
        z_star = np.zeros((2, 2))
        g_z, g_z_star = itsa.fisher_loss_backward(z, z_star)
        np.testing.assert_allclose(g_z[0], [0.3, 0.4])
        np.testing.assert_allclose(g_z_star, -g_z)

    def test_identical_features_have_zero_gradient(self):
        """The non-differentiable point gets the zero subgradient."""
        z = np.ones((2, 3))
        g_z, _ = itsa.fisher_loss_backward(z, z.copy())
        assert not g_z.any()
        assert np.isfinite(g_z).all()

    def test_shape_mismatch(self):
        """Feature batches must have the same shape."""
        with pytest.raises(ValueError, match="differ"):
            itsa.fisher_loss(np.zeros((2, 3)), np.zeros((2, 2)))

    def test_equals_degenerate_wasserstein_distance(self):
        """For point masses the surrogate is the order-p Wasserstein distance."""
        rng = np.random.default_rng(2)
        z, z_star = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        for p in (1.0, 2.0, 3.0):
            assert itsa.wasserstein_degenerate(z, z_star, p) == pytest.approx(
                itsa.fisher_loss(z, z_star)
            )

    def test_non_negative_symmetric_and_homogeneous(self):
        """||z - z*|| is a norm of the difference, scaled by |c| under scaling."""
        rng = np.random.default_rng(5)
        for _ in range(20):
            z, z_star = rng.standard_normal((2, 3, 5))
            value = itsa.fisher_loss(z, z_star)
            assert value >= 0.0
            assert itsa.fisher_loss(z_star, z) == value
            for c in (-2.5, 0.1, 7.0):
                assert itsa.fisher_loss(c * z, c * z_star) == pytest.approx(
                    abs(c) * value, rel=1e-6
                )

    def test_wasserstein_order_below_one(self):
        """Orders below 1 are not metrics."""
        with pytest.raises(ValueError):
            itsa.wasserstein_degenerate(np.zeros(2), np.ones(2), 0.5)


class TestTotalLoss:
    """Tests for itsa_total_loss()."""

    def test_zero_lambda_returns_task_loss_exactly(self):
        """lambda = 0 reduces to the task loss bit for bit."""
        assert itsa.itsa_total_loss(0.1234, 7.0, 9.0, lam=0.0) == 0.1234

    def test_two_views_split_the_weight(self):
        """With two views each surrogate is weighted lambda / 2."""
        assert itsa.itsa_total_loss(1.0, 2.0, 4.0, lam=0.5) == pytest.approx(2.5)

    def test_single_input_gets_full_weight(self):
        """A single stream is weighted lambda."""
        assert itsa.itsa_total_loss(1.0, 2.0, lam=0.5) == pytest.approx(2.0)


class TestFisherBranch:
    """Tests for fisher_branch()."""

    def test_value_matches_perturbed_pair(self, extractor):
        """The branch value is the surrogate of its own pair."""
        x = np.random.default_rng(3).standard_normal((4, 3))
        branch = itsa.fisher_branch(extractor, x, ScpConfig(epsilon=0.3), weight=1.0)
        assert branch.value == pytest.approx(
            itsa.fisher_loss(branch.pair.z, branch.pair.z_star)
        )
        # a linear map moves every sample by eps * ||W u||
        assert branch.value == pytest.approx(0.3 * 3.0)

    def test_zero_weight_gives_zero_gradients(self, extractor):
        """weight = 0 contributes nothing to the parameter gradients."""
        x = np.random.default_rng(4).standard_normal((2, 3))
        branch = itsa.fisher_branch(extractor, x, ScpConfig(), weight=0.0)
        assert not branch.grad_z.any()
        assert all(not g.any() for g in branch.grads.values())

    def test_add_grads_sums_keywise(self):
        """Shared keys are summed and new keys are added."""
        total = {"a": np.ones(2)}
        itsa.add_grads(total, {"a": np.ones(2), "b": np.zeros(1)})
        np.testing.assert_array_equal(total["a"], [2.0, 2.0])
        assert "b" in total

    def test_frozen_direction_gives_identical_gradients(self):
        """Passing the step's own direction back in changes no gradient bit."""
        rng = np.random.default_rng(6)
        model = Sequential(
            [Linear(3, 4, rng, np.float64), Tanh(), Linear(4, 2, rng, np.float64)],
            (3,),
        )
        x = rng.standard_normal((5, 3))
        scp = ScpConfig(epsilon=0.4)
        computed = itsa.fisher_branch(model, x, scp, weight=0.1)
        frozen = itsa.fisher_branch(model, x, scp, weight=0.1, u=computed.pair.u)
        assert frozen.value == computed.value
        np.testing.assert_array_equal(frozen.grad_z, computed.grad_z)
        for name, grad in computed.grads.items():
            np.testing.assert_array_equal(frozen.grads[name], grad)


class TestFirstOrderConsistency:
    """The surrogate over epsilon approaches the directional derivative."""

    @pytest.fixture
    def smooth(self):
        rng = np.random.default_rng(7)
        return Sequential(
            [Linear(3, 4, rng, np.float64), Tanh(), Linear(4, 2, rng, np.float64)],
            (3,),
        )

    def relative_errors(self, model, x, u, epsilon):
        pair = itsa.make_perturbed_pair(model, x, ScpConfig(epsilon=epsilon), u=u)
        errors = []
        for i in range(len(x)):
            ratio = itsa.fisher_loss(pair.z[i : i + 1], pair.z_star[i : i + 1])
            ratio /= epsilon
            exact = np.linalg.norm(diffnet.jacobian(model, x[i]) @ u[i])
            errors.append(abs(ratio - exact) / exact)
        return np.array(errors)

    def test_converges_to_jacobian_direction_norm(self, smooth):
        """Error below 1% at eps=1e-3 and smaller than at eps=1e-2."""
        rng = np.random.default_rng(8)
        x = rng.standard_normal((4, 3))
        u = rng.standard_normal((4, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        coarse = self.relative_errors(smooth, x, u, 1e-2)
        fine = self.relative_errors(smooth, x, u, 1e-3)
        assert (fine < 1e-2).all()
        assert (fine < coarse).all()

    def test_holds_along_the_shortcut_direction(self, smooth):
        """The computed shortcut direction is one such fixed direction."""
        x = np.random.default_rng(9).standard_normal((3, 3))
        u, _ = itsa.scp_direction(smooth, x)
        assert (self.relative_errors(smooth, x, u, 1e-3) < 1e-2).all()
