import numpy as np
import pytest

from emdiff.schedule import linear_beta_schedule
from emdiff.score_models import (GaussianPrior, GaussianScore, GmmPrior, GmmScore, GridScore,
                                 NeuralScore, eval_score, grid_score)
from emdiff.tensor import MlpConfig, MlpScoreNet, NonFiniteError, Tensor
from oracles import central_diff, mlp64

SCHED = linear_beta_schedule(1000)


def two_gmm():
    return GmmPrior([0.3, 0.7], [[-1.0, 0.5], [1.5, -0.5]],
                    [[[0.3, 0.1], [0.1, 0.2]], [[0.25, 0.0], [0.0, 0.4]]])


class TestGaussianScore:
    def test_standard_normal_score_is_minus_x(self):
        m = GaussianScore(GaussianPrior(np.zeros(3), np.eye(3)), SCHED)
        x = np.random.default_rng(0).standard_normal((5, 3))
        for t in (1, 400, 1000):
            np.testing.assert_allclose(eval_score(m, x, t), -x, atol=1e-12)

    def test_vanishes_at_mode(self):
        prior = GaussianPrior([1.0, -2.0], [[2.0, 0.3], [0.3, 0.5]])
        m = GaussianScore(prior, SCHED)
        for t in (1, 300, 900):
            x = np.sqrt(SCHED.alpha_bar_at(t)) * prior.mean[None]
            np.testing.assert_allclose(m.score(x, t), 0.0, atol=1e-12)

    def test_matches_gradient_of_log_density(self):
        prior = GaussianPrior([1.0, -2.0], [[2.0, 0.3], [0.3, 0.5]])
        m = GaussianScore(prior, SCHED)
        t = 250
        mean, cov = prior.diffused(SCHED, t)
        prec = np.linalg.inv(cov)

        def logp(v):
            d = v - mean
            return -0.5 * d @ prec @ d

        x = np.array([0.3, 0.7])
        np.testing.assert_allclose(m.score(x[None], t)[0], central_diff(logp, x, 1e-4), rtol=1e-6)

    def test_tensor_path_agrees(self):
        prior = GaussianPrior([0.5, 0.0], [[1.0, 0.2], [0.2, 0.8]])
        m = GaussianScore(prior, SCHED)
        x = np.random.default_rng(1).standard_normal((4, 2))
        out = m.score_tensor(Tensor(x, dtype=np.float64), 100).data
        np.testing.assert_allclose(out, m.score(x, 100), rtol=1e-12)

    def test_rejects_non_spd(self):
        with pytest.raises(ValueError):
            GaussianPrior([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(ValueError):
            GaussianPrior([0.0, 0.0], [[1.0, 0.5], [0.0, 1.0]])


class TestGmmScore:
    def test_weights_validation(self):
        with pytest.raises(ValueError):
            GmmPrior([0.5, 0.6], [[0.0], [1.0]], [[[1.0]], [[1.0]]])
        with pytest.raises(ValueError):
            GmmPrior([1.5, -0.5], [[0.0], [1.0]], [[[1.0]], [[1.0]]])

    @pytest.mark.parametrize("t", [1, 100, 500, 900])
    def test_matches_numerical_gradient(self, t):
        prior = two_gmm()
        m = GmmScore(prior, SCHED)
        dp = prior.diffused(SCHED, t)
        grid = np.stack(np.meshgrid(np.linspace(-2, 2, 5), np.linspace(-2, 2, 5)), -1).reshape(-1, 2)
        got = m.score(grid, t)
        for x, s in zip(grid, got):
            ref = central_diff(lambda v: dp.log_density(v[None])[0], x, 1e-5)
            np.testing.assert_allclose(s, ref, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(ref).max()))

    def test_tensor_path_agrees(self):
        m = GmmScore(two_gmm(), SCHED)
        x = np.random.default_rng(2).standard_normal((6, 2))
        out = m.score_tensor(Tensor(x, dtype=np.float64), 300).data
        np.testing.assert_allclose(out, m.score(x, 300), rtol=1e-10, atol=1e-12)

    def test_zero_weight_component_ignored(self):
        full = GmmPrior([1.0, 0.0], [[0.0, 0.0], [3.0, 3.0]], [np.eye(2), np.eye(2)])
        single = GaussianScore(GaussianPrior([0.0, 0.0], np.eye(2)), SCHED)
        x = np.random.default_rng(3).standard_normal((5, 2))
        np.testing.assert_allclose(GmmScore(full, SCHED).score(x, 50), single.score(x, 50), atol=1e-12)

    def test_agrees_with_grid_oracle(self):
        prior = two_gmm()
        ax = np.linspace(-5, 5, 301)
        mesh = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
        dens = np.exp(prior.log_density(mesh)).reshape(301, 301)
        dens /= dens.sum() * (ax[1] - ax[0]) ** 2
        grid = GridScore([ax, ax], dens, SCHED, step=1e-3)
        gmm = GmmScore(prior, SCHED)
        pts = np.array([[-1.0, 0.5], [0.0, 0.0], [1.0, -1.0], [2.0, 1.0]])
        for t in (100, 500, 900):
            np.testing.assert_allclose(grid.score(pts, t), gmm.score(pts, t), atol=1e-3)


class TestGridScore:
    def test_point_mass(self):
        ax = np.linspace(-4, 4, 801)
        dens = np.zeros(801)
        dens[400] = 1.0 / (ax[1] - ax[0])
        m = GridScore([ax], dens, SCHED)
        t = 600
        var = 1 - SCHED.alpha_bar_at(t)
        x = np.array([[-1.0], [0.3], [2.0]])
        np.testing.assert_allclose(m.score(x, t), -x / var, rtol=1e-5)

    def test_standard_normal_table(self):
        ax = np.linspace(-8, 8, 1601)
        h = ax[1] - ax[0]
        dens = np.exp(-0.5 * ax ** 2) / np.sqrt(2 * np.pi)
        dens /= dens.sum() * h
        m = GridScore([ax], dens, SCHED)
        x = np.array([[-1.5], [0.0], [0.7], [2.0]])
        for t in (1, 200, 800):
            np.testing.assert_allclose(m.score(x, t), -x, atol=5 * h ** 2)

    def test_uniform_box_shape(self):
        ax = np.linspace(-2, 2, 801)
        dens = ((ax >= -1) & (ax <= 1)).astype(float)
        dens /= dens.sum() * (ax[1] - ax[0])
        m = GridScore([ax], dens, SCHED)
        t = 5
        inner = m.score(np.array([[0.0], [0.3], [-0.4]]), t)
        np.testing.assert_allclose(inner, 0.0, atol=1e-2)
        outside = np.array([[-1.3], [1.3]])
        s = m.score(outside, t)
        assert np.all(np.sign(s) == -np.sign(outside))
        assert np.all(np.abs(s) > 10)

    def test_outside_grid_raises(self):
        ax = np.linspace(-1, 1, 11)
        m = GridScore([ax], np.full(11, 1 / (11 * 0.2)), SCHED)
        with pytest.raises(ValueError):
            m.score(np.array([[1.5]]), 10)

    def test_unnormalized_rejected(self):
        ax = np.linspace(-1, 1, 11)
        with pytest.raises(ValueError):
            GridScore([ax], np.ones(11), SCHED)

    def test_functional_form(self):
        ax = np.linspace(-6, 6, 601)
        dens = np.exp(-0.5 * ax ** 2)
        dens /= dens.sum() * (ax[1] - ax[0])
        out = grid_score([ax], dens, SCHED, np.array([[1.0]]), 100)
        assert out[0, 0] == pytest.approx(-1.0, abs=1e-3)


class TestNeuralScore:
    def setup_method(self):
        self.sched = linear_beta_schedule(200)
        self.net = MlpScoreNet.create(MlpConfig(3, hidden=(16, 16), time_dim=8), seed=4)
        self.model = NeuralScore(self.net, self.sched)

    def test_score_is_output_over_noise_scale(self):
        x = np.random.default_rng(0).standard_normal((5, 3)).astype(np.float32)
        w = [p.data for p in self.net.weights]
        b = [p.data for p in self.net.biases]
        for t in (1, 100, 200):
            ref = mlp64(w, b, x, t, 8) / np.sqrt(1 - self.sched.alpha_bar_at(t))
            np.testing.assert_allclose(self.model.score(x, t), ref, rtol=1e-4, atol=1e-5)

    def test_scaled_score_tensor(self):
        x = np.random.default_rng(1).standard_normal((4, 3)).astype(np.float32)
        t = 120
        scaled = self.model.scaled_score_tensor(Tensor(x), t).data
        np.testing.assert_allclose(scaled, (1 - self.sched.alpha_bar_at(t)) * self.model.score(x, t),
                                   rtol=1e-5, atol=1e-6)

    def test_eval_score_checks(self):
        with pytest.raises(ValueError):
            eval_score(self.model, np.zeros((2, 4)), 5)
        with pytest.raises(IndexError):
            eval_score(self.model, np.zeros((2, 3)), 0)
        with pytest.raises(NonFiniteError):
            eval_score(self.model, np.full((1, 3), np.inf, np.float32), 5)
