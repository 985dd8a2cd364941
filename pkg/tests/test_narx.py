import numpy as np
import pytest
import torch

from data import Dataset
from exceptions import DimensionError, InsufficientData, SingularFit
from models.narx import NarxConfig, NarxModel, fit_base_model, simulate

LINEAR = NarxConfig(n_a=2, n_b=2, ridge=0., nonlinear_features=False)


def arx_dataset(n_u=2, n_y=2, length=400, seed=0):
    """Noise-free multi-output ARX data y(k) = A1 y(k-1) + A2 y(k-2) + B0 u(k) + B1 u(k-1) + c"""
    rng = np.random.RandomState(seed)
    a1 = 0.5 * np.eye(n_y) + 0.1 * rng.randn(n_y, n_y)
    a2 = -0.2 * np.eye(n_y) + 0.05 * rng.randn(n_y, n_y)
    b0, b1, c = rng.randn(n_y, n_u), rng.randn(n_y, n_u), rng.randn(n_y)

    u = rng.randn(length, n_u) * 3. + 10.
    y = np.zeros([length, n_y])
    for k in range(2, length):
        y[k] = a1 @ y[k - 1] + a2 @ y[k - 2] + b0 @ u[k] + b1 @ u[k - 1] + c
    return Dataset(u[2:], y[2:], name='arx'), (a1, a2, b0, b1, c)


class TestFit(object):
    def test_recovers_siso_generator(self):
        dataset, (a1, a2, b0, b1, _) = arx_dataset(n_u=1, n_y=1)
        model = fit_base_model(dataset, LINEAR)

        theta = model.theta.numpy()[0]
        ratio = float(model.y_std[0] / model.u_std[0])
        assert theta[0] == pytest.approx(a1[0, 0], abs=1e-6)
        assert theta[1] == pytest.approx(a2[0, 0], abs=1e-6)
        assert theta[2] * ratio == pytest.approx(b0[0, 0], abs=1e-6)
        assert theta[3] * ratio == pytest.approx(b1[0, 0], abs=1e-6)

    def test_one_step_residual_vanishes(self):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset, LINEAR)
        residual = model.one_step(dataset) - dataset.y[model.lag:]
        assert np.max(np.abs(residual)) < 1e-6 * np.max(np.abs(dataset.y))

    def test_free_run_tracks_generator(self):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset, LINEAR)
        lag = model.lag
        init = model.warm_start(dataset.u[:lag], dataset.y[:lag])
        outputs = simulate(model, dataset.u[lag:lag + 100], init)
        assert outputs == pytest.approx(dataset.y[lag:lag + 100], abs=1e-4)

    def test_constant_output(self):
        rng = np.random.RandomState(1)
        dataset = Dataset(rng.randn(200, 2), np.full([200, 2], 5.))
        model = fit_base_model(dataset)
        outputs = model.simulate(rng.randn(50, 2), model.cold_start())
        assert outputs == pytest.approx(np.full([50, 2], 5.))

    def test_huge_ridge_predicts_the_mean(self):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset, NarxConfig(ridge=1e12))
        assert float(model.theta.abs().max()) < 1e-6
        assert model.one_step(dataset) == pytest.approx(np.tile(dataset.y.mean(axis=0), (len(dataset) - 2, 1)),
                                                        abs=1e-3)

    @pytest.mark.parametrize('seed', range(5))
    def test_fit_is_optimal(self, seed):
        dataset, _ = arx_dataset(seed=seed)
        noisy = Dataset(dataset.u, dataset.y + np.random.RandomState(seed).randn(*dataset.y.shape))
        model = fit_base_model(noisy)
        base = model.loss(noisy)

        rng = np.random.RandomState(100 + seed)
        for _ in range(10):
            delta = torch.as_tensor(rng.randn(*model.theta.shape))
            delta = 1e-3 * delta / delta.norm()
            assert model.loss(noisy, model.theta + delta) >= base

    def test_deterministic(self):
        dataset, _ = arx_dataset()
        first, second = fit_base_model(dataset), fit_base_model(dataset)
        assert torch.equal(first.theta, second.theta)
        assert np.array_equal(first.simulate(dataset.u), second.simulate(dataset.u))

    def test_too_short(self):
        dataset, _ = arx_dataset(length=12)
        with pytest.raises(InsufficientData):
            fit_base_model(dataset)

    def test_rank_deficient_without_ridge(self):
        rng = np.random.RandomState(2)
        u = rng.randn(200, 1)
        dataset = Dataset(np.hstack([u, u]), rng.randn(200, 1))
        with pytest.raises(SingularFit):
            fit_base_model(dataset, LINEAR)


class TestSimulate(object):
    def test_zero_coefficients_return_the_output_mean(self):
        model = NarxModel(n_u=2, n_y=2)
        model.y_mean = torch.tensor([1., 2.], dtype=torch.float64)
        outputs = model.simulate(np.random.RandomState(3).randn(20, 2))
        assert outputs == pytest.approx(np.tile([1., 2.], (20, 1)))

    def test_static_model_equals_one_step(self):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset, NarxConfig(n_a=0, n_b=2))
        lag = model.lag
        outputs = model.simulate(dataset.u[lag:], model.warm_start(dataset.u[:lag], dataset.y[:lag]))
        assert outputs == pytest.approx(model.one_step(dataset), rel=1e-10, abs=1e-10)

    def test_output_length_matches_input(self):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset)
        assert model.simulate(dataset.u[:37]).shape == (37, dataset.n_y)

    def test_bitwise_determinism(self):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset)
        init = model.warm_start(dataset.u[:2], dataset.y[:2])
        assert np.array_equal(model.simulate(dataset.u, init), model.simulate(dataset.u, init))

    def test_dimension_mismatch(self):
        model = NarxModel(n_u=2, n_y=1)
        with pytest.raises(DimensionError):
            model.simulate(np.zeros([5, 3]))

    def test_scaling_round_trip(self):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset)
        v = torch.as_tensor(np.random.RandomState(4).randn(10, dataset.n_y))
        assert torch.allclose(model.scale_y(model.unscale_y(v)), v, rtol=0., atol=1e-12)

    def test_save_and_load(self, tmp_path):
        dataset, _ = arx_dataset()
        model = fit_base_model(dataset)
        path = str(tmp_path / 'member.bin')
        model.save(path)
        restored = NarxModel.load(path)
        assert restored.config == model.config
        assert np.array_equal(restored.simulate(dataset.u[:50]), model.simulate(dataset.u[:50]))
