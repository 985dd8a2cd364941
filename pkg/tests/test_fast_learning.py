import numpy as np
import pytest

import fast_learning
from exceptions import DimensionError, NumericalFailure
from fast_learning import GpCompensator, OnlineGpRegressor, fast_step


def small_compensator(**kwargs):
    options = dict(n_y=1, n_re=2, n_ry=2, k_min=10, k_max=40, retrain_every=5, budget=15, refine_budget=3,
                   n_starts=1)
    options.update(kwargs)
    return GpCompensator(**options)


class TestGpCompensator(object):
    def test_silent_until_k_min(self):
        comp = small_compensator()
        for k in range(1, comp.k_min + 1):
            result = comp.step([np.sin(0.1 * k)], [np.sin(0.1 * k) + 0.3])
            assert result.window_size == k - 1
            assert result.e_hat_next == pytest.approx([0.])
            assert not result.retrained

        result = comp.step([0.], [0.3])
        assert result.window_size == comp.k_min
        assert result.retrained
        assert result.e_hat_next[0] != 0.

    def test_window_never_exceeds_k_max(self):
        comp = small_compensator(k_max=15, retrain_every=50)
        for k in range(1, 60):
            result = comp.step([np.cos(0.2 * k)], [np.cos(0.2 * k) + 0.1 * np.sin(k)])
            assert result.window_size == min(k - 1, 15)

    def test_regressor_layout(self):
        comp = small_compensator()
        comp.step([1.], [2.])
        comp.step([3.], [7.])
        # two error lags, two past slow outputs (replicated at cold start), then y_s(k)
        assert comp.regressors().tolist() == [[4., 1., 1., 1., 3.]]

    def test_pairs_regressor_with_next_error(self):
        comp = small_compensator()
        comp.step([1.], [2.])
        nu = comp.regressors()[0].copy()
        comp.step([3.], [7.])
        assert comp.windows[0].inputs()[0].tolist() == nu.tolist()
        assert comp.windows[0].target_array().tolist() == [4.]

    def test_learns_a_constant_bias(self):
        bias = np.array([0.8, -1.5])
        comp = small_compensator(n_y=2, k_max=100, retrain_every=10, budget=30)
        worst = 0.
        for k in range(1, comp.k_min + 120):
            y_s = np.array([np.sin(0.05 * k), 2. * np.cos(0.03 * k)])
            result = comp.step(y_s, y_s + bias)
            if k > comp.k_min + 50:
                worst = max(worst, np.max(np.abs(result.e_hat_next - bias)))
        assert worst <= 0.05 * np.max(np.abs(bias))

    def test_retrain_cadence(self):
        comp = small_compensator(retrain_every=5)
        flags = []
        for k in range(1, 31):
            flags.append(comp.step([np.sin(0.3 * k)], [np.sin(0.3 * k) + 0.2 * np.cos(k)]).retrained)
        # window size reaches k_min at step k_min + 1
        expected = [k >= 11 and (k - 11) % 5 == 0 for k in range(1, 31)]
        assert flags == expected

    def test_retrain_cadence_after_the_window_fills(self):
        comp = small_compensator(k_max=23, retrain_every=5)
        flags = [comp.step([np.sin(0.3 * k)], [np.sin(0.3 * k) + 0.2 * np.cos(k)]).retrained for k in range(1, 80)]
        expected = [k >= 11 and (k - 11) % 5 == 0 for k in range(1, 80)]
        assert flags == expected
        assert sum(flags[-39:]) == 8

    def test_cadence_restarts_after_reset(self):
        comp = small_compensator(k_max=12, retrain_every=4)
        for k in range(1, 30):
            comp.step([np.sin(k)], [np.sin(k) + 0.5])
        comp.reset()
        assert comp.since_fit == 0
        flags = [comp.step([np.sin(k)], [np.sin(k) + 0.5]).retrained for k in range(1, 20)]
        assert flags == [k >= 11 and (k - 11) % 4 == 0 for k in range(1, 20)]

    def test_forced_retrain(self):
        comp = small_compensator(retrain_every=1000)
        for k in range(1, 15):
            comp.step([np.sin(k)], [np.sin(k) + 0.5])
        assert not comp.step([0.], [0.5], retrain=False).retrained
        assert comp.step([0.], [0.5], retrain=True).retrained

    def test_reset(self):
        comp = small_compensator()
        for k in range(1, 20):
            comp.step([np.sin(k)], [np.sin(k) + 0.5])
        comp.reset()
        assert len(comp.windows[0]) == 0
        assert comp.hyperparams == [None]
        assert comp.e_hat.tolist() == [0.]
        assert comp.step([1.], [1.5]).e_hat_next.tolist() == [0.]

    def test_numerical_failure_holds_the_correction(self, monkeypatch):
        comp = small_compensator()
        for k in range(1, comp.k_min + 3):
            comp.step([np.sin(k)], [np.sin(k) + 0.5])
        held = comp.e_hat.copy()

        def fail(*args, **kwargs):
            raise NumericalFailure('forced')

        monkeypatch.setattr(fast_learning, 'gp_fit_predict', fail)
        result = comp.step([0.], [0.5])
        assert result.failed == [0]
        assert result.e_hat_next.tolist() == held.tolist()
        assert comp.n_failures == 1

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            small_compensator(n_y=2).step([1.], [1.])

    def test_deterministic(self):
        def run():
            comp = small_compensator()
            return [comp.step([np.sin(0.2 * k)], [np.sin(0.2 * k) + 0.1 * k % 3]).e_hat_next[0] for k in range(40)]
        assert run() == run()

    def test_fast_step_wrapper(self):
        comp = small_compensator()
        e_hat, returned = fast_step(comp, [1.], [1.5])
        assert returned is comp
        assert e_hat.tolist() == [0.]
        assert comp.k == 1


class TestOnlineGpRegressor(object):
    def test_window_mean_before_k_min(self):
        baseline = OnlineGpRegressor(n_u=1, n_y=2, k_min=10)
        assert baseline.predict([0.]).tolist() == [0., 0.]
        baseline.update([0.], [1., 3.])
        baseline.update([1.], [3., 5.])
        assert baseline.predict([0.5]).tolist() == [2., 4.]

    def test_refits_after_the_window_fills(self, monkeypatch):
        sizes = []
        optimize = fast_learning.optimize_hyperparams

        def counting(window, *args, **kwargs):
            sizes.append(len(window))
            return optimize(window, *args, **kwargs)

        monkeypatch.setattr(fast_learning, 'optimize_hyperparams', counting)
        baseline = OnlineGpRegressor(n_u=1, n_y=1, k_min=10, k_max=23, retrain_every=5, budget=5, refine_budget=2,
                                     n_starts=1)
        rng = np.random.RandomState(2)
        for u in rng.uniform(0., 1., 79):
            baseline.update([u], [np.sin(3. * u)])
        # fits after updates 10, 15, .., 75, the last twelve on a full window
        assert len(sizes) == 14
        assert sizes[:3] == [10, 15, 20] and set(sizes[3:]) == {23}

    def test_learns_a_static_map(self):
        rng = np.random.RandomState(5)
        baseline = OnlineGpRegressor(n_u=1, n_y=1, k_min=10, k_max=80, retrain_every=10, budget=40, n_starts=2)
        for u in rng.uniform(0., 1., 60):
            baseline.update([u], [2. * u + 1.])
        assert baseline.hyperparams[0] is not None
        assert baseline.predict([0.5])[0] == pytest.approx(2., abs=2e-2)
