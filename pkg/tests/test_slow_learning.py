import math

import numpy as np
import pytest
import torch

from config import build_config
from exceptions import EmptyEnsemble, IoError, NotCharacterized
from models.narx import NarxConfig
from plant import build_plant, excitation_spec, simulate_dataset
from slow_learning import (IN_CONTROL, INTERNAL_CHANGE, NEW_REGIME, EnsembleMember, add_member, characterize,
                           combination_weights, empty_ensemble, ensemble_errors, ensemble_predict, ensemble_step,
                           load_ensemble, monitor, predict_dataset, reset, save_ensemble, warm_buffers)
from spc import build_profile, mahalanobis

BASE = NarxConfig(n_a=2, n_b=2, ridge=1e-4, nonlinear_features=True)


def stub_member(center, spread=1.):
    """Member carrying only an input profile built from the 1-D benchmark {center - spread, center + spread}"""
    profile = build_profile(np.array([[center - spread], [center + spread]]))
    return EnsembleMember(model=None, input_profile=profile, input_chart=None, dataset=None)


@pytest.fixture(scope='module')
def desk():
    config = build_config('desk', overrides={'progress': False})
    spec = excitation_spec(config)
    return config, spec, build_plant(config, spec)


@pytest.fixture(scope='module')
def regime_data(desk):
    config, spec, plant = desk
    return [simulate_dataset(plant, spec, regime, 1000, seed=11, burn_in=200) for regime in (0, 1)]


@pytest.fixture(scope='module')
def one_member(regime_data):
    return add_member(empty_ensemble(), regime_data[0], BASE)


@pytest.fixture(scope='module')
def two_members(one_member, regime_data):
    return add_member(one_member, regime_data[1], BASE)


class TestCombinationWeights(object):
    def test_single_member(self):
        assert combination_weights([3.], [stub_member(0.)]).tolist() == [1.]

    def test_inverse_distance_weights(self):
        near = stub_member(0.)
        # T^2 = ((u - c) / sqrt(2))^2, so u = sqrt(2) is at T^2 = 1 from `near` and T^2 = 3 from `far`
        far = stub_member(math.sqrt(2.) - math.sqrt(6.))
        weights = combination_weights([math.sqrt(2.)], [near, far])
        assert weights == pytest.approx([0.75, 0.25], rel=1e-6)

    @pytest.mark.parametrize('dim', [1, 2, 3, 5])
    def test_simplex_and_ordering(self, dim):
        rng = np.random.RandomState(dim)
        members = []
        for _ in range(4):
            mixing = rng.randn(dim, dim) + 2. * np.eye(dim)
            benchmark = rng.randn(60, dim) @ mixing + rng.uniform(-5., 5., dim)
            members.append(EnsembleMember(model=None, input_profile=build_profile(benchmark), input_chart=None,
                                          dataset=None))
        # 2500 inputs per dimension, 10^4 in all
        inputs = rng.uniform(-8., 8., size=(2500, dim))
        weights = combination_weights(inputs, members)

        assert weights.shape == (2500, 4)
        assert np.all(weights >= 0.)
        assert np.all(np.abs(weights.sum(axis=1) - 1.) <= 1e-12)

        t2 = np.stack([mahalanobis(m.input_profile, inputs) for m in members], axis=1)
        ranked = np.take_along_axis(weights, np.argsort(t2, axis=1), axis=1)
        assert np.all(np.diff(ranked, axis=1) <= 1e-12)

    def test_exact_match_takes_all_the_weight(self):
        weights = combination_weights([2.], [stub_member(-3.), stub_member(2.), stub_member(7.)])
        assert weights[1] == pytest.approx(1., abs=1e-6)

    def test_empty(self):
        with pytest.raises(EmptyEnsemble):
            combination_weights([1.], [])


class TestPrediction(object):
    def test_identical_members_equal_the_single_model(self, one_member, regime_data):
        member = one_member.members[0]
        doubled = one_member._replace(members=(member, member))
        inputs = regime_data[0].u[:200]

        single = member.model.simulate(inputs)
        prediction = ensemble_predict(doubled, inputs)
        assert prediction.weights == pytest.approx(np.full([200, 2], 0.5))
        assert prediction.y_s == pytest.approx(single, rel=1e-12, abs=1e-12)

    def test_convex_combination(self, two_members, regime_data):
        inputs = np.concatenate([regime_data[0].u[:150], regime_data[1].u[:150]])
        prediction = ensemble_predict(two_members, inputs)
        low = prediction.member_outputs.min(axis=0)
        high = prediction.member_outputs.max(axis=0)
        tol = 1e-9 * (1. + np.abs(prediction.member_outputs).max())
        assert np.all(prediction.y_s >= low - tol) and np.all(prediction.y_s <= high + tol)

    def test_weights_favour_the_matching_regime(self, two_members, regime_data):
        for regime, dataset in enumerate(regime_data):
            weights = ensemble_predict(two_members, dataset.u[:100]).weights
            assert np.mean(weights[:, regime]) > 0.7

    def test_argmax_attribution(self, two_members, regime_data):
        for regime, dataset in enumerate(regime_data):
            weights = combination_weights(dataset.u, two_members.members)
            assert np.mean(np.argmax(weights, axis=1) == regime) >= 0.9

    def test_step_matches_batch_prediction(self, two_members, regime_data):
        dataset = regime_data[1][:60]
        lag = two_members.lag
        buffers = warm_buffers(two_members, dataset[:lag])
        prediction, scored = predict_dataset(two_members, dataset)

        outputs = []
        for u_k in scored.u:
            y_k, _, _, buffers = ensemble_step(two_members, buffers, u_k)
            outputs.append(y_k)
        assert np.array(outputs) == pytest.approx(prediction.y_s, rel=1e-10, abs=1e-10)

    def test_empty_ensemble(self, regime_data):
        with pytest.raises(EmptyEnsemble):
            ensemble_predict(empty_ensemble(), regime_data[0].u[:10])


class TestCharacterization(object):
    def test_own_test_split_is_in_control(self, one_member, regime_data):
        _, test = regime_data[0].split(one_member.split_ratio)
        t2 = one_member.error_chart.t2_reference
        assert np.mean(t2 <= one_member.error_chart.ucl) >= one_member.percentile_j / 100.
        assert monitor(one_member, test).tag == IN_CONTROL

    def test_input_chart_of_every_member(self, two_members):
        assert two_members.characterized
        for member in two_members.members:
            assert member.input_chart is not None
            assert member.input_chart.ucl > 0.

    def test_add_member_leaves_existing_members_alone(self, one_member, two_members):
        old, kept = one_member.members[0], two_members.members[0]
        assert torch.equal(old.model.theta, kept.model.theta)
        assert kept.input_profile is old.input_profile
        assert kept.input_chart is old.input_chart
        assert one_member.n == 1 and two_members.n == 2

    def test_error_chart_is_rebuilt(self, one_member, two_members):
        assert two_members.error_chart is not one_member.error_chart
        assert len(two_members.error_chart.t2_reference) > len(one_member.error_chart.t2_reference)

    def test_characterize_on_other_datasets(self, one_member, regime_data):
        recharacterized = characterize(one_member, [regime_data[0][:500]])
        assert recharacterized.error_profile.n_obs < one_member.error_profile.n_obs

    def test_errors_are_small_on_the_training_regime(self, one_member, regime_data):
        errors = ensemble_errors(one_member, regime_data[0])
        assert np.all(np.abs(errors).mean(axis=0) < regime_data[0].y.std(axis=0))


class TestMonitor(object):
    def test_new_regime(self, one_member, desk):
        config, spec, plant = desk
        batch = simulate_dataset(plant, spec, 1, 200, seed=21, burn_in=200)
        verdict = monitor(one_member, batch)
        assert verdict.tag == NEW_REGIME
        assert verdict.matched_member is None
        assert verdict.input_fractions[0] < 0.99

    def test_known_regime_after_growth(self, two_members, desk):
        config, spec, plant = desk
        batch = simulate_dataset(plant, spec, 1, 200, seed=21, burn_in=200)
        verdict = monitor(two_members, batch, theta=0.9)
        assert verdict.tag == IN_CONTROL
        assert len(verdict.input_fractions) == 2

    def test_internal_change(self, one_member):
        config = build_config('desk', overrides={'scenario': {'internal_change': {'step': 0, 'gain': 1.3}}})
        spec = excitation_spec(config)
        changed = build_plant(config, spec)
        batch = simulate_dataset(changed, spec, 0, 200, seed=21, burn_in=200)

        verdict = monitor(one_member, batch)
        assert verdict.tag == INTERNAL_CHANGE
        assert verdict.matched_member == 0
        assert verdict.input_fractions[0] >= 0.99

    def test_theta_one_demands_every_sample(self, one_member, regime_data):
        _, test = regime_data[0].split(one_member.split_ratio)
        verdict = monitor(one_member, test, theta=1.)
        assert (verdict.tag == IN_CONTROL) == (verdict.error_fraction == 1.)

    def test_batch_shorter_than_the_lags(self, one_member, regime_data):
        batch = regime_data[0][:one_member.lag]
        prediction, scored = predict_dataset(one_member, batch)
        assert len(scored) == len(batch)
        assert prediction.y_s == pytest.approx(ensemble_predict(one_member, batch.u).y_s)

        verdict = monitor(one_member, batch)
        assert verdict.tag in (IN_CONTROL, NEW_REGIME, INTERNAL_CHANGE)
        assert 0. <= verdict.error_fraction <= 1.
        assert len(verdict.input_fractions) == 1

    def test_not_characterized(self, one_member, regime_data):
        bare = one_member._replace(error_profile=None, error_chart=None)
        with pytest.raises(NotCharacterized):
            monitor(bare, regime_data[0][:100])

    def test_empty(self, regime_data):
        with pytest.raises(EmptyEnsemble):
            monitor(empty_ensemble(), regime_data[0][:100])


class TestLifecycle(object):
    def test_reset(self, two_members):
        cleared = reset(two_members)
        assert cleared.n == 0
        assert not cleared.characterized
        assert cleared.percentile_j == two_members.percentile_j
        assert two_members.n == 2

    def test_reset_then_add_matches_a_fresh_ensemble(self, one_member, two_members, regime_data):
        rebuilt = add_member(reset(two_members), regime_data[0], BASE)
        assert rebuilt.n == 1
        assert torch.equal(rebuilt.members[0].model.theta, one_member.members[0].model.theta)
        assert rebuilt.members[0].input_chart.ucl == one_member.members[0].input_chart.ucl
        assert rebuilt.error_chart.ucl == one_member.error_chart.ucl
        assert np.array_equal(rebuilt.error_profile.cov_inv, one_member.error_profile.cov_inv)

    def test_reset_of_an_empty_ensemble(self):
        empty = empty_ensemble(weight_floor=1e-6, percentile_j=95.)
        cleared = reset(empty)
        assert cleared.n == 0 and cleared.members == ()
        assert not cleared.characterized
        assert (cleared.weight_floor, cleared.percentile_j) == (1e-6, 95.)
        assert cleared.split_ratio == empty.split_ratio and cleared.cov_reg == empty.cov_reg

    def test_save_and_load(self, two_members, regime_data, tmp_path):
        directory = str(tmp_path / 'ensemble')
        save_ensemble(two_members, directory)
        restored = load_ensemble(directory)

        assert restored.n == 2
        assert restored.error_chart.ucl == two_members.error_chart.ucl
        for a, b in zip(restored.members, two_members.members):
            assert torch.equal(a.model.theta, b.model.theta)
            assert a.input_chart.ucl == b.input_chart.ucl

        batch = regime_data[1][:100]
        assert monitor(restored, batch).tag == monitor(two_members, batch).tag
        assert ensemble_predict(restored, batch.u).y_s == pytest.approx(ensemble_predict(two_members, batch.u).y_s)

    def test_load_missing_directory(self, tmp_path):
        with pytest.raises(IoError):
            load_ensemble(str(tmp_path / 'nowhere'))
