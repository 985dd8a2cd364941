"""
Synthetic regime-switching plant and its excitation signals.

x(k+1) = A_eff x(k) + B tanh(W u~(k))
y_p(k) = C x(k) + D u~(k) + drift(k) + noise(k)

with u~ = (u - center) / scale, A_eff = A * regime gain * internal-change gain.
Inputs are ordered controls first, then disturbances.
"""

import logging
import math
from collections import namedtuple
from typing import Sequence, Tuple

import numpy as np
from scipy.signal import lfilter

from data import Dataset
from exceptions import DimensionError, InvalidData, RegimeError

logger = logging.getLogger(__name__)

PlantState = namedtuple('PlantState', ['x', 'k', 'regime'])
Regime = namedtuple('Regime', ['disturbances', 'gain'])
ExcitationSpec = namedtuple('ExcitationSpec', ['controls', 'levels', 'dwell', 'smoothing', 'period',
                                               'periodic_weight', 'regimes'])


def excitation_spec(config) -> ExcitationSpec:
    """ExcitationSpec from the plant/excitation config sections"""
    regimes = [Regime(disturbances=[tuple(r) for r in regime['disturbances']], gain=float(regime.get('gain', 1.)))
               for regime in config.plant.regimes]
    exc = config.excitation
    spec = ExcitationSpec(controls=[tuple(c) for c in config.plant.controls], levels=int(exc.levels),
                          dwell=int(exc.dwell), smoothing=float(exc.smoothing), period=int(exc.period),
                          periodic_weight=float(exc.periodic_weight), regimes=regimes)
    check_spec(spec)
    return spec


def check_spec(spec: ExcitationSpec):
    if spec.levels < 2:
        raise InvalidData('MPRBS needs at least 2 levels, got %d' % spec.levels)
    if spec.dwell < 1:
        raise InvalidData('dwell must be at least 1 sample, got %d' % spec.dwell)
    if not 0. <= spec.smoothing < 1.:
        raise InvalidData('smoothing must lie in [0, 1), got %r' % spec.smoothing)
    if len(spec.regimes) == 0:
        raise InvalidData('at least one regime is required')

    n_d = len(spec.regimes[0].disturbances)
    for low, high in spec.controls:
        if not high > low:
            raise InvalidData('degenerate control range [%g, %g]' % (low, high))
    for i, regime in enumerate(spec.regimes):
        if len(regime.disturbances) != n_d:
            raise InvalidData('regime %d has %d disturbance ranges, expected %d' % (i, len(regime.disturbances), n_d))
        for low, high in regime.disturbances:
            if not high > low:
                raise InvalidData('regime %d has degenerate disturbance range [%g, %g]' % (i, low, high))


def input_scaling(spec: ExcitationSpec) -> Tuple[np.ndarray, np.ndarray]:
    """Center and half-width of every input channel over all regimes"""
    lows = [low for low, _ in spec.controls]
    highs = [high for _, high in spec.controls]
    for d in range(len(spec.regimes[0].disturbances)):
        lows.append(min(r.disturbances[d][0] for r in spec.regimes))
        highs.append(max(r.disturbances[d][1] for r in spec.regimes))
    lows, highs = np.array(lows, dtype=np.float64), np.array(highs, dtype=np.float64)
    return (lows + highs) / 2., (highs - lows) / 2.


def mprbs(low: float, high: float, levels: int, dwell: int, length: int, rng: np.random.Generator) -> np.ndarray:
    """Multilevel pseudorandom sequence: one of `levels` equally spaced values per dwell block"""
    values = np.linspace(low, high, levels)
    n_blocks = int(math.ceil(length / dwell))
    return np.repeat(values[rng.integers(0, levels, size=n_blocks)], dwell)[:length]


def smooth_profile(low: float, high: float, length: int, smoothing: float, period: int, periodic_weight: float,
                   rng: np.random.Generator) -> np.ndarray:
    """Low-pass filtered noise plus a periodic component, rescaled into [low, high]"""
    noise = lfilter([1. - smoothing], [1., -smoothing], rng.standard_normal(length + period))[period:]
    phase = rng.uniform(0., 2. * math.pi)
    periodic = np.sin(2. * math.pi * np.arange(length) / max(period, 1) + phase)

    noise_span = np.ptp(noise) if length > 1 else 0.
    if noise_span > 0:
        noise = 2. * (noise - noise.min()) / noise_span - 1.
    profile = periodic_weight * periodic + (1. - periodic_weight) * noise

    span = np.ptp(profile) if length > 1 else 0.
    if span <= 0:
        return np.full(length, (low + high) / 2.)
    return low + (high - low) * (profile - profile.min()) / span


def generate_excitation(spec: ExcitationSpec, regime: int, length: int, seed: int) -> np.ndarray:
    """
    :param spec: ExcitationSpec
    :param regime: index of the operating regime
    :param length: number of samples
    :param seed: generator seed
    :returns inputs with shape (length, n_controls + n_disturbances)
    """
    if not 0 <= regime < len(spec.regimes):
        raise RegimeError('regime %r is not one of 0..%d' % (regime, len(spec.regimes) - 1))

    rng = np.random.default_rng([seed, regime])
    columns = [mprbs(low, high, spec.levels, spec.dwell, length, rng) for low, high in spec.controls]
    columns += [smooth_profile(low, high, length, spec.smoothing, spec.period, spec.periodic_weight, rng)
                for low, high in spec.regimes[regime].disturbances]
    return np.stack(columns, axis=1) if columns else np.zeros([length, 0])


class Plant(object):
    def __init__(self, n_u: int, n_y: int, n_x: int, seed: int = 0, spectral_radius: float = 0.7,
                 input_center: Sequence[float] = None, input_scale: Sequence[float] = None,
                 regime_gains: Sequence[float] = (1.,), noise_std: Sequence[float] = None,
                 drift_amplitude: Sequence[float] = None, drift_period: int = 500,
                 internal_change_step: int = None, internal_change_gain: float = 1.):
        """
        :param n_u, n_y, n_x: input, output and state dimensions
        :param seed: seeds the system matrices, the drift phases and the measurement noise
        :param spectral_radius: spectral radius of the nominal state matrix, below 1
        :param regime_gains: multiplier of A for every regime
        :param noise_std: white measurement noise per output
        :param drift_amplitude: amplitude of the sinusoidal output bias per output
        :param internal_change_step: plant step from which A is multiplied by internal_change_gain
        """
        if not 0. < spectral_radius < 1.:
            raise InvalidData('spectral radius must lie in (0, 1), got %r' % spectral_radius)

        self.n_u, self.n_y, self.n_x = n_u, n_y, n_x
        self.seed = seed
        rng = np.random.default_rng(seed)

        a = rng.standard_normal([n_x, n_x])
        self.A = a * spectral_radius / np.max(np.abs(np.linalg.eigvals(a)))
        self.B = rng.standard_normal([n_x, n_x]) / math.sqrt(n_x)
        self.W = rng.standard_normal([n_x, n_u]) / math.sqrt(n_u)
        self.C = rng.standard_normal([n_y, n_x])
        self.D = 0.1 * rng.standard_normal([n_y, n_u])
        self.drift_phase = rng.uniform(0., 2. * math.pi, size=n_y)

        self.input_center = np.zeros(n_u) if input_center is None else np.asarray(input_center, dtype=np.float64)
        self.input_scale = np.ones(n_u) if input_scale is None else np.asarray(input_scale, dtype=np.float64)
        self.regime_gains = [float(g) for g in regime_gains]
        self.noise_std = np.zeros(n_y) if noise_std is None else np.broadcast_to(noise_std, [n_y]).astype(np.float64)
        self.drift_amplitude = np.zeros(n_y) if drift_amplitude is None \
            else np.broadcast_to(drift_amplitude, [n_y]).astype(np.float64)
        self.drift_period = drift_period
        self.internal_change_step = internal_change_step
        self.internal_change_gain = internal_change_gain

        for gain in self.regime_gains + [internal_change_gain]:
            if gain * spectral_radius >= 1.:
                logger.warning('state-matrix gain %.3g makes the plant unstable', gain)

    def initial_state(self, regime: int = 0) -> PlantState:
        self._check_regime(regime)
        return PlantState(x=np.zeros(self.n_x), k=0, regime=regime)

    def _check_regime(self, regime: int):
        if not 0 <= regime < len(self.regime_gains):
            raise RegimeError('regime %r is not one of 0..%d' % (regime, len(self.regime_gains) - 1))

    def state_matrix(self, state: PlantState) -> np.ndarray:
        gain = self.regime_gains[state.regime]
        if self.internal_change_step is not None and state.k >= self.internal_change_step:
            gain *= self.internal_change_gain
        return gain * self.A

    def drift(self, k: int) -> np.ndarray:
        return self.drift_amplitude * np.sin(2. * math.pi * k / self.drift_period + self.drift_phase)

    def noise(self, k: int) -> np.ndarray:
        if not np.any(self.noise_std > 0):
            return np.zeros(self.n_y)
        return self.noise_std * np.random.default_rng([self.seed, k]).standard_normal(self.n_y)

    def step(self, state: PlantState, u) -> Tuple[PlantState, np.ndarray]:
        """
        :param state: PlantState at step k
        :param u: raw input vector u(k)
        :returns the state at k+1 and the measured output y_p(k)
        """
        u = np.asarray(u, dtype=np.float64).ravel()
        if u.shape != (self.n_u,):
            raise DimensionError('input has shape %s, plant expects (%d,)' % (u.shape, self.n_u))

        u_scaled = (u - self.input_center) / self.input_scale
        y_p = self.C @ state.x + self.D @ u_scaled + self.drift(state.k) + self.noise(state.k)
        x_next = self.state_matrix(state) @ state.x + self.B @ np.tanh(self.W @ u_scaled)
        return PlantState(x=x_next, k=state.k + 1, regime=state.regime), y_p

    def burn_in(self, state: PlantState, u, steps: int) -> PlantState:
        """Settles the state under a constant input without advancing the step counter"""
        u_scaled = (np.asarray(u, dtype=np.float64) - self.input_center) / self.input_scale
        forcing = self.B @ np.tanh(self.W @ u_scaled)
        x = state.x
        a = self.state_matrix(state)
        for _ in range(steps):
            x = a @ x + forcing
        return state._replace(x=x)

    def run(self, state: PlantState, inputs: np.ndarray) -> Tuple[PlantState, np.ndarray]:
        """Simulates a whole input sequence, returns the final state and outputs (N, n_y)"""
        inputs = np.asarray(inputs, dtype=np.float64)
        outputs = np.zeros([inputs.shape[0], self.n_y])
        for i in range(inputs.shape[0]):
            state, outputs[i] = self.step(state, inputs[i])
        return state, outputs


def plant_step(plant: Plant, state: PlantState, u) -> Tuple[PlantState, np.ndarray]:
    return plant.step(state, u)


def build_plant(config, spec: ExcitationSpec = None) -> Plant:
    """Plant from config; noise and drift are calibrated as fractions of the output std of
    a noise-free nominal run over regime 0.
    """
    spec = spec or excitation_spec(config)
    pc = config.plant
    center, scale = input_scaling(spec)
    n_u = len(center)
    change = config.get('scenario', {}).get('internal_change') or {}

    nominal = Plant(n_u, pc.n_y, pc.n_x, seed=pc.seed, spectral_radius=pc.spectral_radius, input_center=center,
                    input_scale=scale, regime_gains=[r.gain for r in spec.regimes])
    inputs = generate_excitation(spec, 0, pc.calibration_length, pc.seed)
    state = nominal.burn_in(nominal.initial_state(0), inputs[0], pc.burn_in)
    _, outputs = nominal.run(state, inputs)
    output_std = np.maximum(outputs.std(axis=0), 1e-12)

    return Plant(n_u, pc.n_y, pc.n_x, seed=pc.seed, spectral_radius=pc.spectral_radius, input_center=center,
                 input_scale=scale, regime_gains=[r.gain for r in spec.regimes],
                 noise_std=pc.noise * output_std, drift_amplitude=pc.drift * output_std,
                 drift_period=pc.drift_period, internal_change_step=change.get('step'),
                 internal_change_gain=float(change.get('gain', 1.)))


def simulate_dataset(plant: Plant, spec: ExcitationSpec, regime: int, length: int, seed: int,
                     burn_in: int = 0, name: str = None) -> Dataset:
    """Fresh plant trajectory under the regime's excitation, recorded from a settled state"""
    inputs = generate_excitation(spec, regime, length, seed)
    state = plant.initial_state(regime)
    if burn_in > 0 and length > 0:
        state = plant.burn_in(state, inputs[0], burn_in)
    _, outputs = plant.run(state, inputs)
    return Dataset(inputs, outputs, name=name or 'regime-%d' % regime)
