"""
Configuration tree: defaults, named presets, JSON files and command-line overrides,
merged into a Munch with attribute access (config.gp.k_min).
"""

import copy
import json
import logging
from typing import Dict

from munch import Munch, munchify, unmunchify

from exceptions import ConfigError, IoError
from utils import atomic_write

logger = logging.getLogger(__name__)


def _segments(*segments) -> list:
    return [dict(name=name, regime=regime, length=length, test=test) for name, regime, length, test in segments]


DEFAULTS = {
    'preset': 'desk',
    'seed': 0,
    'out': 'runs/desk',
    'progress': True,
    'tensorboard': False,
    'plant': {
        'n_x': 4,
        'n_y': 3,
        'seed': 0,
        'spectral_radius': 0.7,
        'controls': [[60., 90.]],
        'regimes': [
            {'disturbances': [[100., 300.], [11., 26.]], 'gain': 1.},
            {'disturbances': [[150., 350.], [-9., 6.]], 'gain': 1.},
        ],
        'noise': 0.01,
        'drift': 0.05,
        'drift_period': 500,
        'burn_in': 200,
        'calibration_length': 1000,
    },
    'excitation': {
        'levels': 5,
        'dwell': 12,
        'smoothing': 0.95,
        'period': 200,
        'periodic_weight': 0.5,
    },
    'base_model': {
        'n_a': 2,
        'n_b': 2,
        'ridge': 1e-4,
        'nonlinear_features': True,
    },
    'spc': {
        'percentile_j': 99.73,
        'theta': 0.99,
        'cov_reg': 1e-8,
        'weight_floor': 1e-8,
        'split_ratio': 0.7,
    },
    'gp': {
        'n_re': 4,
        'n_ry': 4,
        'k_min': 25,
        'k_max': 300,
        'retrain_every': 1,
        'jitter': 1e-6,
        'budget': 50,
        'refine_budget': 5,
        'n_starts': 3,
        'learning_rate': 0.05,
        'optimize_jitter': True,
    },
    'baseline_gp': {
        'enabled': True,
        'retrain_every': 1,
    },
    'runtime': {
        'n_mon': 200,
        'collect_length': 1000,
    },
    'scenario': {
        'segments': _segments(('train-1', 0, 1000, False),
                              ('monitor-1', 0, 400, False),
                              ('shift', 1, 1200, False),
                              ('test-day-1', 0, 200, True),
                              ('test-day-2', 1, 200, True)),
        'internal_change': None,
    },
}

PRESETS = {
    'desk': {},
    'aroma': {
        'out': 'runs/aroma',
        'plant': {
            'n_x': 12,
            'n_y': 17,
            'controls': [[60., 90.], [0.5, 3.]],
            'regimes': [
                {'disturbances': [[100., 300.], [11., 26.], [0., 800.], [40., 60.]], 'gain': 1.},
                {'disturbances': [[150., 350.], [-9., 6.], [0., 300.], [40., 60.]], 'gain': 1.},
            ],
            'calibration_length': 2016,
        },
        'excitation': {'period': 288},
        'runtime': {'n_mon': 288, 'collect_length': 2016},
        'scenario': {
            'segments': _segments(('week-1', 0, 2016, False),
                                  ('monitor-1', 0, 576, False),
                                  ('shift', 1, 288 + 2016, False),
                                  ('test-day-1', 0, 288, True),
                                  ('test-day-2', 1, 288, True)),
        },
    },
    # InternalChange branch: the state matrix is scaled by 1.3 after the first monitoring days
    'internal-change': {
        'out': 'runs/internal-change',
        'plant': {'regimes': [{'disturbances': [[100., 300.], [11., 26.]], 'gain': 1.}]},
        'scenario': {
            'segments': _segments(('train-1', 0, 1000, False),
                                  ('monitor-1', 0, 400, False),
                                  ('changed', 0, 1200, False),
                                  ('test-day-1', 0, 200, True)),
            'internal_change': {'step': 1400, 'gain': 1.3},
        },
    },
}
PRESETS['district-heating'] = PRESETS['aroma']


def merge(base: Dict, overlay: Dict) -> Dict:
    """Recursive dict merge; lists and scalars of the overlay replace those of the base"""
    merged = copy.deepcopy(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def _require(condition: bool, key: str, message: str):
    if not condition:
        raise ConfigError(key, message)


def _positive_int(config: Munch, key: str):
    section, name = key.split('.')
    value = config[section][name]
    _require(isinstance(value, int) and not isinstance(value, bool) and value > 0, key,
             'must be a positive integer, got %r' % (value,))


def validate_config(config: Munch) -> Munch:
    """Raises ConfigError naming the dotted key of the first invalid entry"""
    for section in DEFAULTS:
        _require(section in config, section, 'missing section')

    _require(isinstance(config.seed, int) and not isinstance(config.seed, bool), 'seed', 'must be an integer')
    _require(isinstance(config.plant.seed, int), 'plant.seed', 'must be an integer')

    spc = config.spc
    _require(0. < spc.percentile_j < 100., 'spc.percentile_j', 'must lie in (0, 100)')
    _require(0. < spc.theta <= 1., 'spc.theta', 'must lie in (0, 1]')
    _require(spc.cov_reg >= 0., 'spc.cov_reg', 'must be non-negative')
    _require(spc.weight_floor > 0., 'spc.weight_floor', 'must be positive')
    _require(0. < spc.split_ratio < 1., 'spc.split_ratio', 'must lie in (0, 1)')

    bm = config.base_model
    _require(isinstance(bm.n_a, int) and bm.n_a >= 0, 'base_model.n_a', 'must be a non-negative integer')
    _require(isinstance(bm.n_b, int) and bm.n_b >= 1, 'base_model.n_b', 'must be a positive integer')
    _require(bm.ridge >= 0., 'base_model.ridge', 'must be non-negative')

    for key in ('gp.n_re', 'gp.n_ry', 'gp.k_min', 'gp.k_max', 'gp.retrain_every', 'gp.budget', 'gp.n_starts',
                'baseline_gp.retrain_every', 'runtime.n_mon', 'runtime.collect_length', 'plant.n_x', 'plant.n_y',
                'plant.drift_period', 'plant.calibration_length', 'excitation.levels', 'excitation.dwell',
                'excitation.period'):
        _positive_int(config, key)
    lag = max(bm.n_a, bm.n_b - 1)
    _require(config.runtime.n_mon > lag, 'runtime.n_mon', 'must exceed the base-model lag %d' % lag)
    _require(config.gp.k_min <= config.gp.k_max, 'gp.k_min', 'must not exceed gp.k_max')
    _require(config.gp.jitter > 0., 'gp.jitter', 'must be positive')
    _require(config.gp.learning_rate > 0., 'gp.learning_rate', 'must be positive')
    _require(isinstance(config.gp.refine_budget, int) and config.gp.refine_budget >= 0, 'gp.refine_budget',
             'must be a non-negative integer')

    plant = config.plant
    _require(0. < plant.spectral_radius < 1., 'plant.spectral_radius', 'must lie in (0, 1)')
    _require(plant.noise >= 0., 'plant.noise', 'must be non-negative')
    _require(plant.drift >= 0., 'plant.drift', 'must be non-negative')
    _require(plant.burn_in >= 0, 'plant.burn_in', 'must be non-negative')
    _require(len(plant.regimes) > 0, 'plant.regimes', 'at least one regime is required')
    _require(len(plant.controls) + len(plant.regimes[0].disturbances) > 0, 'plant.controls', 'no input channels')
    for i, (low, high) in enumerate(plant.controls):
        _require(high > low, 'plant.controls.%d' % i, 'range [%g, %g] is degenerate' % (low, high))
    for i, regime in enumerate(plant.regimes):
        _require(len(regime.disturbances) == len(plant.regimes[0].disturbances), 'plant.regimes.%d' % i,
                 'every regime needs the same number of disturbance ranges')
        for d, (low, high) in enumerate(regime.disturbances):
            _require(high > low, 'plant.regimes.%d.disturbances.%d' % (i, d),
                     'range [%g, %g] is degenerate' % (low, high))
        _require(regime.get('gain', 1.) > 0., 'plant.regimes.%d.gain' % i, 'must be positive')

    _require(0. <= config.excitation.smoothing < 1., 'excitation.smoothing', 'must lie in [0, 1)')
    _require(0. <= config.excitation.periodic_weight <= 1., 'excitation.periodic_weight', 'must lie in [0, 1]')

    segments = config.scenario.segments
    _require(len(segments) > 0, 'scenario.segments', 'at least one segment is required')
    for i, segment in enumerate(segments):
        key = 'scenario.segments.%d' % i
        _require(0 <= segment.regime < len(plant.regimes), key + '.regime', 'unknown regime %r' % segment.regime)
        _require(isinstance(segment.length, int) and segment.length > 0, key + '.length', 'must be positive')

    change = config.scenario.internal_change
    if change is not None:
        _require(isinstance(change.get('step'), int) and change.step >= 0, 'scenario.internal_change.step',
                 'must be a non-negative integer')
        _require(change.get('gain', 1.) > 0., 'scenario.internal_change.gain', 'must be positive')

    return config


def build_config(preset: str = 'desk', overlay: Dict = None, overrides: Dict = None) -> Munch:
    """Defaults, then the preset, then a file overlay, then explicit overrides"""
    if preset not in PRESETS:
        raise ConfigError('preset', 'unknown preset %r, expected one of %s' % (preset, sorted(PRESETS)))
    tree = merge(DEFAULTS, PRESETS[preset])
    tree['preset'] = preset
    tree = merge(tree, overlay or {})
    tree = merge(tree, {k: v for k, v in (overrides or {}).items() if v is not None})
    return validate_config(munchify(tree))


def load_config(path: str = None, preset: str = None, overrides: Dict = None) -> Munch:
    """
    :param path: JSON file, its 'preset' entry selects the preset unless one is given
    :param preset: preset name
    :param overrides: top-level entries that win over everything else, e.g. seed and out
    """
    overlay = {}
    if path is not None:
        try:
            with open(path) as f:
                overlay = json.load(f)
        except OSError as e:
            raise IoError(path, 'cannot read config (%s)' % e.strerror)
        except ValueError as e:
            raise ConfigError(path, 'malformed JSON (%s)' % e)
        if not isinstance(overlay, dict):
            raise ConfigError(path, 'the config file must hold a JSON object')

    preset = preset or overlay.get('preset', DEFAULTS['preset'])
    config = build_config(preset, overlay, overrides)
    logger.debug('loaded config (preset %s, seed %s)', config.preset, config.seed)
    return config


def save_config(config: Munch, path: str):
    def write(tmp):
        with open(tmp, 'w') as f:
            json.dump(unmunchify(config), f, indent=1, sort_keys=True)

    atomic_write(path, write)
