"""
lifelong.py: Two-fold adaptation harness (slow ensemble learning + fast GP compensation)

Usage:
    lifelong.py simulate --regime=<int> --length=<int> --output=<file> [options]
    lifelong.py run [--resume] [--ensemble=<dir>] [options]
    lifelong.py report <run-dir>
    lifelong.py monitor <dataset> --ensemble=<dir> [--theta=<float>] [options]
    lifelong.py (-h | --help)

Options:
    -h --help                   show this screen
    --config=<file>             JSON configuration overlay
    --preset=<name>             configuration preset: desk, aroma (alias district-heating) or internal-change
    --seed=<int>                master seed
    --out=<dir>                 run directory
    --regime=<int>              regime index of the simulated batch
    --length=<int>              number of simulated samples
    --output=<file>             dataset CSV to write
    --resume                    continue from a persisted ensemble
    --ensemble=<dir>            persisted ensemble directory, <out>/ensemble when resuming by default
    --theta=<float>             acceptance fraction of the monitoring checks
"""

import json
import logging
import os
import sys
from typing import Dict, List

from docopt import docopt

from config import load_config
from data import Dataset
from exceptions import ConfigError, IoError, TwofoldError
from plant import build_plant, excitation_spec, simulate_dataset
from runtime import load_report, run_experiment
from slow_learning import load_ensemble, monitor
from utils import setup_logging

MODEL_ORDER = ['M_AVG', 'M_s', 'M', 'M_GP']

logger = logging.getLogger(__name__)


def cmd_simulate(config, regime: int, length: int, out_path: str) -> Dataset:
    spec = excitation_spec(config)
    plant = build_plant(config, spec)
    dataset = simulate_dataset(plant, spec, regime, length, config.seed, burn_in=config.plant.burn_in)
    dataset.save(out_path)
    logger.info('wrote %r to [%s]', dataset, out_path)
    return dataset


def cmd_run(config, resume: str = None):
    return run_experiment(config, config.out, resume)


def _model_names(fit: Dict) -> List[str]:
    members = sorted((name for name in fit if name.startswith('M[')), key=lambda name: int(name[2:-1]))
    return members + [name for name in MODEL_ORDER if name in fit]


def format_report(report: Dict) -> str:
    fit = report.get('fit') or {}
    lines = ['%-8s %8s  %s' % ('model', 'FIT', 'per output')]
    for name in _model_names(fit):
        per_output = ' '.join('-' if v is None else '%.1f' % v for v in fit[name]['per_output'])
        mean = fit[name]['mean']
        lines.append('%-8s %8s  %s' % (name, '-' if mean is None else '%.1f' % mean, per_output))

    lines.append('')
    lines.append('%-8s %-15s %6s  %s' % ('k', 'verdict', 'P_e', 'P_u'))
    for verdict in report.get('verdicts', []):
        lines.append('%-8d %-15s %6.3f  %s' % (verdict['k'], verdict['tag'], verdict['error_fraction'],
                                               ' '.join('%.3f' % f for f in verdict['input_fractions'])))

    lines.append('')
    lines.append('members: %s' % ', '.join('%d@%d' % (n, k) for k, n in report.get('member_counts', [])))
    if not report.get('complete', True):
        lines.append('incomplete run: %s' % report.get('error'))
    return '\n'.join(lines)


def cmd_report(run_dir: str) -> str:
    if not os.path.isdir(run_dir):
        raise IoError(run_dir, 'not a run directory')
    text = format_report(load_report(run_dir))
    print(text)
    return text


def cmd_monitor(dataset_path: str, ensemble_dir: str, theta: float) -> Dict:
    batch = Dataset.load(dataset_path)
    verdict = monitor(load_ensemble(ensemble_dir), batch, theta)
    result = {'tag': verdict.tag, 'error_fraction': verdict.error_fraction,
              'input_fractions': verdict.input_fractions,
              'matched_member': None if verdict.matched_member is None else verdict.matched_member + 1}
    print(json.dumps(result, sort_keys=True))
    return result


def main(argv: List[str] = None) -> int:
    args = docopt(__doc__, argv=argv)
    setup_logging()

    try:
        if args['report']:
            cmd_report(args['<run-dir>'])
            return 0

        overrides = {'seed': None if args['--seed'] is None else int(args['--seed']), 'out': args['--out']}
        config = load_config(args['--config'], args['--preset'], overrides)

        if args['simulate']:
            cmd_simulate(config, int(args['--regime']), int(args['--length']), args['--output'])
        elif args['run']:
            resume = None
            if args['--resume']:
                resume = args['--ensemble'] or os.path.join(config.out, 'ensemble')
            cmd_run(config, resume)
        elif args['monitor']:
            theta = float(args['--theta']) if args['--theta'] is not None else config.spc.theta
            if not 0. < theta <= 1.:
                raise ConfigError('theta', 'must lie in (0, 1], got %r' % theta)
            cmd_monitor(args['<dataset>'], args['--ensemble'], theta)
    except TwofoldError as e:
        logger.error('%s', e)
        return 1

    return 0


if __name__ == '__main__':
    sys.exit(main())
