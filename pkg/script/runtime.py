"""
Lifelong runtime: per-sample combined prediction y = y_s + e_hat, batch monitoring,
member collection and integration, resets, and the scripted experiment with its
comparison of the six models on the test segments.
"""

import json
import logging
import os
from collections import deque, namedtuple
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from config import save_config
from data import FLOAT_FORMAT, Dataset
from exceptions import IoError, TwofoldError
from fast_learning import GpCompensator, OnlineGpRegressor
from models.narx import NarxConfig
from plant import build_plant, excitation_spec, generate_excitation
from slow_learning import (INTERNAL_CHANGE, NEW_REGIME, add_member, empty_ensemble, ensemble_step, load_ensemble,
                           monitor, reset, save_ensemble, warm_buffers)
from utils import atomic_write, fit_index, pad_weights

COLLECTING = 'Collecting'
MONITORING = 'Monitoring'

logger = logging.getLogger(__name__)

StepRecord = namedtuple('StepRecord', ['k', 'phase', 'warmup', 'n_members', 'u', 'y_p', 'y_s', 'e_hat', 'y',
                                       'weights', 'member_outputs', 'lml', 'window_size', 'retrained', 'y_gp'])
VerdictEvent = namedtuple('VerdictEvent', ['k', 'verdict', 'ucl_e', 'ucl_u', 'lag'])


class ExperimentReport(namedtuple('ExperimentReport', ['fit', 'verdicts', 'member_counts', 'characterizations',
                                                       'gp_failures', 'steps_path', 'n_steps', 'n_test', 'seed',
                                                       'complete', 'error'])):
    __slots__ = ()

    def to_dict(self) -> Dict:
        return _json_safe(self._asdict())


def _json_safe(value):
    if isinstance(value, dict):
        return {str(k): _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    if isinstance(value, np.ndarray):
        return _json_safe(value.tolist())
    if isinstance(value, (np.floating, float)):
        return None if not np.isfinite(value) else float(value)
    if isinstance(value, np.integer):
        return int(value)
    return value


def compensator_from_config(config) -> GpCompensator:
    gp = config.gp
    return GpCompensator(config.plant.n_y, n_re=gp.n_re, n_ry=gp.n_ry, k_min=gp.k_min, k_max=gp.k_max,
                         retrain_every=gp.retrain_every, budget=gp.budget, refine_budget=gp.refine_budget,
                         n_starts=gp.n_starts, jitter=gp.jitter, learning_rate=gp.learning_rate,
                         optimize_jitter=gp.optimize_jitter, seed=config.seed)


def baseline_from_config(config, n_u: int) -> Optional[OnlineGpRegressor]:
    if not config.baseline_gp.enabled:
        return None
    gp = config.gp
    return OnlineGpRegressor(n_u, config.plant.n_y, k_min=gp.k_min, k_max=gp.k_max,
                             retrain_every=config.baseline_gp.retrain_every, budget=gp.budget,
                             refine_budget=gp.refine_budget, n_starts=gp.n_starts, jitter=gp.jitter,
                             learning_rate=gp.learning_rate, optimize_jitter=gp.optimize_jitter, seed=config.seed)


class RuntimeState(object):
    """Mutable state of the lifelong loop"""
    def __init__(self, config, n_u: int, ensemble=None):
        """
        :param config: Munch configuration
        :param n_u: input dimension
        :param ensemble: initial Ensemble, an empty one starts in the Collecting phase
        """
        spc = config.spc
        self.config = config
        self.n_u = n_u
        self.n_y = config.plant.n_y
        self.base_config = NarxConfig(**config.base_model)
        self.ensemble = ensemble if ensemble is not None else empty_ensemble(spc.weight_floor, spc.percentile_j,
                                                                              spc.split_ratio, spc.cov_reg)
        self.compensator = compensator_from_config(config)
        self.baseline = baseline_from_config(config, n_u)
        self.buffers = [m.model.cold_start() for m in self.ensemble.members]
        self.history = deque(maxlen=max(self.base_config.n_a, self.base_config.n_b - 1, 1))
        self.pending = []
        self.monitor_buffer = []
        self.phase = MONITORING if self.ensemble.n > 0 else COLLECTING
        self.k = 0
        self.verdicts: List[VerdictEvent] = []
        self.member_counts = [(0, self.ensemble.n)]
        self.characterizations = []
        self.last_record: Optional[StepRecord] = None

    def _batch(self, samples, name: str) -> Dataset:
        ks, us, ys = zip(*samples)
        return Dataset(np.array(us), np.array(ys), np.array(ks), name=name)

    def _integrate(self):
        dataset = self._batch(self.pending, 'D%d' % (self.ensemble.n + 1))
        self.ensemble = add_member(self.ensemble, dataset, self.base_config)
        self.buffers = warm_buffers(self.ensemble, self._batch(list(self.history), 'history'))
        self.compensator.reset()
        self.pending = []
        self.monitor_buffer = []
        self.phase = MONITORING

        self.member_counts.append((self.k, self.ensemble.n))
        self.characterizations.append({'k': self.k, 'n': self.ensemble.n, 'ucl_e': self.ensemble.error_chart.ucl,
                                       'ucl_u': [m.input_chart.ucl for m in self.ensemble.members]})

    def _monitor(self):
        batch = self._batch(self.monitor_buffer, 'batch@%d' % self.k)
        self.monitor_buffer = []
        verdict = monitor(self.ensemble, batch, self.config.spc.theta)
        self.verdicts.append(VerdictEvent(k=self.k, verdict=verdict, ucl_e=self.ensemble.error_chart.ucl,
                                          ucl_u=[m.input_chart.ucl for m in self.ensemble.members],
                                          lag=self.ensemble.lag))

        if verdict.tag == NEW_REGIME:
            logger.warning('step %d: new regime, collecting %d samples while the current ensemble keeps serving',
                           self.k, self.config.runtime.collect_length)
            self.phase = COLLECTING
        elif verdict.tag == INTERNAL_CHANGE:
            logger.warning('step %d: internal change matched to member %d, resetting the ensemble',
                           self.k, verdict.matched_member + 1)
            self.ensemble = reset(self.ensemble)
            self.buffers = []
            self.compensator.reset()
            self.member_counts.append((self.k, 0))
            self.phase = COLLECTING


def step(state: RuntimeState, u_k, y_p_k):
    """Emits y(k) before y_p(k) reaches any learner, then lets the learners consume it
    :param state: RuntimeState
    :param u_k: input u(k)
    :param y_p_k: measured plant output y_p(k)
    :returns y(k), state
    """
    u_k = np.asarray(u_k, dtype=np.float64)
    y_p_k = np.asarray(y_p_k, dtype=np.float64)
    nan = np.full(state.n_y, np.nan)

    y_gp = state.baseline.predict(u_k) if state.baseline is not None else nan

    if state.ensemble.n == 0:
        warmup = True
        y_k, y_s, e_hat = y_p_k.copy(), nan, nan
        weights, member_outputs = np.zeros(0), np.zeros([0, state.n_y])
        lml, window_size, retrained = [np.nan] * state.n_y, 0, False
    else:
        warmup = False
        y_s, weights, member_outputs, state.buffers = ensemble_step(state.ensemble, state.buffers, u_k)
        e_hat = state.compensator.e_hat.copy()
        y_k = y_s + e_hat
        result = state.compensator.step(y_s, y_p_k)
        lml, window_size, retrained = result.lml, result.window_size, result.retrained

    if state.baseline is not None:
        state.baseline.update(u_k, y_p_k)

    state.last_record = StepRecord(k=state.k, phase=state.phase, warmup=warmup, n_members=state.ensemble.n, u=u_k,
                                   y_p=y_p_k, y_s=y_s, e_hat=e_hat, y=y_k, weights=weights,
                                   member_outputs=member_outputs, lml=lml, window_size=window_size,
                                   retrained=retrained, y_gp=y_gp)

    sample = (state.k, u_k, y_p_k)
    state.history.append(sample)
    if state.phase == COLLECTING:
        state.pending.append(sample)
        if len(state.pending) >= state.config.runtime.collect_length:
            state._integrate()
    else:
        state.monitor_buffer.append(sample)
        if len(state.monitor_buffer) >= state.config.runtime.n_mon:
            state._monitor()

    state.k += 1
    return y_k, state


def segment_seed(seed: int, index: int) -> int:
    return int(seed) * 1009 + index


def scenario_plan(config, skip: int = 0):
    """(segment index, segment, first sample) for every segment still to run after
    skipping `skip` leading samples
    """
    plan = []
    for i, segment in enumerate(config.scenario.segments):
        start = min(skip, segment.length)
        skip -= start
        if start < segment.length:
            plan.append((i, segment, start))
    return plan


def _step_row(record: StepRecord, segment) -> Dict:
    row = {'k': record.k, 'segment': segment.name, 'regime': segment.regime, 'phase': record.phase,
           'warmup': int(record.warmup), 'n_members': record.n_members, 'window': record.window_size,
           'retrained': int(record.retrained)}
    for name, values in (('u', record.u), ('y_p', record.y_p), ('y_s', record.y_s), ('e_hat', record.e_hat),
                         ('y', record.y), ('lml', record.lml), ('y_gp', record.y_gp)):
        for j, v in enumerate(values):
            row['%s_%d' % (name, j + 1)] = v
    return row


def _chart_frame(events: List[VerdictEvent]) -> pd.DataFrame:
    frames = []
    for index, event in enumerate(events):
        verdict = event.verdict
        n = len(verdict.t2_inputs[0])
        columns = {'verdict': index, 'k': np.arange(event.k - n + 1, event.k + 1), 'tag': verdict.tag,
                   't2_e': np.concatenate([np.full(n - len(verdict.t2_errors), np.nan), verdict.t2_errors]),
                   'ucl_e': event.ucl_e}
        for i, (t2, ucl) in enumerate(zip(verdict.t2_inputs, event.ucl_u)):
            columns['t2_u_%d' % (i + 1)] = t2
            columns['ucl_u_%d' % (i + 1)] = ucl
        frames.append(pd.DataFrame(columns))
    if len(frames) == 0:
        return pd.DataFrame(columns=['verdict', 'k', 'tag', 't2_e', 'ucl_e'])
    return pd.concat(frames, ignore_index=True)


def score_models(records: List[StepRecord]) -> Dict:
    """FIT of every compared model over scored test steps"""
    records = [r for r in records if not r.warmup]
    if len(records) < 2:
        logger.warning('fewer than 2 scored test samples, no FIT computed')
        return {}

    measured = np.stack([r.y_p for r in records])
    n_members = min(r.n_members for r in records)
    member_outputs = np.stack([r.member_outputs[:n_members] for r in records], axis=1)

    predictions = {'M[%d]' % (i + 1): member_outputs[i] for i in range(n_members)}
    predictions['M_AVG'] = member_outputs.mean(axis=0)
    predictions['M_s'] = np.stack([r.y_s for r in records])
    predictions['M'] = np.stack([r.y for r in records])
    y_gp = np.stack([r.y_gp for r in records])
    if np.all(np.isfinite(y_gp)):
        predictions['M_GP'] = y_gp

    fit = {}
    for name, predicted in predictions.items():
        per_output, mean = fit_index(predicted, measured)
        fit[name] = {'mean': mean, 'per_output': per_output}
    return fit


def _write_report(report: ExperimentReport, out_dir: str):
    def write(path):
        with open(path, 'w') as f:
            json.dump(report.to_dict(), f, indent=1, sort_keys=True)

    atomic_write(os.path.join(out_dir, 'report.json'), write)


def _verdict_dict(event: VerdictEvent) -> Dict:
    v = event.verdict
    return {'k': event.k, 'tag': v.tag, 'error_fraction': v.error_fraction, 'input_fractions': v.input_fractions,
            'matched_member': None if v.matched_member is None else v.matched_member + 1}


def run_experiment(config, out_dir: str = None, resume: str = None) -> ExperimentReport:
    """Runs the scripted scenario against the synthetic plant
    :param config: validated Munch configuration
    :param out_dir: run directory, config.out by default
    :param resume: ensemble directory to continue from; the initial collection is skipped
    :returns ExperimentReport, also written to <out_dir>/report.json
    """
    out_dir = out_dir or config.out
    os.makedirs(out_dir, exist_ok=True)
    torch.manual_seed(config.seed)
    torch.use_deterministic_algorithms(True)

    spec = excitation_spec(config)
    plant = build_plant(config, spec)
    ensemble = load_ensemble(resume) if resume else None
    if ensemble is not None:
        logger.info('resuming with %d member(s) from [%s]', ensemble.n, resume)

    state = RuntimeState(config, plant.n_u, ensemble)
    plan = scenario_plan(config, config.runtime.collect_length if resume else 0)
    save_config(config, os.path.join(out_dir, 'config.json'))

    writer = None
    if config.tensorboard:
        from torch.utils.tensorboard import SummaryWriter
        writer = SummaryWriter(os.path.join(out_dir, 'tb'))

    steps_path = os.path.join(out_dir, 'steps.csv')
    rows, weights, test_records = [], [], []
    plant_state = None
    error = None
    pbar = tqdm(total=sum(s.length - start for _, s, start in plan), disable=not config.progress)

    try:
        for index, segment, start in plan:
            inputs = generate_excitation(spec, segment.regime, segment.length,
                                         segment_seed(config.seed, index))[start:]
            if plant_state is None:
                plant_state = plant.burn_in(plant.initial_state(segment.regime), inputs[0], config.plant.burn_in)
            else:
                plant_state = plant_state._replace(regime=segment.regime)
            logger.info('segment %s: regime %d, %d samples%s', segment.name, segment.regime, len(inputs),
                        ' (test)' if segment.get('test') else '')

            for u_k in inputs:
                plant_state, y_p = plant.step(plant_state, u_k)
                _, state = step(state, u_k, y_p)
                record = state.last_record

                rows.append(_step_row(record, segment))
                weights.append(record.weights)
                if segment.get('test'):
                    test_records.append(record)
                if writer is not None and not record.warmup:
                    writer.add_scalar('gp/window', record.window_size, record.k)
                    writer.add_scalar('ensemble/members', record.n_members, record.k)
                    for j, value in enumerate(record.lml):
                        if np.isfinite(value):
                            writer.add_scalar('gp/lml_%d' % (j + 1), value, record.k)
                pbar.update()
    except TwofoldError as e:
        error = e
        logger.error('run aborted at step %d: %s', state.k, e)
    finally:
        pbar.close()

    fit = score_models(test_records) if error is None else {}
    report = ExperimentReport(
        fit=fit, verdicts=[_verdict_dict(e) for e in state.verdicts], member_counts=state.member_counts,
        characterizations=state.characterizations,
        gp_failures=state.compensator.n_failures + (state.baseline.n_failures if state.baseline else 0),
        steps_path=os.path.basename(steps_path), n_steps=state.k, n_test=len(test_records), seed=config.seed,
        complete=error is None, error=None if error is None else str(error))

    frame = pd.DataFrame(rows)
    width = max([len(w) for w in weights] or [0])
    for i, column in enumerate(pad_weights(weights, width).T):
        frame['lambda_%d' % (i + 1)] = column
    atomic_write(steps_path, lambda tmp: frame.to_csv(tmp, index=False, float_format=FLOAT_FORMAT))
    charts = _chart_frame(state.verdicts)
    atomic_write(os.path.join(out_dir, 'charts.csv'),
                 lambda tmp: charts.to_csv(tmp, index=False, float_format=FLOAT_FORMAT))
    save_ensemble(state.ensemble, os.path.join(out_dir, 'ensemble'))
    _write_report(report, out_dir)

    if writer is not None:
        for name, values in fit.items():
            writer.add_scalar('fit/%s' % name, values['mean'], state.k)
        writer.close()

    if error is not None:
        raise error

    logger.info('finished %d steps: %s', state.k,
                ', '.join('%s=%.1f' % (name, values['mean']) for name, values in fit.items()))
    return report


def load_report(run_dir: str) -> Dict:
    path = os.path.join(run_dir, 'report.json')
    try:
        with open(path) as f:
            return json.load(f)
    except OSError as e:
        raise IoError(path, 'cannot read report (%s)' % e.strerror)
    except ValueError as e:
        raise IoError(path, 'malformed report (%s)' % e)
