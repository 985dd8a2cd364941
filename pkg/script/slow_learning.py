"""
Slow learning: an ensemble of per-regime NARX members combined by inverse Mahalanobis
proximity of the current input to each member's training inputs, characterized with
Hotelling T^2 control charts on the ensemble error and monitored batch by batch.
Ensembles are immutable snapshots; every operation returns a new one.
"""

import json
import logging
import os
from collections import namedtuple
from typing import List, Optional, Sequence, Tuple

import numpy as np

from data import Dataset
from exceptions import EmptyEnsemble, InsufficientData, IoError, NotCharacterized
from models.narx import LagBuffer, NarxConfig, NarxModel, fit_base_model
from spc import (COV_REG, PERCENTILE_J, build_profile, chart_from_dict, chart_to_dict, empirical_ucl,
                 in_control_fraction, mahalanobis, profile_from_dict, profile_to_dict)
from utils import atomic_write

WEIGHT_FLOOR = 1e-8
SPLIT_RATIO = 0.7
THETA = 0.99

IN_CONTROL = 'InControl'
NEW_REGIME = 'NewRegime'
INTERNAL_CHANGE = 'InternalChange'

MANIFEST = 'manifest.json'

logger = logging.getLogger(__name__)

EnsembleMember = namedtuple('EnsembleMember', ['model', 'input_profile', 'input_chart', 'dataset'])
EnsemblePrediction = namedtuple('EnsemblePrediction', ['y_s', 'weights', 'member_outputs'])
MonitorVerdict = namedtuple('MonitorVerdict', ['tag', 'error_fraction', 'input_fractions', 'matched_member',
                                               't2_errors', 't2_inputs'])


class Ensemble(namedtuple('Ensemble', ['members', 'error_profile', 'error_chart', 'weight_floor', 'percentile_j',
                                       'split_ratio', 'cov_reg'])):
    __slots__ = ()

    @property
    def n(self) -> int:
        return len(self.members)

    @property
    def characterized(self) -> bool:
        return self.error_chart is not None

    @property
    def lag(self) -> int:
        return max([m.model.lag for m in self.members] or [0])


def empty_ensemble(weight_floor: float = WEIGHT_FLOOR, percentile_j: float = PERCENTILE_J,
                   split_ratio: float = SPLIT_RATIO, cov_reg: float = COV_REG) -> Ensemble:
    return Ensemble(members=(), error_profile=None, error_chart=None, weight_floor=weight_floor,
                    percentile_j=percentile_j, split_ratio=split_ratio, cov_reg=cov_reg)


def combination_weights(u, members: Sequence[EnsembleMember], weight_floor: float = WEIGHT_FLOOR) -> np.ndarray:
    """lambda_i = w_i / sum(w) with w_i = 1 / max(T^2(u, u_i), weight_floor); the last
    component is 1 minus the others so each row sums to one.
    :param u: input vector (n_u,) or a batch (N, n_u)
    :param members: non-empty sequence of EnsembleMember
    :returns weights with shape (M,) or (N, M)
    """
    if len(members) == 0:
        raise EmptyEnsemble('no members to weight')

    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    batch = u[None, :] if single else u

    t2 = np.stack([mahalanobis(m.input_profile, batch) for m in members], axis=1)
    w = 1. / np.maximum(t2, weight_floor)
    weights = w / w.sum(axis=1, keepdims=True)
    weights[:, -1] = np.maximum(0., 1. - weights[:, :-1].sum(axis=1))

    return weights[0] if single else weights


def ensemble_predict(ensemble: Ensemble, inputs, init_buffers: Optional[List[LagBuffer]] = None) -> EnsemblePrediction:
    """Free-runs every member on its own lag buffer and combines the outputs with the
    per-step proximity weights
    :param ensemble: Ensemble with at least one member
    :param inputs: raw inputs with shape (N, n_u)
    :param init_buffers: one LagBuffer per member, cold start when omitted
    :returns EnsemblePrediction(y_s (N, n_y), weights (N, M), member_outputs (M, N, n_y))
    """
    if ensemble.n == 0:
        raise EmptyEnsemble('cannot predict with an empty ensemble')

    inputs = np.asarray(inputs, dtype=np.float64)
    init_buffers = init_buffers or [None] * ensemble.n
    member_outputs = np.stack([m.model.simulate(inputs, buffer) for m, buffer in zip(ensemble.members, init_buffers)])
    weights = combination_weights(inputs, ensemble.members, ensemble.weight_floor)
    y_s = np.einsum('nm,mnj->nj', weights, member_outputs)

    return EnsemblePrediction(y_s=y_s, weights=weights, member_outputs=member_outputs)


def ensemble_step(ensemble: Ensemble, buffers: List[LagBuffer], u_k) -> Tuple[np.ndarray, np.ndarray, np.ndarray,
                                                                              List[LagBuffer]]:
    """One sample of ensemble_predict
    :returns y_s(k), weights (M,), member outputs (M, n_y) and the shifted buffers
    """
    if ensemble.n == 0:
        raise EmptyEnsemble('cannot predict with an empty ensemble')

    outputs, shifted = [], []
    for member, buffer in zip(ensemble.members, buffers):
        y_k, buffer = member.model.step(buffer, u_k)
        outputs.append(y_k)
        shifted.append(buffer)

    outputs = np.stack(outputs)
    weights = combination_weights(u_k, ensemble.members, ensemble.weight_floor)
    return weights @ outputs, weights, outputs, shifted


def warm_buffers(ensemble: Ensemble, history: Dataset) -> List[LagBuffer]:
    """Member lag buffers filled from measured history, most recent rows last"""
    return [m.model.warm_start(history.u, history.y) for m in ensemble.members]


def predict_dataset(ensemble: Ensemble, dataset: Dataset) -> Tuple[EnsemblePrediction, Dataset]:
    """Simulates the ensemble over a dataset, warm-started from its first `lag` rows. A
    dataset too short for that is scored whole from a cold start.
    :returns the prediction and the scored part of the dataset
    """
    lag = ensemble.lag
    if len(dataset) == 0:
        raise InsufficientData('cannot predict over an empty dataset')
    if len(dataset) <= lag:
        logger.debug('%r is too short to warm-start %d lags, starting cold', dataset, lag)
        return ensemble_predict(ensemble, dataset.u), dataset

    scored = dataset[lag:]
    prediction = ensemble_predict(ensemble, scored.u, warm_buffers(ensemble, dataset[:lag]))
    return prediction, scored


def ensemble_errors(ensemble: Ensemble, dataset: Dataset) -> np.ndarray:
    """e_s = y - y_s over the scored part of a dataset"""
    prediction, scored = predict_dataset(ensemble, dataset)
    return scored.y - prediction.y_s


def _input_member(member: EnsembleMember, split_ratio: float, percentile_j: float, cov_reg: float) -> EnsembleMember:
    ref, test = member.dataset.split(split_ratio)
    profile = build_profile(ref.u, cov_reg)
    chart = empirical_ucl(mahalanobis(profile, test.u), percentile_j)
    return member._replace(input_profile=profile, input_chart=chart)


def characterize(ensemble: Ensemble, datasets: Optional[Sequence[Dataset]] = None,
                 split_ratio: Optional[float] = None) -> Ensemble:
    """Rebuilds the error profile and UCL_e over the reference/test splits of every member
    dataset and builds the input chart of members that have none yet. Existing input charts
    are kept as they are.
    :param ensemble: Ensemble with at least one member
    :param datasets: datasets to characterize on, the members' own datasets by default
    :param split_ratio: reference fraction of each dataset
    :returns the characterized Ensemble
    """
    if ensemble.n == 0:
        raise EmptyEnsemble('cannot characterize an empty ensemble')

    split_ratio = ensemble.split_ratio if split_ratio is None else split_ratio
    members = tuple(m if m.input_chart is not None
                    else _input_member(m, split_ratio, ensemble.percentile_j, ensemble.cov_reg)
                    for m in ensemble.members)
    ensemble = ensemble._replace(members=members, split_ratio=split_ratio)

    datasets = [m.dataset for m in members] if datasets is None else list(datasets)
    e_ref, e_test = [], []
    for dataset in datasets:
        ref, test = dataset.split(split_ratio)
        e_ref.append(ensemble_errors(ensemble, ref))
        e_test.append(ensemble_errors(ensemble, test))

    error_profile = build_profile(np.concatenate(e_ref), ensemble.cov_reg)
    error_chart = empirical_ucl(mahalanobis(error_profile, np.concatenate(e_test)), ensemble.percentile_j)

    logger.info('characterized %d member(s): UCL_e=%.4g, UCL_u=%s', len(members), error_chart.ucl,
                ['%.4g' % m.input_chart.ucl for m in members])

    return ensemble._replace(error_profile=error_profile, error_chart=error_chart)


def monitor(ensemble: Ensemble, batch: Dataset, theta: float = THETA) -> MonitorVerdict:
    """Checks a batch against the error chart, then against every member's input chart.
    InControl when the error fraction reaches theta; otherwise InternalChange when some
    member's input chart accepts the batch (the first such member is matched), else NewRegime.
    """
    if ensemble.n == 0:
        raise EmptyEnsemble('cannot monitor with an empty ensemble')
    if not ensemble.characterized:
        raise NotCharacterized('the ensemble has no error control chart')
    if len(batch) == 0:
        raise InsufficientData('empty monitoring batch')

    t2_errors = mahalanobis(ensemble.error_profile, ensemble_errors(ensemble, batch))
    error_fraction = in_control_fraction(t2_errors, ensemble.error_chart)

    t2_inputs = [mahalanobis(m.input_profile, batch.u) for m in ensemble.members]
    input_fractions = [in_control_fraction(t2, m.input_chart) for t2, m in zip(t2_inputs, ensemble.members)]

    matched = None
    if error_fraction >= theta:
        tag = IN_CONTROL
    else:
        matched = next((i for i, f in enumerate(input_fractions) if f >= theta), None)
        tag = NEW_REGIME if matched is None else INTERNAL_CHANGE

    logger.info('monitor %r: %s (P_e=%.3f, P_u=%s)', batch, tag, error_fraction,
                ['%.3f' % f for f in input_fractions])

    return MonitorVerdict(tag=tag, error_fraction=error_fraction, input_fractions=input_fractions,
                          matched_member=matched, t2_errors=t2_errors, t2_inputs=t2_inputs)


def add_member(ensemble: Ensemble, dataset: Dataset, config: NarxConfig = NarxConfig()) -> Ensemble:
    """Fits a base model on the new dataset, appends it and re-characterizes; existing
    members are carried over untouched
    """
    model = fit_base_model(dataset, config)
    member = EnsembleMember(model=model, input_profile=None, input_chart=None, dataset=dataset)
    grown = ensemble._replace(members=ensemble.members + (member,), error_profile=None, error_chart=None)
    logger.info('added member %d trained on %r', grown.n, dataset)
    return characterize(grown)


def reset(ensemble: Ensemble) -> Ensemble:
    return empty_ensemble(ensemble.weight_floor, ensemble.percentile_j, ensemble.split_ratio, ensemble.cov_reg)


def save_ensemble(ensemble: Ensemble, directory: str):
    """Writes member_<i>.bin (model), member_<i>.csv (dataset) and a JSON manifest"""
    os.makedirs(directory, exist_ok=True)
    members = []
    for i, member in enumerate(ensemble.members):
        model_file, data_file = 'member_%d.bin' % i, 'member_%d.csv' % i
        atomic_write(os.path.join(directory, model_file), member.model.save)
        member.dataset.save(os.path.join(directory, data_file))
        members.append({'model': model_file, 'dataset': data_file, 'name': member.dataset.name,
                        'input_profile': profile_to_dict(member.input_profile),
                        'input_chart': chart_to_dict(member.input_chart)})

    manifest = {
        'members': members,
        'error_profile': None if ensemble.error_profile is None else profile_to_dict(ensemble.error_profile),
        'error_chart': None if ensemble.error_chart is None else chart_to_dict(ensemble.error_chart),
        'weight_floor': ensemble.weight_floor,
        'percentile_j': ensemble.percentile_j,
        'split_ratio': ensemble.split_ratio,
        'cov_reg': ensemble.cov_reg,
    }

    def write(path):
        with open(path, 'w') as f:
            json.dump(manifest, f, indent=1, sort_keys=True)

    atomic_write(os.path.join(directory, MANIFEST), write)
    logger.debug('saved %d member(s) to [%s]', ensemble.n, directory)


def load_ensemble(directory: str) -> Ensemble:
    path = os.path.join(directory, MANIFEST)
    try:
        with open(path) as f:
            manifest = json.load(f)
    except OSError as e:
        raise IoError(path, 'cannot read ensemble manifest (%s)' % e.strerror)
    except ValueError as e:
        raise IoError(path, 'malformed ensemble manifest (%s)' % e)

    members = []
    for entry in manifest['members']:
        model_path = os.path.join(directory, entry['model'])
        if not os.path.exists(model_path):
            raise IoError(model_path, 'member model is missing')
        members.append(EnsembleMember(model=NarxModel.load(model_path),
                                      input_profile=profile_from_dict(entry['input_profile']),
                                      input_chart=chart_from_dict(entry['input_chart']),
                                      dataset=Dataset.load(os.path.join(directory, entry['dataset']), entry['name'])))

    return Ensemble(members=tuple(members),
                    error_profile=None if manifest['error_profile'] is None
                    else profile_from_dict(manifest['error_profile']),
                    error_chart=None if manifest['error_chart'] is None else chart_from_dict(manifest['error_chart']),
                    weight_floor=manifest['weight_floor'], percentile_j=manifest['percentile_j'],
                    split_ratio=manifest['split_ratio'], cov_reg=manifest['cov_reg'])
