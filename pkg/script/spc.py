"""
Statistical process control primitives: z-score normalization against a benchmark,
Mahalanobis (Hotelling T^2) distance, empirical control limits and in-control checks.
All functions are pure; profiles and charts are immutable values.
"""

import logging
import math
from collections import namedtuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from exceptions import DimensionError, InsufficientData, InvalidData

STD_FLOOR = 1e-12
COV_REG = 1e-8
PERCENTILE_J = 99.73

logger = logging.getLogger(__name__)

StatProfile = namedtuple('StatProfile', ['mean', 'std', 'cov_inv', 'dim', 'n_obs'])
ControlChart = namedtuple('ControlChart', ['ucl', 'lcl', 'percentile_j', 't2_reference'])


def _as_observations(values, name: str) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 1:
        values = values[:, None]
    if values.ndim != 2:
        raise DimensionError('%s must be a sequence of vectors, got shape %s' % (name, values.shape))
    return values


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64)
    array.setflags(write=False)
    return array


def build_profile(benchmark, cov_reg: float = COV_REG) -> StatProfile:
    """Characterizes a benchmark block: raw-unit mean/std and the inverse covariance
    of the z-scored data, regularized by cov_reg * trace / dim on the diagonal.
    :param benchmark: observations with shape (N, dim)
    :param cov_reg: relative diagonal regularization
    :returns profile: StatProfile
    """
    x = _as_observations(benchmark, 'benchmark')
    n_obs, dim = x.shape

    if n_obs < 2:
        raise InsufficientData('a profile needs at least 2 observations, got %d' % n_obs)
    if not np.all(np.isfinite(x)):
        raise InvalidData('benchmark contains non-finite values')

    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0, ddof=1), STD_FLOOR)

    z = (x - mean) / std
    cov = np.atleast_2d(np.cov(z, rowvar=False, ddof=1))

    trace = np.trace(cov)
    eps = cov_reg * trace / dim if trace > 0 else cov_reg
    cov = cov + eps * np.eye(dim)

    try:
        factor = cho_factor(cov, lower=True)
    except LinAlgError:
        raise InvalidData('benchmark covariance is singular; use a positive cov_reg')

    cov_inv = cho_solve(factor, np.eye(dim))
    cov_inv = 0.5 * (cov_inv + cov_inv.T)

    return StatProfile(mean=_frozen(mean), std=_frozen(std), cov_inv=_frozen(cov_inv), dim=dim, n_obs=n_obs)


def normalize(profile: StatProfile, observations) -> np.ndarray:
    """z-scores observations with the benchmark statistics"""
    x = _as_observations(observations, 'observations')
    if x.shape[1] != profile.dim:
        raise DimensionError('observations have dimension %d, profile has %d' % (x.shape[1], profile.dim))
    return (x - profile.mean) / profile.std


def mahalanobis(profile: StatProfile, observations) -> np.ndarray:
    """T^2 = z' cov_inv z of each observation, z being its z-scored deviation
    :param profile: benchmark StatProfile
    :param observations: array with shape (N, dim)
    :returns t2: array with shape (N,), all entries >= 0
    """
    z = normalize(profile, observations)
    t2 = np.einsum('ij,jk,ik->i', z, profile.cov_inv, z)
    return np.maximum(t2, 0.)


def empirical_ucl(t2_values, percentile_j: float = PERCENTILE_J) -> ControlChart:
    """Nearest-rank empirical upper control limit; LCL is fixed at 0
    :param t2_values: benchmark T^2 values
    :param percentile_j: percentile in (0, 100)
    :returns chart: ControlChart
    """
    t2 = np.asarray(t2_values, dtype=np.float64).ravel()

    if t2.size == 0:
        raise InsufficientData('cannot build a control chart from an empty sequence')
    if not 0. < percentile_j < 100.:
        raise InvalidData('percentile_j must lie in (0, 100), got %r' % percentile_j)
    if not np.all(np.isfinite(t2)) or np.any(t2 < 0):
        raise InvalidData('T^2 values must be finite and non-negative')

    n = t2.size
    rank = math.ceil(round(percentile_j * n / 100., 9))
    rank = min(max(rank, 1), n)
    ucl = float(np.sort(t2)[rank - 1])

    return ControlChart(ucl=ucl, lcl=0., percentile_j=float(percentile_j), t2_reference=_frozen(t2))


def in_control_fraction(t2_values, chart: ControlChart) -> float:
    """Empirical probability P(T^2 <= UCL), inclusive comparison"""
    t2 = np.asarray(t2_values, dtype=np.float64).ravel()
    if t2.size == 0:
        raise InsufficientData('cannot assess an empty sequence')
    return float(np.count_nonzero(t2 <= chart.ucl)) / t2.size


def profile_to_dict(profile: StatProfile) -> dict:
    return {'mean': profile.mean.tolist(), 'std': profile.std.tolist(),
            'cov_inv': profile.cov_inv.tolist(), 'n_obs': profile.n_obs}


def profile_from_dict(d: dict) -> StatProfile:
    mean = _frozen(d['mean'])
    return StatProfile(mean=mean, std=_frozen(d['std']), cov_inv=_frozen(d['cov_inv']),
                       dim=mean.shape[0], n_obs=int(d['n_obs']))


def chart_to_dict(chart: ControlChart) -> dict:
    return {'ucl': chart.ucl, 'lcl': chart.lcl, 'percentile_j': chart.percentile_j,
            't2_reference': chart.t2_reference.tolist()}


def chart_from_dict(d: dict) -> ControlChart:
    return ControlChart(ucl=float(d['ucl']), lcl=float(d['lcl']), percentile_j=float(d['percentile_j']),
                        t2_reference=_frozen(d['t2_reference']))
