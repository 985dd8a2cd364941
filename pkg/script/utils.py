"""
Some utility functions shared by the harness modules
"""

import logging
import os
import sys
import tempfile
from typing import Callable, List, Tuple

import numpy as np

from exceptions import DimensionError, InsufficientData, IoError

LOG_LEVEL_ENV = 'TWOFOLD_LOG_LEVEL'

logger = logging.getLogger(__name__)


def setup_logging(level: str = None):
    """Configures the stderr handler once; verbosity comes from TWOFOLD_LOG_LEVEL
    unless given explicitly.
    """
    level = (level or os.environ.get(LOG_LEVEL_ENV, 'INFO')).upper()
    logging.basicConfig(stream=sys.stderr, level=getattr(logging, level, logging.INFO),
                        format='%(asctime)s %(name)s %(levelname)s: %(message)s')


def atomic_write(path: str, write: Callable[[str], None]):
    """Writes a file through a temporary sibling and renames it into place
    :param path: destination path
    :param write: callable receiving the temporary path to write to
    """
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        fd, tmp_path = tempfile.mkstemp(dir=directory, prefix='.tmp-', suffix=os.path.basename(path))
        os.close(fd)
    except OSError as e:
        raise IoError(path, 'cannot write (%s)' % e.strerror)

    try:
        write(tmp_path)
        os.replace(tmp_path, path)
    except OSError as e:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise IoError(path, 'cannot write (%s)' % e.strerror)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def pad_weights(weights: List[np.ndarray], width: int):
    """Pads weight vectors of varying ensemble sizes with NaN up to a common width
    :param weights: list of 1-D arrays, one per time step
    :param width: number of columns of the output
    :returns weights_padded: array with shape (len(weights), width)
    """
    weights_padded = np.full([len(weights), width], np.nan)

    for i, w in enumerate(weights):
        weights_padded[i, :len(w)] = w

    return weights_padded


def fit_index(predicted: np.ndarray, measured: np.ndarray) -> Tuple[np.ndarray, float]:
    """Normalized fit percentage per output channel
    FIT_j = 100 * (1 - ||yhat_j - y_j|| / ||y_j - mean(y_j)||)
    :param predicted: array with shape (N, n_y)
    :param measured: array with shape (N, n_y)
    :returns per-output FIT (NaN for zero-variance channels) and their mean over valid channels
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    measured = np.asarray(measured, dtype=np.float64)
    if predicted.ndim == 1:
        predicted = predicted[:, None]
    if measured.ndim == 1:
        measured = measured[:, None]

    if predicted.shape != measured.shape:
        raise DimensionError('predicted %s and measured %s differ in shape' % (predicted.shape, measured.shape))
    if measured.shape[0] < 2:
        raise InsufficientData('FIT needs at least 2 samples, got %d' % measured.shape[0])

    residual = np.linalg.norm(predicted - measured, axis=0)
    deviation = np.linalg.norm(measured - measured.mean(axis=0), axis=0)

    fits = np.full(measured.shape[1], np.nan)
    valid = deviation > 0
    fits[valid] = 100. * (1. - residual[valid] / deviation[valid])

    if not valid.all():
        logger.warning('zero-variance output channels %s excluded from the mean FIT',
                       np.flatnonzero(~valid).tolist())

    mean_fit = float(np.mean(fits[valid])) if valid.any() else float('nan')
    return fits, mean_fit
