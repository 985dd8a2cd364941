import logging
from typing import Tuple

import numpy as np
import pandas as pd

from exceptions import DimensionError, InsufficientData, IoError, InvalidData
from utils import atomic_write

FLOAT_FORMAT = '%.9g'

logger = logging.getLogger(__name__)


class Dataset(object):
    """Time-indexed batch of input/output observations"""
    def __init__(self, u: np.ndarray, y: np.ndarray, k: np.ndarray = None, name: str = 'dataset'):
        """
        :param u: inputs with shape (N, n_u)
        :param y: measured outputs with shape (N, n_y)
        :param k: integer time indices with shape (N,), defaults to 0..N-1
        :param name: identifier of the batch
        """
        u = np.asarray(u, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if u.ndim == 1:
            u = u[:, None]
        if y.ndim == 1:
            y = y[:, None]

        if u.ndim != 2 or y.ndim != 2 or u.shape[0] != y.shape[0]:
            raise DimensionError('inputs %s and outputs %s do not form a dataset' % (u.shape, y.shape))

        self.u = u
        self.y = y
        self.k = np.arange(u.shape[0]) if k is None else np.asarray(k, dtype=np.int64)
        self.name = name

        if self.k.shape != (u.shape[0],):
            raise DimensionError('time index has shape %s, expected (%d,)' % (self.k.shape, u.shape[0]))

    @property
    def n_u(self) -> int:
        return self.u.shape[1]

    @property
    def n_y(self) -> int:
        return self.y.shape[1]

    def __len__(self):
        return self.u.shape[0]

    def __getitem__(self, item):
        """
        :param item: a slice of time steps
        :returns the sub-batch as a new Dataset sharing the name
        """
        if not isinstance(item, slice):
            raise TypeError('datasets are indexed by slices only')
        return Dataset(self.u[item], self.y[item], self.k[item], name=self.name)

    def __repr__(self):
        return 'Dataset[%s, N=%d, n_u=%d, n_y=%d]' % (self.name, len(self), self.n_u, self.n_y)

    def split(self, ratio: float) -> Tuple['Dataset', 'Dataset']:
        """Splits into a contiguous reference block (first fraction) and test block (remainder)
        :param ratio: fraction of samples assigned to the reference block
        :returns ref, test
        """
        n_ref = int(round(ratio * len(self)))
        if n_ref < 2 or len(self) - n_ref < 1:
            raise InsufficientData('%r is too short for a %.2f reference split' % (self, ratio))
        return self[:n_ref], self[n_ref:]

    def to_frame(self) -> pd.DataFrame:
        """Layout k,u_1..u_nu,y_1..y_ny"""
        columns = {'k': self.k}
        for i in range(self.n_u):
            columns['u_%d' % (i + 1)] = self.u[:, i]
        for i in range(self.n_y):
            columns['y_%d' % (i + 1)] = self.y[:, i]
        return pd.DataFrame(columns)

    @staticmethod
    def from_frame(frame: pd.DataFrame, name: str = 'dataset') -> 'Dataset':
        u_cols = [c for c in frame.columns if c.startswith('u_')]
        y_cols = [c for c in frame.columns if c.startswith('y_')]
        if 'k' not in frame.columns or len(u_cols) == 0 or len(y_cols) == 0:
            raise InvalidData('expected columns k,u_1..,y_1.., got %s' % list(frame.columns))

        u_cols = sorted(u_cols, key=lambda c: int(c[2:]))
        y_cols = sorted(y_cols, key=lambda c: int(c[2:]))
        return Dataset(frame[u_cols].to_numpy(dtype=np.float64), frame[y_cols].to_numpy(dtype=np.float64),
                       frame['k'].to_numpy(dtype=np.int64), name=name)

    def save(self, path: str):
        """Writes the dataset as CSV (9 significant digits)"""
        frame = self.to_frame()
        atomic_write(path, lambda tmp: frame.to_csv(tmp, index=False, float_format=FLOAT_FORMAT))
        logger.debug('saved %r to [%s]', self, path)

    @staticmethod
    def load(path: str, name: str = None) -> 'Dataset':
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.EmptyDataError, pd.errors.ParserError) as e:
            raise IoError(path, 'cannot read dataset (%s)' % e)
        try:
            return Dataset.from_frame(frame, name=name or path)
        except ValueError as e:
            raise InvalidData('[%s] is not a numeric k,u_1..,y_1.. table (%s)' % (path, e))
