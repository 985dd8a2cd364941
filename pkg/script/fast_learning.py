"""
Online GP compensation of the slow model's output error. One GP per output channel
regresses e_s,j(k+1) on nu_j(k) = [e_j(k)..e_j(k-n_re+1), y_s,j(k-1)..y_s,j(k-n_ry), y_s,j(k)]
over a FIFO window of the most recent k_max pairs.
"""

import logging
from collections import deque, namedtuple
from typing import List, Optional, Tuple

import numpy as np

from exceptions import DimensionError, NumericalFailure
from models.gp import GpWindow, gp_fit_predict, initial_hyperparams, log_marginal_likelihood, optimize_hyperparams

logger = logging.getLogger(__name__)

FastStepResult = namedtuple('FastStepResult', ['e_hat_next', 'e_s', 'lml', 'window_size', 'retrained', 'failed'])


class GpCompensator(object):
    def __init__(self, n_y: int, n_re: int = 4, n_ry: int = 4, k_min: int = 25, k_max: int = 300,
                 retrain_every: int = 1, budget: int = 50, refine_budget: int = 5, n_starts: int = 3,
                 jitter: float = 1e-6, learning_rate: float = 0.05, optimize_jitter: bool = True,
                 seed: int = 0):
        """
        :param n_y: number of output channels
        :param n_re: error lags in the regressor
        :param n_ry: past slow-model outputs in the regressor
        :param k_min: window size from which the GP is trained and used
        :param k_max: window capacity
        :param retrain_every: hyperparameter refit cadence in samples
        :param budget: Adam iterations per start of the first fit
        :param refine_budget: Adam iterations of the warm-started refits
        :param n_starts: starts of the first fit
        :param jitter: initial nugget relative to alpha^2
        """
        self.n_y = n_y
        self.n_re = n_re
        self.n_ry = n_ry
        self.k_min = k_min
        self.k_max = k_max
        self.retrain_every = max(int(retrain_every), 1)
        self.budget = budget
        self.refine_budget = refine_budget
        self.n_starts = n_starts
        self.jitter = jitter
        self.learning_rate = learning_rate
        self.optimize_jitter = optimize_jitter
        self.seed = seed
        self.n_failures = 0
        self.reset()

    @property
    def dim(self) -> int:
        return self.n_re + self.n_ry + 1

    def reset(self):
        """Clears windows, lag buffers and hyperparameters; the correction returns to 0"""
        self.windows = [GpWindow(self.k_max, self.dim) for _ in range(self.n_y)]
        self.hyperparams = [None] * self.n_y
        self.e_hist = deque(maxlen=self.n_re)
        self.ys_hist = deque(maxlen=self.n_ry + 1)
        self.nu_prev = None
        self.e_hat = np.zeros(self.n_y)
        self.k = 0
        self.since_fit = 0

    def regressors(self) -> np.ndarray:
        """nu_j(k) for every output, shape (n_y, n_re + n_ry + 1)"""
        e_lags = np.array(self.e_hist).reshape(-1, self.n_y)
        ys_lags = np.array(self.ys_hist).reshape(-1, self.n_y)
        # ys_hist[0] is y_s(k), followed by y_s(k-1)..y_s(k-n_ry)
        return np.concatenate([e_lags.T, ys_lags[1:].T, ys_lags[:1].T], axis=1)

    def _shift(self, e_k: np.ndarray, y_s_k: np.ndarray):
        if len(self.e_hist) == 0:
            for _ in range(self.n_re):
                self.e_hist.append(e_k)
            for _ in range(self.n_ry + 1):
                self.ys_hist.append(y_s_k)
        else:
            self.e_hist.appendleft(e_k)
            self.ys_hist.appendleft(y_s_k)

    def _fit(self, j: int) -> float:
        window = self.windows[j]
        if self.hyperparams[j] is None:
            result = optimize_hyperparams(window, initial_hyperparams(window, self.jitter), budget=self.budget,
                                          n_starts=self.n_starts, learning_rate=self.learning_rate,
                                          optimize_jitter=self.optimize_jitter, seed=self.seed + j)
        else:
            result = optimize_hyperparams(window, self.hyperparams[j], budget=self.refine_budget, n_starts=1,
                                          learning_rate=self.learning_rate, optimize_jitter=self.optimize_jitter,
                                          seed=self.seed + j)
        if result.failed and self.hyperparams[j] is None:
            raise NumericalFailure('no usable hyperparameters for output %d' % j)
        self.hyperparams[j] = result.hyperparams
        return result.lml

    def step(self, y_s_k, y_p_k, retrain: Optional[bool] = None) -> FastStepResult:
        """One sample period of the fast learner
        :param y_s_k: slow-model output y_s(k)
        :param y_p_k: measured plant output y_p(k)
        :param retrain: force or suppress the hyperparameter refit, default follows retrain_every
        :returns FastStepResult with the correction e_hat(k+1) to apply at the next step
        """
        y_s_k = np.asarray(y_s_k, dtype=np.float64).ravel()
        y_p_k = np.asarray(y_p_k, dtype=np.float64).ravel()
        if y_s_k.shape != (self.n_y,) or y_p_k.shape != (self.n_y,):
            raise DimensionError('outputs %s, %s do not match n_y=%d' % (y_s_k.shape, y_p_k.shape, self.n_y))

        e_k = y_p_k - y_s_k

        if self.nu_prev is not None:
            for j in range(self.n_y):
                self.windows[j].push(self.nu_prev[j], e_k[j])

        self._shift(e_k, y_s_k)
        nu_k = self.regressors()
        self.nu_prev = nu_k
        self.k += 1

        size = len(self.windows[0])
        lml = [float('nan')] * self.n_y
        failed = []
        retrained = False

        if size >= self.k_min:
            # counts samples, the window size stalls at k_max
            self.since_fit += 1
            if retrain is None:
                retrain = self.since_fit >= self.retrain_every or self.hyperparams[0] is None
            e_hat_next = self.e_hat.copy()

            for j in range(self.n_y):
                try:
                    if retrain or self.hyperparams[j] is None:
                        lml[j] = self._fit(j)
                        retrained = True
                    else:
                        lml[j] = log_marginal_likelihood(self.windows[j], self.hyperparams[j])
                    e_hat_next[j] = gp_fit_predict(self.windows[j], self.hyperparams[j], nu_k[j])
                except NumericalFailure as e:
                    self.n_failures += 1
                    failed.append(j)
                    logger.warning('step %d output %d: %s, holding correction %.4g', self.k, j, e, e_hat_next[j])

            if retrained:
                self.since_fit = 0
            self.e_hat = e_hat_next

        return FastStepResult(e_hat_next=self.e_hat.copy(), e_s=e_k, lml=lml, window_size=size,
                              retrained=retrained, failed=failed)

    def state(self) -> dict:
        return {'k': self.k, 'window_size': len(self.windows[0]), 'e_hat': self.e_hat.tolist(),
                'failures': self.n_failures,
                'hyperparams': [None if hp is None else {'alpha': hp.alpha, 'lengthscales': list(hp.lengthscales),
                                                         'jitter': hp.jitter} for hp in self.hyperparams]}


def fast_step(comp: GpCompensator, y_s_k, y_p_k, retrain: Optional[bool] = None) -> Tuple[np.ndarray, GpCompensator]:
    result = comp.step(y_s_k, y_p_k, retrain)
    return result.e_hat_next, comp


class OnlineGpRegressor(object):
    """GP-only baseline: predicts y_p(k) from u(k) with one centered sliding-window GP per output"""
    def __init__(self, n_u: int, n_y: int, k_min: int = 25, k_max: int = 300, retrain_every: int = 1,
                 budget: int = 50, refine_budget: int = 5, n_starts: int = 3, jitter: float = 1e-6,
                 learning_rate: float = 0.05, optimize_jitter: bool = True, seed: int = 0):
        self.n_u = n_u
        self.n_y = n_y
        self.k_min = k_min
        self.retrain_every = max(int(retrain_every), 1)
        self.budget = budget
        self.refine_budget = refine_budget
        self.n_starts = n_starts
        self.jitter = jitter
        self.learning_rate = learning_rate
        self.optimize_jitter = optimize_jitter
        self.seed = seed
        self.windows = [GpWindow(k_max, n_u, center=True) for _ in range(n_y)]
        self.hyperparams: List = [None] * n_y
        self.since_fit = 0
        self.n_failures = 0

    def predict(self, u_k) -> np.ndarray:
        """Prediction of y_p(k) before it is measured; the window mean until k_min pairs exist"""
        u_k = np.asarray(u_k, dtype=np.float64).ravel()
        y_hat = np.array([w.offset for w in self.windows])
        if len(self.windows[0]) < self.k_min:
            return y_hat

        for j in range(self.n_y):
            if self.hyperparams[j] is None:
                continue
            try:
                y_hat[j] = gp_fit_predict(self.windows[j], self.hyperparams[j], u_k)
            except NumericalFailure as e:
                self.n_failures += 1
                logger.warning('GP baseline output %d: %s', j, e)
        return y_hat

    def update(self, u_k, y_p_k):
        u_k = np.asarray(u_k, dtype=np.float64).ravel()
        y_p_k = np.asarray(y_p_k, dtype=np.float64).ravel()
        for j in range(self.n_y):
            self.windows[j].push(u_k, y_p_k[j])

        if len(self.windows[0]) < self.k_min:
            return
        self.since_fit += 1
        pending = any(hp is None for hp in self.hyperparams)
        if self.since_fit < self.retrain_every and not pending:
            return
        self.since_fit = 0

        for j in range(self.n_y):
            window = self.windows[j]
            first = self.hyperparams[j] is None
            init = initial_hyperparams(window, self.jitter) if first else self.hyperparams[j]
            result = optimize_hyperparams(window, init, budget=self.budget if first else self.refine_budget,
                                          n_starts=self.n_starts if first else 1,
                                          learning_rate=self.learning_rate, optimize_jitter=self.optimize_jitter,
                                          seed=self.seed + j)
            if result.failed:
                self.n_failures += 1
                if first:
                    continue
            self.hyperparams[j] = result.hyperparams
