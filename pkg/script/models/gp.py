"""
Gaussian-process regression over a sliding window: squared-exponential ARD kernel,
posterior mean through a cached Cholesky factor, log marginal likelihood with
autograd gradients, and Adam ascent of the log-hyperparameters.
"""

import logging
import math
from collections import deque, namedtuple
from typing import Tuple

import numpy as np
import torch

from exceptions import DimensionError, InsufficientData, NumericalFailure

DTYPE = torch.float64
LOG_BOUND = 12.
JITTER_FLOOR = 1e-6
JITTER_CAP = 1e-2
JITTER_RATIO_MAX = 1.

logger = logging.getLogger(__name__)

GpHyperparams = namedtuple('GpHyperparams', ['alpha', 'lengthscales', 'jitter'])
OptimizationResult = namedtuple('OptimizationResult', ['hyperparams', 'lml', 'failed'])


class GpWindow(object):
    """FIFO window of (nu, target) pairs with a cached factorization of the kernel matrix"""
    def __init__(self, k_max: int, dim: int, center: bool = False):
        """
        :param k_max: capacity, the oldest pair is evicted beyond it
        :param dim: dimension of the regressor nu
        :param center: regress on targets minus their window mean
        """
        if k_max < 1:
            raise InsufficientData('window capacity must be positive, got %d' % k_max)
        self.k_max = k_max
        self.dim = dim
        self.center = center
        self.nu_points = deque(maxlen=k_max)
        self.targets = deque(maxlen=k_max)
        self._cache = None

    def __len__(self):
        return len(self.targets)

    def push(self, nu, target: float):
        nu = np.asarray(nu, dtype=np.float64).ravel()
        if nu.shape[0] != self.dim:
            raise DimensionError('regressor has dimension %d, window expects %d' % (nu.shape[0], self.dim))
        self.nu_points.append(nu)
        self.targets.append(float(target))
        self._cache = None

    def clear(self):
        self.nu_points.clear()
        self.targets.clear()
        self._cache = None

    def inputs(self) -> np.ndarray:
        return np.array(self.nu_points).reshape(-1, self.dim)

    def target_array(self) -> np.ndarray:
        return np.array(self.targets, dtype=np.float64)

    @property
    def offset(self) -> float:
        if self.center and len(self) > 0:
            return float(np.mean(self.targets))
        return 0.

    def centered_targets(self) -> np.ndarray:
        return self.target_array() - self.offset


def se_kernel(a, b, hp: GpHyperparams) -> float:
    """alpha^2 * exp(-1/2 * sum_d (a_d - b_d)^2 / l_d^2)"""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ls = np.asarray(hp.lengthscales, dtype=np.float64).ravel()
    if a.shape != b.shape or a.shape != ls.shape:
        raise DimensionError('kernel arguments %s, %s do not match %d lengthscales' % (a.shape, b.shape, ls.shape[0]))
    return float(hp.alpha ** 2 * np.exp(-0.5 * np.sum(((a - b) / ls) ** 2)))


def kernel_matrix(x1: torch.Tensor, x2: torch.Tensor, log_alpha: torch.Tensor, log_ls: torch.Tensor) -> torch.Tensor:
    """
    :param x1: tensor with shape (N1, dim)
    :param x2: tensor with shape (N2, dim)
    :returns covariance tensor with shape (N1, N2)
    """
    diff = (x1.unsqueeze(1) - x2.unsqueeze(0)) / torch.exp(log_ls)
    return torch.exp(2. * log_alpha - 0.5 * (diff ** 2).sum(dim=-1))


def to_log_params(hp: GpHyperparams) -> np.ndarray:
    """[log alpha, log l_1..l_d, log(jitter / alpha^2)]"""
    ratio = hp.jitter / hp.alpha ** 2
    return np.concatenate([[math.log(hp.alpha)], np.log(np.asarray(hp.lengthscales, dtype=np.float64)),
                           [math.log(ratio)]])


def from_log_params(log_params) -> GpHyperparams:
    log_params = np.asarray(log_params, dtype=np.float64)
    alpha = math.exp(log_params[0])
    return GpHyperparams(alpha=alpha, lengthscales=np.exp(log_params[1:-1]),
                         jitter=alpha ** 2 * math.exp(log_params[-1]))


def _tensors(window: GpWindow) -> Tuple[torch.Tensor, torch.Tensor]:
    if len(window) == 0:
        raise InsufficientData('the GP window is empty')
    return torch.as_tensor(window.inputs()), torch.as_tensor(window.centered_targets())


def factorize(window: GpWindow, hp: GpHyperparams):
    """Cholesky factor of Sigma_2 + jitter*I and the weights (Sigma_2 + jitter*I)^-1 t, cached
    per hyperparameter object. The jitter escalates x10 while factorization fails, up to
    1e-2 * alpha^2.
    :returns chol, weights, jitter actually used
    """
    if window._cache is not None and window._cache[0] is hp:
        return window._cache[1:]

    x, t = _tensors(window)
    if len(hp.lengthscales) != window.dim:
        raise DimensionError('%d lengthscales for %d-dimensional regressors' % (len(hp.lengthscales), window.dim))

    gram = kernel_matrix(x, x, torch.tensor(math.log(hp.alpha), dtype=DTYPE),
                         torch.as_tensor(np.log(np.asarray(hp.lengthscales, dtype=np.float64))))
    eye = torch.eye(len(window), dtype=DTYPE)
    jitter, cap = hp.jitter, JITTER_CAP * hp.alpha ** 2

    while True:
        chol, info = torch.linalg.cholesky_ex(gram + jitter * eye)
        if int(info) == 0:
            break
        if jitter >= cap:
            raise NumericalFailure('kernel matrix of %d points is not positive definite at jitter %.3g'
                                   % (len(window), jitter))
        jitter = min(max(jitter * 10., JITTER_FLOOR * hp.alpha ** 2), cap)
        logger.debug('escalating GP jitter to %.3g', jitter)

    weights = torch.cholesky_solve(t.unsqueeze(1), chol).squeeze(1)
    window._cache = (hp, chol, weights, jitter)
    return chol, weights, jitter


def gp_fit_predict(window: GpWindow, hp: GpHyperparams, query) -> float:
    """Posterior mean Sigma_1(query, nu) (Sigma_2 + jitter*I)^-1 t at a single query point"""
    query = torch.as_tensor(np.asarray(query, dtype=np.float64).reshape(1, -1))
    if query.shape[1] != window.dim:
        raise DimensionError('query has dimension %d, window expects %d' % (query.shape[1], window.dim))

    _, weights, _ = factorize(window, hp)
    cross = kernel_matrix(query, torch.as_tensor(window.inputs()), torch.tensor(math.log(hp.alpha), dtype=DTYPE),
                          torch.as_tensor(np.log(np.asarray(hp.lengthscales, dtype=np.float64))))
    return float(cross.squeeze(0) @ weights) + window.offset


def log_marginal_likelihood(window: GpWindow, hp: GpHyperparams) -> float:
    """-1/2 t'K^-1 t - 1/2 log det K - N/2 log 2pi, from the triangular factor"""
    chol, weights, _ = factorize(window, hp)
    _, t = _tensors(window)
    return float(-0.5 * (t @ weights) - torch.log(torch.diagonal(chol)).sum()
                 - 0.5 * len(window) * math.log(2. * math.pi))


def _lml_tensor(x: torch.Tensor, t: torch.Tensor, log_params: torch.Tensor):
    log_alpha, log_ls, log_ratio = log_params[0], log_params[1:-1], log_params[-1]
    gram = kernel_matrix(x, x, log_alpha, log_ls)
    gram = gram + torch.exp(2. * log_alpha + log_ratio) * torch.eye(x.shape[0], dtype=DTYPE)

    chol, info = torch.linalg.cholesky_ex(gram)
    if int(info) != 0:
        return None

    weights = torch.cholesky_solve(t.unsqueeze(1), chol).squeeze(1)
    return -0.5 * (t @ weights) - torch.log(torch.diagonal(chol)).sum() - 0.5 * x.shape[0] * math.log(2. * math.pi)


def lml_and_gradient(window: GpWindow, log_params) -> Tuple[float, np.ndarray]:
    """Log marginal likelihood and its gradient with respect to to_log_params() coordinates"""
    x, t = _tensors(window)
    p = torch.tensor(np.asarray(log_params, dtype=np.float64), requires_grad=True)
    lml = _lml_tensor(x, t, p)
    if lml is None:
        raise NumericalFailure('kernel matrix is not positive definite')
    lml.backward()
    return lml.item(), p.grad.numpy().copy()


def _clamp_(p: torch.Tensor):
    p[:-1].clamp_(-LOG_BOUND, LOG_BOUND)
    p[-1].clamp_(math.log(JITTER_FLOOR), math.log(JITTER_RATIO_MAX))


def optimize_hyperparams(window: GpWindow, init: GpHyperparams, budget: int = 50, n_starts: int = 3,
                         learning_rate: float = 0.05, optimize_jitter: bool = True,
                         seed: int = 0) -> OptimizationResult:
    """Maximizes the log marginal likelihood by Adam over log-hyperparameters.
    The first start is init itself, the others perturb it with a seeded generator.
    A candidate replaces the incumbent only if it strictly improves the LML, so the
    result never scores below init; init is returned as the same object when nothing improves.
    :param window: GpWindow with at least one point
    :param init: starting GpHyperparams
    :param budget: Adam iterations per start
    :param n_starts: number of starts
    :param learning_rate: Adam step size
    :param optimize_jitter: also optimize the nugget (floored at 1e-6 * alpha^2)
    :param seed: seed of the start perturbations
    :returns OptimizationResult(hyperparams, lml, failed)
    """
    x, t = _tensors(window)

    try:
        best_lml = log_marginal_likelihood(window, init)
    except NumericalFailure:
        best_lml = -math.inf

    init_params = to_log_params(init)
    best_params = None
    succeeded = False
    rng = np.random.RandomState(seed)

    for start in range(max(n_starts, 1)):
        start_params = init_params.copy()
        if start > 0:
            n_free = len(start_params) if optimize_jitter else len(start_params) - 1
            start_params[:n_free] += rng.normal(0., 0.5, size=n_free)

        p = torch.tensor(start_params, requires_grad=True)
        with torch.no_grad():
            _clamp_(p)
        optimizer = torch.optim.Adam([p], lr=learning_rate)

        for it in range(budget + 1):
            optimizer.zero_grad()
            lml = _lml_tensor(x, t, p)
            if lml is None or not bool(torch.isfinite(lml)):
                break

            succeeded = True
            value = lml.item()
            if value > best_lml + 1e-10 * (1. + abs(best_lml)):
                best_lml, best_params = value, p.detach().numpy().copy()

            if it == budget:
                break

            (-lml).backward()
            if not optimize_jitter:
                p.grad[-1] = 0.
            optimizer.step()
            with torch.no_grad():
                _clamp_(p)

    if not succeeded:
        logger.warning('hyperparameter optimization failed numerically on %d points, keeping init', len(window))
        return OptimizationResult(init, best_lml, True)

    if best_params is None:
        return OptimizationResult(init, best_lml, False)

    return OptimizationResult(from_log_params(best_params), best_lml, False)


def initial_hyperparams(window: GpWindow, jitter_ratio: float = JITTER_FLOOR) -> GpHyperparams:
    """alpha from the RMS of the targets, one lengthscale per regressor from its spread"""
    x, t = window.inputs(), window.centered_targets()
    alpha = max(float(np.sqrt(np.mean(t ** 2))), 1e-3) if len(t) > 0 else 1.

    if x.shape[0] > 1:
        spread = x.std(axis=0)
        lengthscales = np.where(spread > 1e-12, spread, 1.)
    else:
        lengthscales = np.ones(window.dim)

    return GpHyperparams(alpha=alpha, lengthscales=lengthscales, jitter=jitter_ratio * alpha ** 2)
