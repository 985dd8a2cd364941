import logging
from collections import namedtuple
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn

from data import Dataset
from exceptions import DimensionError, InsufficientData, InvalidData, SingularFit

DTYPE = torch.float64
SCALE_FLOOR = 1e-12

logger = logging.getLogger(__name__)

NarxConfig = namedtuple('NarxConfig', ['n_a', 'n_b', 'ridge', 'nonlinear_features'])
NarxConfig.__new__.__defaults__ = (2, 2, 1e-4, True)

# Lag buffer in scaled units: y_past[0] = y(k-1), u_past[0] = u(k-1)
LagBuffer = namedtuple('LagBuffer', ['y_past', 'u_past'])


def check_config(config: NarxConfig):
    if config.n_a < 0 or config.n_b < 1:
        raise InvalidData('NARX lags need n_a >= 0 and n_b >= 1, got n_a=%d n_b=%d' % (config.n_a, config.n_b))
    if config.ridge < 0:
        raise InvalidData('ridge must be non-negative, got %r' % config.ridge)


class NarxModel(nn.Module):
    """Multi-output NARX model y(k) = Theta * phi(k) on standardized data, where phi stacks
    n_a past outputs, the current and n_b-1 past inputs, optionally their tanh, and an intercept.
    The lag vector is the model state.
    """
    def __init__(self, n_u: int, n_y: int, n_a: int = 2, n_b: int = 2, ridge: float = 1e-4,
                 nonlinear_features: bool = True):
        super(NarxModel, self).__init__()
        check_config(NarxConfig(n_a, n_b, ridge, nonlinear_features))

        self.n_u = n_u
        self.n_y = n_y
        self.n_a = n_a
        self.n_b = n_b
        self.ridge = ridge
        self.nonlinear_features = nonlinear_features

        self.register_buffer('theta', torch.zeros([n_y, self.n_features], dtype=DTYPE))
        self.register_buffer('u_mean', torch.zeros(n_u, dtype=DTYPE))
        self.register_buffer('u_std', torch.ones(n_u, dtype=DTYPE))
        self.register_buffer('y_mean', torch.zeros(n_y, dtype=DTYPE))
        self.register_buffer('y_std', torch.ones(n_y, dtype=DTYPE))

    @property
    def config(self) -> NarxConfig:
        return NarxConfig(self.n_a, self.n_b, self.ridge, self.nonlinear_features)

    @property
    def n_linear(self) -> int:
        return self.n_a * self.n_y + self.n_b * self.n_u

    @property
    def n_features(self) -> int:
        return self.n_linear * (2 if self.nonlinear_features else 1) + 1

    @property
    def lag(self) -> int:
        """Number of past samples needed to fill the lag buffer"""
        return max(self.n_a, self.n_b - 1)

    def scale_u(self, u: torch.Tensor) -> torch.Tensor:
        return (u - self.u_mean) / self.u_std

    def scale_y(self, y: torch.Tensor) -> torch.Tensor:
        return (y - self.y_mean) / self.y_std

    def unscale_y(self, y: torch.Tensor) -> torch.Tensor:
        return y * self.y_std + self.y_mean

    def regressors(self, y_past: torch.Tensor, u_lags: torch.Tensor) -> torch.Tensor:
        """
        :param y_past: scaled past outputs with shape (..., n_a, n_y), most recent first
        :param u_lags: scaled current and past inputs with shape (..., n_b, n_u), most recent first
        :returns phi: regressor with shape (..., n_features)
        """
        batch = y_past.shape[:-2]
        linear = torch.cat([y_past.reshape(batch + (-1,)), u_lags.reshape(batch + (-1,))], dim=-1)
        blocks = [linear]
        if self.nonlinear_features:
            blocks.append(torch.tanh(linear))
        blocks.append(torch.ones(batch + (1,), dtype=DTYPE))
        return torch.cat(blocks, dim=-1)

    def forward(self, phi: torch.Tensor) -> torch.Tensor:
        """
        :param phi: regressors with shape (..., n_features)
        :returns scaled outputs with shape (..., n_y)
        """
        return phi @ self.theta.t()

    def cold_start(self) -> LagBuffer:
        """Lag buffer at the signal means (scaled zeros)"""
        return LagBuffer(y_past=torch.zeros([self.n_a, self.n_y], dtype=DTYPE),
                         u_past=torch.zeros([self.n_b - 1, self.n_u], dtype=DTYPE))

    def warm_start(self, u_past: np.ndarray, y_past: np.ndarray) -> LagBuffer:
        """Lag buffer filled from measured history (oldest row first); missing rows stay cold
        :param u_past: raw inputs with shape (N, n_u)
        :param y_past: raw outputs with shape (N, n_y)
        """
        buffer = self.cold_start()
        u_past = torch.as_tensor(np.asarray(u_past, dtype=np.float64).reshape(-1, self.n_u))
        y_past = torch.as_tensor(np.asarray(y_past, dtype=np.float64).reshape(-1, self.n_y))

        n_y_rows = min(self.n_a, y_past.shape[0])
        n_u_rows = min(self.n_b - 1, u_past.shape[0])
        if n_y_rows > 0:
            buffer.y_past[:n_y_rows] = self.scale_y(y_past[-n_y_rows:]).flip(0)
        if n_u_rows > 0:
            buffer.u_past[:n_u_rows] = self.scale_u(u_past[-n_u_rows:]).flip(0)
        return buffer

    def step(self, buffer: LagBuffer, u_k: np.ndarray) -> Tuple[np.ndarray, LagBuffer]:
        """One free-run step: predicts y(k) and shifts the prediction into the buffer
        :param buffer: LagBuffer holding y(k-1).. and u(k-1)..
        :param u_k: raw input vector u(k)
        :returns y(k) in raw units and the shifted buffer
        """
        u_k = torch.as_tensor(np.asarray(u_k, dtype=np.float64))
        if u_k.shape != (self.n_u,):
            raise DimensionError('input has shape %s, model expects (%d,)' % (tuple(u_k.shape), self.n_u))

        with torch.no_grad():
            u_lags = torch.cat([self.scale_u(u_k).unsqueeze(0), buffer.u_past], dim=0)
            y_scaled = self(self.regressors(buffer.y_past, u_lags))
            shifted = LagBuffer(y_past=torch.cat([y_scaled.unsqueeze(0), buffer.y_past[:-1]], dim=0)[:self.n_a],
                                u_past=u_lags[:self.n_b - 1])
            y_k = self.unscale_y(y_scaled)

        return y_k.numpy(), shifted

    def simulate(self, inputs: np.ndarray, init: LagBuffer = None) -> np.ndarray:
        """Free-run simulation over an input sequence
        :param inputs: raw inputs with shape (N, n_u)
        :param init: initial LagBuffer, cold start when omitted
        :returns outputs with shape (N, n_y)
        """
        inputs = np.asarray(inputs, dtype=np.float64)
        if inputs.ndim != 2 or inputs.shape[1] != self.n_u:
            raise DimensionError('inputs have shape %s, model expects (N, %d)' % (inputs.shape, self.n_u))

        buffer = self.cold_start() if init is None else init
        outputs = np.zeros([inputs.shape[0], self.n_y])
        for k in range(inputs.shape[0]):
            outputs[k], buffer = self.step(buffer, inputs[k])
        return outputs

    def design_matrix(self, dataset: Dataset) -> Tuple[torch.Tensor, torch.Tensor]:
        """Series-parallel regressors built from measured data
        :returns Phi with shape (N - lag, n_features) and scaled targets with shape (N - lag, n_y)
        """
        u = self.scale_u(torch.as_tensor(dataset.u))
        y = self.scale_y(torch.as_tensor(dataset.y))
        lag, n = self.lag, len(dataset)

        rows = torch.arange(lag, n)
        y_past = torch.stack([y[rows - i] for i in range(1, self.n_a + 1)], dim=1) if self.n_a > 0 \
            else torch.zeros([n - lag, 0, self.n_y], dtype=DTYPE)
        u_lags = torch.stack([u[rows - i] for i in range(self.n_b)], dim=1)

        return self.regressors(y_past, u_lags), y[lag:]

    def one_step(self, dataset: Dataset) -> np.ndarray:
        """One-step-ahead predictions from measured lags, raw units, rows lag..N-1"""
        with torch.no_grad():
            phi, _ = self.design_matrix(dataset)
            return self.unscale_y(self(phi)).numpy()

    def loss(self, dataset: Dataset, theta: torch.Tensor = None) -> float:
        """Ridge-regularized training loss on scaled data"""
        theta = self.theta if theta is None else theta
        with torch.no_grad():
            phi, target = self.design_matrix(dataset)
            residual = target - phi @ theta.t()
            return float((residual ** 2).sum() + self.ridge * (theta ** 2).sum())

    @staticmethod
    def load(model_path: str):
        """
        Load the model from a file.
        :param model_path: path to model
        """
        params = torch.load(model_path, map_location=lambda storage, loc: storage)
        model = NarxModel(**params['args'])
        model.load_state_dict(params['state_dict'])

        return model

    def save(self, path: str):
        """
        Save the model to a file.
        :param path: path to the model
        """
        logger.debug('save model parameters to [%s]', path)

        params = {
            'args': dict(n_u=self.n_u, n_y=self.n_y, n_a=self.n_a, n_b=self.n_b, ridge=self.ridge,
                         nonlinear_features=self.nonlinear_features),
            'state_dict': self.state_dict()
        }

        torch.save(params, path)


def _scaler(values: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    mean = values.mean(dim=0)
    std = values.std(dim=0, unbiased=True) if values.shape[0] > 1 else torch.zeros_like(mean)
    std = torch.where(std > SCALE_FLOOR, std, torch.ones_like(std))
    return mean, std


def fit_base_model(dataset: Dataset, config: NarxConfig = NarxConfig()) -> NarxModel:
    """Fits a NARX model by ridge-regularized least squares (normal equations, Cholesky)
    :param dataset: training Dataset
    :param config: NarxConfig
    :returns model: fitted NarxModel
    """
    check_config(config)
    model = NarxModel(dataset.n_u, dataset.n_y, *config)

    if len(dataset) <= config.n_a + config.n_b + model.n_features:
        raise InsufficientData('%r is too short for %d NARX features' % (dataset, model.n_features))

    model.u_mean, model.u_std = _scaler(torch.as_tensor(dataset.u))
    model.y_mean, model.y_std = _scaler(torch.as_tensor(dataset.y))

    phi, target = model.design_matrix(dataset)
    gram = phi.t() @ phi + config.ridge * torch.eye(model.n_features, dtype=DTYPE)

    if config.ridge == 0 and int(torch.linalg.matrix_rank(phi)) < model.n_features:
        raise SingularFit('regressor matrix of %r is rank deficient' % dataset)

    chol, info = torch.linalg.cholesky_ex(gram)
    if int(info) != 0:
        raise SingularFit('normal equations of %r are not positive definite' % dataset)

    model.theta = torch.cholesky_solve(phi.t() @ target, chol).t().contiguous()

    if not bool(torch.isfinite(model.theta).all()):
        raise SingularFit('least-squares solution of %r is not finite' % dataset)

    logger.debug('fitted NARX(n_a=%d, n_b=%d) on %r', config.n_a, config.n_b, dataset)
    return model


def simulate(model: NarxModel, inputs: np.ndarray, init: LagBuffer = None) -> np.ndarray:
    return model.simulate(inputs, init)
