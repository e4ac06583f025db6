"""Diagonal Gaussians and the observation likelihoods used by every objective.

All densities reduce over the last axis, so a ``(batch, dim)`` input gives a
``(batch,)`` result and an unbatched vector gives a scalar.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import DomainError, ShapeError, Tensor

LOG_2PI = math.log(2.0 * math.pi)

BERNOULLI = "bernoulli-logits"
CATEGORICAL = "categorical-logits"
GAUSSIAN = "gaussian-fixed-unit-variance"
FAMILIES = (BERNOULLI, CATEGORICAL, GAUSSIAN)

# decoder means handed to users are clipped to this band in 32-bit runs
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class DiagGaussian:
    mean: Tensor
    logvar: Tensor

    def __post_init__(self):
        if self.mean.shape != self.logvar.shape:
            raise ShapeError("DiagGaussian", self.mean.shape, self.logvar.shape)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.logvar.data)

    @property
    def std(self) -> np.ndarray:
        return np.exp(0.5 * self.logvar.data)


@dataclass(frozen=True)
class LikelihoodParams:
    family: str
    params: Tensor

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown likelihood family {self.family!r}")

    def mean(self) -> np.ndarray:
        """Expected observation: probabilities for discrete families."""
        p = self.params.data
        if self.family == BERNOULLI:
            out = T._sigmoid(p)
        elif self.family == CATEGORICAL:
            e = np.exp(p - p.max(axis=-1, keepdims=True))
            out = e / e.sum(axis=-1, keepdims=True)
        else:
            return p
        if out.dtype == np.float32:
            out = np.clip(out, PROB_CLAMP, 1.0 - PROB_CLAMP)
        return out


def rsample(q: DiagGaussian, noise) -> Tensor:
    """Reparameterised draw ``mean + exp(logvar / 2) * noise``."""
    eps = T.as_tensor(noise, like=q.mean)
    if eps.shape != q.mean.shape:
        raise ShapeError("rsample", q.mean.shape, eps.shape)
    return q.mean + T.exp(q.logvar * 0.5) * eps


def kl_to_standard_normal(q: DiagGaussian) -> Tensor:
    """KL(q || N(0, I)), summed over the last axis."""
    inner = 1.0 + q.logvar - T.square(q.mean) - T.exp(q.logvar)
    return T.sum_(inner, axis=-1) * -0.5


def kl_between(q1: DiagGaussian, q2: DiagGaussian) -> Tensor:
    """KL(q1 || q2) for diagonal Gaussians, summed over the last axis."""
    if q1.mean.shape[-1] != q2.mean.shape[-1]:
        raise ShapeError("kl_between", q1.mean.shape, q2.mean.shape)
    # log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2
    inv_var2 = T.exp(-q2.logvar)
    terms = (q2.logvar - q1.logvar) * 0.5 + (T.exp(q1.logvar) + T.square(q1.mean - q2.mean)) * inv_var2 * 0.5 - 0.5
    return T.sum_(terms, axis=-1)


def log_normal(z, q: DiagGaussian) -> Tensor:
    """log N(z; q.mean, diag(q.var)) summed over the last axis."""
    z = T.as_tensor(z, like=q.mean)
    quad = T.square(z - q.mean) * T.exp(-q.logvar)
    return T.sum_(quad + q.logvar + LOG_2PI, axis=-1) * -0.5


def log_standard_normal(z) -> Tensor:
    z = T.as_tensor(z)
    return T.sum_(T.square(z) + LOG_2PI, axis=-1) * -0.5


def _check_support(family: str, obs: np.ndarray) -> None:
    if family == BERNOULLI:
        if not np.all((obs == 0) | (obs == 1)):
            raise DomainError("bernoulli observation must be binary {0, 1}")
    elif family == CATEGORICAL:
        if not np.all((obs == 0) | (obs == 1)) or not np.all(obs.sum(axis=-1) == 1):
            raise DomainError("categorical observation must be one-hot")


def log_likelihood(lp: LikelihoodParams, observation, check: bool = True) -> Tensor:
    """log p(observation | params), computed in log space."""
    obs = T.as_tensor(observation, like=lp.params)
    try:
        np.broadcast_shapes(obs.shape, lp.params.shape)
    except ValueError:
        raise ShapeError("log_likelihood", lp.params.shape, obs.shape) from None
    if check:
        _check_support(lp.family, obs.data)
    p = lp.params
    if lp.family == BERNOULLI:
        # x*l - softplus(l)
        return T.sum_(obs * p - T.softplus(p), axis=-1)
    if lp.family == CATEGORICAL:
        return T.sum_(obs * T.log_softmax(p, axis=-1), axis=-1)
    d = p.shape[-1]
    return T.sum_(T.square(obs - p), axis=-1) * -0.5 - 0.5 * d * LOG_2PI
