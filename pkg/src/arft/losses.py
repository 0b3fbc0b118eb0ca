"""Focal loss, RBF-kernel MMD and the composite training objective."""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels
from . import autograd as ag
from .errors import ConfigError, ContractError, ShapeError

PROB_FLOOR = 1e-12
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 2.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ConfigError(f"gamma must be >= 0, got {self.gamma}")
        if self.alpha <= 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")


@dataclass(frozen=True)
class MMDConfig:
    sigma_policy: str = "median"  # "median" or "fixed"
    sigma: float = 1.0  # used when sigma_policy == "fixed"
    repr_choice: str = "cls"  # cls | mean-tokens | all-tokens
    estimator: str = "biased"

    def __post_init__(self):
        if self.sigma_policy not in ("median", "fixed"):
            raise ConfigError(f"unknown sigma_policy {self.sigma_policy!r}")
        if self.sigma_policy == "fixed" and not self.sigma > 0:
            raise ConfigError("fixed sigma must be > 0")
        if self.repr_choice not in ("cls", "mean-tokens", "all-tokens"):
            raise ConfigError(f"unknown repr_choice {self.repr_choice!r}")
        if self.estimator != "biased":
            raise ConfigError("only the biased V-statistic estimator is implemented")


@dataclass(frozen=True)
class LossSchedule:
    lambda_max: float = 1.0
    steepness: float = 10.0

    def __post_init__(self):
        if self.lambda_max < 0:
            raise ConfigError("lambda_max must be >= 0")


def focal_terms(p_true, cfg):
    """Per-sample -alpha * (1 - p_t)^gamma * log(p_t).

    ``p_true`` holds the predicted probability of each sample's true class;
    it is clamped at 1e-12 before the log.
    """
    p_true = ag.as_tensor(p_true)
    if p_true.size == 0:
        raise ContractError("focal loss on an empty batch")
    logp = ag.log(ag.clip_min(p_true, PROB_FLOOR))
    if cfg.gamma == 0:
        return logp * (-cfg.alpha)
    return ag.power(1.0 - p_true, cfg.gamma) * logp * (-cfg.alpha)


def focal_loss(p_true, cfg):
    """Batch mean of ``focal_terms``."""
    return focal_terms(p_true, cfg).mean()


def cross_entropy(p_true):
    return focal_loss(p_true, FocalConfig(gamma=0.0, alpha=1.0))


def true_class_probability(logits, labels):
    probs = ag.softmax(logits, axis=-1)
    labels = np.asarray(labels, dtype=np.int64)
    return probs[np.arange(labels.shape[0]), labels]


def median_sigma(xs, xt):
    """Median pairwise Euclidean distance over the pooled points.

    Falls back to 1e-6 when the median is zero.
    """
    xs = np.asarray(xs.data if isinstance(xs, ag.Tensor) else xs, dtype=np.float64)
    xt = np.asarray(xt.data if isinstance(xt, ag.Tensor) else xt, dtype=np.float64)
    pooled = np.vstack([xs.reshape(xs.shape[0], -1), xt.reshape(xt.shape[0], -1)])
    n = pooled.shape[0]
    if n < 2:
        raise ContractError("median_sigma needs at least two points")
    dist = _kernels.pairwise_distances(pooled)
    iu = np.triu_indices(n, k=1)
    sigma = float(np.median(dist[iu]))
    return sigma if sigma > 0 else SIGMA_FLOOR


def _rbf(a, b, sigma):
    return ag.exp(ag.sq_dists(a, b) * (-1.0 / (2.0 * sigma * sigma)))


def mmd_rbf(xs, xt, sigma):
    """Squared MMD, biased V-statistic, Gaussian kernel of width ``sigma``.

    mean(K_ss) + mean(K_tt) - 2 mean(K_st). The cross term averages the
    kernel computed in both argument orders so the value is bitwise
    symmetric in (xs, xt).
    """
    xs, xt = ag.as_tensor(xs), ag.as_tensor(xt)
    if xs.ndim != 2 or xt.ndim != 2 or xs.shape[1] != xt.shape[1]:
        raise ShapeError(f"mmd_rbf dimension mismatch: {xs.shape} vs {xt.shape}")
    if xs.shape[0] < 1 or xt.shape[0] < 1:
        raise ContractError("mmd_rbf needs at least one sample per domain")
    if not sigma > 0:
        raise ContractError(f"sigma must be > 0, got {sigma}")
    kss = _rbf(xs, xs, sigma).mean()
    ktt = _rbf(xt, xt, sigma).mean()
    cross = (_rbf(xs, xt, sigma).mean() + _rbf(xt, xs, sigma).mean()) * 0.5
    return (kss + ktt) - cross * 2.0


def lambda_schedule(progress, sched):
    """lambda_max * (2 / (1 + exp(-steepness * progress)) - 1)."""
    if not 0.0 <= progress <= 1.0:
        warnings.warn(f"progress {progress} outside [0, 1]; clamped", stacklevel=2)
        progress = min(1.0, max(0.0, progress))
    return sched.lambda_max * (2.0 / (1.0 + math.exp(-sched.steepness * progress)) - 1.0)


def resolve_sigma(xs, xt, cfg):
    return median_sigma(xs, xt) if cfg.sigma_policy == "median" else cfg.sigma


def composite_loss(source_p_true, source_repr, target_repr, progress, focal_cfg, mmd_cfg, sched):
    """Return ``(total, focal_part, mmd_part, lambda_used)``; the first three are Tensors."""
    focal = focal_loss(source_p_true, focal_cfg)
    lam = lambda_schedule(progress, sched)
    if lam == 0.0:
        mmd = ag.Tensor(0.0)
        return focal, focal, mmd, lam
    sigma = resolve_sigma(source_repr, target_repr, mmd_cfg)
    mmd = mmd_rbf(source_repr, target_repr, sigma)
    return focal + mmd * lam, focal, mmd, lam
