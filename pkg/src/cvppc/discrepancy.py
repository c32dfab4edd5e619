"""Discrepancy measures and test statistics for the two-level model.

Every measure is evaluated in batch form: observations come as an array of
shape ``(M, n_i)`` (one row per posterior draw, or a single row broadcast
against ``M`` draws) and the parameters as arrays of shape ``(M,)``.
"""

from __future__ import annotations

from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from .model import Dataset, GroupData, ParamState


class Kind(str, Enum):
    OVERALL_X2 = "overall_x2"
    LEVEL1_X2 = "level1_x2"
    LEVEL2_X2 = "level2_x2"
    MAX_OBS = "max_obs"
    MIN_OBS = "min_obs"
    MAX_ABSDEV_THETA = "max_absdev_theta"
    MAX_ABSDEV_MU = "max_absdev_mu"
    MAX_GROUPMEAN_DEV = "max_groupmean_dev"

    def __str__(self) -> str:
        return self.value

    @property
    def per_group(self) -> bool:
        return self is not Kind.MAX_GROUPMEAN_DEV

    @property
    def population(self) -> bool:
        return self in X2_KINDS or self is Kind.MAX_GROUPMEAN_DEV


X2_KINDS = frozenset({Kind.OVERALL_X2, Kind.LEVEL1_X2, Kind.LEVEL2_X2})

LABELS = {
    Kind.OVERALL_X2: "Overall X^2",
    Kind.LEVEL1_X2: "1st Level X^2",
    Kind.LEVEL2_X2: "2nd Level X^2",
    Kind.MAX_OBS: "Max_j X_ij",
    Kind.MIN_OBS: "Min_j X_ij",
    Kind.MAX_ABSDEV_THETA: "Max_j |X_ij - theta_i|",
    Kind.MAX_ABSDEV_MU: "Max_j |X_ij - mu|",
    Kind.MAX_GROUPMEAN_DEV: "Max_i |Xbar_i - mu|",
}


class Dependence(NamedTuple):
    uses_data: bool
    uses_theta: bool
    uses_eta: bool


_DEPENDS = {
    Kind.OVERALL_X2: Dependence(True, False, True),
    Kind.LEVEL1_X2: Dependence(True, True, False),
    Kind.LEVEL2_X2: Dependence(False, True, True),
    Kind.MAX_OBS: Dependence(True, False, False),
    Kind.MIN_OBS: Dependence(True, False, False),
    Kind.MAX_ABSDEV_THETA: Dependence(True, True, False),
    Kind.MAX_ABSDEV_MU: Dependence(True, False, True),
    Kind.MAX_GROUPMEAN_DEV: Dependence(True, False, True),
}


def parse_kind(name: str | Kind) -> Kind:
    try:
        return Kind(str(name).strip().lower())
    except ValueError:
        valid = ", ".join(k.value for k in Kind)
        raise ValueError(f"unknown discrepancy {name!r}; expected one of: {valid}") from None


def depends_on(kind: Kind) -> Dependence:
    """Which arguments a measure reads. Data-only measures are test statistics."""
    return _DEPENDS[Kind(kind)]


def group_batch(kind: Kind, x, theta, mu, tau2, sigma2) -> np.ndarray:
    """Per-group measure for each draw. ``x`` is ``(M, n_i)`` or ``(n_i,)``."""
    kind = Kind(kind)
    if not kind.per_group:
        raise ValueError(f"{kind} has population scope only")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    theta = np.asarray(theta, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if kind is Kind.OVERALL_X2:
        return np.sum((x - mu[..., None]) ** 2, axis=-1) / (np.asarray(sigma2) + np.asarray(tau2))
    if kind is Kind.LEVEL1_X2:
        return np.sum((x - theta[..., None]) ** 2, axis=-1) / np.asarray(sigma2)
    if kind is Kind.LEVEL2_X2:
        return (theta - mu) ** 2 / np.asarray(tau2)
    if kind is Kind.MAX_OBS:
        return x.max(axis=-1)
    if kind is Kind.MIN_OBS:
        return x.min(axis=-1)
    if kind is Kind.MAX_ABSDEV_THETA:
        return np.abs(x - theta[..., None]).max(axis=-1)
    return np.abs(x - mu[..., None]).max(axis=-1)


def population_batch(kind: Kind, xs: Sequence, thetas, mu, tau2, sigma2) -> np.ndarray:
    """Population measure per draw. ``xs[i]`` is group i's ``(M, n_i)`` data, ``thetas`` is ``(M, I)``."""
    kind = Kind(kind)
    if not kind.population:
        raise ValueError(f"{kind} has per-group scope only")
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    mu = np.asarray(mu, dtype=float)
    if kind is Kind.MAX_GROUPMEAN_DEV:
        means = np.stack([np.atleast_2d(np.asarray(x, dtype=float)).mean(axis=-1) for x in xs], axis=-1)
        return np.abs(means - mu[..., None]).max(axis=-1)
    total = 0.0
    for i, x in enumerate(xs):
        total = total + group_batch(kind, x, thetas[..., i], mu, tau2, sigma2)
    return total


def eval_group(kind: Kind, group: GroupData, theta_i: float, mu: float, tau2: float, sigma2: float) -> float:
    if not (tau2 > 0 and sigma2 > 0):
        raise ValueError("scales must be positive")
    return float(np.atleast_1d(group_batch(kind, group.values, np.float64(theta_i), np.float64(mu), tau2, sigma2))[0])


def eval_population(kind: Kind, dataset: Dataset, state: ParamState) -> float:
    thetas = np.asarray(state.thetas, dtype=float)
    if thetas.shape != (dataset.n_groups,):
        raise ValueError("state must carry one theta per group of the dataset")
    xs = [g.values for g in dataset]
    return float(np.atleast_1d(population_batch(kind, xs, thetas, np.float64(state.mu), state.tau2, state.sigma2))[0])
