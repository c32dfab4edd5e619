"""Posterior predictive checks: regular (full-data) and leave-one-group-out cross-validated."""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import discrepancy as disc
from .discrepancy import Kind
from .model import Dataset, GroupData, ModelSpec
from .sampler import (
    STREAM_CV,
    STREAM_PPC,
    ProprietyError,
    SamplerConfig,
    fit_posterior,
    sample_conditional_theta,
    sample_prior_theta,
    sample_replicate_group,
    task_rng,
)

POPULATION = "Whole population"
THETA_MODES = ("posterior", "literal")
ADJUSTMENTS = ("none", "bonferroni")
MIN_CV_GROUPS = 4

TABLE_KINDS = (
    Kind.OVERALL_X2,
    Kind.LEVEL1_X2,
    Kind.LEVEL2_X2,
    Kind.MAX_OBS,
    Kind.MAX_ABSDEV_THETA,
    Kind.MAX_ABSDEV_MU,
)
PPC_TABLE_KINDS = TABLE_KINDS + (Kind.MAX_GROUPMEAN_DEV,)


@dataclass(frozen=True)
class CheckConfig:
    """What to check and how.

    ``theta_mode="posterior"`` evaluates the realized side of theta-dependent
    cross-validated discrepancies at a draw from ``p(theta_i | x_i, eta)``;
    ``"literal"`` reuses the prior draw of theta_i for both sides.
    """

    discrepancies: tuple[Kind, ...] = TABLE_KINDS
    theta_mode: str = "posterior"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    adjust: str = "none"

    def __post_init__(self):
        kinds = tuple(disc.parse_kind(k) for k in self.discrepancies)
        if not kinds:
            raise ValueError("at least one discrepancy is required")
        if len(set(kinds)) != len(kinds):
            raise ValueError("duplicate discrepancy in configuration")
        object.__setattr__(self, "discrepancies", kinds)
        if self.theta_mode not in THETA_MODES:
            raise ValueError(f"theta_mode must be one of {THETA_MODES}, got {self.theta_mode!r}")
        if self.adjust not in ADJUSTMENTS:
            raise ValueError(f"adjust must be one of {ADJUSTMENTS}, got {self.adjust!r}")
        if self.theta_mode == "literal" and Kind.LEVEL2_X2 in kinds:
            raise ValueError(
                "level2_x2 is degenerate under theta_mode=literal: realized and replicate values coincide"
            )

    def to_dict(self) -> dict:
        return {
            "discrepancies": [k.value for k in self.discrepancies],
            "theta_mode": self.theta_mode,
            "adjust": self.adjust,
            "sampler": self.sampler.to_dict(),
        }


@dataclass(eq=False)
class CheckReport:
    """p-values indexed by (discrepancy, target); ``nan`` marks a cell that does not apply."""

    method: str
    kinds: tuple[Kind, ...]
    targets: tuple[str, ...]
    p: np.ndarray
    p_adjusted: np.ndarray | None = None
    metadata: dict = field(default_factory=dict)

    def value(self, kind: Kind | str, target: str, adjusted: bool = False) -> float:
        table = self.p_adjusted if adjusted else self.p
        if table is None:
            raise ValueError("report has no adjusted p-values")
        return float(table[self.kinds.index(disc.parse_kind(kind)), self.targets.index(target)])

    def cells(self, adjusted: bool = False):
        table = self.p_adjusted if adjusted else self.p
        for a, kind in enumerate(self.kinds):
            for b, target in enumerate(self.targets):
                if not math.isnan(table[a, b]):
                    yield kind, target, float(table[a, b])

    @property
    def group_targets(self) -> tuple[str, ...]:
        return tuple(t for t in self.targets if t != POPULATION)

    def to_dict(self) -> dict:
        def grid(table):
            return {
                k.value: {t: (None if math.isnan(v) else float(v)) for t, v in zip(self.targets, row)}
                for k, row in zip(self.kinds, table)
            }

        return {
            "method": self.method,
            "kinds": [k.value for k in self.kinds],
            "targets": list(self.targets),
            "p": grid(self.p),
            "p_adjusted": None if self.p_adjusted is None else grid(self.p_adjusted),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "CheckReport":
        kinds = tuple(disc.parse_kind(k) for k in doc["kinds"])
        targets = tuple(doc["targets"])

        def ungrid(g):
            return np.array([[np.nan if g[k.value][t] is None else g[k.value][t] for t in targets] for k in kinds])

        adjusted = doc.get("p_adjusted")
        return cls(doc["method"], kinds, targets, ungrid(doc["p"]),
                   None if adjusted is None else ungrid(adjusted), dict(doc.get("metadata", {})))

    def render_table(self, adjusted: bool = False, digits: int = 3) -> str:
        """Tab-separated table, rows = discrepancies, columns = groups then population."""
        table = self.p_adjusted if adjusted else self.p
        if table is None:
            raise ValueError("report has no adjusted p-values")
        lines = ["\t".join(("discrepancy",) + self.targets)]
        for kind, row in zip(self.kinds, table):
            cells = ["-" if math.isnan(v) else f"{v:.{digits}f}" for v in row]
            lines.append("\t".join([kind.value] + cells))
        return "\n".join(lines) + "\n"


def tail_probability(replicate_values, realized_values) -> float:
    """Fraction of draws whose replicate discrepancy strictly exceeds the realized one."""
    rep = np.asarray(replicate_values, dtype=float)
    real = np.asarray(realized_values, dtype=float)
    if rep.shape != real.shape or rep.ndim != 1:
        raise ValueError(f"paired draws required, got shapes {rep.shape} and {real.shape}")
    if rep.size == 0:
        raise ValueError("need at least one draw")
    return int(np.count_nonzero(rep > real)) / rep.size


def bonferroni_adjust(p: float, k: int) -> float:
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value must lie in [0, 1], got {p}")
    if k < 1:
        raise ValueError("k must be a positive integer")
    return min(1.0, k * p)


def adjust_table(p: np.ndarray, targets: Sequence[str], n_groups: int) -> np.ndarray:
    """Bonferroni over groups: group cells times ``n_groups``; population cells are single tests."""
    out = np.array(p, dtype=float, copy=True)
    for b, target in enumerate(targets):
        if target == POPULATION:
            continue
        col = out[:, b]
        ok = ~np.isnan(col)
        col[ok] = np.minimum(1.0, n_groups * col[ok])
    return out


def parallel_map(func: Callable, items: Iterable, workers: int = 1) -> list:
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


# ---------------------------------------------------------------------------


def predictive_pvalues(group: GroupData, mu, tau2, sigma2, spec: ModelSpec, kinds: Sequence[Kind],
                       theta_mode: str, rng: np.random.Generator) -> dict[Kind, float]:
    """Steps 2-4 of the cross-validated check for one held-out group.

    ``mu, tau2, sigma2`` are hyperparameter draws that did not see this group.
    The random stream is consumed in a fixed order (prior theta, replicate
    data, conditional theta) whatever the requested kinds.
    """
    mu = np.asarray(mu, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    theta_rep = sample_prior_theta(spec, mu, tau2, rng)
    x_rep = sample_replicate_group(spec, group.n, theta_rep, sigma2, rng)
    theta_real = theta_rep
    if theta_mode == "posterior" and any(disc.depends_on(k).uses_theta for k in kinds):
        theta_real = sample_conditional_theta(spec, group, mu, tau2, sigma2, rng)
    out = {}
    for kind in kinds:
        if not kind.per_group:
            raise ValueError(f"{kind} is a population discrepancy; cross-validated checks are per group")
        rep = disc.group_batch(kind, x_rep, theta_rep, mu, tau2, sigma2)
        real = disc.group_batch(kind, group.values, theta_real, mu, tau2, sigma2)
        out[kind] = tail_probability(rep, np.broadcast_to(real, rep.shape))
    return out


def require_cv_groups(dataset: Dataset) -> None:
    if dataset.n_groups < MIN_CV_GROUPS:
        raise ProprietyError(
            f"cross-validated checks require >= {MIN_CV_GROUPS} groups under default priors "
            f"(got {dataset.n_groups})"
        )


def cv_fit(dataset: Dataset, i: int, spec: ModelSpec, cfg: CheckConfig):
    """Step 1: posterior of the hyperparameters given every group except ``i``."""
    scope = [k for k in range(dataset.n_groups) if k != i]
    return fit_posterior(dataset, scope, spec, cfg.sampler, rng=task_rng(cfg.sampler.seed, STREAM_CV, i, 0))


def cv_ppc_group(dataset: Dataset, i: int, spec: ModelSpec, cfg: CheckConfig) -> dict[Kind, float]:
    """Cross-validated predictive p-values for group ``i``, one per discrepancy."""
    if not 0 <= i < dataset.n_groups:
        raise IndexError(f"group index {i} out of range")
    require_cv_groups(dataset)
    chain = cv_fit(dataset, i, spec, cfg)
    rng = task_rng(cfg.sampler.seed, STREAM_CV, i, 1)
    return predictive_pvalues(dataset[i], chain.mu, chain.tau2, chain.sigma2, spec,
                              cfg.discrepancies, cfg.theta_mode, rng)


def report_metadata(method: str, dataset: Dataset, spec: ModelSpec, cfg: CheckConfig) -> dict:
    return {
        "method": method,
        "model": spec.to_dict(),
        "config": cfg.to_dict(),
        "groups": [{"id": g.group_id, "n": g.n, "mean": g.mean} for g in dataset],
    }


def assemble_report(method: str, dataset: Dataset, cfg: CheckConfig, per_group: Sequence[dict],
                    population: dict | None, metadata: dict) -> CheckReport:
    targets = tuple(dataset.group_ids) + ((POPULATION,) if population is not None else ())
    p = np.full((len(cfg.discrepancies), len(targets)), np.nan)
    for a, kind in enumerate(cfg.discrepancies):
        for b, cell in enumerate(per_group):
            if kind in cell:
                p[a, b] = cell[kind]
        if population is not None and kind in population:
            p[a, -1] = population[kind]
    adjusted = adjust_table(p, targets, dataset.n_groups) if cfg.adjust == "bonferroni" else None
    return CheckReport(method, cfg.discrepancies, targets, p, adjusted, metadata)


class _CvTask:
    def __init__(self, dataset, spec, cfg):
        self.dataset, self.spec, self.cfg = dataset, spec, cfg

    def __call__(self, i):
        return cv_ppc_group(self.dataset, i, self.spec, self.cfg)


def cv_ppc_report(dataset: Dataset, spec: ModelSpec, cfg: CheckConfig, workers: int = 1) -> CheckReport:
    """Cross-validated p-values for every group (no population column)."""
    require_cv_groups(dataset)
    for kind in cfg.discrepancies:
        if not kind.per_group:
            raise ValueError(f"{kind} is a population discrepancy; cross-validated checks are per group")
    per_group = parallel_map(_CvTask(dataset, spec, cfg), range(dataset.n_groups), workers)
    return assemble_report("cv", dataset, cfg, per_group, None, report_metadata("cv", dataset, spec, cfg))


def ppc_report(dataset: Dataset, spec: ModelSpec, cfg: CheckConfig) -> CheckReport:
    """Regular posterior predictive p-values per group and for the whole population.

    Replicate data reuse each draw's ``theta^m``. The data-free second-level
    measure instead replicates the group means themselves, drawing fresh
    ``theta ~ p(theta | mu^m, tau2^m)``.
    """
    chain = fit_posterior(dataset, None, spec, cfg.sampler, rng=task_rng(cfg.sampler.seed, STREAM_PPC, 0))
    rng = task_rng(cfg.sampler.seed, STREAM_PPC, 1)
    mu, tau2, sigma2, theta = chain.mu, chain.tau2, chain.sigma2, chain.theta
    x_rep = [sample_replicate_group(spec, g.n, theta[:, i], sigma2, rng) for i, g in enumerate(dataset)]
    theta_new = sample_prior_theta(spec, np.broadcast_to(mu[:, None], theta.shape), tau2[:, None], rng)
    observed = [g.values for g in dataset]

    def pair(kind, i):
        th_rep = theta_new[:, i] if kind is Kind.LEVEL2_X2 else theta[:, i]
        rep = disc.group_batch(kind, x_rep[i], th_rep, mu, tau2, sigma2)
        real = disc.group_batch(kind, observed[i], theta[:, i], mu, tau2, sigma2)
        return rep, np.broadcast_to(real, rep.shape)

    per_group = [dict() for _ in dataset]
    population = {}
    for kind in cfg.discrepancies:
        if kind.per_group:
            pairs = [pair(kind, i) for i in range(dataset.n_groups)]
            for i, (rep, real) in enumerate(pairs):
                per_group[i][kind] = tail_probability(rep, real)
            if kind.population:
                rep = np.sum([r for r, _ in pairs], axis=0)
                real = np.sum([r for _, r in pairs], axis=0)
                population[kind] = tail_probability(rep, real)
        else:
            rep = disc.population_batch(kind, x_rep, theta, mu, tau2, sigma2)
            real = disc.population_batch(kind, observed, theta, mu, tau2, sigma2)
            population[kind] = tail_probability(rep, np.broadcast_to(real, rep.shape))
    return assemble_report("ppc", dataset, cfg, per_group, population, report_metadata("ppc", dataset, spec, cfg))


def with_sampler(cfg: CheckConfig, **changes) -> CheckConfig:
    return replace(cfg, sampler=replace(cfg.sampler, **changes))
