"""Simulation studies of p-value distributions and power."""

from __future__ import annotations

import math
import traceback
from dataclasses import asdict, dataclass, field, replace
from typing import Union

import numpy as np
from scipy import stats

from .checks import POPULATION, CheckConfig, CheckReport, cv_ppc_report, parallel_map, ppc_report
from .discrepancy import Kind, parse_kind
from .loo import cv_ppc_fast
from .model import Dataset, GroupData, ModelSpec
from .sampler import STREAM_SIM, derive_seed, task_rng

METHODS = ("ppc", "cv", "cv-fast")


@dataclass(frozen=True)
class ShiftGroup:
    """Move group ``group``'s mean by ``delta`` second-level standard deviations."""

    group: int
    delta: float


@dataclass(frozen=True)
class InflateGroup:
    """Multiply the within-group standard deviation of ``group`` by ``factor``."""

    group: int
    factor: float


@dataclass(frozen=True)
class HeavyTailLevel2:
    """Draw every group mean from a t distribution with ``nu`` degrees of freedom."""

    nu: float


@dataclass(frozen=True)
class PlantOutlier:
    """Move the first observation of ``group`` by ``delta`` within-group standard deviations."""

    group: int
    delta: float


Perturbation = Union[ShiftGroup, InflateGroup, HeavyTailLevel2, PlantOutlier]

PERTURBATIONS = {
    "shift": ShiftGroup,
    "inflate": InflateGroup,
    "heavy_tail": HeavyTailLevel2,
    "outlier": PlantOutlier,
}


@dataclass(frozen=True)
class ScenarioSpec:
    n_groups: int = 5
    n_per_group: int | tuple[int, ...] = 8
    mu0: float = 0.0
    tau0_sq: float = 1.0
    sigma0_sq: float = 1.0
    perturbation: Perturbation | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_groups < 1:
            raise ValueError("n_groups must be positive")
        sizes = self.sizes
        if len(sizes) != self.n_groups or min(sizes) < 1:
            raise ValueError("n_per_group must give a positive size for every group")
        if not (self.tau0_sq > 0 and self.sigma0_sq > 0):
            raise ValueError("scenario scales must be positive")
        p = self.perturbation
        if isinstance(p, (ShiftGroup, InflateGroup, PlantOutlier)) and not 0 <= p.group < self.n_groups:
            raise ValueError(f"perturbed group index {p.group} out of range")
        if isinstance(p, InflateGroup) and not p.factor > 0:
            raise ValueError("inflation factor must be positive")
        if isinstance(p, HeavyTailLevel2) and not p.nu > 0:
            raise ValueError("heavy-tail degrees of freedom must be positive")

    @property
    def sizes(self) -> tuple[int, ...]:
        if isinstance(self.n_per_group, int):
            return (self.n_per_group,) * self.n_groups
        return tuple(int(n) for n in self.n_per_group)

    def to_dict(self) -> dict:
        out = asdict(self)
        p = self.perturbation
        out["perturbation"] = None if p is None else {
            "type": next(k for k, v in PERTURBATIONS.items() if isinstance(p, v)), **asdict(p)}
        return out


def simulate_dataset(scenario: ScenarioSpec, replicate_index: int) -> Dataset:
    """One dataset from the two-level model, with the scenario's perturbation applied."""
    rng = task_rng(scenario.seed, STREAM_SIM, replicate_index)
    p = scenario.perturbation
    tau0 = math.sqrt(scenario.tau0_sq)
    sigma0 = math.sqrt(scenario.sigma0_sq)
    if isinstance(p, HeavyTailLevel2):
        z_theta = rng.standard_t(p.nu, scenario.n_groups)
    else:
        z_theta = rng.standard_normal(scenario.n_groups)
    theta = scenario.mu0 + tau0 * z_theta
    if isinstance(p, ShiftGroup):
        theta[p.group] += p.delta * tau0
    groups = []
    for i, n in enumerate(scenario.sizes):
        scale = sigma0 * (p.factor if isinstance(p, InflateGroup) and p.group == i else 1.0)
        x = theta[i] + scale * rng.standard_normal(n)
        if isinstance(p, PlantOutlier) and p.group == i:
            x[0] += p.delta * sigma0
        groups.append(GroupData(f"g{i + 1}", x))
    return Dataset(tuple(groups))


@dataclass(eq=False)
class PValueSample:
    """p-values indexed ``[replicate, target, kind]``; ``nan`` where absent or failed."""

    p: np.ndarray
    targets: tuple[str, ...]
    kinds: tuple[Kind, ...]
    method: str
    scenario: ScenarioSpec
    failures: dict[int, str] = field(default_factory=dict)

    @property
    def n_reps(self) -> int:
        return self.p.shape[0]

    @property
    def group_targets(self) -> tuple[str, ...]:
        return tuple(t for t in self.targets if t != POPULATION)

    def select(self, target: str | int | None, kind: Kind | str) -> np.ndarray:
        """p-values for one cell across replicates; ``target=None`` pools every group.

        Integer targets are 0-based group indices.
        """
        b = self.kinds.index(parse_kind(kind))
        if target is None:
            cols = [self.targets.index(t) for t in self.group_targets]
            values = self.p[:, cols, b].ravel()
        else:
            if isinstance(target, int):
                target = self.group_targets[target]
            values = self.p[:, self.targets.index(target), b]
        return values[~np.isnan(values)]


def run_method(method: str, dataset: Dataset, spec: ModelSpec, cfg: CheckConfig) -> CheckReport:
    if method == "ppc":
        return ppc_report(dataset, spec, cfg)
    if method == "cv":
        return cv_ppc_report(dataset, spec, cfg)
    if method == "cv-fast":
        return cv_ppc_fast(dataset, spec, cfg)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


class _Replicate:
    def __init__(self, scenario, method, spec, cfg):
        self.scenario, self.method, self.spec, self.cfg = scenario, method, spec, cfg

    def __call__(self, r: int):
        try:
            dataset = simulate_dataset(self.scenario, r)
            seed = derive_seed(self.cfg.sampler.seed, r)
            cfg = CheckConfig(self.cfg.discrepancies, self.cfg.theta_mode,
                              replace(self.cfg.sampler, seed=seed), "none")
            return run_method(self.method, dataset, self.spec, cfg), None
        except Exception as exc:  # failure isolation: one bad replicate must not end the study
            return None, "".join(traceback.format_exception_only(type(exc), exc)).strip()


def calibration_run(scenario: ScenarioSpec, n_reps: int, method: str, spec: ModelSpec,
                    cfg: CheckConfig, workers: int = 1) -> PValueSample:
    """Simulate ``n_reps`` datasets and collect the chosen check's p-values for each."""
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    targets = tuple(f"g{i + 1}" for i in range(scenario.n_groups))
    if method == "ppc":
        targets += (POPULATION,)
    kinds = cfg.discrepancies
    p = np.full((n_reps, len(targets), len(kinds)), np.nan)
    failures = {}
    results = parallel_map(_Replicate(scenario, method, spec, cfg), range(n_reps), workers)
    for r, (report, error) in enumerate(results):
        if report is None:
            failures[r] = error
            continue
        for a, kind in enumerate(report.kinds):
            for b, target in enumerate(report.targets):
                p[r, targets.index(target), kinds.index(kind)] = report.p[a, b]
    return PValueSample(p, targets, kinds, method, scenario, failures)


def uniformity_stats(sample: PValueSample, target: str | int | None, kind: Kind | str) -> tuple[float, float, float]:
    """Kolmogorov-Smirnov distance from Uniform(0, 1), mean and variance of a cell's p-values."""
    values = sample.select(target, kind)
    if values.size < 2:
        raise ValueError("need at least 2 p-values")
    ks = float(stats.kstest(values, "uniform").statistic)
    return ks, float(values.mean()), float(values.var())


def power_estimate(sample: PValueSample, target: str | int | None, kind: Kind | str, alpha: float,
                   adjust: str = "none", k: int | None = None) -> float:
    """Fraction of replicates with ``p < alpha``, optionally after Bonferroni over ``k`` tests.

    ``k`` defaults to the number of groups.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    values = sample.select(target, kind)
    if adjust == "bonferroni":
        values = np.minimum(1.0, (k or len(sample.group_targets)) * values)
    elif adjust != "none":
        raise ValueError(f"unknown adjustment {adjust!r}")
    if values.size == 0:
        raise ValueError("no p-values for this cell")
    return float(np.mean(values < alpha))


def summarize(sample: PValueSample, alpha: float = 0.05) -> list[dict]:
    """Per-cell KS distance, mean, variance and power (raw and Bonferroni)."""
    rows = []
    for target in sample.targets:
        for kind in sample.kinds:
            values = sample.select(target, kind)
            if values.size == 0:
                continue
            row = {"target": target, "kind": kind.value, "n": int(values.size)}
            if values.size >= 2:
                row["ks"], row["mean"], row["variance"] = uniformity_stats(sample, target, kind)
            else:
                row["ks"], row["mean"], row["variance"] = None, float(values[0]), None
            row["power"] = power_estimate(sample, target, kind, alpha)
            if target != POPULATION:
                row["power_bonferroni"] = power_estimate(sample, target, kind, alpha, adjust="bonferroni")
            rows.append(row)
    return rows


def write_matrix(sample: PValueSample) -> str:
    """Wide delimited matrix: one row per replicate, one column per (target, kind) cell."""
    cells = [(b, t, a, k) for b, t in enumerate(sample.targets) for a, k in enumerate(sample.kinds)]
    header = ["replicate", "status"] + [f"{t}:{k.value}" for _, t, _, k in cells]
    lines = ["\t".join(header)]
    for r in range(sample.n_reps):
        status = "failed" if r in sample.failures else "ok"
        values = ["" if math.isnan(v) else repr(float(v)) for v in (sample.p[r, b, a] for b, _, a, _ in cells)]
        lines.append("\t".join([str(r), status] + values))
    return "\n".join(lines) + "\n"
