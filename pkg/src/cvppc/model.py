"""Grouped data, two-level model definitions and their log densities."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaln

LOG_2PI = math.log(2.0 * math.pi)


class DataError(ValueError):
    """Raised when observations cannot form a valid dataset."""


@dataclass(frozen=True, eq=False)
class GroupData:
    group_id: str
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 1 or values.size == 0:
            raise DataError(f"group {self.group_id!r} needs at least one observation")
        if not np.all(np.isfinite(values)):
            raise DataError(f"group {self.group_id!r} contains a non-finite value")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def ss_within(self) -> float:
        """Sum of squared deviations about the group mean."""
        return float(np.sum((self.values - self.values.mean()) ** 2))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Ordered collection of groups; the position of a group is its index ``i``."""

    groups: tuple[GroupData, ...]

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(self.groups))
        ids = [g.group_id for g in self.groups]
        if len(set(ids)) != len(ids):
            raise DataError("group ids must be unique")
        if not self.groups:
            raise DataError("dataset has no groups")

    def __len__(self) -> int:
        return len(self.groups)

    def __getitem__(self, i: int) -> GroupData:
        return self.groups[i]

    def __iter__(self):
        return iter(self.groups)

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def group_ids(self) -> list[str]:
        return [g.group_id for g in self.groups]

    @property
    def sizes(self) -> np.ndarray:
        return np.array([g.n for g in self.groups], dtype=int)

    @property
    def means(self) -> np.ndarray:
        return np.array([g.mean for g in self.groups])

    @property
    def n_obs(self) -> int:
        return int(self.sizes.sum())

    def subset(self, indices: Iterable[int]) -> "Dataset":
        return Dataset(tuple(self.groups[i] for i in indices))

    def drop(self, i: int) -> "Dataset":
        if not 0 <= i < self.n_groups:
            raise IndexError(f"group index {i} out of range")
        return self.subset(k for k in range(self.n_groups) if k != i)

    def to_dict(self) -> dict:
        return {g.group_id: g.values.tolist() for g in self.groups}

    @classmethod
    def from_groups(cls, groups: dict[str, Sequence[float]] | Sequence[Sequence[float]]) -> "Dataset":
        """Build from ``{id: values}`` or from a list of value lists (ids ``g1``, ``g2``, ...)."""
        if isinstance(groups, dict):
            items = groups.items()
        else:
            items = ((f"g{k + 1}", v) for k, v in enumerate(groups))
        return cls(tuple(GroupData(str(gid), np.asarray(v, dtype=float)) for gid, v in items))


def validate_dataset(raw: Iterable[tuple[str, float]]) -> Dataset:
    """Group ``(group_id, value)`` rows into a :class:`Dataset`.

    Groups are ordered by first appearance. Repeated ids are the normal case
    (one row per observation).
    """
    buckets: dict[str, list[float]] = {}
    for row_number, (gid, value) in enumerate(raw, start=1):
        try:
            x = float(value)
        except (TypeError, ValueError) as exc:
            raise DataError(f"row {row_number}: value {value!r} is not a number") from exc
        if not math.isfinite(x):
            raise DataError(f"row {row_number}: non-finite value {value!r}")
        buckets.setdefault(str(gid), []).append(x)
    if not buckets:
        raise DataError("no observations")
    return Dataset(tuple(GroupData(gid, np.array(v)) for gid, v in buckets.items()))


def read_dataset(path: str | Path) -> Dataset:
    """Read a ``group,value`` CSV file with a header row."""
    path = Path(path)
    try:
        handle = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc.strerror}") from exc
    with handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip().lower() for h in header]
        if header[:2] != ["group", "value"] or len(header) != 2:
            raise DataError(f"{path}: header must be 'group,value', got {','.join(header)!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            rows.append((row[0].strip(), row[1].strip()))
    try:
        return validate_dataset(rows)
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["group", "value"])
        for g in dataset:
            for x in g.values:
                writer.writerow([g.group_id, repr(float(x))])


@dataclass(frozen=True)
class ModelSpec:
    """Distribution of each level: ``None`` for normal, else Student-t degrees of freedom.

    ``sigma2`` and ``tau2`` are always squared *scale* parameters; under a
    t level the variance is ``scale2 * nu / (nu - 2)``.
    """

    nu1: float | None = None
    nu2: float | None = None

    def __post_init__(self):
        for name in ("nu1", "nu2"):
            nu = getattr(self, name)
            if nu is not None:
                nu = float(nu)
                if not nu > 2.0 or not math.isfinite(nu):
                    raise ValueError(f"{name} must be a finite value > 2 (finite variance), got {nu}")
                object.__setattr__(self, name, nu)

    @classmethod
    def normal(cls) -> "ModelSpec":
        return cls()

    @classmethod
    def student_t(cls, nu1: float | None = 3.0, nu2: float | None = 2.2) -> "ModelSpec":
        return cls(nu1, nu2)

    @property
    def t1(self) -> bool:
        return self.nu1 is not None

    @property
    def t2(self) -> bool:
        return self.nu2 is not None

    @property
    def is_normal(self) -> bool:
        return not (self.t1 or self.t2)

    def to_dict(self) -> dict:
        return {
            "level1": "t" if self.t1 else "normal",
            "nu1": self.nu1,
            "level2": "t" if self.t2 else "normal",
            "nu2": self.nu2,
        }


@dataclass(frozen=True, eq=False)
class ParamState:
    mu: float
    tau2: float
    sigma2: float
    thetas: np.ndarray
    lambda1: np.ndarray | None = None
    lambda2: np.ndarray | None = None

    def __post_init__(self):
        if not (self.tau2 > 0 and self.sigma2 > 0):
            raise ValueError("tau2 and sigma2 must be positive")
        for name in ("lambda1", "lambda2"):
            lam = getattr(self, name)
            if lam is not None and not np.all(np.asarray(lam) > 0):
                raise ValueError(f"{name} latents must be strictly positive")


def normal_logpdf(x, loc, scale2):
    x = np.asarray(x, dtype=float)
    return -0.5 * (LOG_2PI + np.log(scale2)) - 0.5 * (x - loc) ** 2 / scale2


def t_logpdf(x, loc, scale2, nu):
    x = np.asarray(x, dtype=float)
    const = gammaln(0.5 * (nu + 1.0)) - gammaln(0.5 * nu) - 0.5 * math.log(nu * math.pi)
    z2 = (x - loc) ** 2 / scale2
    return const - 0.5 * np.log(scale2) - 0.5 * (nu + 1.0) * np.log1p(z2 / nu)


def level_logpdf(x, loc, scale2, nu: float | None):
    if nu is None:
        return normal_logpdf(x, loc, scale2)
    return t_logpdf(x, loc, scale2, nu)


def loglik_level1(spec: ModelSpec, group: GroupData, theta: float, sigma2: float) -> float:
    """Log density of a group's observations given its mean ``theta``."""
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be positive, got {sigma2}")
    return float(np.sum(level_logpdf(group.values, theta, sigma2, spec.nu1)))


def loglik_level2(spec: ModelSpec, theta: float, mu: float, tau2: float) -> float:
    """Log density of a group mean ``theta`` under the second level."""
    if not tau2 > 0:
        raise ValueError(f"tau2 must be positive, got {tau2}")
    return float(level_logpdf(theta, mu, tau2, spec.nu2))
