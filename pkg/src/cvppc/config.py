"""Run configuration files (INI format).

A check run::

    [data]
    path = groups.csv

    [model]
    level1 = t
    nu1 = 3
    level2 = t
    nu2 = 2.2

    [check]
    method = cv
    discrepancies = overall_x2, level1_x2, level2_x2
    adjust = bonferroni

    [sampler]
    m_draws = 10000
    seed = 17

    [output]
    path = report.tsv
    format = table

A calibration run replaces ``[data]`` with ``[scenario]`` and adds a
``[calibration]`` section; see the README for every key. Relative paths are
resolved against the directory holding the config file.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from pathlib import Path

from .calibration import METHODS, PERTURBATIONS, ScenarioSpec
from .checks import PPC_TABLE_KINDS, TABLE_KINDS, CheckConfig
from .discrepancy import Kind, parse_kind
from .model import ModelSpec
from .sampler import SamplerConfig

OUTPUT_FORMATS = ("table", "structured", "both")

_KEYS = {
    "data": {"path"},
    "model": {"level1", "nu1", "level2", "nu2"},
    "check": {"method", "discrepancies", "theta_mode", "adjust", "workers", "ess_threshold", "mc_points"},
    "sampler": {"m_draws", "burn_in", "thin", "seed"},
    "output": {"path", "format", "matrix", "summary"},
    "scenario": {"n_groups", "n_per_group", "mu0", "tau0_sq", "sigma0_sq", "perturbation",
                 "group", "delta", "factor", "nu", "seed"},
    "calibration": {"method", "n_reps", "alpha", "workers"},
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CheckRun:
    data_path: Path
    spec: ModelSpec
    method: str
    check: CheckConfig
    output_path: Path
    output_format: str
    workers: int = 1
    ess_threshold: float | None = None
    mc_points: int = 256


@dataclass(frozen=True)
class CalibrationRun:
    scenario: ScenarioSpec
    n_reps: int
    method: str
    spec: ModelSpec
    check: CheckConfig
    alpha: float
    matrix_path: Path
    summary_path: Path
    workers: int = 1


def _read(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with path.open(encoding="utf-8") as handle:
            parser.read_file(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown section [{section}]")
        unknown = set(parser[section]) - _KEYS[section]
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    return parser


def _get(parser, section, key, convert=str, default=None, required=False):
    if not parser.has_option(section, key):
        if required:
            raise ConfigError(f"missing required key '{key}' in [{section}]")
        return default
    raw = parser.get(section, key).strip()
    try:
        return convert(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}") from exc


def _model(parser) -> ModelSpec:
    nus = []
    for level, default_nu in (("1", 3.0), ("2", 2.2)):
        kind = _get(parser, "model", f"level{level}", str, "normal").lower()
        if kind not in ("normal", "t"):
            raise ConfigError(f"[model] level{level} must be 'normal' or 't', got {kind!r}")
        nus.append(_get(parser, "model", f"nu{level}", float, default_nu) if kind == "t" else None)
    try:
        return ModelSpec(*nus)
    except ValueError as exc:
        raise ConfigError(f"[model] {exc}") from exc


def _sampler(parser) -> SamplerConfig:
    defaults = SamplerConfig()
    try:
        return SamplerConfig(
            m_draws=_get(parser, "sampler", "m_draws", int, defaults.m_draws),
            burn_in=_get(parser, "sampler", "burn_in", int, defaults.burn_in),
            thin=_get(parser, "sampler", "thin", int, defaults.thin),
            seed=_get(parser, "sampler", "seed", int, defaults.seed),
        )
    except ValueError as exc:
        raise ConfigError(f"[sampler] {exc}") from exc


def _kinds(raw: str) -> tuple[Kind, ...]:
    return tuple(parse_kind(name) for name in raw.split(",") if name.strip())


def _check_config(parser, method: str, sampler: SamplerConfig) -> CheckConfig:
    default = PPC_TABLE_KINDS if method == "ppc" else TABLE_KINDS
    kinds = _get(parser, "check", "discrepancies", _kinds, default)
    if method != "ppc":
        bad = [k.value for k in kinds if not k.per_group]
        if bad:
            raise ConfigError(f"population discrepancies not available for method {method}: {', '.join(bad)}")
    try:
        return CheckConfig(
            discrepancies=kinds,
            theta_mode=_get(parser, "check", "theta_mode", str, "posterior"),
            sampler=sampler,
            adjust=_get(parser, "check", "adjust", str, "none"),
        )
    except ValueError as exc:
        raise ConfigError(f"[check] {exc}") from exc


def _method(parser, section) -> str:
    method = _get(parser, section, "method", str, "cv")
    if method not in METHODS:
        raise ConfigError(f"[{section}] method must be one of {', '.join(METHODS)}, got {method!r}")
    return method


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise ValueError("must be a positive integer")
    return value


def load_check_run(path: str | Path) -> CheckRun:
    path = Path(path)
    parser = _read(path)
    base = path.parent
    method = _method(parser, "check")
    check = _check_config(parser, method, _sampler(parser))
    fmt = _get(parser, "output", "format", str, "table")
    if fmt not in OUTPUT_FORMATS:
        raise ConfigError(f"[output] format must be one of {', '.join(OUTPUT_FORMATS)}, got {fmt!r}")
    return CheckRun(
        data_path=base / _get(parser, "data", "path", str, required=True),
        spec=_model(parser),
        method=method,
        check=check,
        output_path=base / _get(parser, "output", "path", str, required=True),
        output_format=fmt,
        workers=_get(parser, "check", "workers", _positive_int, 1),
        ess_threshold=_get(parser, "check", "ess_threshold", float, None),
        mc_points=_get(parser, "check", "mc_points", _positive_int, 256),
    )


def _scenario(parser) -> ScenarioSpec:
    n_groups = _get(parser, "scenario", "n_groups", _positive_int, 5)
    raw_sizes = _get(parser, "scenario", "n_per_group", str, "8")
    try:
        sizes = [int(s) for s in raw_sizes.split(",") if s.strip()]
    except ValueError as exc:
        raise ConfigError(f"[scenario] n_per_group = {raw_sizes!r}: {exc}") from exc
    n_per_group = sizes[0] if len(sizes) == 1 else tuple(sizes)

    name = _get(parser, "scenario", "perturbation", str, "none").lower()
    if name == "none":
        perturbation = None
    elif name not in PERTURBATIONS:
        raise ConfigError(
            f"[scenario] unknown perturbation {name!r}; expected none, {', '.join(PERTURBATIONS)}"
        )
    else:
        cls = PERTURBATIONS[name]
        args = {}
        for field_name in cls.__dataclass_fields__:
            if field_name == "group":
                # 1-based in config files
                args["group"] = _get(parser, "scenario", "group", int, required=True) - 1
            else:
                args[field_name] = _get(parser, "scenario", field_name, float, required=True)
        perturbation = cls(**args)
    try:
        return ScenarioSpec(
            n_groups=n_groups,
            n_per_group=n_per_group,
            mu0=_get(parser, "scenario", "mu0", float, 0.0),
            tau0_sq=_get(parser, "scenario", "tau0_sq", float, 1.0),
            sigma0_sq=_get(parser, "scenario", "sigma0_sq", float, 1.0),
            perturbation=perturbation,
            seed=_get(parser, "scenario", "seed", int, 0),
        )
    except ValueError as exc:
        raise ConfigError(f"[scenario] {exc}") from exc


def load_calibration_run(path: str | Path) -> CalibrationRun:
    path = Path(path)
    parser = _read(path)
    base = path.parent
    method = _method(parser, "calibration")
    alpha = _get(parser, "calibration", "alpha", float, 0.05)
    if not 0 < alpha < 1:
        raise ConfigError("[calibration] alpha must lie in (0, 1)")
    return CalibrationRun(
        scenario=_scenario(parser),
        n_reps=_get(parser, "calibration", "n_reps", _positive_int, 200),
        method=method,
        spec=_model(parser),
        check=_check_config(parser, method, _sampler(parser)),
        alpha=alpha,
        matrix_path=base / _get(parser, "output", "matrix", str, required=True),
        summary_path=base / _get(parser, "output", "summary", str, required=True),
        workers=_get(parser, "calibration", "workers", _positive_int, 1),
    )


def config_kind(path: str | Path) -> str:
    """``"calibrate"`` if the file describes a simulation study, else ``"check"``."""
    parser = _read(Path(path))
    return "calibrate" if parser.has_section("scenario") or parser.has_section("calibration") else "check"
