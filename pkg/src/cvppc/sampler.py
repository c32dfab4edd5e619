"""Gibbs sampler for the two-level model under the flat/Jeffreys-type improper priors.

Priors: ``p(mu) ∝ 1``, ``p(sigma2) ∝ 1/sigma2``, ``p(tau) ∝ 1`` (i.e.
``p(tau2) ∝ tau2**-0.5``). Student-t levels are handled by the usual
normal/gamma scale-mixture augmentation, so every full conditional is
conjugate: normal for ``theta_i`` and ``mu``, inverse-gamma for ``sigma2``
and ``tau2``, gamma for the latent precision multipliers.

The sweep itself runs in a numba kernel that consumes variates generated in
blocks up front. All gamma shapes are constant over a chain, so the random
stream depends only on the seed, the data sizes and the model, never on the
values drawn.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numba
import numpy as np

from .model import Dataset, GroupData, ModelSpec, ParamState

CHUNK = 2048

# stream tags for task_rng
STREAM_PPC = 1
STREAM_CV = 2
STREAM_FAST = 3
STREAM_SIM = 4
STREAM_CALIBRATION = 5


class ProprietyError(ValueError):
    """The requested fit would have an improper posterior under the default priors."""


class DegenerateDataError(ValueError):
    """Data with no spread; the posterior collapses to a point mass."""


class ProprietyWarning(UserWarning):
    pass


def task_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for the task identified by ``key`` under ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)).generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class SamplerConfig:
    m_draws: int = 10_000
    burn_in: int = 2_000
    thin: int = 1
    seed: int = 0
    init: str = "moments"
    # test mode: pin the variance components at known values
    fixed_sigma2: float | None = None
    fixed_tau2: float | None = None

    def __post_init__(self):
        if self.m_draws < 100:
            raise ValueError(f"m_draws must be >= 100, got {self.m_draws}")
        if self.burn_in < 0:
            raise ValueError("burn_in must be non-negative")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if self.init != "moments":
            raise ValueError(f"unknown init rule {self.init!r}")
        for name in ("fixed_sigma2", "fixed_tau2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class PosteriorChain:
    """Kept draws, stored column-wise. ``theta[:, k]`` belongs to group ``scope[k]``."""

    mu: np.ndarray
    tau2: np.ndarray
    sigma2: np.ndarray
    theta: np.ndarray
    lambda1: np.ndarray | None
    lambda2: np.ndarray | None
    scope: tuple[int, ...]
    config: SamplerConfig
    spec: ModelSpec

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, m: int) -> ParamState:
        return ParamState(
            mu=float(self.mu[m]),
            tau2=float(self.tau2[m]),
            sigma2=float(self.sigma2[m]),
            thetas=self.theta[m].copy(),
            lambda1=None if self.lambda1 is None else self.lambda1[m].copy(),
            lambda2=None if self.lambda2 is None else self.lambda2[m].copy(),
        )

    @property
    def draws(self) -> list[ParamState]:
        return [self[m] for m in range(len(self))]

    def same_draws(self, other: "PosteriorChain") -> bool:
        """Bit-for-bit equality of every stored draw."""

        def eq(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return all(
            eq(getattr(self, f), getattr(other, f))
            for f in ("mu", "tau2", "sigma2", "theta", "lambda1", "lambda2")
        )


# ---------------------------------------------------------------------------
# Full conditionals (reference implementations with validation)


def cond_theta_params(group: GroupData, mu: float, tau2: float, sigma2: float,
                      lambda1=None, lambda2: float | None = None) -> tuple[float, float]:
    """Mean and variance of the normal full conditional of one group mean."""
    if not (tau2 > 0 and sigma2 > 0):
        raise ValueError("tau2 and sigma2 must be positive")
    x = group.values
    lam1 = np.ones_like(x) if lambda1 is None else np.asarray(lambda1, dtype=float)
    lam2 = 1.0 if lambda2 is None else float(lambda2)
    if lam1.shape != x.shape:
        raise ValueError("lambda1 must have one entry per observation")
    if np.any(lam1 <= 0) or lam2 <= 0:
        raise ValueError("latent scales must be positive")
    w = lam1 / sigma2
    prior_prec = lam2 / tau2
    prec = w.sum() + prior_prec
    return float((np.dot(w, x) + prior_prec * mu) / prec), float(1.0 / prec)


def cond_mu_params(thetas, tau2: float, lambda2=None) -> tuple[float, float]:
    """Normal full conditional of ``mu`` under its flat prior."""
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size == 0:
        raise ValueError("need at least one group mean")
    if not tau2 > 0:
        raise ValueError("tau2 must be positive")
    lam2 = np.ones_like(thetas) if lambda2 is None else np.asarray(lambda2, dtype=float)
    total = lam2.sum()
    return float(np.dot(lam2, thetas) / total), float(tau2 / total)


def cond_sigma2_draw(groups: Sequence[GroupData], thetas, rng: np.random.Generator, lambda1=None) -> float:
    """Draw ``sigma2 ~ InvGamma(N/2, SS/2)`` with ``SS`` the (weighted) residual sum of squares."""
    x = np.concatenate([g.values for g in groups])
    theta_obs = np.repeat(np.asarray(thetas, dtype=float), [g.n for g in groups])
    lam1 = np.ones_like(x) if lambda1 is None else np.asarray(lambda1, dtype=float)
    ss = float(np.dot(lam1, (x - theta_obs) ** 2))
    if ss == 0.0:
        raise DegenerateDataError("residual sum of squares is exactly zero (point-mass fit)")
    return 0.5 * ss / rng.standard_gamma(0.5 * x.size)


def cond_tau2_draw(thetas, mu: float, rng: np.random.Generator, lambda2=None) -> float:
    """Draw ``tau2 ~ InvGamma((I-1)/2, sum lambda2 (theta - mu)^2 / 2)``."""
    thetas = np.asarray(thetas, dtype=float)
    if thetas.size < 2:
        raise ProprietyError("tau2 conditional needs at least 2 groups")
    lam2 = np.ones_like(thetas) if lambda2 is None else np.asarray(lambda2, dtype=float)
    rate = 0.5 * float(np.dot(lam2, (thetas - mu) ** 2))
    if rate == 0.0:
        raise DegenerateDataError("second-level residuals are exactly zero")
    return rate / rng.standard_gamma(0.5 * (thetas.size - 1))


def cond_lambda_draws(spec: ModelSpec, groups: Sequence[GroupData], state: ParamState,
                      rng: np.random.Generator) -> tuple[np.ndarray | None, np.ndarray | None]:
    """Latent precision multipliers for the Student-t levels (``None`` for a normal level)."""
    if spec.is_normal:
        raise ValueError("latent scales exist only when a level is Student-t")
    thetas = np.asarray(state.thetas, dtype=float)
    lam1 = lam2 = None
    if spec.t1:
        x = np.concatenate([g.values for g in groups])
        r2 = (x - np.repeat(thetas, [g.n for g in groups])) ** 2 / state.sigma2
        lam1 = rng.standard_gamma(0.5 * (spec.nu1 + 1.0), x.size) / (0.5 * (spec.nu1 + r2))
    if spec.t2:
        r2 = (thetas - state.mu) ** 2 / state.tau2
        lam2 = rng.standard_gamma(0.5 * (spec.nu2 + 1.0), thetas.size) / (0.5 * (spec.nu2 + r2))
    return lam1, lam2


# ---------------------------------------------------------------------------
# Chain


@numba.njit(cache=True)
def _run_sweeps(x, starts, t1, nu1, t2, nu2, free_sigma2, free_tau2,
                theta, params, lam1, lam2,
                z_theta, z_mu, g_tau, g_sigma, g_l1, g_l2,
                out_params, out_theta, out_l1, out_l2):
    """Run ``z_mu.size`` sweeps in place. Sweep order: latents, thetas, mu, tau2, sigma2.

    ``params`` holds ``(mu, tau2, sigma2)``. Returns 0, or 1/2 when the tau2 /
    sigma2 rate is exactly zero.
    """
    n_sweeps = z_mu.shape[0]
    n_groups = theta.shape[0]
    mu = params[0]
    tau2 = params[1]
    sigma2 = params[2]
    for s in range(n_sweeps):
        if t1:
            for i in range(n_groups):
                for k in range(starts[i], starts[i + 1]):
                    r = x[k] - theta[i]
                    lam1[k] = g_l1[s, k] / (0.5 * (nu1 + r * r / sigma2))
        if t2:
            for i in range(n_groups):
                r = theta[i] - mu
                lam2[i] = g_l2[s, i] / (0.5 * (nu2 + r * r / tau2))
        for i in range(n_groups):
            sw = 0.0
            swx = 0.0
            for k in range(starts[i], starts[i + 1]):
                sw += lam1[k]
                swx += lam1[k] * x[k]
            prior_prec = lam2[i] / tau2
            prec = sw / sigma2 + prior_prec
            mean = (swx / sigma2 + prior_prec * mu) / prec
            theta[i] = mean + z_theta[s, i] / np.sqrt(prec)
        sl = 0.0
        slt = 0.0
        for i in range(n_groups):
            sl += lam2[i]
            slt += lam2[i] * theta[i]
        mu = slt / sl + np.sqrt(tau2 / sl) * z_mu[s]
        if free_tau2:
            rate = 0.0
            for i in range(n_groups):
                r = theta[i] - mu
                rate += lam2[i] * r * r
            if rate == 0.0:
                return 1
            tau2 = 0.5 * rate / g_tau[s]
        if free_sigma2:
            ss = 0.0
            for i in range(n_groups):
                for k in range(starts[i], starts[i + 1]):
                    r = x[k] - theta[i]
                    ss += lam1[k] * r * r
            if ss == 0.0:
                return 2
            sigma2 = 0.5 * ss / g_sigma[s]
        out_params[s, 0] = mu
        out_params[s, 1] = tau2
        out_params[s, 2] = sigma2
        for i in range(n_groups):
            out_theta[s, i] = theta[i]
            if t2:
                out_l2[s, i] = lam2[i]
        if t1:
            for k in range(x.shape[0]):
                out_l1[s, k] = lam1[k]
    params[0] = mu
    params[1] = tau2
    params[2] = sigma2
    return 0


def _check_scope(dataset: Dataset, scope, cfg: SamplerConfig) -> tuple[int, ...]:
    scope = tuple(range(dataset.n_groups)) if scope is None else tuple(int(i) for i in scope)
    if len(set(scope)) != len(scope) or any(not 0 <= i < dataset.n_groups for i in scope):
        raise ValueError(f"invalid group scope {scope}")
    n_scope = len(scope)
    if n_scope < 3:
        raise ProprietyError(
            f"posterior is improper with {n_scope} group(s): the flat prior on tau requires at least 3 groups"
        )
    if sum(dataset[i].n for i in scope) < 3:
        raise ProprietyError("posterior is improper with fewer than 3 observations")
    if n_scope == 3 and cfg.fixed_tau2 is None:
        warnings.warn(
            "fit with only 3 groups: tau2 conditional has shape 1 and very heavy tails",
            ProprietyWarning,
            stacklevel=3,
        )
    return scope


def _initial_state(groups: Sequence[GroupData]) -> tuple[np.ndarray, float, float, float]:
    means = np.array([g.mean for g in groups])
    x = np.concatenate([g.values for g in groups])
    n_obs = x.size
    ssw = sum(g.ss_within for g in groups)
    sigma2 = ssw / (n_obs - len(groups)) if n_obs > len(groups) else 0.0
    tau2 = float(np.var(means, ddof=1)) if len(groups) > 1 else 0.0
    return means, float(x.mean()), tau2 if tau2 > 0 else 1.0, sigma2 if sigma2 > 0 else 1.0


def fit_posterior(dataset: Dataset, scope: Sequence[int] | None = None, spec: ModelSpec = ModelSpec(),
                  cfg: SamplerConfig = SamplerConfig(), rng: np.random.Generator | None = None) -> PosteriorChain:
    """Gibbs-sample the posterior given the groups in ``scope`` (default: all).

    Runs ``burn_in + m_draws * thin`` sweeps and keeps every ``thin``-th state
    after burn-in. Reproducible: with ``rng=None`` the stream is seeded from
    ``cfg.seed``; fitting a scope of a dataset is identical to fitting the
    dataset reduced to that scope.
    """
    scope = _check_scope(dataset, scope, cfg)
    groups = [dataset[i] for i in scope]
    x = np.ascontiguousarray(np.concatenate([g.values for g in groups]))
    if cfg.fixed_sigma2 is None and np.all(x == x[0]):
        raise DegenerateDataError("all observations are identical")
    if rng is None:
        rng = task_rng(cfg.seed)
    n_groups, n_obs = len(groups), x.size
    starts = np.zeros(n_groups + 1, dtype=np.int64)
    starts[1:] = np.cumsum([g.n for g in groups])

    theta, mu, tau2, sigma2 = _initial_state(groups)
    if cfg.fixed_tau2 is not None:
        tau2 = cfg.fixed_tau2
    if cfg.fixed_sigma2 is not None:
        sigma2 = cfg.fixed_sigma2
    theta = theta.astype(float).copy()
    params = np.array([mu, tau2, sigma2])
    lam1 = np.ones(n_obs)
    lam2 = np.ones(n_groups)
    t1, t2 = spec.t1, spec.t2
    nu1 = spec.nu1 or 0.0
    nu2 = spec.nu2 or 0.0
    free_tau2 = cfg.fixed_tau2 is None
    free_sigma2 = cfg.fixed_sigma2 is None

    total = cfg.burn_in + cfg.m_draws * cfg.thin
    m = cfg.m_draws
    out_mu, out_tau2, out_sigma2 = np.empty(m), np.empty(m), np.empty(m)
    out_theta = np.empty((m, n_groups))
    out_l1 = np.empty((m, n_obs)) if t1 else None
    out_l2 = np.empty((m, n_groups)) if t2 else None
    empty1, empty2 = np.empty(0), np.empty((0, 0))

    done = 0
    while done < total:
        n = min(CHUNK, total - done)
        z_theta = rng.standard_normal((n, n_groups))
        z_mu = rng.standard_normal(n)
        g_tau = rng.standard_gamma(0.5 * (n_groups - 1), n) if free_tau2 else empty1
        g_sigma = rng.standard_gamma(0.5 * n_obs, n) if free_sigma2 else empty1
        g_l1 = rng.standard_gamma(0.5 * (nu1 + 1.0), (n, n_obs)) if t1 else empty2
        g_l2 = rng.standard_gamma(0.5 * (nu2 + 1.0), (n, n_groups)) if t2 else empty2
        c_params = np.empty((n, 3))
        c_theta = np.empty((n, n_groups))
        c_l1 = np.empty((n, n_obs)) if t1 else empty2
        c_l2 = np.empty((n, n_groups)) if t2 else empty2
        status = _run_sweeps(x, starts, t1, nu1, t2, nu2, free_sigma2, free_tau2,
                             theta, params, lam1, lam2,
                             z_theta, z_mu, g_tau, g_sigma, g_l1, g_l2,
                             c_params, c_theta, c_l1, c_l2)
        if status == 1:
            raise DegenerateDataError("second-level residuals are exactly zero")
        if status == 2:
            raise DegenerateDataError("residual sum of squares is exactly zero (point-mass fit)")
        sweep = np.arange(done, done + n)
        keep = (sweep >= cfg.burn_in) & ((sweep - cfg.burn_in + 1) % cfg.thin == 0)
        if keep.any():
            pos = (sweep[keep] - cfg.burn_in + 1) // cfg.thin - 1
            out_mu[pos] = c_params[keep, 0]
            out_tau2[pos] = c_params[keep, 1]
            out_sigma2[pos] = c_params[keep, 2]
            out_theta[pos] = c_theta[keep]
            if t1:
                out_l1[pos] = c_l1[keep]
            if t2:
                out_l2[pos] = c_l2[keep]
        done += n

    return PosteriorChain(out_mu, out_tau2, out_sigma2, out_theta, out_l1, out_l2, scope, cfg, spec)


# ---------------------------------------------------------------------------
# Predictive draws


def sample_prior_theta(spec: ModelSpec, mu, tau2, rng: np.random.Generator):
    """Draw group means from the second level at ``(mu, tau2)``; vectorised over draws."""
    mu = np.asarray(mu, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    if np.any(tau2 <= 0):
        raise ValueError("tau2 must be positive")
    shape = np.broadcast(mu, tau2).shape
    z = rng.standard_normal(shape) if spec.nu2 is None else rng.standard_t(spec.nu2, shape)
    out = mu + np.sqrt(tau2) * z
    return float(out) if out.ndim == 0 else out


def sample_replicate_group(spec: ModelSpec, n_i: int, theta, sigma2, rng: np.random.Generator):
    """Replicate ``n_i`` observations per draw; returns shape ``(*theta.shape, n_i)``."""
    if n_i < 1:
        raise ValueError("n_i must be >= 1")
    theta = np.asarray(theta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    if np.any(sigma2 <= 0):
        raise ValueError("sigma2 must be positive")
    shape = np.broadcast(theta, sigma2).shape + (n_i,)
    z = rng.standard_normal(shape) if spec.nu1 is None else rng.standard_t(spec.nu1, shape)
    return theta[..., None] + np.sqrt(sigma2)[..., None] * z


def sample_conditional_theta(spec: ModelSpec, group: GroupData, mu, tau2, sigma2,
                             rng: np.random.Generator, n_inner: int = 30) -> np.ndarray:
    """Draw ``theta_i ~ p(theta_i | x_i, mu, tau2, sigma2)`` once per hyperparameter draw.

    Exact conjugate draw for the normal model. With a Student-t level each
    draw runs its own ``n_inner``-step latent/theta Gibbs chain started at the
    normal-theory conditional mean, vectorised across draws.
    """
    mu = np.asarray(mu, dtype=float)
    tau2 = np.asarray(tau2, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    x = group.values
    n = x.size
    if spec.is_normal:
        prec = n / sigma2 + 1.0 / tau2
        mean = (x.sum() / sigma2 + mu / tau2) / prec
        return mean + rng.standard_normal(mean.shape) / np.sqrt(prec)

    prec = n / sigma2 + 1.0 / tau2
    theta = (x.sum() / sigma2 + mu / tau2) / prec
    lam1 = np.ones(theta.shape + (n,))
    lam2 = np.ones(theta.shape)
    for _ in range(n_inner):
        if spec.t1:
            r2 = (x - theta[..., None]) ** 2 / sigma2[..., None]
            lam1 = rng.standard_gamma(0.5 * (spec.nu1 + 1.0), lam1.shape) / (0.5 * (spec.nu1 + r2))
        if spec.t2:
            r2 = (theta - mu) ** 2 / tau2
            lam2 = rng.standard_gamma(0.5 * (spec.nu2 + 1.0), lam2.shape) / (0.5 * (spec.nu2 + r2))
        w = lam1 / sigma2[..., None]
        prior_prec = lam2 / tau2
        prec = w.sum(axis=-1) + prior_prec
        mean = ((w * x).sum(axis=-1) + prior_prec * mu) / prec
        theta = mean + rng.standard_normal(mean.shape) / np.sqrt(prec)
    return theta
