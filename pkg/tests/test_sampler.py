import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from cvppc.model import Dataset, GroupData, ModelSpec, ParamState
from cvppc.sampler import (
    DegenerateDataError,
    ProprietyError,
    ProprietyWarning,
    SamplerConfig,
    cond_lambda_draws,
    cond_mu_params,
    cond_sigma2_draw,
    cond_tau2_draw,
    cond_theta_params,
    fit_posterior,
    sample_conditional_theta,
    sample_prior_theta,
    sample_replicate_group,
    task_rng,
)

NORMAL = ModelSpec.normal()


def batch_se(x, n_batches=50):
    """Standard error of a chain mean from non-overlapping batch means."""
    x = np.asarray(x)
    size = x.size // n_batches
    means = x[: size * n_batches].reshape(n_batches, size).mean(axis=1)
    return means.std(ddof=1) / math.sqrt(n_batches)


# --- full conditionals -------------------------------------------------------


def test_theta_params_hand_example():
    mean, var = cond_theta_params(GroupData("a", [0.0]), 2.0, 1.0, 1.0)
    assert (mean, var) == pytest.approx((1.0, 0.5), abs=1e-15)


def test_theta_params_flat_level2_limit():
    g = GroupData("a", [1.0, 2.0, 4.5])
    mean, var = cond_theta_params(g, 100.0, 1e12, 2.0)
    assert mean == pytest.approx(g.mean, abs=1e-6)
    assert var == pytest.approx(2.0 / 3, abs=1e-6)


def test_theta_params_with_latent_scale():
    mean, var = cond_theta_params(GroupData("a", [0.0]), 2.0, 1.0, 1.0, lambda2=4.0)
    assert mean == pytest.approx(1.6, abs=1e-15)
    assert var == pytest.approx(0.2, abs=1e-15)


@pytest.mark.parametrize("tau2,sigma2", [(0.0, 1.0), (1.0, 0.0), (-1.0, 1.0)])
def test_theta_params_rejects_bad_scales(tau2, sigma2):
    with pytest.raises(ValueError):
        cond_theta_params(GroupData("a", [0.0]), 0.0, tau2, sigma2)


def test_theta_params_rejects_bad_latents():
    with pytest.raises(ValueError):
        cond_theta_params(GroupData("a", [0.0, 1.0]), 0.0, 1.0, 1.0, lambda1=[1.0, 0.0])


def test_mu_params_examples():
    assert cond_mu_params([1.0, 3.0], 2.0) == pytest.approx((2.0, 1.0))
    assert cond_mu_params([5.0], 1.0) == pytest.approx((5.0, 1.0))
    assert cond_mu_params([0.0, 0.0, 0.0], 7.3)[0] == 0.0
    with pytest.raises(ValueError):
        cond_mu_params([], 1.0)


def _groups_with_ss(ss, n_obs):
    # one group, zero mean residuals around theta = 0 with the requested sum of squares
    x = np.ones(n_obs)
    x[: n_obs // 2] = -1.0
    return [GroupData("a", x * math.sqrt(ss / n_obs))]


def test_sigma2_inverse_gamma_mean():
    groups = _groups_with_ss(10.0, 20)
    rng = task_rng(1)
    draws = np.array([cond_sigma2_draw(groups, [0.0], rng) for _ in range(20000)])
    assert np.all(draws > 0)
    target = 5.0 / 9.0
    sd = math.sqrt(stats.invgamma(10, scale=5).var())
    assert abs(draws.mean() - target) < 3 * sd / math.sqrt(draws.size)


def test_sigma2_scale_family_replay():
    groups = _groups_with_ss(10.0, 20)
    a = cond_sigma2_draw(groups, [0.0], task_rng(9))
    b = cond_sigma2_draw(groups, [0.0], task_rng(9), lambda1=np.full(20, 2.0))
    assert b == pytest.approx(2 * a, rel=1e-14)


def test_sigma2_zero_residuals_rejected():
    with pytest.raises(DegenerateDataError):
        cond_sigma2_draw([GroupData("a", [1.0, 1.0])], [1.0], task_rng(0))


def test_tau2_inverse_gamma():
    thetas = np.array([1.0, -1.0, 1.0, -1.0, 0.0])  # sum of squares 4 around 0
    rng = task_rng(2)
    draws = np.array([cond_tau2_draw(thetas, 0.0, rng) for _ in range(20000)])
    assert np.all(draws > 0)
    # IG(2, 2): the mean exists but the variance does not, so test 1/draw ~ Gamma(2, rate 2) moments
    inv = 1.0 / draws
    assert abs(inv.mean() - 1.0) < 3 * math.sqrt(0.5) / math.sqrt(inv.size)
    assert stats.kstest(draws, stats.invgamma(2, scale=2).cdf).pvalue > 1e-3


def test_tau2_three_groups_shape_one():
    rng = task_rng(3)
    draws = [cond_tau2_draw([0.0, 1.0, 2.0], 1.0, rng) for _ in range(1000)]
    assert all(d > 0 and math.isfinite(d) for d in draws)


def test_tau2_degenerate_rate():
    with pytest.raises(DegenerateDataError):
        cond_tau2_draw([1.0, 1.0, 1.0], 1.0, task_rng(0))


def test_lambda_residual_zero_mean():
    spec = ModelSpec(nu1=3.0)
    groups = [GroupData("a", np.zeros(20000))]
    state = ParamState(0.0, 1.0, 1.0, np.zeros(1))
    lam1, lam2 = cond_lambda_draws(spec, groups, state, task_rng(4))
    assert lam2 is None
    se = math.sqrt(2.0) / 1.5 / math.sqrt(lam1.size)  # Gamma(2, rate 1.5) sd = sqrt(2)/1.5
    assert abs(lam1.mean() - 4.0 / 3.0) < 3 * se


def test_lambda_normal_limit():
    spec = ModelSpec(nu1=1e6)
    groups = [GroupData("a", np.zeros(2000))]
    lam1, _ = cond_lambda_draws(spec, groups, ParamState(0.0, 1.0, 1.0, np.zeros(1)), task_rng(5))
    assert abs(lam1.mean() - 1.0) < 1e-2


def test_lambda_decreases_with_residual():
    spec = ModelSpec(nu1=3.0)
    n = 20000
    state = ParamState(0.0, 1.0, 1.0, np.zeros(1))
    at0, _ = cond_lambda_draws(spec, [GroupData("a", np.zeros(n))], state, task_rng(6))
    at3, _ = cond_lambda_draws(spec, [GroupData("a", np.full(n, 3.0))], state, task_rng(7))
    se = math.sqrt(at0.var() / n + at3.var() / n)
    assert at0.mean() - at3.mean() > 3 * se
    assert at3.mean() == pytest.approx(4.0 / 12.0, abs=3 * at3.std() / math.sqrt(n))


def test_lambda_level2():
    spec = ModelSpec(nu2=2.2)
    state = ParamState(0.0, 1.0, 1.0, np.zeros(5000))
    lam1, lam2 = cond_lambda_draws(spec, [GroupData("a", [0.0])], state, task_rng(8))
    assert lam1 is None
    assert abs(lam2.mean() - 3.2 / 2.2) < 3 * lam2.std() / math.sqrt(lam2.size)


def test_lambda_requires_t_level():
    with pytest.raises(ValueError):
        cond_lambda_draws(NORMAL, [GroupData("a", [0.0])], ParamState(0.0, 1.0, 1.0, np.zeros(1)), task_rng(0))


# --- chain -------------------------------------------------------------------

SMALL = SamplerConfig(m_draws=500, burn_in=100, seed=11)


@pytest.mark.parametrize("spec", [NORMAL, ModelSpec.student_t(3.0, 2.2)])
def test_chain_deterministic(five_groups, spec):
    a = fit_posterior(five_groups, spec=spec, cfg=SMALL)
    b = fit_posterior(five_groups, spec=spec, cfg=SMALL)
    assert a.same_draws(b)
    c = fit_posterior(five_groups, spec=spec, cfg=SamplerConfig(m_draws=500, burn_in=100, seed=12))
    assert not a.same_draws(c)


def test_chain_shapes_and_support(five_groups):
    spec = ModelSpec.student_t(3.0, 2.2)
    chain = fit_posterior(five_groups, spec=spec, cfg=SMALL)
    assert len(chain) == 500
    assert chain.theta.shape == (500, 5)
    assert chain.lambda1.shape == (500, five_groups.n_obs)
    assert chain.lambda2.shape == (500, 5)
    assert np.all(chain.tau2 > 0) and np.all(chain.sigma2 > 0)
    assert np.all(chain.lambda1 > 0) and np.all(chain.lambda2 > 0)
    assert isinstance(chain[0], ParamState)


def test_scope_matches_reduced_dataset(five_groups):
    scoped = fit_posterior(five_groups, scope=[0, 1, 3, 4], cfg=SMALL)
    reduced = fit_posterior(five_groups.drop(2), cfg=SMALL)
    assert scoped.same_draws(reduced)
    assert scoped.scope == (0, 1, 3, 4)


def test_thinning_keeps_every_kth(five_groups):
    full = fit_posterior(five_groups, cfg=SamplerConfig(m_draws=600, burn_in=100, seed=3))
    thin = fit_posterior(five_groups, cfg=SamplerConfig(m_draws=200, burn_in=100, thin=3, seed=3))
    assert np.array_equal(thin.mu, full.mu[2::3])


def test_propriety_floor(five_groups):
    with pytest.raises(ProprietyError, match="3 groups"):
        fit_posterior(five_groups, scope=[0, 1], cfg=SMALL)
    with pytest.warns(ProprietyWarning):
        fit_posterior(five_groups, scope=[0, 1, 2], cfg=SMALL)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_posterior(five_groups, scope=[0, 1, 2, 3], cfg=SMALL)


def test_too_few_observations():
    ds = Dataset.from_groups([[1.0], [2.0]])
    with pytest.raises(ProprietyError):
        fit_posterior(ds, cfg=SMALL)


def test_degenerate_data():
    ds = Dataset.from_groups([[1.0, 1.0]] * 4)
    with pytest.raises(DegenerateDataError):
        fit_posterior(ds, cfg=SMALL)


@pytest.mark.parametrize("kwargs", [dict(m_draws=99), dict(thin=0), dict(burn_in=-1), dict(seed=-1),
                                    dict(seed=2**64), dict(init="random"), dict(fixed_tau2=0.0)])
def test_sampler_config_validation(kwargs):
    with pytest.raises(ValueError):
        SamplerConfig(**kwargs)


def test_mu_posterior_with_known_variances(five_groups):
    tau2, sigma2 = 0.7, 1.3
    cfg = SamplerConfig(m_draws=20000, burn_in=500, seed=5, fixed_sigma2=sigma2, fixed_tau2=tau2)
    chain = fit_posterior(five_groups, cfg=cfg)
    w = 1.0 / (tau2 + sigma2 / five_groups.sizes)
    mean = np.dot(w, five_groups.means) / w.sum()
    var = 1.0 / w.sum()
    assert abs(chain.mu.mean() - mean) < 3 * batch_se(chain.mu)
    assert chain.mu.var() == pytest.approx(var, rel=0.05)


def test_normal_limit_of_t_model():
    rng = np.random.default_rng(8)
    ds = Dataset.from_groups([rng.normal(rng.normal(0, 1), 1, 6) for _ in range(10)])
    cfg = SamplerConfig(m_draws=20000, burn_in=1000, seed=6)
    a = fit_posterior(ds, spec=NORMAL, cfg=cfg)
    b = fit_posterior(ds, spec=ModelSpec(1e6, 1e6), cfg=cfg.__class__(m_draws=20000, burn_in=1000, seed=7))
    for name in ("mu", "sigma2", "tau2"):
        x, y = getattr(a, name), getattr(b, name)
        se = math.hypot(batch_se(x), batch_se(y))
        assert abs(x.mean() - y.mean()) < 3 * se, name


# --- predictive draws --------------------------------------------------------


def test_prior_theta_degenerate_scale():
    assert sample_prior_theta(NORMAL, 2.5, 1e-12, task_rng(0)) == pytest.approx(2.5, abs=1e-5)
    assert sample_prior_theta(ModelSpec(nu2=2.2), 2.5, 1e-12, task_rng(0)) == pytest.approx(2.5, abs=1e-4)


def test_prior_theta_mean():
    draws = sample_prior_theta(NORMAL, np.full(100_000, 1.5), 2.0, task_rng(1))
    assert abs(draws.mean() - 1.5) < 3 * math.sqrt(2.0 / draws.size)


def test_prior_theta_t_variance():
    spec = ModelSpec(nu2=2.2)
    draws = sample_prior_theta(spec, np.zeros(400_000), 1.0, task_rng(2))
    # variance 11 exists but the fourth moment does not, so the sample variance
    # converges slowly: a wide band on it plus a tight check of a truncated moment
    assert 11.0 / 2 < draws.var() < 11.0 * 2
    c = 10.0
    grid = np.linspace(-c, c, 200001)
    exact = np.trapezoid(grid**2 * stats.t.pdf(grid, 2.2), grid)
    trunc = np.where(np.abs(draws) < c, draws**2, 0.0)
    assert abs(trunc.mean() - exact) < 4 * trunc.std() / math.sqrt(draws.size)
    scaled = sample_prior_theta(spec, np.zeros(400_000), 4.0, task_rng(2))
    assert np.allclose(scaled, 2.0 * draws, rtol=1e-14)


def test_prior_theta_rejects_bad_scale():
    with pytest.raises(ValueError):
        sample_prior_theta(NORMAL, 0.0, 0.0, task_rng(0))


def test_replicate_group_shapes_and_limits():
    rng = task_rng(3)
    assert sample_replicate_group(NORMAL, 7, 1.0, 1.0, rng).shape == (7,)
    assert sample_replicate_group(NORMAL, 7, np.zeros(4), np.ones(4), rng).shape == (4, 7)
    tight = sample_replicate_group(ModelSpec(nu1=3.0), 5, 3.0, 1e-12, rng)
    assert np.allclose(tight, 3.0, atol=1e-5)
    with pytest.raises(ValueError):
        sample_replicate_group(NORMAL, 0, 0.0, 1.0, rng)


def test_replicate_group_mean():
    x = sample_replicate_group(NORMAL, 10, np.full(20_000, -0.4), 1.0, task_rng(4))
    assert abs(x.mean() + 0.4) < 3 / math.sqrt(x.size)


def test_conditional_theta_normal_exact():
    g = GroupData("a", [0.2, 1.4, -0.3])
    draws = sample_conditional_theta(NORMAL, g, np.full(100_000, 1.0), 0.5, 2.0, task_rng(5))
    mean, var = cond_theta_params(g, 1.0, 0.5, 2.0)
    assert abs(draws.mean() - mean) < 3 * math.sqrt(var / draws.size)
    assert draws.var() == pytest.approx(var, rel=0.03)


def test_conditional_theta_t_matches_quadrature():
    spec = ModelSpec.student_t(3.0, 2.2)
    g = GroupData("a", [0.1, 2.9, 0.4, 0.6])
    mu, tau2, sigma2 = -1.0, 0.8, 0.5
    grid = np.linspace(-15, 15, 30001)
    logp = stats.t.logpdf(grid, 2.2, loc=mu, scale=math.sqrt(tau2))
    logp += stats.t.logpdf(g.values[:, None], 3.0, loc=grid, scale=math.sqrt(sigma2)).sum(axis=0)
    p = np.exp(logp - logp.max())
    exact = np.sum(grid * p) / p.sum()
    sd = math.sqrt(np.sum((grid - exact) ** 2 * p) / p.sum())
    draws = sample_conditional_theta(spec, g, np.full(40_000, mu), np.full(40_000, tau2),
                                     np.full(40_000, sigma2), task_rng(6))
    assert abs(draws.mean() - exact) < 3 * sd / math.sqrt(draws.size)


# --- properties --------------------------------------------------------------

values = st.lists(st.floats(-20, 20), min_size=1, max_size=8)
scale = st.floats(0.05, 20)


@pytest.mark.property
@given(values, st.floats(-20, 20), scale, scale, st.floats(0.1, 10), st.floats(-10, 10))
def test_theta_params_affine_equivariance(x, mu, tau2, sigma2, s, c):
    mean, var = cond_theta_params(GroupData("a", x), mu, tau2, sigma2)
    mean2, var2 = cond_theta_params(GroupData("a", np.array(x) * s + c), mu * s + c, tau2 * s * s, sigma2 * s * s)
    assert mean2 == pytest.approx(mean * s + c, rel=1e-9, abs=1e-9)
    assert var2 == pytest.approx(var * s * s, rel=1e-9)


@pytest.mark.property
@given(values, st.floats(-20, 20), scale, scale, st.floats(0.1, 10))
def test_theta_params_precisions_add(x, mu, tau2, sigma2, lam2):
    g = GroupData("a", x)
    _, var = cond_theta_params(g, mu, tau2, sigma2, lambda2=lam2)
    assert var <= min(sigma2 / g.n, tau2 / lam2)
