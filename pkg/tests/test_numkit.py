import math

import numpy as np
import pytest
import scipy.integrate
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from odslmm import numkit


def test_mvn_logpdf_standard_normal_at_mode():
    assert numkit.mvn_logpdf([0.0], [0.0], [[1.0]]) == pytest.approx(
        -0.5 * math.log(2 * math.pi), abs=1e-12
    )


def test_mvn_logpdf_diagonal_factorizes():
    val = numkit.mvn_logpdf([1.0, 2.0], [1.0, 2.0], [[4.0, 0.0], [0.0, 9.0]])
    uni = -0.5 * math.log(2 * math.pi * 4) - 0.5 * math.log(2 * math.pi * 9)
    assert val == pytest.approx(uni, abs=1e-12)


def test_mvn_logpdf_matches_explicit_2x2_inverse():
    # Oracle: direct density formula with the closed-form 2x2 inverse.
    y = np.array([0.3, -0.2])
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    inv = np.array([[cov[1, 1], -cov[0, 1]], [-cov[1, 0], cov[0, 0]]]) / det
    oracle = -0.5 * (2 * math.log(2 * math.pi) + math.log(det) + y @ inv @ y)
    assert numkit.mvn_logpdf(y, np.zeros(2), cov) == pytest.approx(oracle, abs=1e-10)


def test_mvn_logpdf_rejects_non_positive_definite():
    with pytest.raises(numkit.NotPositiveDefiniteError, match="cov"):
        numkit.mvn_logpdf([0.0, 0.0], [0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


def test_mvn_logpdf_dimension_mismatch():
    with pytest.raises(ValueError):
        numkit.mvn_logpdf([0.0, 1.0], [0.0], [[1.0]])


@given(
    st.lists(st.floats(-5, 5), min_size=1, max_size=6),
    st.lists(st.floats(0.1, 4.0), min_size=6, max_size=6),
)
@settings(max_examples=50, deadline=None)
def test_mvn_logpdf_diagonal_property(ys, sds):
    y = np.array(ys)
    sd = np.array(sds[: y.size])
    total = numkit.mvn_logpdf(y, np.zeros_like(y), np.diag(sd ** 2))
    parts = sum(
        numkit.mvn_logpdf([yi], [0.0], [[s * s]]) for yi, s in zip(y, sd)
    )
    assert total == pytest.approx(parts, abs=1e-12)


def test_std_normal_cdf_symmetry():
    assert numkit.std_normal_cdf(0.0) == 0.5
    for x in (0.5, 1.3, 2.7):
        assert numkit.std_normal_cdf(x) + numkit.std_normal_cdf(-x) == pytest.approx(
            1.0, abs=1e-12
        )


def test_std_normal_cdf_limits_and_nan():
    assert numkit.std_normal_cdf(-math.inf) == 0.0
    assert numkit.std_normal_cdf(math.inf) == 1.0
    with pytest.raises(ValueError):
        numkit.std_normal_cdf(float("nan"))


def test_std_normal_cdf_quadrature_oracle():
    # Oracle: adaptive quadrature of the density over [0, x] plus the
    # symmetric half mass, independent of ndtr.
    x = 1.959964
    half, err = scipy.integrate.quad(
        lambda t: math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi),
        0.0,
        x,
        epsabs=1e-13,
    )
    assert err < 1e-12
    assert numkit.std_normal_cdf(x) == pytest.approx(0.5 + half, abs=1e-10)


def test_bvn_whole_plane():
    inf = math.inf
    p = numkit.bvn_rect_prob([-inf, -inf], [inf, inf], [0.3, -1.0], [[2.0, 0.3], [0.3, 0.5]])
    assert p == pytest.approx(1.0, abs=1e-12)


def test_bvn_independent_quadrant():
    p = numkit.bvn_rect_prob([0, 0], [math.inf, math.inf], [0, 0], np.eye(2))
    assert p == pytest.approx(0.25, abs=1e-12)


def test_bvn_correlated_quadrant_closed_form():
    cov = [[1.0, 0.5], [0.5, 1.0]]
    p = numkit.bvn_rect_prob([0, 0], [math.inf, math.inf], [0, 0], cov)
    assert p == pytest.approx(0.25 + math.asin(0.5) / (2 * math.pi), abs=1e-12)
    assert p == pytest.approx(1.0 / 3.0, abs=1e-12)


def test_bvn_quadrant_partition_sums_to_one():
    inf = math.inf
    rng = np.random.default_rng(5)
    for rho in (-0.95, -0.4, 0.0, 0.3, 0.85):
        cov = np.array([[1.0, rho], [rho, 1.0]])
        m = rng.normal(size=2)
        corners = [
            ([-inf, -inf], [0, 0]),
            ([0, -inf], [inf, 0]),
            ([-inf, 0], [0, inf]),
            ([0, 0], [inf, inf]),
        ]
        total = sum(numkit.bvn_rect_prob(lo, hi, m, cov) for lo, hi in corners)
        assert total == pytest.approx(1.0, abs=1e-8)


def test_bvn_zero_correlation_is_product():
    rng = np.random.default_rng(6)
    for _ in range(10):
        m = rng.normal(size=2)
        sd = rng.uniform(0.3, 2.0, size=2)
        lo = m - rng.uniform(0, 2, size=2) * sd
        hi = lo + rng.uniform(0.2, 3, size=2) * sd
        p = numkit.bvn_rect_prob(lo, hi, m, np.diag(sd ** 2))
        p1 = numkit.std_normal_cdf((hi[0] - m[0]) / sd[0]) - numkit.std_normal_cdf(
            (lo[0] - m[0]) / sd[0]
        )
        p2 = numkit.std_normal_cdf((hi[1] - m[1]) / sd[1]) - numkit.std_normal_cdf(
            (lo[1] - m[1]) / sd[1]
        )
        assert p == pytest.approx(p1 * p2, abs=1e-8)


def test_bvn_degenerate_covariance_rejected():
    with pytest.raises(numkit.NotPositiveDefiniteError):
        numkit.bvn_rect_prob([0, 0], [1, 1], [0, 0], [[1.0, 1.0], [1.0, 1.0]])


def test_bvn_adaptive_quadrature_oracle():
    # Oracle: 2-D adaptive quadrature of the bivariate normal density.
    rng = np.random.default_rng(7)
    for _ in range(6):
        rho = rng.uniform(-0.9, 0.9)
        sd = rng.uniform(0.5, 2.0, size=2)
        m = rng.normal(size=2)
        cov = np.array(
            [[sd[0] ** 2, rho * sd[0] * sd[1]], [rho * sd[0] * sd[1], sd[1] ** 2]]
        )
        lo = m - rng.uniform(0.2, 2.0, size=2) * sd
        hi = lo + rng.uniform(0.3, 3.0, size=2) * sd
        det = np.linalg.det(cov)
        inv = np.linalg.inv(cov)

        def dens(y, x):
            d = np.array([x, y]) - m
            return math.exp(-0.5 * d @ inv @ d) / (2 * math.pi * math.sqrt(det))

        oracle, err = scipy.integrate.dblquad(
            dens, lo[0], hi[0], lo[1], hi[1], epsabs=1e-11
        )
        # err is dblquad's (conservative) bound; it must stay well under the
        # 1e-8 comparison tolerance for the oracle to be meaningful.
        assert err < 3e-9
        assert numkit.bvn_rect_prob(lo, hi, m, cov) == pytest.approx(oracle, abs=1e-8)


def test_maximize_quadratic_recovers_argmax_and_curvature():
    target = np.array([1.0, 2.0, 3.0])

    def objective(x):
        return -float(np.sum((x - target) ** 2))

    res = numkit.maximize(objective, np.zeros(3))
    assert res.converged
    assert np.allclose(res.argmax, target, atol=1e-6)
    assert np.allclose(res.neg_hessian_inverse, 0.5 * np.eye(3), atol=1e-6)


def test_maximize_rosenbrock():
    def neg_rosen(x):
        return -((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2)

    res = numkit.maximize(neg_rosen, np.array([-1.2, 1.0]))
    assert res.converged
    assert np.allclose(res.argmax, [1.0, 1.0], atol=1e-6)


def test_maximize_bernoulli_mle_on_logit_scale():
    # 7 successes of 10: argmax of the Bernoulli log-likelihood is logit(0.7).
    def loglik(b):
        return float(7 * b[0] - 10 * np.logaddexp(0.0, b[0]))

    res = numkit.maximize(loglik, np.zeros(1))
    assert res.converged
    assert res.argmax[0] == pytest.approx(math.log(0.7 / 0.3), abs=1e-6)


def test_maximize_with_supplied_gradient_matches_fd():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(4, 4))
    a = a @ a.T + 2 * np.eye(4)
    b = rng.normal(size=4)

    res_fd = numkit.maximize(lambda x: float(-0.5 * x @ a @ x + b @ x), np.zeros(4))
    res_an = numkit.maximize(
        lambda x: float(-0.5 * x @ a @ x + b @ x), np.zeros(4), grad=lambda x: b - a @ x
    )
    assert np.allclose(res_fd.argmax, res_an.argmax, atol=1e-5)
    assert np.allclose(res_an.argmax, np.linalg.solve(a, b), atol=1e-7)


@given(st.integers(0, 2 ** 32 - 1))
@settings(max_examples=15, deadline=None)
def test_maximize_random_quadratic_property(seed):
    # Any negative-definite quadratic: argmax at the stationary point and
    # neg_hessian_inverse equal to the exact inverse curvature.
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 5))
    a = rng.normal(size=(n, n))
    a = a @ a.T + np.eye(n)
    b = rng.normal(size=n)
    res = numkit.maximize(lambda x: float(-0.5 * x @ a @ x + b @ x), np.zeros(n))
    assert res.converged
    xstar = np.linalg.solve(a, b)
    assert np.max(np.abs(res.argmax - xstar)) < 1e-5 * (1 + np.max(np.abs(xstar)))
    inv = np.linalg.inv(a)
    assert np.max(np.abs(res.neg_hessian_inverse - inv)) < 1e-6 * np.max(np.abs(inv)) + 1e-8


def test_maximize_flags_non_convergence():
    def neg_rosen(x):
        return -((1 - x[0]) ** 2 + 100 * (x[1] - x[0] ** 2) ** 2)

    res = numkit.maximize(neg_rosen, np.array([-1.2, 1.0]), max_iter=2, precondition=False)
    assert not res.converged


def test_maximize_backtracks_through_nan_region():
    def obj(x):
        if x[0] > 4.0:
            return float("nan")
        return -((x[0] - 3.0) ** 2)

    res = numkit.maximize(obj, np.array([0.0]))
    assert res.converged
    assert res.argmax[0] == pytest.approx(3.0, abs=1e-6)


def test_maximize_rejects_nan_at_init():
    with pytest.raises(ValueError):
        numkit.maximize(lambda x: float("nan"), np.zeros(2))


def test_logistic_intercept_only():
    # 3 successes of 4: coefficient is logit(3/4) = log 3.
    y = [1, 1, 1, 0]
    x = np.ones((4, 1))
    coef, cov = numkit.logistic_fit(y, x)
    assert coef[0] == pytest.approx(math.log(3.0), abs=1e-8)
    assert cov.shape == (1, 1) and cov[0, 0] > 0


def test_logistic_offset_absorbs_signal():
    rng = np.random.default_rng(12)
    n = 4000
    z = rng.normal(size=n)
    lp = 0.5 + 1.2 * z
    y = (rng.random(n) < expit(lp)).astype(float)
    coef, cov = numkit.logistic_fit(y, np.ones((n, 1)), offset=lp)
    # The offset is the true linear predictor; the intercept should be ~0.
    assert abs(coef[0]) < 3 * math.sqrt(cov[0, 0])


def test_logistic_matches_newton_oracle():
    rng = np.random.default_rng(13)
    n = 200
    x = np.column_stack([np.ones(n), rng.normal(size=n), rng.normal(size=n)])
    beta_true = np.array([-0.3, 0.8, -0.5])
    y = (rng.random(n) < expit(x @ beta_true)).astype(float)

    # Independent straightforward Newton iteration.
    beta = np.zeros(3)
    for _ in range(60):
        p = expit(x @ beta)
        step = np.linalg.solve(x.T @ (x * (p * (1 - p))[:, None]), x.T @ (y - p))
        beta = beta + step
        if np.max(np.abs(step)) < 1e-12:
            break
    coef, _ = numkit.logistic_fit(y, x)
    assert np.allclose(coef, beta, atol=1e-8)


def test_logistic_score_vanishes_at_mle():
    rng = np.random.default_rng(14)
    n = 150
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < 0.4).astype(float)
    off = rng.normal(scale=0.2, size=n)
    coef, _ = numkit.logistic_fit(y, x, offset=off)
    score = x.T @ (y - expit(off + x @ coef))
    assert np.max(np.abs(score)) < 1e-8


def test_logistic_zero_offset_equals_no_offset():
    rng = np.random.default_rng(15)
    n = 100
    x = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.random(n) < 0.5).astype(float)
    c1, v1 = numkit.logistic_fit(y, x)
    c2, v2 = numkit.logistic_fit(y, x, offset=np.zeros(n))
    assert np.allclose(c1, c2, atol=1e-10)
    assert np.allclose(v1, v2, atol=1e-10)


def test_logistic_rejects_zero_column():
    y = [0, 1, 0, 1]
    x = np.column_stack([np.ones(4), np.zeros(4)])
    with pytest.raises(ValueError, match="constant zero"):
        numkit.logistic_fit(y, x)


def test_logistic_detects_separation():
    z = np.linspace(-2, 2, 40)
    y = (z > 0).astype(float)
    x = np.column_stack([np.ones(40), z])
    with pytest.raises(numkit.SeparationError) as exc:
        numkit.logistic_fit(y, x)
    assert exc.value.column == 1  # the separating direction is named
