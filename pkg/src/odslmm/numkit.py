"""Numerical kernels shared by the statistical modules.

Multivariate normal log-density, normal and bivariate-normal probabilities,
quasi-Newton maximization with observed-information covariance, and binary
logistic regression with a fixed offset. All functions are pure and safe to
call concurrently.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit, ndtr


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A matrix required to be positive definite was not."""

    def __init__(self, label: str, matrix: np.ndarray):
        self.label = label
        self.matrix = np.asarray(matrix)
        super().__init__(f"matrix {label!r} is not positive definite:\n{self.matrix}")


class SeparationError(RuntimeError):
    """Logistic regression did not converge, most likely perfect separation."""

    def __init__(self, column: int, coef: np.ndarray):
        self.column = column
        self.coef = np.asarray(coef)
        super().__init__(
            f"logistic fit diverged along covariate column {column} "
            f"(|coef| = {abs(self.coef[column]):.3g}); data are likely separated"
        )


def chol_lower(mat: np.ndarray, label: str) -> np.ndarray:
    """Lower Cholesky factor, raising NotPositiveDefiniteError on failure."""
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise NotPositiveDefiniteError(label, mat) from None


def mvn_logpdf(y: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> float:
    """Log density of N(mean, cov) at y via Cholesky factorization.

    No explicit inverse is formed; the quadratic form is computed from a
    triangular solve.
    """
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if y.shape != mean.shape or cov.shape != (y.size, y.size):
        raise ValueError(
            f"dimension mismatch: y {y.shape}, mean {mean.shape}, cov {cov.shape}"
        )
    lower = chol_lower(cov, "cov")
    z = scipy.linalg.solve_triangular(lower, y - mean, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(lower)))
    return float(-0.5 * (y.size * math.log(2.0 * math.pi) + logdet + z @ z))


def std_normal_cdf(x: float) -> float:
    """Standard normal CDF, accurate to ~1e-16; +-inf map to 1 and 0."""
    if np.any(np.isnan(x)):
        raise ValueError("std_normal_cdf: NaN input")
    return ndtr(x) if np.ndim(x) else float(ndtr(x))


# Gauss-Legendre nodes/weights used by the Drezner-Wesolowsky/Genz series.
_GL = {
    6: (
        np.array([0.1713244923791705, 0.3607615730481384, 0.4679139345726904]),
        np.array([0.9324695142031522, 0.6612093864662647, 0.2386191860831970]),
    ),
    12: (
        np.array([0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                  0.2031674267230659, 0.2334925365383547, 0.2491470458134029]),
        np.array([0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                  0.5873179542866171, 0.3678314989981802, 0.1252334085114692]),
    ),
    20: (
        np.array([0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                  0.08327674157670475, 0.1019301198172404, 0.1181945319615184,
                  0.1316886384491766, 0.1420961093183821, 0.1491729864726037,
                  0.1527533871307259]),
        np.array([0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                  0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                  0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                  0.07652652113349733]),
    ),
}


def _bvn_upper(dh: float, dk: float, r: float) -> float:
    """P(X > dh, Y > dk) for standard bivariate normal with correlation r.

    Deterministic Gauss-Legendre series of Drezner & Wesolowsky (1989) as
    refined by Genz (2004); absolute accuracy ~1e-14.
    """
    if np.isposinf(dh) or np.isposinf(dk):
        return 0.0
    if np.isneginf(dh):
        return 1.0 if np.isneginf(dk) else float(ndtr(-dk))
    if np.isneginf(dk):
        return float(ndtr(-dh))

    tp = 2.0 * math.pi
    h, k = dh, dk
    hk = h * k
    bvn = 0.0
    if abs(r) < 0.3:
        w, x = _GL[6]
    elif abs(r) < 0.75:
        w, x = _GL[12]
    else:
        w, x = _GL[20]
    w = np.concatenate([w, w])
    x = np.concatenate([1.0 - x, 1.0 + x])

    if abs(r) < 0.925:
        hs = 0.5 * (h * h + k * k)
        asr = 0.5 * math.asin(r)
        sn = np.sin(asr * x)
        bvn = float(np.dot(w, np.exp((sn * hk - hs) / (1.0 - sn ** 2))))
        bvn = bvn * asr / tp + float(ndtr(-h)) * float(ndtr(-k))
    else:
        if r < 0.0:
            k = -k
            hk = -hk
        if abs(r) < 1.0:
            ass = (1.0 - r) * (1.0 + r)
            a = math.sqrt(ass)
            bs = (h - k) ** 2
            asr = -0.5 * (bs / ass + hk)
            c = (4.0 - hk) / 8.0
            d = (12.0 - hk) / 80.0
            if asr > -100.0:
                bvn = a * math.exp(asr) * (
                    1.0 - c * (bs - ass) * (1.0 - d * bs) / 3.0 + c * d * ass * ass
                )
            if hk > -100.0:
                b = math.sqrt(bs)
                sp = math.sqrt(tp) * float(ndtr(-b / a))
                bvn -= math.exp(-0.5 * hk) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0)
            a = 0.5 * a
            xs = (a * x) ** 2
            asr = -0.5 * (bs / xs + hk)
            keep = asr > -100.0
            xs = xs[keep]
            sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs)
            rs = np.sqrt(1.0 - xs)
            ep = np.exp(-0.5 * hk * xs / (1.0 + rs) ** 2) / rs
            bvn = (a * float(np.dot(np.exp(asr[keep]) * (sp - ep), w[keep])) - bvn) / tp
        if r > 0.0:
            bvn += float(ndtr(-max(h, k)))
        elif h >= k:
            bvn = -bvn
        else:
            if h < 0.0:
                ell = float(ndtr(k)) - float(ndtr(h))
            else:
                ell = float(ndtr(-h)) - float(ndtr(-k))
            bvn = ell - bvn
    return min(1.0, max(0.0, bvn))


def _bvn_upper_many(dh: np.ndarray, dk: np.ndarray, r: float) -> np.ndarray:
    """Vectorized _bvn_upper over pairs sharing one correlation.

    The moderate-correlation branch (|r| < 0.925) is evaluated as one batched
    Gauss-Legendre quadrature; other cases fall back to the scalar routine.
    """
    dh = np.asarray(dh, dtype=float)
    dk = np.asarray(dk, dtype=float)
    out = np.empty(dh.size)
    if abs(r) >= 0.925:
        for i in range(dh.size):
            out[i] = _bvn_upper(float(dh[i]), float(dk[i]), r)
        return out
    finite = np.isfinite(dh) & np.isfinite(dk)
    for i in np.where(~finite)[0]:
        out[i] = _bvn_upper(float(dh[i]), float(dk[i]), r)
    if np.any(finite):
        h = dh[finite]
        k = dk[finite]
        hk = h * k
        if abs(r) < 0.3:
            w, x = _GL[6]
        elif abs(r) < 0.75:
            w, x = _GL[12]
        else:
            w, x = _GL[20]
        w = np.concatenate([w, w])
        x = np.concatenate([1.0 - x, 1.0 + x])
        asr = 0.5 * math.asin(r)
        sn = np.sin(asr * x)
        hs = 0.5 * (h * h + k * k)
        expo = (np.outer(hk, sn) - hs[:, None]) / (1.0 - sn ** 2)
        vals = np.exp(expo) @ w * (asr / (2.0 * math.pi)) + ndtr(-h) * ndtr(-k)
        out[finite] = np.clip(vals, 0.0, 1.0)
    return out


def bvn_rect_prob(
    lo: Sequence[float],
    hi: Sequence[float],
    mean: Sequence[float],
    cov: np.ndarray,
) -> float:
    """P(lo1 < Q1 <= hi1, lo2 < Q2 <= hi2) for a bivariate normal.

    +-inf bounds are allowed. Absolute accuracy <= 1e-8 (the underlying
    series is good to ~1e-14).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if lo.shape != (2,) or hi.shape != (2,) or mean.shape != (2,) or cov.shape != (2, 2):
        raise ValueError("bvn_rect_prob expects 2-dimensional inputs")
    if np.any(lo > hi):
        raise ValueError(f"lower bounds exceed upper bounds: lo={lo}, hi={hi}")
    s1 = math.sqrt(cov[0, 0])
    s2 = math.sqrt(cov[1, 1])
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if not (s1 > 0.0 and s2 > 0.0) or det <= 0.0:
        raise NotPositiveDefiniteError("cov", cov)
    r = float(cov[0, 1] / (s1 * s2))

    a = (lo - mean) / np.array([s1, s2])
    b = (hi - mean) / np.array([s1, s2])
    corners = _bvn_upper_many(
        np.array([a[0], b[0], a[0], b[0]]),
        np.array([a[1], a[1], b[1], b[1]]),
        r,
    )
    p = corners[0] - corners[1] - corners[2] + corners[3]
    return min(1.0, max(0.0, float(p)))


@dataclass
class OptimResult:
    """Outcome of a quasi-Newton maximization."""

    argmax: np.ndarray
    value: float
    neg_hessian_inverse: Optional[np.ndarray]
    converged: bool
    iterations: int
    grad_norm: float
    message: str = ""


def central_diff_grad(
    fun: Callable[[np.ndarray], float], x: np.ndarray, rel_step: float = 1e-5
) -> np.ndarray:
    """Central finite-difference gradient with per-coordinate scaled steps."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for j in range(x.size):
        h = rel_step * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        g[j] = (fun(xp) - fun(xm)) / (2.0 * h)
    return g


def hessian_from_grad(
    grad: Callable[[np.ndarray], np.ndarray], x: np.ndarray, rel_step: float = 1e-4
) -> np.ndarray:
    """Symmetrized central-difference Hessian of `fun` given its gradient."""
    x = np.asarray(x, dtype=float)
    n = x.size
    hess = np.empty((n, n))
    for j in range(n):
        h = rel_step * max(1.0, abs(x[j]))
        xp = x.copy()
        xm = x.copy()
        xp[j] += h
        xm[j] -= h
        hess[j] = (grad(xp) - grad(xm)) / (2.0 * h)
    return 0.5 * (hess + hess.T)


def maximize(
    objective: Callable[[np.ndarray], float],
    init: Sequence[float],
    *,
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    gtol: float = 1e-6,
    step_tol: float = 1e-8,
    max_iter: int = 500,
    compute_hessian: bool = True,
    precondition: bool = True,
    hess_inv0: Optional[np.ndarray] = None,
) -> OptimResult:
    """Quasi-Newton (BFGS) maximization of a smooth objective.

    The gradient defaults to central finite differences. When precondition is
    set (the default) the running inverse Hessian is seeded with the observed
    information at the start point, which makes warm starts nearly Newton.
    The line search is backtracking Armijo (one gradient evaluation per
    iteration); NaN objective values are treated as -inf so the search
    backtracks away from them. If the step size stalls below step_tol before
    the gradient tolerance is met, a few Newton corrections with the observed
    information finish the job. The returned neg_hessian_inverse is the
    inverse of the negative central-difference Hessian at the optimum
    (observed information), not the BFGS running approximation.
    """
    x = np.array(init, dtype=float)
    n = x.size
    f = objective(x)
    if not np.isfinite(f):
        raise ValueError(f"objective not finite at init: f(init) = {f}")
    grad_fun = grad if grad is not None else (
        lambda z: central_diff_grad(objective, z)
    )
    g = np.asarray(grad_fun(x), dtype=float)
    h_inv = None
    first_update = True
    if hess_inv0 is not None:
        h_inv = np.array(hess_inv0, dtype=float)
        first_update = False
    elif precondition and np.max(np.abs(g)) > gtol:
        try:
            neg_h0 = -hessian_from_grad(grad_fun, x)
            lower0 = np.linalg.cholesky(neg_h0)
            half0 = scipy.linalg.solve_triangular(lower0, np.eye(n), lower=True)
            h_inv = half0.T @ half0
            first_update = False
        except np.linalg.LinAlgError:
            h_inv = None
    if h_inv is None:
        h_inv = np.eye(n)
    message = "converged"
    iterations = 0

    for iterations in range(1, max_iter + 1):
        if np.max(np.abs(g)) <= gtol:
            iterations -= 1
            break
        direction = h_inv @ g
        slope = float(g @ direction)
        if not np.isfinite(slope) or slope <= 0.0:
            h_inv = np.eye(n)
            direction = g.copy()
            slope = float(g @ g)
            first_update = True
        step = 1.0
        if first_update:
            # Before any curvature information, cap the move at unit length.
            step = min(1.0, 1.0 / float(np.max(np.abs(direction))))
        f_new = -np.inf
        x_new = x
        for _ in range(50):
            x_new = x + step * direction
            try:
                val = objective(x_new)
            except (OverflowError, FloatingPointError):
                val = -np.inf
            f_new = -np.inf if np.isnan(val) else val
            if f_new >= f + 1e-4 * step * slope:
                break
            step *= 0.5
        else:
            message = "line search failed (objective not improving)"
            break
        s = x_new - x
        g_new = np.asarray(grad_fun(x_new), dtype=float)
        y = g - g_new  # gradient change of the negated (minimized) objective
        x, f, g = x_new, f_new, g_new
        if float(np.max(np.abs(s))) <= step_tol * (1.0 + float(np.max(np.abs(x)))):
            message = "step size below tolerance"
            break
        sy = float(s @ y)
        if sy > 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            if first_update:
                h_inv *= sy / float(y @ y)
                first_update = False
            rho = 1.0 / sy
            sy_outer = np.outer(s, y)
            h_inv = h_inv - rho * (
                sy_outer @ h_inv + h_inv @ sy_outer.T
            ) + rho * (rho * float(y @ h_inv @ y) + 1.0) * np.outer(s, s)
    else:
        message = f"maximum iterations ({max_iter}) reached"

    grad_norm = float(np.max(np.abs(g)))

    # Finish with Newton corrections using the observed information when the
    # quasi-Newton loop stalled short of the gradient tolerance; the final
    # polish moves x by O(H^-1 g), so the Hessian is not recomputed after it.
    neg_hess = -hessian_from_grad(grad_fun, x)
    if np.isfinite(grad_norm) and grad_norm > gtol:
        try:
            cho = scipy.linalg.cho_factor(neg_hess)
            f_best = objective(x)
            for _ in range(5):
                x_try = x + scipy.linalg.cho_solve(cho, g)
                try:
                    f_try = objective(x_try)
                except (OverflowError, FloatingPointError):
                    break
                if not np.isfinite(f_try) or f_try < f_best - 1e-8 * (1.0 + abs(f_best)):
                    break
                x, f_best = x_try, f_try
                g = np.asarray(grad_fun(x), dtype=float)
                grad_norm = float(np.max(np.abs(g)))
                if grad_norm <= 0.1 * gtol:
                    break
        except (np.linalg.LinAlgError, ValueError):
            pass
    converged = bool(np.isfinite(grad_norm) and grad_norm <= gtol)

    nh_inv: Optional[np.ndarray] = None
    if compute_hessian:
        try:
            lower = chol_lower(neg_hess, "neg_hessian")
            identity = np.eye(n)
            half = scipy.linalg.solve_triangular(lower, identity, lower=True)
            nh_inv = half.T @ half
        except NotPositiveDefiniteError:
            converged = False
            message += "; negative Hessian not positive definite at solution"

    return OptimResult(
        argmax=x,
        value=float(objective(x)),
        neg_hessian_inverse=nh_inv,
        converged=converged,
        iterations=iterations,
        grad_norm=grad_norm,
        message=message,
    )


def logistic_fit(
    responses: Sequence[int],
    covariates: np.ndarray,
    offset: Optional[Sequence[float]] = None,
    *,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> tuple[np.ndarray, np.ndarray]:
    """Binary logistic regression MLE with a fixed-coefficient-1 offset.

    Fits logit pr(y=1) = offset + X @ beta by iteratively reweighted least
    squares (Newton). Returns (coefficients, covariance) where covariance is
    the inverse observed information at the MLE.
    """
    y = np.asarray(responses, dtype=float)
    x_mat = np.asarray(covariates, dtype=float)
    if x_mat.ndim != 2 or x_mat.shape[0] != y.size:
        raise ValueError(f"covariates shape {x_mat.shape} incompatible with {y.size} responses")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("responses must be 0/1")
    zero_cols = np.where(~np.any(x_mat != 0.0, axis=0))[0]
    if zero_cols.size:
        raise ValueError(f"covariate column(s) {zero_cols.tolist()} are constant zero")
    off = np.zeros(y.size) if offset is None else np.asarray(offset, dtype=float)
    if off.shape != y.shape:
        raise ValueError("offset length must match responses")

    beta = np.zeros(x_mat.shape[1])
    for _ in range(max_iter):
        eta = off + x_mat @ beta
        p = expit(eta)
        score = x_mat.T @ (y - p)
        w = p * (1.0 - p)
        info = x_mat.T @ (x_mat * w[:, None])
        if np.max(np.abs(score)) < tol:
            break
        try:
            step = np.linalg.solve(info, score)
        except np.linalg.LinAlgError:
            raise np.linalg.LinAlgError(
                "singular information matrix in logistic fit (rank-deficient design)"
            ) from None
        # Step-halving keeps the likelihood ascending on hard data sets.
        ll_old = float(y @ eta - np.logaddexp(0.0, eta).sum())
        scale = 1.0
        for _ in range(30):
            beta_new = beta + scale * step
            eta_new = off + x_mat @ beta_new
            ll_new = float(y @ eta_new - np.logaddexp(0.0, eta_new).sum())
            if ll_new >= ll_old - 1e-12:
                break
            scale *= 0.5
        beta = beta + scale * step
    else:
        worst = int(np.argmax(np.abs(beta)))
        raise SeparationError(worst, beta)

    if np.max(np.abs(beta)) > 30.0:
        raise SeparationError(int(np.argmax(np.abs(beta))), beta)
    eta = off + x_mat @ beta
    w = expit(eta) * (1.0 - expit(eta))
    info = x_mat.T @ (x_mat * w[:, None])
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        raise np.linalg.LinAlgError(
            "singular information matrix at the logistic MLE"
        ) from None
    return beta, cov
