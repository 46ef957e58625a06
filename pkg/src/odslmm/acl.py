"""Ascertainment-corrected likelihood for outcome-dependent samples.

Sampling on regions of the OLS summary Q induces a selection probability
pr(sampled | covariates) = sum_k pi_k * P(Q in region k | covariates), which is
subtracted on the log scale from each sampled subject's marginal
log-likelihood. Maximizing the corrected likelihood gives the complete-data
(CD) analysis.

Because Q = W Y with W the OLS projector onto (1, t), its conditional moments
reduce to 2x2 algebra: mean = (W X) beta and cov = D + sigma_e^2 (X_t'X_t)^-1.
The fitting path precomputes those projections once per data set.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import ndtr

from . import numkit
from .design import DesignSpec, SummarySpec, gaussian_region_prob, time_projector
from .lmm import (
    Cohort,
    FitResult,
    ModelSpec,
    Subject,
    Theta,
    _Cell,
    _cells_loglik,
    _cells_score,
    _collect_cells,
    design_matrix,
    fit_ml,
    marginal_cov,
)

_LOG_FLOOR = math.log(1e-300)


@dataclass(frozen=True)
class QMoments:
    """Conditional mean and covariance of the summary given covariates."""

    mean: np.ndarray
    cov: np.ndarray


def q_moments(
    theta: Theta,
    subject: Subject,
    exposure_value: int,
    summary: SummarySpec,
    spec: ModelSpec,
) -> QMoments:
    """Moments of Q | X: mean = W X beta, cov = W V W'."""
    w = time_projector(subject.times)
    x = design_matrix(subject, spec, exposure_value)
    v = marginal_cov(theta, subject.times)
    mean = w @ (x @ theta.beta)
    cov = w @ v @ w.T
    mean = summary.project(mean)
    if summary.kind == "intercept":
        cov = cov[:1, :1]
    elif summary.kind == "slope":
        cov = cov[1:2, 1:2]
    return QMoments(mean=mean, cov=cov)


def _project_moments(
    mean2: np.ndarray, cov2: np.ndarray, summary: SummarySpec
) -> QMoments:
    if summary.kind == "intercept":
        return QMoments(mean2[:1], cov2[:1, :1])
    if summary.kind == "slope":
        return QMoments(mean2[1:2], cov2[1:2, 1:2])
    return QMoments(mean2, cov2)


def _log_ascertainment_from_moments(qm: QMoments, design: DesignSpec) -> float:
    total = 0.0
    any_positive = False
    for region, pi in zip(design.regions, design.probabilities):
        if pi > 0.0:
            any_positive = True
            total += pi * gaussian_region_prob(region, qm.mean, qm.cov)
    if not any_positive:
        raise ValueError("design error: all region sampling probabilities are zero")
    if total <= 0.0:
        warnings.warn("ascertainment probability underflowed; floored at 1e-300")
        return _LOG_FLOOR
    log_p = math.log(total)
    if log_p < _LOG_FLOOR:
        warnings.warn("ascertainment correction below log(1e-300); floored")
        return _LOG_FLOOR
    return log_p


def log_ascertainment(
    theta: Theta,
    subject: Subject,
    exposure_value: int,
    design: DesignSpec,
    spec: ModelSpec,
) -> float:
    """log pr(sampled | covariates) = log sum_k pi_k P(Q in R_k | X; theta)."""
    qm = q_moments(theta, subject, exposure_value, design.summary, spec)
    return _log_ascertainment_from_moments(qm, design)


class CorrectionTable:
    """Precomputed per-cell projections of the ascertainment correction.

    Rows are (times_key, W X, count); per-times groups carry (X_t'X_t)^-1 so
    that cov(Q | X) = D + sigma_e^2 (X_t'X_t)^-1 at any theta. For scalar
    summaries the per-region normal probabilities are evaluated in one
    batched CDF call over the fixed region bounds.
    """

    def __init__(self, cells: Sequence[_Cell], design: DesignSpec):
        self.design = design
        self.m_inv: dict[bytes, np.ndarray] = {}
        self.rows: list[tuple[bytes, np.ndarray, int]] = []
        for cell in cells:
            if cell.times_key not in self.m_inv:
                t = cell.times
                if t.size < 2 or np.ptp(t) == 0.0:
                    raise np.linalg.LinAlgError(
                        "rank-deficient time design: need >= 2 distinct time values"
                    )
                x_t = np.column_stack([np.ones_like(t), t])
                self.m_inv[cell.times_key] = np.linalg.inv(x_t.T @ x_t)
            t = cell.times
            x_t = np.column_stack([np.ones_like(t), t])
            wx = self.m_inv[cell.times_key] @ (x_t.T @ cell.x)
            self.rows.append((cell.times_key, wx, cell.n))
        if not any(p > 0.0 for p in design.probabilities):
            raise ValueError("design error: all region sampling probabilities are zero")
        self.scalar = design.summary.kind != "bivariate"
        if self.scalar:
            self.comp = 0 if design.summary.kind == "intercept" else 1
            self.pis = np.array(design.probabilities)
            self.los = np.array([r.bounds[0][0] for r in design.regions])
            self.his = np.array([r.bounds[0][1] for r in design.regions])
            self.flip = np.array([r.complement for r in design.regions])

    def q_cov(self, theta: Theta, times_key: bytes) -> np.ndarray:
        return theta.d_matrix() + theta.sigma_e ** 2 * self.m_inv[times_key]

    def total(self, theta: Theta) -> float:
        design = self.design
        out = 0.0
        if self.scalar:
            j = self.comp
            sds = {k: math.sqrt(self.q_cov(theta, k)[j, j]) for k in self.m_inv}
            beta = theta.beta
            for times_key, wx, n in self.rows:
                mu = float(wx[j] @ beta)
                sd = sds[times_key]
                cdf = ndtr((np.concatenate([self.his, self.los]) - mu) / sd)
                k = self.pis.size
                probs = cdf[:k] - cdf[k:]
                if self.flip.any():
                    probs = np.where(self.flip, 1.0 - probs, probs)
                total_p = float(self.pis @ probs)
                if total_p <= 0.0:
                    warnings.warn("ascertainment probability underflowed; floored")
                    out += n * _LOG_FLOOR
                else:
                    out += n * math.log(total_p)
            return out
        covs = {k: self.q_cov(theta, k) for k in self.m_inv}
        for times_key, wx, n in self.rows:
            qm = QMoments(wx @ theta.beta, covs[times_key])
            out += n * _log_ascertainment_from_moments(qm, design)
        return out


def acl_loglik(theta: Theta, cohort: Cohort, design: DesignSpec) -> float:
    """Corrected log-likelihood over sampled subjects, up to the constant
    sum of log pi(q_i) terms (parameter-free, dropped)."""
    sampled = cohort.sampled_subjects()
    cells = _collect_cells(sampled, cohort.spec)
    table = CorrectionTable(cells, design)
    return _cells_loglik(cells, theta) - table.total(theta)


def fit_cd(
    cohort: Cohort,
    design: DesignSpec,
    init: Optional[Theta] = None,
    *,
    gtol: float = 1e-6,
    max_iter: int = 500,
) -> FitResult:
    """Maximize the ascertainment-corrected log-likelihood (CD analysis).

    Initialized at the uncorrected ML fit on the sampled subset. The
    likelihood part of the gradient is analytic; the correction part uses
    central finite differences.
    """
    sampled = cohort.sampled_subjects()
    if not sampled:
        raise ValueError("no sampled subjects")
    spec = cohort.spec
    cells = _collect_cells(sampled, spec)
    table = CorrectionTable(cells, design)
    n_beta = spec.n_beta
    if init is None:
        pre = fit_ml(cohort, subset=lambda s: bool(s.sampled))
        init = pre.theta_hat

    def correction(arr: np.ndarray) -> float:
        return table.total(Theta.from_array(arr, n_beta))

    def objective(arr: np.ndarray) -> float:
        th = Theta.from_array(arr, n_beta)
        return _cells_loglik(cells, th) - table.total(th)

    def grad(arr: np.ndarray) -> np.ndarray:
        th = Theta.from_array(arr, n_beta)
        return _cells_score(cells, th, n_beta) - numkit.central_diff_grad(
            correction, arr
        )

    res = numkit.maximize(
        objective, init.to_array(), grad=grad, gtol=gtol, max_iter=max_iter
    )
    cov = res.neg_hessian_inverse
    if cov is None:
        cov = np.full((n_beta + 4, n_beta + 4), np.nan)
    return FitResult(
        theta_hat=Theta.from_array(res.argmax, n_beta),
        covariance=cov,
        loglik=res.value,
        converged=res.converged,
        n_subjects_used=len(sampled),
        iterations=res.iterations,
        message=res.message,
        spec=spec,
    )
