"""Multiple imputation of the unascertained binary exposure.

Two imputation-model constructions are provided. The first combines the
corrected-likelihood response fit with a marginal exposure model estimated by
offset logistic regression; the exposure odds for an unsampled subject are the
response density ratio times the population exposure odds (the ascertainment
ratios in the two factors cancel exactly). The second models the exposure
directly by logistic regression on low-dimensional outcome summaries among
sampled subjects, which is valid for the unsampled by design ignorability.
Pooling follows Rubin's rules with the small-M degrees-of-freedom formula.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy.special import expit

from . import numkit
from .acl import fit_cd, log_ascertainment
from .design import DesignSpec
from .lmm import (
    Cohort,
    FitResult,
    ModelSpec,
    Subject,
    Theta,
    _cov_group,
    default_init,
    design_matrix,
    fit_ml,
    marginal_cov,
)

_PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class ExposureModel:
    """Logistic marginal exposure model pr(X_e = 1 | cheap covariates)."""

    alpha: np.ndarray
    covariance: np.ndarray
    covariate_names: tuple[str, ...]


@dataclass
class MIResult:
    """Rubin-pooled estimates with the within/between variance decomposition."""

    estimates: np.ndarray
    within_var: np.ndarray
    between_var: np.ndarray
    total_var: np.ndarray
    df: np.ndarray
    m_imputations: int
    names: Optional[tuple[str, ...]] = None
    per_imputation: Optional[np.ndarray] = None  # M x k estimate draws

    def se(self) -> np.ndarray:
        return np.sqrt(self.total_var)

    def normal_theory(self) -> np.ndarray:
        """True where between-imputation variance vanished (df = +inf)."""
        return ~np.isfinite(self.df)

    def to_dict(self) -> dict:
        return {
            "parameter_names": list(self.names) if self.names else None,
            "estimates": self.estimates.tolist(),
            "within_var": self.within_var.tolist(),
            "between_var": self.between_var.tolist(),
            "total_var": self.total_var.tolist(),
            "df": [v if np.isfinite(v) else None for v in self.df],
            "normal_theory": self.normal_theory().tolist(),
            "m_imputations": self.m_imputations,
        }


def response_density_log_ratio(theta: Theta, subject: Subject, spec: ModelSpec) -> float:
    """log f(Y | X_e=1, cheap) - log f(Y | X_e=0, cheap).

    The conditioning on being sampled drops out: the homoscedastic covariance
    is shared and only the mean changes with the exposure.
    """
    v = marginal_cov(theta, subject.times)
    mu1 = design_matrix(subject, spec, 1) @ theta.beta
    mu0 = design_matrix(subject, spec, 0) @ theta.beta
    return numkit.mvn_logpdf(subject.outcomes, mu1, v) - numkit.mvn_logpdf(
        subject.outcomes, mu0, v
    )


def ascertainment_log_ratio(
    theta: Theta, subject: Subject, design: DesignSpec, spec: ModelSpec
) -> float:
    """log pr(sampled | X_e=1, cheap) - log pr(sampled | X_e=0, cheap)."""
    return log_ascertainment(theta, subject, 1, design, spec) - log_ascertainment(
        theta, subject, 0, design, spec
    )


def _rdlr_vector(theta: Theta, subjects: Sequence[Subject], spec: ModelSpec) -> np.ndarray:
    """Vectorized response_density_log_ratio.

    With shared covariance, the log density ratio is (y - mu0)'V^-1 omega -
    omega'V^-1 omega / 2 with omega the exposure effect on the mean; V^-1
    omega and the mu0 term are constant within (times, cheap-covariate)
    groups, leaving one dot product per subject.
    """
    u_groups: dict[bytes, tuple[np.ndarray, float]] = {}
    const_groups: dict[tuple, float] = {}
    u_rows = np.empty((len(subjects), subjects[0].n_obs)) if subjects else np.empty((0, 0))
    consts = np.empty(len(subjects))
    y_rows = np.empty_like(u_rows)
    for i, s in enumerate(subjects):
        tkey = s.times.tobytes()
        ug = u_groups.get(tkey)
        if ug is None:
            vinv, _ = _cov_group(theta, s.times)
            omega = (design_matrix(s, spec, 1) - design_matrix(s, spec, 0)) @ theta.beta
            u = vinv @ omega
            ug = u_groups[tkey] = (u, 0.5 * float(omega @ u))
        u, half_quad = ug
        ckey = (tkey, tuple(s.cheap[n] for n in spec.mean_covariates))
        const = const_groups.get(ckey)
        if const is None:
            mu0 = design_matrix(s, spec, 0) @ theta.beta
            const = const_groups[ckey] = float(mu0 @ u) + half_quad
        if u.size != u_rows.shape[1]:
            # Unbalanced cohorts fall back to the per-subject path.
            return np.array(
                [response_density_log_ratio(theta, subj, spec) for subj in subjects]
            )
        u_rows[i] = u
        y_rows[i] = s.outcomes
        consts[i] = const
    return np.einsum("ij,ij->i", y_rows, u_rows) - consts


def _alr_vector(
    theta: Theta, subjects: Sequence[Subject], design: DesignSpec, spec: ModelSpec
) -> np.ndarray:
    """Vectorized ascertainment_log_ratio, cached over (times, cheap) cells."""
    cache: dict[tuple, float] = {}
    out = np.empty(len(subjects))
    for i, s in enumerate(subjects):
        key = (s.times.tobytes(), tuple(float(s.cheap[n]) for n in spec.mean_covariates))
        if key not in cache:
            cache[key] = ascertainment_log_ratio(theta, s, design, spec)
        out[i] = cache[key]
    return out


def _exposure_design(subjects: Sequence[Subject], spec: ModelSpec) -> np.ndarray:
    """Intercept plus all cheap covariates, the exposure-model regressors."""
    return np.column_stack(
        [np.ones(len(subjects))]
        + [np.array([float(s.cheap[n]) for s in subjects]) for n in spec.cheap_covariates]
    )


def fit_marginal_exposure(
    cohort: Cohort, theta: Theta, design: DesignSpec
) -> ExposureModel:
    """Offset logistic regression of the exposure on the cheap covariates.

    The offset is the log ratio of ascertainment corrections under the two
    exposure values, so the coefficients estimate the population (not
    sample-conditional) exposure model.
    """
    sampled = cohort.sampled_subjects()
    if not sampled:
        raise ValueError("no sampled subjects")
    spec = cohort.spec
    y = np.array([s.exposure for s in sampled], dtype=float)
    x = _exposure_design(sampled, spec)
    offset = _alr_vector(theta, sampled, design, spec)
    try:
        alpha, cov = numkit.logistic_fit(y, x, offset)
    except numkit.SeparationError as err:
        raise RuntimeError(
            f"marginal exposure model did not converge ({err}); consider a design "
            "with nonzero sampling probability in every region"
        ) from err
    return ExposureModel(
        alpha=alpha,
        covariance=cov,
        covariate_names=("intercept",) + tuple(spec.cheap_covariates),
    )


def cdmi_log_odds(
    theta: Theta, alpha: np.ndarray, subjects: Sequence[Subject], spec: ModelSpec
) -> np.ndarray:
    """Conditional log-odds of X_e = 1 given (Y, cheap covariates).

    Equals the response density log-ratio plus the population exposure-model
    linear predictor. The ascertainment log-ratio appears in both factors of
    the odds product with opposite signs and cancels exactly, so it is not
    evaluated here. Does not depend on the sampling flag.
    """
    return _rdlr_vector(theta, subjects, spec) + _exposure_design(subjects, spec) @ alpha


def _draw_probabilities(log_odds: np.ndarray) -> np.ndarray:
    p = expit(log_odds)
    clipped = np.clip(p, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    n_clip = int(np.sum(clipped != p))
    if n_clip:
        warnings.warn(
            f"{n_clip} imputation odds overflowed; probabilities saturated at {_PROB_FLOOR}"
        )
    return clipped


def cdmi_impute(
    cohort: Cohort,
    design: DesignSpec,
    m_imputations: int,
    rng: np.random.Generator,
    *,
    response_fit: Optional[FitResult] = None,
) -> list[Cohort]:
    """Imputation data sets combining the response model and exposure model.

    Per imputation: draw theta from N(theta_hat, Cov) on the transformed
    scale; refit the offset logistic exposure model at the drawn theta; draw
    its coefficients; compute each unsampled subject's conditional exposure
    odds and draw the exposure.
    """
    if response_fit is None:
        response_fit = fit_cd(cohort, design)
    if not response_fit.converged:
        raise ValueError("response model fit did not converge")
    spec = cohort.spec
    unsampled = cohort.unsampled_subjects()
    if not unsampled:
        return [cohort] * m_imputations

    theta_mean = response_fit.theta_hat.to_array()
    theta_chol = numkit.chol_lower(response_fit.covariance, "Cov(theta_hat)")
    sampled = cohort.sampled_subjects()
    y_exp = np.array([s.exposure for s in sampled], dtype=float)
    x_exp = _exposure_design(sampled, spec)

    completed: list[Cohort] = []
    for _ in range(m_imputations):
        alpha_m = None
        for _attempt in range(5):
            arr = theta_mean + theta_chol @ rng.standard_normal(theta_mean.size)
            theta_m = Theta.from_array(arr, spec.n_beta)
            offset = _alr_vector(theta_m, sampled, design, spec)
            try:
                alpha_hat, alpha_cov = numkit.logistic_fit(y_exp, x_exp, offset)
            except numkit.SeparationError:
                continue
            alpha_chol = numkit.chol_lower(alpha_cov, "Cov(alpha_hat)")
            alpha_m = alpha_hat + alpha_chol @ rng.standard_normal(alpha_hat.size)
            break
        if alpha_m is None:
            raise RuntimeError(
                "exposure model failed to converge for 5 consecutive posterior draws"
            )
        probs = _draw_probabilities(cdmi_log_odds(theta_m, alpha_m, unsampled, spec))
        draws = rng.random(len(unsampled)) < probs
        values = {s.id: int(d) for s, d in zip(unsampled, draws)}
        completed.append(cohort.with_exposures(values))
    return completed


def dmi_features(subject: Subject, spec: ModelSpec) -> np.ndarray:
    """(sum of outcomes, sum of outcome*time, cheap covariates)."""
    y, t = subject.outcomes, subject.times
    feats = [float(np.sum(y)), float(np.sum(y * t))]
    feats.extend(float(subject.cheap[n]) for n in spec.cheap_covariates)
    return np.array(feats)


def dmi_log_odds(
    coef: np.ndarray, subjects: Sequence[Subject], spec: ModelSpec
) -> np.ndarray:
    """Log-odds from the direct exposure model; flag-independent."""
    feats = np.column_stack(
        [np.ones(len(subjects)), np.array([dmi_features(s, spec) for s in subjects])]
    )
    return feats @ coef


def dmi_impute(
    cohort: Cohort, m_imputations: int, rng: np.random.Generator
) -> list[Cohort]:
    """Direct-regression imputation data sets.

    Fits a logistic regression of the exposure on the outcome summaries and
    cheap covariates among sampled subjects (no offset; valid for unsampled
    subjects because sampling is ignorable given those variables), then draws
    coefficients and exposures per imputation.
    """
    spec = cohort.spec
    if not cohort.is_balanced():
        raise ValueError(
            "direct imputation requires balanced times across subjects; "
            "use the combined (CD+MI) approach for unbalanced cohorts"
        )
    sampled = cohort.sampled_subjects()
    if not sampled:
        raise ValueError("no sampled subjects")
    unsampled = cohort.unsampled_subjects()
    if not unsampled:
        return [cohort] * m_imputations
    y = np.array([s.exposure for s in sampled], dtype=float)
    if len(set(y.tolist())) < 2:
        raise ValueError("sampled subjects carry a single exposure class; cannot impute")
    feats = np.column_stack(
        [np.ones(len(sampled)), np.array([dmi_features(s, spec) for s in sampled])]
    )
    coef_hat, coef_cov = numkit.logistic_fit(y, feats)
    coef_chol = numkit.chol_lower(coef_cov, "Cov(dmi coefficients)")

    completed: list[Cohort] = []
    for _ in range(m_imputations):
        coef_m = coef_hat + coef_chol @ rng.standard_normal(coef_hat.size)
        probs = _draw_probabilities(dmi_log_odds(coef_m, unsampled, spec))
        draws = rng.random(len(unsampled)) < probs
        values = {s.id: int(d) for s, d in zip(unsampled, draws)}
        completed.append(cohort.with_exposures(values))
    return completed


def rubin_combine(
    per_imputation: Sequence[tuple[np.ndarray, np.ndarray]],
    names: Optional[tuple[str, ...]] = None,
) -> MIResult:
    """Pool per-imputation (estimates, covariance-or-variances) pairs.

    total variance = Vbar + (1 + 1/M) B with B the sample variance across
    imputations (divisor M - 1); df = (M-1) [1 + M Vbar / ((M+1) B)]^2, with
    df = +inf where B = 0.
    """
    m = len(per_imputation)
    if m < 2:
        raise ValueError("at least 2 imputations required (between-variance undefined)")
    ests = np.array([np.asarray(e, dtype=float) for e, _ in per_imputation])
    sizes = {e.size for e, _ in per_imputation}
    if len(sizes) != 1:
        raise ValueError("per-imputation estimate vectors differ in length")
    variances = []
    for _, cov in per_imputation:
        cov = np.asarray(cov, dtype=float)
        variances.append(np.diag(cov) if cov.ndim == 2 else cov)
    within = np.mean(np.array(variances), axis=0)
    pooled = ests.mean(axis=0)
    between = ests.var(axis=0, ddof=1)
    # Columns whose draws are bit-identical pool to exactly that value with
    # exactly zero between-imputation variance (float summation would
    # otherwise leave ~1e-17 residue).
    constant = np.all(ests == ests[0:1, :], axis=0)
    pooled = np.where(constant, ests[0], pooled)
    between = np.where(constant, 0.0, between)
    total = within + (1.0 + 1.0 / m) * between
    with np.errstate(divide="ignore"):
        ratio = np.where(between > 0.0, m * within / ((m + 1) * between), np.inf)
    df = np.where(np.isfinite(ratio), (m - 1) * (1.0 + ratio) ** 2, np.inf)
    return MIResult(
        estimates=pooled,
        within_var=within,
        between_var=between,
        total_var=total,
        df=df,
        m_imputations=m,
        names=names,
        per_imputation=ests,
    )


def run_mi_analysis(
    cohort: Cohort,
    design: DesignSpec,
    method: str,
    m_imputations: int,
    rng: np.random.Generator,
    *,
    response_fit: Optional[FitResult] = None,
    contrasts: Optional[Mapping[str, np.ndarray]] = None,
) -> MIResult:
    """Impute, refit the full cohort by standard ML per imputation, and pool.

    `contrasts` maps extra parameter names to fixed-effect contrast vectors;
    each is pooled alongside theta with delta-method within variances.
    """
    if method == "cdmi":
        completed = cdmi_impute(
            cohort, design, m_imputations, rng, response_fit=response_fit
        )
    elif method == "dmi":
        completed = dmi_impute(cohort, m_imputations, rng)
    else:
        raise ValueError(f"unknown imputation method {method!r}")

    spec = cohort.spec
    contrasts = dict(contrasts or {})
    per_imp: list[tuple[np.ndarray, np.ndarray]] = []
    warm: Optional[Theta] = None
    warm_hinv: Optional[np.ndarray] = None
    for data in completed:
        fit = fit_ml(data, init=warm, hess_inv0=warm_hinv)
        if not fit.converged:
            jitter = default_init(data).to_array()
            jitter[-4:] += 0.1
            fit = fit_ml(data, init=Theta.from_array(jitter, spec.n_beta))
            if not fit.converged:
                raise RuntimeError(
                    "per-imputation maximum likelihood fit failed twice "
                    f"(message: {fit.message})"
                )
        warm = fit.theta_hat
        warm_hinv = fit.covariance
        est = fit.theta_hat.to_array()
        var = np.diag(fit.covariance).copy()
        for vec in contrasts.values():
            a = np.asarray(vec, dtype=float)
            est = np.append(est, a @ fit.theta_hat.beta)
            var = np.append(var, a @ fit.beta_cov() @ a)
        per_imp.append((est, var))
    names = spec.theta_names + tuple(contrasts.keys())
    return rubin_combine(per_imp, names=names)
