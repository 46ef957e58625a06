"""Gaussian linear mixed model with random intercept and slope.

Data containers (Subject, Cohort, ModelSpec), the marginal moments of the
outcome vector, the marginal log-likelihood, and its maximization. Variance
components are parameterized on an unconstrained scale: log standard
deviations and the Fisher z-transform of the intercept-slope correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import numkit

SubjectFilter = Optional[Callable[["Subject"], bool]]


@dataclass(frozen=True)
class ModelSpec:
    """Fixed and random effect structure of the outcome model.

    Fixed effects are, in order: intercept, time, the expensive exposure, the
    exposure-by-time interaction, then the cheap covariates listed in
    `mean_covariates`. `cheap_covariates` names every covariate available on
    all subjects (used by the imputation models even when excluded from the
    mean model). Random effects are always intercept + time.
    """

    exposure: str = "g"
    cheap_covariates: tuple[str, ...] = ("c",)
    mean_covariates: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.mean_covariates is None:
            object.__setattr__(self, "mean_covariates", tuple(self.cheap_covariates))
        unknown = set(self.mean_covariates) - set(self.cheap_covariates)
        if unknown:
            raise ValueError(f"mean covariates {sorted(unknown)} not among cheap covariates")

    @property
    def n_beta(self) -> int:
        return 4 + len(self.mean_covariates)

    @property
    def beta_names(self) -> tuple[str, ...]:
        return ("intercept", "time", self.exposure, f"{self.exposure}:time") + tuple(
            self.mean_covariates
        )

    @property
    def theta_names(self) -> tuple[str, ...]:
        return self.beta_names + ("log_sigma0", "log_sigma1", "zrho", "log_sigma_e")


@dataclass(frozen=True, eq=False)
class Subject:
    """One subject's outcome series and covariates.

    `exposure` is the expensive binary covariate and is None when it has not
    been ascertained; `sampled` is None before any design has been applied.
    """

    id: str
    times: np.ndarray
    outcomes: np.ndarray
    cheap: Mapping[str, float]
    exposure: Optional[int] = None
    sampled: Optional[bool] = None

    def __post_init__(self):
        times = self.times
        outcomes = self.outcomes
        # Read-only float arrays pass through untouched so dataclasses.replace
        # stays cheap on the imputation path.
        if not (isinstance(times, np.ndarray) and times.dtype == float and not times.flags.writeable):
            times = np.array(times, dtype=float)
            times.setflags(write=False)
            object.__setattr__(self, "times", times)
        if not (isinstance(outcomes, np.ndarray) and outcomes.dtype == float and not outcomes.flags.writeable):
            outcomes = np.array(outcomes, dtype=float)
            outcomes.setflags(write=False)
            object.__setattr__(self, "outcomes", outcomes)
        if type(self.cheap) is not dict:
            object.__setattr__(self, "cheap", dict(self.cheap))
        if times.ndim != 1 or times.shape != outcomes.shape or times.size < 1:
            raise ValueError(
                f"subject {self.id!r}: times and outcomes must be equal-length, nonempty"
            )
        if self.exposure is not None and self.exposure not in (0, 1):
            raise ValueError(f"subject {self.id!r}: exposure must be binary, got {self.exposure}")
        if self.sampled and self.exposure is None:
            raise ValueError(f"subject {self.id!r}: sampled but exposure missing")

    @property
    def n_obs(self) -> int:
        return self.times.size


@dataclass(frozen=True, eq=False)
class Cohort:
    """Immutable collection of subjects plus the model specification."""

    subjects: tuple[Subject, ...]
    spec: ModelSpec

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("subject ids are not unique")
        for s in self.subjects:
            missing = set(self.spec.cheap_covariates) - set(s.cheap)
            if missing:
                raise ValueError(f"subject {s.id!r} lacks covariates {sorted(missing)}")

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def sampled_subjects(self) -> list[Subject]:
        return [s for s in self.subjects if s.sampled]

    def unsampled_subjects(self) -> list[Subject]:
        return [s for s in self.subjects if not s.sampled]

    def is_balanced(self) -> bool:
        first = self.subjects[0].times
        return all(
            s.times.size == first.size and np.array_equal(s.times, first)
            for s in self.subjects
        )

    def with_sampling(self, flags: Sequence[bool], mask_exposure: bool = True) -> "Cohort":
        """Apply sampled flags; unsampled subjects lose their exposure value."""
        flags = list(flags)
        if len(flags) != len(self.subjects):
            raise ValueError("one flag per subject required")
        new = []
        for s, f in zip(self.subjects, flags):
            f = bool(f)
            exposure = s.exposure if (f or not mask_exposure) else None
            new.append(replace(s, sampled=f, exposure=exposure))
        return Cohort(tuple(new), self.spec)

    def with_exposures(self, values: Mapping[str, int]) -> "Cohort":
        """Fill in exposure values (keyed by subject id) for missing ones."""
        new = []
        for s in self.subjects:
            if s.exposure is None:
                new.append(replace(s, exposure=int(values[s.id])))
            else:
                new.append(s)
        return Cohort(tuple(new), self.spec)


def design_row(
    subject: Subject, spec: ModelSpec, exposure_value: int, j: int
) -> np.ndarray:
    """Row j of the fixed-effects design with the exposure set explicitly."""
    if j >= subject.n_obs:
        raise IndexError(f"observation {j} out of range for subject {subject.id!r}")
    t = subject.times[j]
    x = float(exposure_value)
    row = [1.0, t, x, x * t]
    for name in spec.mean_covariates:
        if name not in subject.cheap:
            raise ValueError(f"unknown covariate {name!r} for subject {subject.id!r}")
        row.append(float(subject.cheap[name]))
    return np.array(row)


def design_matrix(subject: Subject, spec: ModelSpec, exposure_value: int) -> np.ndarray:
    """Full n_i x p fixed-effects design matrix at the given exposure value."""
    t = subject.times
    x = float(exposure_value)
    cols = [np.ones_like(t), t, np.full_like(t, x), x * t]
    for name in spec.mean_covariates:
        if name not in subject.cheap:
            raise ValueError(f"unknown covariate {name!r} for subject {subject.id!r}")
        cols.append(np.full_like(t, float(subject.cheap[name])))
    return np.column_stack(cols)


@dataclass(frozen=True, eq=False)
class Theta:
    """Model parameters on the unconstrained optimization scale."""

    beta: np.ndarray
    log_sigma0: float
    log_sigma1: float
    zrho: float
    log_sigma_e: float

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float)
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def sigma0(self) -> float:
        return math.exp(self.log_sigma0)

    @property
    def sigma1(self) -> float:
        return math.exp(self.log_sigma1)

    @property
    def rho(self) -> float:
        return math.tanh(self.zrho)

    @property
    def sigma_e(self) -> float:
        return math.exp(self.log_sigma_e)

    def d_matrix(self) -> np.ndarray:
        """Random-effects covariance built from (sigma0, sigma1, rho)."""
        s0, s1, r = self.sigma0, self.sigma1, self.rho
        return np.array([[s0 * s0, r * s0 * s1], [r * s0 * s1, s1 * s1]])

    def to_array(self) -> np.ndarray:
        return np.concatenate(
            [self.beta, [self.log_sigma0, self.log_sigma1, self.zrho, self.log_sigma_e]]
        )

    @classmethod
    def from_array(cls, arr: Sequence[float], n_beta: int) -> "Theta":
        arr = np.asarray(arr, dtype=float)
        if arr.size != n_beta + 4:
            raise ValueError(f"expected {n_beta + 4} parameters, got {arr.size}")
        return cls(
            beta=arr[:n_beta],
            log_sigma0=float(arr[n_beta]),
            log_sigma1=float(arr[n_beta + 1]),
            zrho=float(arr[n_beta + 2]),
            log_sigma_e=float(arr[n_beta + 3]),
        )

    @classmethod
    def from_natural(
        cls,
        beta: Sequence[float],
        sigma0: float,
        sigma1: float,
        rho: float,
        sigma_e: float,
    ) -> "Theta":
        return cls(
            beta=np.asarray(beta, dtype=float),
            log_sigma0=math.log(sigma0),
            log_sigma1=math.log(sigma1),
            zrho=math.atanh(rho),
            log_sigma_e=math.log(sigma_e),
        )

    def natural(self) -> dict[str, float]:
        return {
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
            "rho": self.rho,
            "sigma_e": self.sigma_e,
        }


def marginal_cov(theta: Theta, times: np.ndarray) -> np.ndarray:
    """Marginal outcome covariance Z D Z' + sigma_e^2 I for one subject."""
    t = np.asarray(times, dtype=float)
    z = np.column_stack([np.ones_like(t), t])
    v = z @ theta.d_matrix() @ z.T
    v[np.diag_indices_from(v)] += theta.sigma_e ** 2
    return v


# Internal grouped sufficient statistics. Subjects sharing (times, design row)
# contribute through (n, sum_y, sum_yy'), which makes likelihood and score
# evaluation O(#cells) instead of O(#subjects) on balanced cohorts. This is an
# exact algebraic regrouping of the per-subject sum.


@dataclass
class _Cell:
    times_key: bytes
    times: np.ndarray
    z: np.ndarray  # n_obs x 2 random-effects design (1, t)
    x: np.ndarray  # n_obs x p design at the subjects' actual exposure
    n: int
    sum_y: np.ndarray
    s_yy: np.ndarray


def _collect_cells(
    subjects: Iterable[Subject], spec: ModelSpec
) -> list[_Cell]:
    names = spec.mean_covariates
    buckets: dict[tuple, tuple[Subject, list[np.ndarray]]] = {}
    for s in subjects:
        if s.exposure is None:
            raise ValueError(f"subject {s.id!r} has no exposure value (not ascertained)")
        cheap = s.cheap
        key = (
            s.times.tobytes(),
            s.exposure,
            tuple(cheap[name] for name in names),
        )
        bucket = buckets.get(key)
        if bucket is None:
            buckets[key] = (s, [s.outcomes])
        else:
            bucket[1].append(s.outcomes)
    cells = []
    for (tkey, exposure, _), (first, ys) in buckets.items():
        y_mat = np.array(ys)
        t = first.times
        cells.append(
            _Cell(
                times_key=tkey,
                times=t,
                z=np.column_stack([np.ones_like(t), t]),
                x=design_matrix(first, spec, exposure),
                n=len(ys),
                sum_y=y_mat.sum(axis=0),
                s_yy=y_mat.T @ y_mat,
            )
        )
    return cells


def _cov_group(theta: Theta, times: np.ndarray, z: Optional[np.ndarray] = None) -> tuple[np.ndarray, float]:
    """(V^-1, log|V|) for a shared times vector."""
    if z is None:
        z = np.column_stack([np.ones_like(times), times])
    v = z @ theta.d_matrix() @ z.T
    v[np.diag_indices_from(v)] += theta.sigma_e ** 2
    lower = numkit.chol_lower(v, "marginal_cov")
    logdet = 2.0 * float(np.log(np.diag(lower)).sum())
    return np.linalg.inv(v), logdet


def _cells_loglik(cells: Sequence[_Cell], theta: Theta) -> float:
    groups: dict[bytes, tuple[np.ndarray, float]] = {}
    total = 0.0
    log2pi = math.log(2.0 * math.pi)
    beta = theta.beta
    for cell in cells:
        group = groups.get(cell.times_key)
        if group is None:
            group = groups[cell.times_key] = _cov_group(theta, cell.times, cell.z)
        vinv, logdet = group
        mu = cell.x @ beta
        vinv_mu = vinv @ mu
        quad = (
            float(np.vdot(vinv, cell.s_yy))
            - 2.0 * float(cell.sum_y @ vinv_mu)
            + cell.n * float(mu @ vinv_mu)
        )
        total += -0.5 * (cell.n * cell.times.size * log2pi + cell.n * logdet + quad)
    return total


def _d_derivatives(theta: Theta) -> list[np.ndarray]:
    """d D / d(log_sigma0, log_sigma1, zrho) on the transformed scale."""
    s0, s1, r = theta.sigma0, theta.sigma1, theta.rho
    off = r * s0 * s1
    dr = (1.0 - r * r) * s0 * s1
    return [
        np.array([[2.0 * s0 * s0, off], [off, 0.0]]),
        np.array([[0.0, off], [off, 2.0 * s1 * s1]]),
        np.array([[0.0, dr], [dr, 0.0]]),
    ]


def _cells_score(cells: Sequence[_Cell], theta: Theta, n_beta: int) -> np.ndarray:
    """Analytic score of the marginal log-likelihood on the transformed scale.

    Variance-component terms use trace identities in the 2x2 random-effects
    space: with G = V^-1 Z, tr(V^-1 Z dD Z') = sum((Z'V^-1 Z) * dD) and
    tr(V^-1 Z dD Z' V^-1 S) = sum(dD * (G' S G)).
    """
    d_derivs = _d_derivatives(theta)
    sigma_e2 = theta.sigma_e ** 2
    beta = theta.beta
    g_beta = np.zeros(n_beta)
    g_var = np.zeros(4)
    groups: dict[bytes, tuple] = {}
    for cell in cells:
        group = groups.get(cell.times_key)
        if group is None:
            vinv, _ = _cov_group(theta, cell.times, cell.z)
            g_mat = vinv @ cell.z  # n x 2
            m2 = cell.z.T @ g_mat  # Z' V^-1 Z
            v2 = vinv @ vinv
            tr_vinv = float(np.trace(vinv))
            group = groups[cell.times_key] = (vinv, g_mat, m2, v2, tr_vinv)
        vinv, g_mat, m2, v2, tr_vinv = group
        mu = cell.x @ beta
        resid_sum = cell.sum_y - cell.n * mu
        g_beta += cell.x.T @ (vinv @ resid_sum)
        smu = np.outer(cell.sum_y, mu)
        s_res = cell.s_yy - smu - smu.T + np.outer(cell.n * mu, mu)
        k2 = g_mat.T @ s_res @ g_mat
        for j, dd in enumerate(d_derivs):
            g_var[j] += -0.5 * cell.n * float(np.vdot(m2, dd)) + 0.5 * float(
                np.vdot(dd, k2)
            )
        g_var[3] += sigma_e2 * (-cell.n * tr_vinv + float(np.vdot(v2, s_res)))
    return np.concatenate([g_beta, g_var])


def loglik(theta: Theta, cohort: Cohort, subset: SubjectFilter = None) -> float:
    """Marginal Gaussian log-likelihood over the selected subjects."""
    subjects = [s for s in cohort if subset is None or subset(s)]
    cells = _collect_cells(subjects, cohort.spec)
    return _cells_loglik(cells, theta)


def loglik_grad(theta: Theta, cohort: Cohort, subset: SubjectFilter = None) -> np.ndarray:
    """Analytic gradient of `loglik` with respect to the theta array."""
    subjects = [s for s in cohort if subset is None or subset(s)]
    cells = _collect_cells(subjects, cohort.spec)
    return _cells_score(cells, theta, cohort.spec.n_beta)


@dataclass
class FitResult:
    """Maximum-likelihood fit: estimates, covariance, and diagnostics."""

    theta_hat: Theta
    covariance: np.ndarray  # transformed scale, (p + 4) x (p + 4)
    loglik: float
    converged: bool
    n_subjects_used: int
    iterations: int = 0
    message: str = ""
    spec: Optional[ModelSpec] = None

    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    def beta_cov(self) -> np.ndarray:
        p = self.theta_hat.beta.size
        return self.covariance[:p, :p]

    def natural_estimates(self) -> dict[str, tuple[float, float]]:
        """Natural-scale estimates with delta-method standard errors."""
        th = self.theta_hat
        se = self.se()
        p = th.beta.size
        out: dict[str, tuple[float, float]] = {}
        names = self.spec.beta_names if self.spec is not None else [
            f"beta{k}" for k in range(p)
        ]
        for k, name in enumerate(names):
            out[f"beta.{name}"] = (float(th.beta[k]), float(se[k]))
        out["sigma0"] = (th.sigma0, th.sigma0 * float(se[p]))
        out["sigma1"] = (th.sigma1, th.sigma1 * float(se[p + 1]))
        out["rho"] = (th.rho, (1.0 - th.rho ** 2) * float(se[p + 2]))
        out["sigma_e"] = (th.sigma_e, th.sigma_e * float(se[p + 3]))
        return out

    def to_dict(self) -> dict:
        names = self.spec.theta_names if self.spec is not None else None
        return {
            "theta_hat": self.theta_hat.to_array().tolist(),
            "parameter_names": list(names) if names else None,
            "covariance": self.covariance.tolist(),
            "loglik": self.loglik,
            "converged": self.converged,
            "n_subjects_used": self.n_subjects_used,
            "iterations": self.iterations,
        }


def default_init(cohort: Cohort, subset: SubjectFilter = None) -> Theta:
    """Pooled-OLS starting values: beta by least squares, variance components
    by moment-matching subject-level residual lines."""
    subjects = [s for s in cohort if subset is None or subset(s)]
    cells = _collect_cells(subjects, cohort.spec)
    # Pooled OLS from the cell sufficient statistics: X'X beta = X'y.
    p = cohort.spec.n_beta
    xtx = np.zeros((p, p))
    xty = np.zeros(p)
    for cell in cells:
        xtx += cell.n * cell.x.T @ cell.x
        xty += cell.x.T @ cell.sum_y
    beta0 = np.linalg.lstsq(xtx, xty, rcond=None)[0]

    intercepts, slopes, noise = [], [], []
    projectors: dict[bytes, Optional[tuple[np.ndarray, np.ndarray]]] = {}
    mus: dict[tuple, np.ndarray] = {}
    for s in subjects:
        tkey = s.times.tobytes()
        proj = projectors.get(tkey)
        if proj is None and tkey not in projectors:
            if s.n_obs >= 3 and np.ptp(s.times) > 0:
                z = np.column_stack([np.ones_like(s.times), s.times])
                w = np.linalg.solve(z.T @ z, z.T)
                proj = (z, w)
            else:
                proj = None
            projectors[tkey] = proj
        ckey = (tkey, s.exposure, tuple(s.cheap[n] for n in cohort.spec.mean_covariates))
        mu = mus.get(ckey)
        if mu is None:
            mu = mus[ckey] = design_matrix(s, cohort.spec, s.exposure) @ beta0
        resid = s.outcomes - mu
        if proj is not None:
            z, w = proj
            ab = w @ resid
            intercepts.append(ab[0])
            slopes.append(ab[1])
            noise.append(resid - z @ ab)
        else:
            noise.append(resid)
    noise_all = np.concatenate(noise)
    total_sd = max(float(np.std(noise_all)), 1e-3)
    if len(intercepts) >= 2:
        s0 = max(float(np.std(intercepts)), 1e-3 * total_sd)
        s1 = max(float(np.std(slopes)), 1e-3 * total_sd)
        se_ = max(float(np.std(noise_all)), 1e-3 * total_sd)
        corr = float(np.corrcoef(intercepts, slopes)[0, 1]) if len(intercepts) > 2 else 0.0
        corr = 0.0 if not np.isfinite(corr) else float(np.clip(corr, -0.9, 0.9))
    else:
        s0 = total_sd / math.sqrt(2.0)
        s1 = 1e-3 * total_sd
        se_ = total_sd / math.sqrt(2.0)
        corr = 0.0
    return Theta(
        beta=beta0,
        log_sigma0=math.log(s0),
        log_sigma1=math.log(s1),
        zrho=math.atanh(corr),
        log_sigma_e=math.log(se_),
    )


def fit_ml(
    cohort: Cohort,
    subset: SubjectFilter = None,
    init: Optional[Theta] = None,
    *,
    gtol: float = 1e-6,
    max_iter: int = 500,
    hess_inv0: Optional[np.ndarray] = None,
) -> FitResult:
    """Maximize the marginal log-likelihood by quasi-Newton ascent.

    The covariance of the estimates is the inverse observed information
    (negative numerical Hessian) on the transformed scale. hess_inv0
    optionally seeds the quasi-Newton inverse Hessian (e.g. the covariance of
    a fit to similar data) and saves the preconditioning pass.
    """
    subjects = [s for s in cohort if subset is None or subset(s)]
    if not subjects:
        raise ValueError("empty subject subset")
    spec = cohort.spec
    cells = _collect_cells(subjects, spec)
    theta0 = init if init is not None else default_init(cohort, subset)
    n_beta = spec.n_beta

    def objective(arr: np.ndarray) -> float:
        return _cells_loglik(cells, Theta.from_array(arr, n_beta))

    def grad(arr: np.ndarray) -> np.ndarray:
        return _cells_score(cells, Theta.from_array(arr, n_beta), n_beta)

    res = numkit.maximize(
        objective,
        theta0.to_array(),
        grad=grad,
        gtol=gtol,
        max_iter=max_iter,
        hess_inv0=hess_inv0,
    )
    cov = res.neg_hessian_inverse
    if cov is None:
        cov = np.full((n_beta + 4, n_beta + 4), np.nan)
    return FitResult(
        theta_hat=Theta.from_array(res.argmax, n_beta),
        covariance=cov,
        loglik=res.value,
        converged=res.converged,
        n_subjects_used=len(subjects),
        iterations=res.iterations,
        message=res.message,
        spec=spec,
    )
