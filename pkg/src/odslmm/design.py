"""Coarsened-summary sampling designs.

Subject-level summaries are the OLS intercept/slope of the outcome series on
time. Designs partition the summary space into regions with per-region
sampling probabilities; probabilities are calibrated so each region yields a
target expected count. Cutoffs can come from the population distribution of
the summary (a finite mixture of normals over covariate cells) or from the
empirical cohort.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.optimize

from . import numkit
from .lmm import Cohort, Subject

SUMMARY_KINDS = ("intercept", "slope", "bivariate")


class InfeasibleDesignError(ValueError):
    """Requested stratum counts cannot be met by any sampling probability."""


class PartitionError(ValueError):
    """A summary value matched no (or more than one) design region."""


@dataclass(frozen=True)
class SummarySpec:
    """Which function of the outcome series drives sampling."""

    kind: str = "intercept"

    def __post_init__(self):
        if self.kind not in SUMMARY_KINDS:
            raise ValueError(f"summary kind must be one of {SUMMARY_KINDS}, got {self.kind!r}")

    @property
    def dim(self) -> int:
        return 2 if self.kind == "bivariate" else 1

    def project(self, q_bivariate: np.ndarray) -> np.ndarray:
        """Select the requested components from an (intercept, slope) pair."""
        if self.kind == "intercept":
            return q_bivariate[..., :1]
        if self.kind == "slope":
            return q_bivariate[..., 1:2]
        return q_bivariate


@dataclass(frozen=True)
class Region:
    """Axis-aligned half-open box (lo, hi] per dimension, or its complement."""

    bounds: tuple[tuple[float, float], ...]
    complement: bool = False

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        object.__setattr__(self, "bounds", bounds)
        for lo, hi in bounds:
            if not lo <= hi:
                raise ValueError(f"region bound ({lo}, {hi}] is empty")

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def contains(self, q: Sequence[float]) -> bool:
        q = np.atleast_1d(np.asarray(q, dtype=float))
        if q.size != len(self.bounds):
            raise ValueError(
                f"summary value has dimension {q.size}, region has {len(self.bounds)}"
            )
        inside = all(lo < qd <= hi for qd, (lo, hi) in zip(q, self.bounds))
        return (not inside) if self.complement else inside


@dataclass(frozen=True)
class DesignSpec:
    """Summary type, region partition, and per-region sampling probabilities."""

    summary: SummarySpec
    regions: tuple[Region, ...]
    probabilities: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        probs = tuple(float(p) for p in self.probabilities)
        object.__setattr__(self, "probabilities", probs)
        if len(self.regions) != len(probs):
            raise ValueError("one probability per region required")
        for p in probs:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"sampling probability {p} outside [0, 1]")
        for r in self.regions:
            if r.dim != self.summary.dim:
                raise ValueError("region dimension does not match summary kind")

    def region_index(self, q: Sequence[float]) -> int:
        hits = [k for k, r in enumerate(self.regions) if r.contains(q)]
        if len(hits) != 1:
            raise PartitionError(
                f"summary value {np.asarray(q)} matched {len(hits)} regions; "
                "regions must partition the summary space"
            )
        return hits[0]

    def pi_of(self, q: Sequence[float]) -> float:
        return self.probabilities[self.region_index(q)]

    def is_uniform(self) -> bool:
        return len(set(self.probabilities)) == 1

    def to_dict(self) -> dict:
        def enc(x: float):
            return None if math.isinf(x) else x

        return {
            "summary": {"kind": self.summary.kind},
            "regions": [
                {
                    "bounds": [[enc(lo), enc(hi)] for lo, hi in r.bounds],
                    "complement": r.complement,
                }
                for r in self.regions
            ],
            "probabilities": list(self.probabilities),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DesignSpec":
        def dec(x, sign: float) -> float:
            return sign * math.inf if x is None else float(x)

        summary = SummarySpec(doc["summary"]["kind"])
        regions = tuple(
            Region(
                bounds=tuple(
                    (dec(lo, -1.0), dec(hi, +1.0)) for lo, hi in r["bounds"]
                ),
                complement=bool(r.get("complement", False)),
            )
            for r in doc["regions"]
        )
        return cls(summary, regions, tuple(doc["probabilities"]))


def time_projector(times: np.ndarray) -> np.ndarray:
    """W = (X_t' X_t)^-1 X_t' for the within-subject regression on (1, t)."""
    t = np.asarray(times, dtype=float)
    if t.size < 2 or np.ptp(t) == 0.0:
        raise np.linalg.LinAlgError(
            "rank-deficient time design: need >= 2 distinct time values"
        )
    x = np.column_stack([np.ones_like(t), t])
    return np.linalg.solve(x.T @ x, x.T)


def compute_summary(subject: Subject, spec: SummarySpec) -> np.ndarray:
    """OLS (intercept, slope) of outcomes on time, projected per the spec."""
    w = time_projector(subject.times)
    return spec.project(w @ subject.outcomes)


@dataclass(frozen=True)
class QMixture:
    """Finite mixture of bivariate normals for the population law of the summary."""

    weights: np.ndarray
    means: np.ndarray  # n_cells x 2 (intercept, slope)
    cov: np.ndarray  # shared 2 x 2

    def marginal(self, component: int) -> tuple[np.ndarray, np.ndarray, float]:
        return self.weights, self.means[:, component], math.sqrt(self.cov[component, component])

    def component_index(self, spec: SummarySpec) -> int:
        if spec.kind == "bivariate":
            raise ValueError("scalar component requested for a bivariate summary")
        return 0 if spec.kind == "intercept" else 1


def _mixture_cdf(x: float, weights: np.ndarray, means: np.ndarray, sd: float) -> float:
    return float(weights @ numkit.std_normal_cdf((x - means) / sd))


def _mixture_quantile(p: float, weights: np.ndarray, means: np.ndarray, sd: float) -> float:
    lo = float(np.min(means) - 12.0 * sd)
    hi = float(np.max(means) + 12.0 * sd)
    return float(
        scipy.optimize.brentq(
            lambda x: _mixture_cdf(x, weights, means, sd) - p, lo, hi, xtol=1e-12
        )
    )


def population_cutoffs(scenario, spec: SummarySpec, percentiles: Sequence[float]) -> np.ndarray:
    """Quantiles of the population distribution of the (scalar) summary.

    `scenario` must expose q_mixture() returning the mixture of normals that
    the generating model induces on the bivariate (intercept, slope) summary.
    """
    for p in percentiles:
        if not 0.0 < p < 1.0:
            raise ValueError(f"percentile {p} outside (0, 1)")
    mix: QMixture = scenario.q_mixture()
    comp = mix.component_index(spec)
    weights, means, sd = mix.marginal(comp)
    return np.array([_mixture_quantile(p, weights, means, sd) for p in percentiles])


def empirical_cutoffs(
    cohort: Cohort, spec: SummarySpec, percentiles: Sequence[float]
) -> np.ndarray:
    """Type-7 empirical quantiles of the observed summaries."""
    if len(cohort) == 0:
        raise ValueError("empty cohort")
    if spec.kind == "bivariate":
        raise ValueError("empirical cutoffs are defined for scalar summaries")
    qs = np.array([compute_summary(s, spec)[0] for s in cohort])
    return np.quantile(qs, np.asarray(percentiles, dtype=float), method="linear")


def calibrate_probabilities(
    region_masses: Sequence[float],
    target_counts: Sequence[float],
    n_cohort: int,
) -> np.ndarray:
    """Per-region sampling probabilities hitting expected stratum counts."""
    masses = np.asarray(region_masses, dtype=float)
    targets = np.asarray(target_counts, dtype=float)
    if masses.shape != targets.shape:
        raise ValueError("one target per region required")
    if np.any(masses <= 0.0):
        raise ValueError("region masses must be positive")
    if not math.isclose(float(masses.sum()), 1.0, abs_tol=1e-6):
        raise ValueError(f"region masses sum to {masses.sum():.6g}, expected 1")
    pi = targets / (masses * n_cohort)
    for k, p in enumerate(pi):
        if p > 1.0 + 1e-9:
            raise InfeasibleDesignError(
                f"region {k}: target {targets[k]:.6g} exceeds expected stratum size "
                f"{masses[k] * n_cohort:.6g}"
            )
    return np.minimum(pi, 1.0)


def draw_sample(
    cohort: Cohort,
    design: DesignSpec,
    rng: np.random.Generator,
    exact: bool = False,
) -> np.ndarray:
    """Sampling indicators: independent Bernoulli(pi(region of q_i)) draws.

    With exact=True, each region instead contributes a fixed count
    round(pi_k * n_k) drawn without replacement (stratified variant).
    """
    idx = np.array(
        [design.region_index(compute_summary(s, design.summary)) for s in cohort]
    )
    pi = np.array(design.probabilities)[idx]
    if not exact:
        return rng.random(len(cohort)) < pi
    flags = np.zeros(len(cohort), dtype=bool)
    for k, p in enumerate(design.probabilities):
        members = np.where(idx == k)[0]
        take = int(round(p * members.size))
        if take > 0:
            flags[rng.choice(members, size=take, replace=False)] = True
    return flags


def three_region_design(
    spec: SummarySpec, cutoffs: Sequence[float], probabilities: Sequence[float]
) -> DesignSpec:
    """Low / central / high partition of a scalar summary at two cutoffs."""
    c1, c2 = float(cutoffs[0]), float(cutoffs[1])
    if not c1 < c2:
        raise ValueError("cutoffs must be increasing")
    regions = (
        Region(bounds=((-math.inf, c1),)),
        Region(bounds=((c1, c2),)),
        Region(bounds=((c2, math.inf),)),
    )
    return DesignSpec(spec, regions, tuple(probabilities))


def central_complement_design(
    central: Region, probabilities: Sequence[float]
) -> DesignSpec:
    """Bivariate design: central rectangle plus its complement."""
    outer = Region(bounds=central.bounds, complement=True)
    return DesignSpec(SummarySpec("bivariate"), (central, outer), tuple(probabilities))


def gaussian_region_prob(region: Region, mean: np.ndarray, cov: np.ndarray) -> float:
    """P(Q in region) for Q ~ N(mean, cov), matching the region's dimension."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if region.dim == 1:
        sd = math.sqrt(cov[0, 0])
        lo, hi = region.bounds[0]
        p = float(
            numkit.std_normal_cdf((hi - mean[0]) / sd)
            - numkit.std_normal_cdf((lo - mean[0]) / sd)
        )
    else:
        lo = [b[0] for b in region.bounds]
        hi = [b[1] for b in region.bounds]
        p = numkit.bvn_rect_prob(lo, hi, mean, cov)
    # Complement regions are integrated as 1 - P(box): exact and cheap.
    return 1.0 - p if region.complement else p


def _mixture_rect_mass(mix: QMixture, region: Region) -> float:
    return float(
        sum(
            w * gaussian_region_prob(region, m, mix.cov)
            for w, m in zip(mix.weights, mix.means)
        )
    )


def bivariate_central_region(source, spec: SummarySpec, target_mass: float) -> Region:
    """Central rectangle of the (intercept, slope) distribution.

    The rectangle is the product of symmetric marginal quantile intervals
    [alpha, 1 - alpha] with a common tail level alpha, found by bisection so
    the joint mass equals target_mass (population sources) or the nearest
    achievable empirical fraction (cohort sources).
    """
    if spec.kind != "bivariate":
        raise ValueError("central region requires the bivariate summary")
    if not 0.0 < target_mass <= 1.0:
        raise ValueError(f"target mass {target_mass} outside (0, 1]")
    if target_mass == 1.0:
        return Region(bounds=((-math.inf, math.inf), (-math.inf, math.inf)))

    if isinstance(source, Cohort):
        qs = np.array([compute_summary(s, spec) for s in source])

        def rect(alpha: float) -> Region:
            lo = np.quantile(qs, alpha, axis=0, method="linear")
            hi = np.quantile(qs, 1.0 - alpha, axis=0, method="linear")
            return Region(bounds=((lo[0], hi[0]), (lo[1], hi[1])))

        def mass(alpha: float) -> float:
            r = rect(alpha)
            return float(np.mean([r.contains(q) for q in qs]))

        lo_a, hi_a = 1e-9, 0.5 - 1e-9
        for _ in range(60):
            mid = 0.5 * (lo_a + hi_a)
            if mass(mid) > target_mass:
                lo_a = mid
            else:
                hi_a = mid
        # Pick whichever bracket end achieves the nearest empirical fraction.
        best = min((lo_a, hi_a), key=lambda a: abs(mass(a) - target_mass))
        return rect(best)

    mix: QMixture = source.q_mixture()

    def rect_pop(alpha: float) -> Region:
        bounds = []
        for comp in range(2):
            weights, means, sd = mix.marginal(comp)
            bounds.append(
                (
                    _mixture_quantile(alpha, weights, means, sd),
                    _mixture_quantile(1.0 - alpha, weights, means, sd),
                )
            )
        return Region(bounds=tuple(bounds))

    def mass_err(alpha: float) -> float:
        return _mixture_rect_mass(mix, rect_pop(alpha)) - target_mass

    lo_a, hi_a = 1e-9, 0.5 - 1e-6
    f_lo, f_hi = mass_err(lo_a), mass_err(hi_a)
    if not f_lo > 0.0 > f_hi:
        raise RuntimeError(
            f"central-region bisection not bracketed: mass({lo_a})-target={f_lo:.3g}, "
            f"mass({hi_a})-target={f_hi:.3g}"
        )
    alpha = float(scipy.optimize.brentq(mass_err, lo_a, hi_a, xtol=1e-10))
    region = rect_pop(alpha)
    achieved = _mixture_rect_mass(mix, region)
    if abs(achieved - target_mass) > 1e-4:
        raise RuntimeError(
            f"central-region mass {achieved:.6f} missed target {target_mass:.6f}"
        )
    return region
