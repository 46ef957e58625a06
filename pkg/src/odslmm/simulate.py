"""Scenario-driven data generation and the replication study harness.

Generates cohorts from the longitudinal mixed model, applies the four
sampling designs (random sampling plus intercept-, slope-, and
bivariate-summary outcome-dependent designs), runs the complete-data and
multiple-imputation analyses, and summarizes empirical relative efficiency
against the random-sampling complete-data baseline.

Replication r of a study draws every random quantity from streams spawned
from SeedSequence([master_seed, scenario_key, r]); results are therefore
independent of worker parallelism and of which other cells run.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Mapping, Optional, Sequence

import numpy as np

from . import acl, design as design_mod, mi
from .design import DesignSpec, QMixture, Region, SummarySpec
from .lmm import Cohort, FitResult, ModelSpec, Subject, Theta, fit_ml, marginal_cov

DESIGN_KINDS = ("rs", "ods.i", "ods.s", "ods.b")
ANALYSIS_KINDS = ("cd", "cdmi", "dmi")
BASELINE = ("rs", "cd")

# Design calibration targets: expected 250 ascertainments per substudy, split
# 90/70/90 over the 12/88-percentile strata for scalar summaries and 70/180
# over the 76%-mass central rectangle and its complement for the bivariate.
CUTOFF_PERCENTILES = (0.12, 0.88)
SCALAR_TARGETS = (90.0, 70.0, 90.0)
CENTRAL_MASS = 0.76
BIVARIATE_TARGETS = (70.0, 180.0)
MAX_EXCLUSION_RATE = 0.02


class StudyError(RuntimeError):
    """The study produced unusable cells (e.g. too many failed replications)."""


@dataclass(frozen=True)
class Scenario:
    """Generating model for one simulation scenario."""

    name: str
    n_subjects: int
    beta: tuple[float, float, float, float, float]  # intercept, time, g, g:time, c
    delta_c: float
    include_c_in_model: bool = True
    sigma0: float = 5.0
    sigma1: float = 1.25
    rho: float = -0.25
    sigma_e: float = 5.0
    n_obs: int = 10
    t_min: float = -2.0
    t_max: float = 2.0
    pr_c: float = 0.5
    pr_g_base: float = 0.4
    target_sample: int = 250

    def __post_init__(self):
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) != 5:
            raise ValueError("beta must be (intercept, time, g, g:time, c)")
        if not math.isclose(self.t_min, -self.t_max):
            raise ValueError("time grid must be symmetric about zero")
        for c in (0.0, 1.0):
            p = self.pr_g_base + self.delta_c * c
            if not 0.0 < p < 1.0:
                raise ValueError(f"pr(G=1 | C={c:g}) = {p:g} outside (0, 1)")

    @property
    def time_grid(self) -> np.ndarray:
        return np.linspace(self.t_min, self.t_max, self.n_obs)

    @property
    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            exposure="g",
            cheap_covariates=("c",),
            mean_covariates=("c",) if self.include_c_in_model else (),
        )

    def pr_g_given_c(self, c: float) -> float:
        return self.pr_g_base + self.delta_c * c

    @property
    def true_beta(self) -> np.ndarray:
        b = list(self.beta[:4])
        if self.include_c_in_model:
            b.append(self.beta[4])
        return np.array(b)

    @property
    def true_theta(self) -> Theta:
        return Theta.from_natural(
            self.true_beta, self.sigma0, self.sigma1, self.rho, self.sigma_e
        )

    @property
    def default_m(self) -> int:
        return 35 if self.n_subjects >= 2250 else 25

    def _template_subject(self, c: float) -> Subject:
        return Subject(
            id=f"template_c{c:g}",
            times=self.time_grid,
            outcomes=np.zeros(self.n_obs),
            cheap={"c": c},
            exposure=0,
        )

    def q_mixture(self) -> QMixture:
        """Population law of the bivariate OLS summary: mixture over (C, G)."""
        from .lmm import design_matrix  # local import to keep module load light

        spec = self.model_spec
        w = design_mod.time_projector(self.time_grid)
        v = marginal_cov(self.true_theta, self.time_grid)
        cov = w @ v @ w.T
        weights, means = [], []
        for c in (0.0, 1.0):
            subj = self._template_subject(c)
            for g in (0, 1):
                pg = self.pr_g_given_c(c)
                weights.append(
                    (self.pr_c if c else 1.0 - self.pr_c) * (pg if g else 1.0 - pg)
                )
                means.append(w @ (design_matrix(subj, spec, g) @ self.true_beta))
        return QMixture(
            weights=np.array(weights), means=np.array(means), cov=cov
        )

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "n_subjects": self.n_subjects,
            "beta": list(self.beta),
            "delta_c": self.delta_c,
            "include_c_in_model": self.include_c_in_model,
            "sigma0": self.sigma0,
            "sigma1": self.sigma1,
            "rho": self.rho,
            "sigma_e": self.sigma_e,
            "n_obs": self.n_obs,
            "t_min": self.t_min,
            "t_max": self.t_max,
            "pr_c": self.pr_c,
            "pr_g_base": self.pr_g_base,
            "target_sample": self.target_sample,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Scenario":
        doc = dict(doc)
        doc["beta"] = tuple(doc["beta"])
        return cls(**doc)


def _preset(name: str, n: int, beta_g: float, delta_c: float, beta_c: float) -> Scenario:
    return Scenario(
        name=name,
        n_subjects=n,
        beta=(5.0, 1.0, beta_g, 0.75, beta_c),
        delta_c=delta_c,
        include_c_in_model=beta_c != 0.0,
    )


PRESETS: dict[str, Scenario] = {
    "a": _preset("a", 750, -2.5, 0.15, 1.0),
    "b": _preset("b", 750, -4.0, 0.15, 1.0),
    "c": _preset("c", 750, -2.5, 0.35, 1.0),
    "d": _preset("d", 2250, -2.5, 0.15, 1.0),
    "e": _preset("e", 750, -2.5, 0.55, 0.0),
}


def scenario_key(scenario: Scenario) -> int:
    """Stable 64-bit key identifying the scenario in the seed tree."""
    blob = json.dumps(scenario.to_dict(), sort_keys=True).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "big")


def generate_cohort(scenario: Scenario, rng: np.random.Generator) -> Cohort:
    """Draw a full cohort from the generating model, all exposures stored."""
    n = scenario.n_subjects
    t = scenario.time_grid
    c = (rng.random(n) < scenario.pr_c).astype(float)
    g = (rng.random(n) < scenario.pr_g_base + scenario.delta_c * c).astype(int)
    d_chol = np.linalg.cholesky(scenario.true_theta.d_matrix())
    rand_eff = rng.standard_normal((n, 2)) @ d_chol.T
    eps = scenario.sigma_e * rng.standard_normal((n, scenario.n_obs))
    b0, b1, bg, bgt, bc = scenario.beta
    subjects = []
    for i in range(n):
        mean = b0 + b1 * t + bg * g[i] + bgt * g[i] * t + bc * c[i]
        y = mean + rand_eff[i, 0] + rand_eff[i, 1] * t + eps[i]
        subjects.append(
            Subject(
                id=f"s{i + 1:05d}",
                times=t,
                outcomes=y,
                cheap={"c": c[i]},
                exposure=int(g[i]),
            )
        )
    return Cohort(tuple(subjects), scenario.model_spec)


@lru_cache(maxsize=None)
def design_for_scenario(scenario: Scenario, kind: str) -> DesignSpec:
    """Deterministic design calibrated against the population law of Q."""
    n = scenario.n_subjects
    if kind == "rs":
        region = Region(bounds=((-math.inf, math.inf),))
        pi = scenario.target_sample / n
        return DesignSpec(SummarySpec("intercept"), (region,), (pi,))
    if kind in ("ods.i", "ods.s"):
        spec = SummarySpec("intercept" if kind == "ods.i" else "slope")
        cutoffs = design_mod.population_cutoffs(scenario, spec, CUTOFF_PERCENTILES)
        masses = (
            CUTOFF_PERCENTILES[0],
            CUTOFF_PERCENTILES[1] - CUTOFF_PERCENTILES[0],
            1.0 - CUTOFF_PERCENTILES[1],
        )
        pi = design_mod.calibrate_probabilities(masses, SCALAR_TARGETS, n)
        return design_mod.three_region_design(spec, cutoffs, tuple(pi))
    if kind == "ods.b":
        spec = SummarySpec("bivariate")
        central = design_mod.bivariate_central_region(scenario, spec, CENTRAL_MASS)
        masses = (CENTRAL_MASS, 1.0 - CENTRAL_MASS)
        pi = design_mod.calibrate_probabilities(masses, BIVARIATE_TARGETS, n)
        return design_mod.central_complement_design(central, tuple(pi))
    raise ValueError(f"unknown design kind {kind!r}; expected one of {DESIGN_KINDS}")


def eos_contrast(spec: ModelSpec, time: float, cheap_value: float = 1.0) -> np.ndarray:
    """Fixed-effect contrast for E(Y | exposure=1, cheap=1, t=time)."""
    return np.array(
        [1.0, time, 1.0, time] + [cheap_value] * len(spec.mean_covariates)
    )


def end_of_study_mean(
    beta: Sequence[float], spec: ModelSpec, time: float = 2.0, cheap_value: float = 1.0
) -> float:
    """Model-implied mean outcome at the study end for the reference profile."""
    return float(eos_contrast(spec, time, cheap_value) @ np.asarray(beta, dtype=float))


def scenario_truth(scenario: Scenario) -> dict[str, float]:
    """True values of every reported parameter, for bias computations."""
    spec = scenario.model_spec
    truth = {}
    for name, value in zip(spec.beta_names, scenario.true_beta):
        truth[f"beta.{name}"] = float(value)
    truth["sigma0"] = scenario.sigma0
    truth["sigma1"] = scenario.sigma1
    truth["rho"] = scenario.rho
    truth["sigma_e"] = scenario.sigma_e
    truth["eos_mean"] = end_of_study_mean(
        scenario.true_beta, spec, time=scenario.t_max
    )
    return truth


@dataclass
class ReplicationResult:
    """Natural-scale labeled estimates from one design/analysis replication."""

    rep: int
    design: str
    analysis: str
    n_sampled: int
    estimates: dict[str, float]
    std_errors: dict[str, float]
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _result_from_fit(
    rep: int, design_kind: str, analysis: str, fit: FitResult, scenario: Scenario
) -> ReplicationResult:
    spec = scenario.model_spec
    natural = fit.natural_estimates()
    estimates = {k: v[0] for k, v in natural.items()}
    std_errors = {k: v[1] for k, v in natural.items()}
    a = eos_contrast(spec, scenario.t_max)
    estimates["eos_mean"] = float(a @ fit.theta_hat.beta)
    std_errors["eos_mean"] = math.sqrt(float(a @ fit.beta_cov() @ a))
    return ReplicationResult(
        rep=rep,
        design=design_kind,
        analysis=analysis,
        n_sampled=fit.n_subjects_used,
        estimates=estimates,
        std_errors=std_errors,
    )


def _result_from_mi(
    rep: int,
    design_kind: str,
    analysis: str,
    pooled: mi.MIResult,
    scenario: Scenario,
    n_sampled: int,
) -> ReplicationResult:
    spec = scenario.model_spec
    p = spec.n_beta
    est, se = {}, {}
    for k, name in enumerate(spec.beta_names):
        est[f"beta.{name}"] = float(pooled.estimates[k])
        se[f"beta.{name}"] = float(math.sqrt(pooled.total_var[k]))
    ls0, ls1, zr, lse = pooled.estimates[p : p + 4]
    t0, t1, tz, te = np.sqrt(pooled.total_var[p : p + 4])
    est["sigma0"], se["sigma0"] = math.exp(ls0), math.exp(ls0) * t0
    est["sigma1"], se["sigma1"] = math.exp(ls1), math.exp(ls1) * t1
    rho = math.tanh(zr)
    est["rho"], se["rho"] = rho, (1.0 - rho ** 2) * tz
    est["sigma_e"], se["sigma_e"] = math.exp(lse), math.exp(lse) * te
    est["eos_mean"] = float(pooled.estimates[-1])
    se["eos_mean"] = float(math.sqrt(pooled.total_var[-1]))
    return ReplicationResult(
        rep=rep,
        design=design_kind,
        analysis=analysis,
        n_sampled=n_sampled,
        estimates=est,
        std_errors=se,
    )


def _replication_streams(root: np.random.SeedSequence):
    cohort_ss, sample_parent, impute_parent = root.spawn(3)
    sample_list = sample_parent.spawn(len(DESIGN_KINDS))
    impute_list = [p.spawn(len(ANALYSIS_KINDS)) for p in impute_parent.spawn(len(DESIGN_KINDS))]
    return cohort_ss, sample_list, impute_list


def _run_design_block(
    scenario: Scenario,
    design_kind: str,
    analyses: Sequence[str],
    m_imputations: int,
    root: np.random.SeedSequence,
    rep: int = 0,
) -> dict[str, ReplicationResult]:
    """All requested analyses for one replication under one design.

    The cohort and the sampling draw are shared across analyses; the CD fit is
    computed once and reused as the imputation response model.
    """
    cohort_ss, sample_list, impute_list = _replication_streams(root)
    d_idx = DESIGN_KINDS.index(design_kind)
    cohort = generate_cohort(scenario, np.random.default_rng(cohort_ss))
    spec = design_for_scenario(scenario, design_kind)
    flags = design_mod.draw_sample(cohort, spec, np.random.default_rng(sample_list[d_idx]))
    data = cohort.with_sampling(flags)
    n_sampled = int(np.sum(flags))
    contrasts = {"eos_mean": eos_contrast(scenario.model_spec, scenario.t_max)}

    out: dict[str, ReplicationResult] = {}
    cd_fit: Optional[FitResult] = None
    cd_error = "CD fit unavailable"
    if "cd" in analyses or "cdmi" in analyses:
        try:
            if spec.is_uniform():
                cd_fit = fit_ml(data, subset=lambda s: bool(s.sampled))
            else:
                cd_fit = acl.fit_cd(data, spec)
            if not cd_fit.converged:
                raise StudyError(f"CD fit did not converge: {cd_fit.message}")
        except (StudyError, RuntimeError, ValueError, np.linalg.LinAlgError) as err:
            cd_fit = None
            cd_error = str(err)

    for analysis in analyses:
        a_idx = ANALYSIS_KINDS.index(analysis)
        try:
            if analysis == "cd":
                if cd_fit is None:
                    raise StudyError(cd_error)
                out[analysis] = _result_from_fit(rep, design_kind, analysis, cd_fit, scenario)
            elif analysis == "cdmi":
                if cd_fit is None:
                    raise StudyError(cd_error)
                pooled = mi.run_mi_analysis(
                    data,
                    spec,
                    "cdmi",
                    m_imputations,
                    np.random.default_rng(impute_list[d_idx][a_idx]),
                    response_fit=cd_fit,
                    contrasts=contrasts,
                )
                out[analysis] = _result_from_mi(
                    rep, design_kind, analysis, pooled, scenario, n_sampled
                )
            elif analysis == "dmi":
                pooled = mi.run_mi_analysis(
                    data,
                    spec,
                    "dmi",
                    m_imputations,
                    np.random.default_rng(impute_list[d_idx][a_idx]),
                    contrasts=contrasts,
                )
                out[analysis] = _result_from_mi(
                    rep, design_kind, analysis, pooled, scenario, n_sampled
                )
            else:
                raise ValueError(f"unknown analysis kind {analysis!r}")
        except (StudyError, RuntimeError, ValueError, np.linalg.LinAlgError) as err:
            out[analysis] = ReplicationResult(
                rep=rep,
                design=design_kind,
                analysis=analysis,
                n_sampled=n_sampled,
                estimates={},
                std_errors={},
                error=str(err),
            )
    return out


def run_replication(
    scenario: Scenario,
    design_kind: str,
    analysis_kind: str,
    m_imputations: Optional[int] = None,
    rng: "np.random.SeedSequence | int | None" = None,
) -> ReplicationResult:
    """Generate, sample, analyze once; returns labeled natural-scale estimates.

    `rng` is the replication's seed-sequence root (or an int seed); the same
    root reproduces the study harness cell bit-for-bit.
    """
    if rng is None:
        rng = np.random.SeedSequence(0)
    elif isinstance(rng, int):
        rng = np.random.SeedSequence(rng)
    m = m_imputations if m_imputations is not None else scenario.default_m
    block = _run_design_block(scenario, design_kind, [analysis_kind], m, rng)
    return block[analysis_kind]


@dataclass(frozen=True)
class StudyConfig:
    """Replication study definition: scenario x designs x analyses."""

    scenario: Scenario
    designs: tuple[str, ...] = DESIGN_KINDS
    analyses: tuple[str, ...] = ANALYSIS_KINDS
    replications: int = 1000
    m_imputations: Optional[int] = None
    master_seed: int = 20150826

    def __post_init__(self):
        object.__setattr__(self, "designs", tuple(self.designs))
        object.__setattr__(self, "analyses", tuple(self.analyses))
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        for d in self.designs:
            if d not in DESIGN_KINDS:
                raise ValueError(f"unknown design {d!r}; expected subset of {DESIGN_KINDS}")
        for a in self.analyses:
            if a not in ANALYSIS_KINDS:
                raise ValueError(f"unknown analysis {a!r}; expected subset of {ANALYSIS_KINDS}")
        if self.m_imputations is not None and self.m_imputations < 2:
            raise ValueError("m_imputations must be >= 2")

    @property
    def m_effective(self) -> int:
        return self.m_imputations if self.m_imputations is not None else self.scenario.default_m

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario.to_dict(),
            "designs": list(self.designs),
            "analyses": list(self.analyses),
            "replications": self.replications,
            "m_imputations": self.m_imputations,
            "master_seed": self.master_seed,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "StudyConfig":
        doc = dict(doc)
        scen = doc.pop("scenario")
        if isinstance(scen, str):
            if scen not in PRESETS:
                raise ValueError(
                    f"unknown scenario preset {scen!r}; valid presets: "
                    f"{', '.join(sorted(PRESETS))}"
                )
            scenario = PRESETS[scen]
        else:
            scenario = Scenario.from_dict(scen)
        known = {
            "designs",
            "analyses",
            "replications",
            "m_imputations",
            "master_seed",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(scenario=scenario, **{k: v for k, v in doc.items() if k in known})

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _study_task(args) -> tuple[int, str, dict[str, ReplicationResult]]:
    scenario, design_kind, analyses, m, master_seed, skey, rep = args
    root = np.random.SeedSequence([master_seed, skey, rep])
    return rep, design_kind, _run_design_block(scenario, design_kind, analyses, m, root, rep)


@dataclass
class StudyResult:
    config: StudyConfig
    results: dict[tuple[str, str], list[ReplicationResult]]
    report: "EfficiencyReport"


def run_study(config: StudyConfig, threads: int = 1) -> StudyResult:
    """Run the full replication grid and build the efficiency report.

    Identical configs produce byte-identical reports for any thread count:
    each replication derives its own seed streams and aggregation is ordered.
    """
    scenario = config.scenario
    m = config.m_effective
    skey = scenario_key(scenario)
    # Warm the per-scenario design cache before forking workers.
    for d in config.designs:
        design_for_scenario(scenario, d)
    tasks = [
        (scenario, d, config.analyses, m, config.master_seed, skey, rep)
        for rep in range(config.replications)
        for d in config.designs
    ]
    blocks: dict[tuple[int, str], dict[str, ReplicationResult]] = {}
    if threads <= 1:
        for task in tasks:
            rep, dkind, block = _study_task(task)
            blocks[(rep, dkind)] = block
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunk = max(1, len(tasks) // (threads * 8))
            for rep, dkind, block in pool.map(_study_task, tasks, chunksize=chunk):
                blocks[(rep, dkind)] = block
    results: dict[tuple[str, str], list[ReplicationResult]] = {
        (d, a): [] for d in config.designs for a in config.analyses
    }
    for rep in range(config.replications):
        for d in config.designs:
            block = blocks[(rep, d)]
            for a in config.analyses:
                results[(d, a)].append(block[a])
    report = efficiency_report(results, config)
    return StudyResult(config=config, results=results, report=report)


@dataclass
class EfficiencyReport:
    """Per-cell empirical variances and efficiency ratios vs the RS+CD baseline."""

    scenario: dict
    config_hash: str
    master_seed: int
    replications: int
    m_imputations: int
    designs: tuple[str, ...]
    analyses: tuple[str, ...]
    parameters: tuple[str, ...]
    baseline: tuple[str, str]
    cells: dict[str, dict]

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "replications": self.replications,
            "m_imputations": self.m_imputations,
            "designs": list(self.designs),
            "analyses": list(self.analyses),
            "parameters": list(self.parameters),
            "baseline": list(self.baseline),
            "cells": self.cells,
        }

    def cell(self, design_kind: str, analysis: str) -> dict:
        return self.cells[f"{design_kind}|{analysis}"]

    def to_csv_rows(self) -> list[list]:
        header = [
            "design",
            "analysis",
            "parameter",
            "mean_estimate",
            "truth",
            "bias_pct",
            "empirical_var",
            "mean_model_se",
            "se_bias_pct",
            "rel_efficiency",
            "rel_eff_mc_se",
            "n_used",
            "n_excluded",
        ]
        rows = [header]
        for d in self.designs:
            for a in self.analyses:
                cell = self.cell(d, a)
                for prm in self.parameters:
                    stats = cell["parameters"].get(prm)
                    if stats is None:
                        continue
                    rows.append(
                        [
                            d,
                            a,
                            prm,
                            stats["mean_estimate"],
                            stats["truth"],
                            stats["bias_pct"],
                            stats["empirical_var"],
                            stats["mean_model_se"],
                            stats["se_bias_pct"],
                            stats["rel_efficiency"],
                            stats["rel_eff_mc_se"],
                            cell["n_used"],
                            cell["n_excluded"],
                        ]
                    )
        return rows

    def format_table(self) -> str:
        """Relative-efficiency table: one design row, cd/cdmi/dmi per cell."""
        params = [p for p in self.parameters if p.startswith("beta.") or p == "eos_mean"]
        width = 20
        lines = []
        title = f"Relative efficiency vs {self.baseline[0]}+{self.baseline[1]} "
        title += f"(scenario {self.scenario.get('name', '?')}, {self.replications} reps)"
        lines.append(title)
        header = "design".ljust(8) + "".join(p.ljust(width) for p in params)
        lines.append(header)
        lines.append("-" * len(header))
        for d in self.designs:
            row = d.ljust(8)
            for prm in params:
                vals = []
                for a in self.analyses:
                    stats = self.cell(d, a)["parameters"].get(prm)
                    vals.append("--" if stats is None or stats["rel_efficiency"] is None
                                else f"{stats['rel_efficiency']:.2f}")
                row += ", ".join(vals).ljust(width)
            lines.append(row)
        return "\n".join(lines)


def _jackknife_ratio_se(base: np.ndarray, cell: np.ndarray) -> float:
    """Delete-one jackknife SE of var(base)/var(cell) over paired replications."""
    n = base.size
    if n < 3:
        return float("nan")
    sum_b, sumsq_b = base.sum(), (base ** 2).sum()
    sum_c, sumsq_c = cell.sum(), (cell ** 2).sum()
    ratios = np.empty(n)
    for r in range(n):
        nb = n - 1
        mb = (sum_b - base[r]) / nb
        vb = (sumsq_b - base[r] ** 2 - nb * mb ** 2) / (nb - 1)
        mc = (sum_c - cell[r]) / nb
        vc = (sumsq_c - cell[r] ** 2 - nb * mc ** 2) / (nb - 1)
        ratios[r] = vb / vc
    mean_r = ratios.mean()
    return float(math.sqrt((n - 1) / n * np.sum((ratios - mean_r) ** 2)))


def efficiency_report(
    results: Mapping[tuple[str, str], Sequence[ReplicationResult]],
    config: StudyConfig,
) -> EfficiencyReport:
    """Summarize replication results into the efficiency report.

    Ratios are empirical variance of the RS+CD baseline over the cell's
    empirical variance; jackknife SEs are computed over the replications
    where both cells succeeded.
    """
    scenario = config.scenario
    truth = scenario_truth(scenario)
    parameters = tuple(truth.keys())
    base_key = BASELINE if BASELINE in results else next(iter(results))

    ok_sets = {}
    for key, reps in results.items():
        ok = [r for r in reps if r.ok]
        n_excl = len(reps) - len(ok)
        if reps and n_excl / len(reps) > MAX_EXCLUSION_RATE:
            raise StudyError(
                f"cell {key}: {n_excl}/{len(reps)} replications failed "
                f"(> {MAX_EXCLUSION_RATE:.0%}); first error: "
                f"{next(r.error for r in reps if not r.ok)}"
            )
        ok_sets[key] = ok

    def estimates_of(key, prm) -> dict[int, float]:
        return {r.rep: r.estimates[prm] for r in ok_sets[key]}

    cells: dict[str, dict] = {}
    for d in config.designs:
        for a in config.analyses:
            key = (d, a)
            reps = results[key]
            ok = ok_sets[key]
            cell: dict = {
                "design": d,
                "analysis": a,
                "n_used": len(ok),
                "n_excluded": len(reps) - len(ok),
                "mean_n_sampled": float(np.mean([r.n_sampled for r in ok])) if ok else None,
                "parameters": {},
            }
            for prm in parameters:
                if not ok or prm not in ok[0].estimates:
                    cell["parameters"][prm] = None
                    continue
                ests = np.array([r.estimates[prm] for r in ok])
                ses = np.array([r.std_errors[prm] for r in ok])
                emp_var = float(np.var(ests, ddof=1)) if ests.size > 1 else None
                tv = truth[prm]
                stats = {
                    "mean_estimate": float(ests.mean()),
                    "truth": tv,
                    "bias_pct": (
                        100.0 * (float(ests.mean()) - tv) / tv if tv != 0.0 else None
                    ),
                    "empirical_var": emp_var,
                    "mean_model_se": float(ses.mean()),
                    "se_bias_pct": (
                        100.0 * (float(ses.mean()) / math.sqrt(emp_var) - 1.0)
                        if emp_var is not None and emp_var > 0.0
                        else None
                    ),
                    "rel_efficiency": None,
                    "rel_eff_mc_se": None,
                }
                if base_key in results:
                    base_map = estimates_of(base_key, prm)
                    cell_map = estimates_of(key, prm)
                    common = sorted(set(base_map) & set(cell_map))
                    if len(common) >= 2:
                        base_arr = np.array([base_map[r] for r in common])
                        cell_arr = np.array([cell_map[r] for r in common])
                        vb = float(np.var(base_arr, ddof=1))
                        vc = float(np.var(cell_arr, ddof=1))
                        if vc > 0.0:
                            stats["rel_efficiency"] = vb / vc
                            se_mc = (
                                0.0
                                if key == base_key
                                else _jackknife_ratio_se(base_arr, cell_arr)
                            )
                            stats["rel_eff_mc_se"] = se_mc if math.isfinite(se_mc) else None
                cell["parameters"][prm] = stats
            cells[f"{d}|{a}"] = cell

    return EfficiencyReport(
        scenario=scenario.to_dict(),
        config_hash=config.config_hash(),
        master_seed=config.master_seed,
        replications=config.replications,
        m_imputations=config.m_effective,
        designs=config.designs,
        analyses=config.analyses,
        parameters=parameters,
        baseline=base_key,
        cells=cells,
    )
