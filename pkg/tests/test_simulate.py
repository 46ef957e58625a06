import json
import math

import numpy as np
import pytest

from odslmm import design as dmod, lmm, simulate
from odslmm.simulate import (
    EfficiencyReport,
    PRESETS,
    ReplicationResult,
    Scenario,
    StudyConfig,
    StudyError,
)


def test_presets_match_published_grid():
    rows = {
        "a": (750, -2.5, 0.15, 1.0),
        "b": (750, -4.0, 0.15, 1.0),
        "c": (750, -2.5, 0.35, 1.0),
        "d": (2250, -2.5, 0.15, 1.0),
        "e": (750, -2.5, 0.55, 0.0),
    }
    for name, (n, bg, dc, bc) in rows.items():
        s = PRESETS[name]
        assert s.n_subjects == n
        assert s.beta == (5.0, 1.0, bg, 0.75, bc)
        assert s.delta_c == dc
        assert s.include_c_in_model == (bc != 0.0)
        assert (s.sigma0, s.sigma1, s.rho, s.sigma_e) == (5.0, 1.25, -0.25, 5.0)
        assert s.n_obs == 10 and s.pr_c == 0.5
    assert PRESETS["a"].default_m == 25
    assert PRESETS["d"].default_m == 35


def test_time_grid_equally_spaced():
    t = PRESETS["a"].time_grid
    assert t.size == 10
    assert t[0] == -2.0 and t[-1] == 2.0
    assert np.allclose(np.diff(t), 4.0 / 9.0)
    assert np.allclose(t + t[::-1], 0.0)


def test_scenario_validation():
    with pytest.raises(ValueError, match="outside"):
        Scenario(name="bad", n_subjects=10, beta=(0, 0, 0, 0, 0), delta_c=0.7)
    with pytest.raises(ValueError, match="symmetric"):
        Scenario(name="bad", n_subjects=10, beta=(0, 0, 0, 0, 0), delta_c=0.1, t_min=-1.0, t_max=2.0)


def test_generate_cohort_noiseless():
    scen = Scenario(
        name="tiny",
        n_subjects=25,
        beta=(5.0, 1.0, -2.5, 0.75, 1.0),
        delta_c=0.15,
        sigma0=1e-8,
        sigma1=1e-8,
        rho=0.0,
        sigma_e=1e-8,
    )
    cohort = simulate.generate_cohort(scen, np.random.default_rng(90))
    for s in cohort:
        lp = (
            5.0
            + 1.0 * s.times
            + (-2.5) * s.exposure
            + 0.75 * s.exposure * s.times
            + 1.0 * s.cheap["c"]
        )
        assert np.max(np.abs(s.outcomes - lp)) < 1e-6


def test_generate_cohort_marginal_exposure_prevalence():
    # pr(G=1) = 0.5*0.4 + 0.5*0.55 = 0.475 in scenario (a).
    scen = PRESETS["a"]
    count, total = 0, 0
    for r in range(200):
        cohort = simulate.generate_cohort(
            scen, np.random.default_rng(np.random.SeedSequence([91, r]))
        )
        count += sum(s.exposure for s in cohort)
        total += len(cohort)
    p_hat = count / total
    se = math.sqrt(0.475 * 0.525 / total)
    assert abs(p_hat - 0.475) < 3 * se


def test_generate_cohort_summary_moments_oracle():
    # Sample covariance of the OLS summaries matches the analytic law of total
    # covariance: E[cov within cells] + cov of cell means.
    scen = Scenario(
        name="moments", n_subjects=100_000, beta=PRESETS["a"].beta, delta_c=0.15
    )
    cohort = simulate.generate_cohort(scen, np.random.default_rng(92))
    qs = np.array(
        [dmod.compute_summary(s, dmod.SummarySpec("bivariate")) for s in cohort]
    )
    mix = scen.q_mixture()
    mean_q = mix.weights @ mix.means
    centered = mix.means - mean_q
    between = (mix.weights[:, None, None] * np.einsum("ci,cj->cij", centered, centered)).sum(axis=0)
    total_cov = mix.cov + between
    emp = np.cov(qs.T)
    n = qs.shape[0]
    for i in range(2):
        for j in range(2):
            se = math.sqrt(
                (total_cov[i, i] * total_cov[j, j] + total_cov[i, j] ** 2) / n
            )
            assert abs(emp[i, j] - total_cov[i, j]) < 4 * se


def test_design_for_scenario_probabilities():
    scen = PRESETS["a"]
    assert simulate.design_for_scenario(scen, "rs").probabilities == (250 / 750,)
    pi_i = simulate.design_for_scenario(scen, "ods.i").probabilities
    assert pi_i[0] == 1.0 and pi_i[2] == 1.0
    assert pi_i[1] == pytest.approx(70 / 570, abs=1e-12)
    pi_b = simulate.design_for_scenario(scen, "ods.b").probabilities
    assert pi_b[0] == pytest.approx(70 / 570, abs=1e-12)
    assert pi_b[1] == 1.0
    scen_d = PRESETS["d"]
    assert simulate.design_for_scenario(scen_d, "ods.s").probabilities[0] == pytest.approx(1 / 3)
    assert simulate.design_for_scenario(scen_d, "ods.b").probabilities[1] == pytest.approx(1 / 3)
    with pytest.raises(ValueError, match="unknown design"):
        simulate.design_for_scenario(scen, "ods.x")


def test_end_of_study_mean_truths():
    assert simulate.end_of_study_mean(PRESETS["a"].true_beta, PRESETS["a"].model_spec) == pytest.approx(7.0)
    assert simulate.end_of_study_mean(PRESETS["e"].true_beta, PRESETS["e"].model_spec) == pytest.approx(6.0)
    truth = simulate.scenario_truth(PRESETS["a"])
    assert truth["eos_mean"] == pytest.approx(7.0)
    assert truth["beta.g"] == -2.5


def test_end_of_study_mean_delta_se_perturbation_oracle():
    scen = PRESETS["a"]
    cohort = simulate.generate_cohort(scen, np.random.default_rng(93))
    fit = lmm.fit_ml(cohort)
    a = simulate.eos_contrast(scen.model_spec, 2.0)
    se_delta = math.sqrt(a @ fit.beta_cov() @ a)
    # Oracle: numeric gradient of the contrast functional.
    grad = np.zeros(5)
    h = 1e-6
    for j in range(5):
        bp, bm = fit.theta_hat.beta.copy(), fit.theta_hat.beta.copy()
        bp[j] += h
        bm[j] -= h
        grad[j] = (
            simulate.end_of_study_mean(bp, scen.model_spec)
            - simulate.end_of_study_mean(bm, scen.model_spec)
        ) / (2 * h)
    se_oracle = math.sqrt(grad @ fit.beta_cov() @ grad)
    assert se_delta == pytest.approx(se_oracle, abs=1e-8)
    assert np.allclose(a, [1.0, 2.0, 1.0, 2.0, 1.0])


def test_run_replication_uniform_rs_equals_full_ml():
    scen = Scenario(
        name="full",
        n_subjects=120,
        beta=PRESETS["a"].beta,
        delta_c=0.15,
        target_sample=120,
    )
    root = np.random.SeedSequence([94, 0])
    res = simulate.run_replication(scen, "rs", "cd", 4, root)
    assert res.ok and res.n_sampled == 120
    cohort_ss, _, _ = simulate._replication_streams(np.random.SeedSequence([94, 0]))
    cohort = simulate.generate_cohort(scen, np.random.default_rng(cohort_ss))
    ml = lmm.fit_ml(cohort)
    assert res.estimates["beta.g"] == pytest.approx(ml.theta_hat.beta[2], abs=1e-9)
    assert res.estimates["eos_mean"] == pytest.approx(
        simulate.end_of_study_mean(ml.theta_hat.beta, scen.model_spec), abs=1e-9
    )


def test_run_replication_deterministic():
    scen = PRESETS["a"]
    r1 = simulate.run_replication(scen, "ods.s", "cd", 4, np.random.SeedSequence([95, 1]))
    r2 = simulate.run_replication(scen, "ods.s", "cd", 4, np.random.SeedSequence([95, 1]))
    assert r1.estimates == r2.estimates
    assert r1.std_errors == r2.std_errors


def test_run_replication_ods_b_smoke():
    scen = PRESETS["a"]
    res = simulate.run_replication(scen, "ods.b", "cd", 4, np.random.SeedSequence([96, 2]))
    assert res.ok
    assert all(np.isfinite(v) for v in res.estimates.values())
    assert all(v > 0 for v in res.std_errors.values())
    design = simulate.design_for_scenario(scen, "ods.b")
    sd = math.sqrt(sum(p * (1 - p) for p in [0.1228] * 570 + [1.0] * 180))
    assert abs(res.n_sampled - 250) < 3 * sd + 20


def test_study_config_parsing_and_hash():
    cfg = StudyConfig.from_dict({"scenario": "a", "replications": 10, "master_seed": 7})
    assert cfg.scenario.name == "a"
    assert cfg.m_effective == 25
    assert cfg.config_hash() == StudyConfig.from_dict(
        {"scenario": "a", "replications": 10, "master_seed": 7}
    ).config_hash()
    with pytest.raises(ValueError, match="valid presets"):
        StudyConfig.from_dict({"scenario": "z"})
    with pytest.raises(ValueError, match="unknown config fields"):
        StudyConfig.from_dict({"scenario": "a", "bogus": 1})
    with pytest.raises(ValueError, match="replications"):
        StudyConfig.from_dict({"scenario": "a", "replications": 0})
    cfg2 = StudyConfig.from_dict({"scenario": PRESETS["e"].to_dict()})
    assert cfg2.scenario.include_c_in_model is False


def test_run_study_small_grid_and_report_shape():
    cfg = StudyConfig(
        scenario=PRESETS["a"],
        designs=("rs", "ods.i"),
        analyses=("cd",),
        replications=4,
        m_imputations=2,
        master_seed=11,
    )
    study = simulate.run_study(cfg, threads=1)
    rep = study.report
    assert rep.baseline == ("rs", "cd")
    base = rep.cell("rs", "cd")["parameters"]["beta.g"]
    assert base["rel_efficiency"] == pytest.approx(1.0)
    assert base["rel_eff_mc_se"] == 0.0
    other = rep.cell("ods.i", "cd")["parameters"]["beta.g"]
    assert other["rel_efficiency"] is not None and other["rel_efficiency"] > 0
    assert rep.cell("rs", "cd")["n_used"] == 4
    rows = rep.to_csv_rows()
    assert rows[0][0] == "design" and len(rows) > 10
    assert "rs" in rep.format_table()


def test_run_study_threads_byte_identical():
    cfg = StudyConfig(
        scenario=PRESETS["a"],
        designs=("rs", "ods.s"),
        analyses=("cd", "dmi"),
        replications=4,
        m_imputations=3,
        master_seed=13,
    )
    rep1 = simulate.run_study(cfg, threads=1).report
    rep2 = simulate.run_study(cfg, threads=2).report
    blob1 = json.dumps(rep1.to_dict(), sort_keys=True)
    blob2 = json.dumps(rep2.to_dict(), sort_keys=True)
    assert blob1 == blob2


def test_identical_estimate_streams_give_unit_ratio():
    scen = PRESETS["a"]
    cfg = StudyConfig(
        scenario=scen, designs=("rs",), analyses=("cd",), replications=3, master_seed=1
    )
    reps = [
        ReplicationResult(
            rep=r,
            design="rs",
            analysis="cd",
            n_sampled=10,
            estimates={"beta.g": float(r)},
            std_errors={"beta.g": 1.0},
        )
        for r in range(3)
    ]
    results = {("rs", "cd"): reps, ("ods.i", "cd"): [
        ReplicationResult(
            rep=r.rep, design="ods.i", analysis="cd", n_sampled=10,
            estimates=dict(r.estimates), std_errors=dict(r.std_errors),
        )
        for r in reps
    ]}
    cfg2 = StudyConfig(
        scenario=scen, designs=("rs", "ods.i"), analyses=("cd",), replications=3, master_seed=1
    )
    report = simulate.efficiency_report(results, cfg2)
    cell = report.cell("ods.i", "cd")["parameters"]["beta.g"]
    assert cell["rel_efficiency"] == pytest.approx(1.0, abs=1e-12)


def test_efficiency_report_fails_loudly_on_exclusions():
    scen = PRESETS["a"]
    cfg = StudyConfig(
        scenario=scen, designs=("rs",), analyses=("cd",), replications=10, master_seed=1
    )
    good = [
        ReplicationResult(
            rep=r, design="rs", analysis="cd", n_sampled=10,
            estimates={"beta.g": float(r)}, std_errors={"beta.g": 1.0},
        )
        for r in range(9)
    ]
    bad = [
        ReplicationResult(
            rep=9, design="rs", analysis="cd", n_sampled=10,
            estimates={}, std_errors={}, error="did not converge",
        )
    ]
    with pytest.raises(StudyError, match="did not converge"):
        simulate.efficiency_report({("rs", "cd"): good + bad}, cfg)


def test_scenario_key_stable_and_sensitive():
    k1 = simulate.scenario_key(PRESETS["a"])
    k2 = simulate.scenario_key(PRESETS["a"])
    k3 = simulate.scenario_key(PRESETS["b"])
    assert k1 == k2 != k3
