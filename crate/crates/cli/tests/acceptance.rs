//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Run with `cargo test -p sae-cli --test acceptance [-- <criterion numbers>]`.
//! Verdicts are always printed; set `ACCEPTANCE_STRICT=1` to make any FAIL
//! a nonzero exit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use sae_core::benchmark::{accept_probability, direct_estimate, rejection_filter, ReplicateRow, ReplicateSurvey};
use sae_core::cell::{Covariate, CovariateSet, NUM_CELLS, NUM_COEFFICIENTS};
use sae_core::exec::Execution;
use sae_core::graph::{scale_icar, AdjacencyGraph};
use sae_core::inference::{diagnostics, sample_posterior, CellDraws, SamplerConfig};
use sae_core::ingest::{read_benchmarks, AreaId, BenchmarkTarget, Cohort, GeographyVersion, MoverRecord, PostStratTable, SurveyWave};
use sae_core::model::{logistic, CohortDomain, ModelSpec, Parameters, PosteriorDensity, PriorConfig, Variant};
use sae_core::poststrat::{poststratify, poststratify_posterior, AreaDraws};
use sae_core::validate::{grid_graph, loao, score, simulate, LoaoConfig, ScenarioConfig, SyntheticScenario};
use sae_core::{stats, Result};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Verdict> {
    Ok(Verdict { pass, detail })
}

type Criterion = (u32, &'static str, fn() -> Result<Verdict>);

fn main() {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let criteria: [Criterion; 9] = [
        (1, "poststratification oracle", c1_poststrat),
        (2, "benchmark filter exactness", c2_filter),
        (3, "BYM2 scaling", c3_scaling),
        (4, "sampler correctness", c4_sampler),
        (5, "parameter recovery", c5_recovery),
        (6, "validation harness", c6_validation),
        (7, "direct estimation", c7_direct),
        (8, "benchmarking effect direction", c8_direction),
        (9, "end-to-end determinism", c9_end_to_end),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if !wanted.is_empty() && !wanted.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let v = run().unwrap_or_else(|e| Verdict { pass: false, detail: format!("error: {e}") });
        let status = if v.pass { "PASS" } else { "FAIL" };
        if !v.pass {
            failed += 1;
        }
        println!("criterion {n} ({name}): {status} [{:.1}s] {}", t.elapsed().as_secs_f64(), v.detail);
    }
    println!("acceptance: {failed} failing");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

// 1 ---------------------------------------------------------------------------

fn c1_poststrat() -> Result<Verdict> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = 200;
    let mut cells = CellDraws { num_draws: r, values: BTreeMap::new() };
    let mut rows = Vec::new();
    for i in 0..100 {
        let key = (AreaId::new(format!("{}", 10_001 + i)), Cohort((i % 4) as u8));
        let probs: Vec<f64> = (0..r * NUM_CELLS).map(|_| rng.random::<f64>()).collect();
        let mut counts: Vec<f64> =
            (0..NUM_CELLS).map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.5..60.0) }).collect();
        counts[rng.random_range(0..NUM_CELLS)] = 1.0;
        cells.values.insert(key.clone(), probs);
        rows.push((key, counts));
    }
    let table = PostStratTable::from_rows(rows.clone())?;
    let out = poststratify(&cells, &table)?;
    let mut max_err: f64 = 0.0;
    for (key, counts) in &rows {
        let p = &cells.values[key];
        let got = &out.values[key];
        for d in 0..r {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..NUM_CELLS {
                num += counts[j] * p[d * NUM_CELLS + j];
                den += counts[j];
            }
            max_err = max_err.max((num / den - got[d]).abs());
        }
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        max_err <= 1e-12 && secs < 10.0,
        format!("100 instances, 900 cells, R=200: max abs error {max_err:.2e} in {secs:.2}s"),
    )
}

// 2 ---------------------------------------------------------------------------

/// P(K > x) for the Kolmogorov distribution.
fn kolmogorov_sf(x: f64) -> f64 {
    if x < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let k = k as f64;
        let term = (-2.0 * k * k * x * x).exp();
        s += if k as u64 % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

fn ks_p_value(sample: &[f64], cdf: impl Fn(f64) -> f64) -> (f64, f64) {
    let mut x = sample.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = cdf(v);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    (d, kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d))
}

fn single_area(values: Vec<f64>, cohort: Cohort) -> AreaDraws {
    let key = (AreaId::new("10001"), cohort);
    AreaDraws {
        num_draws: values.len(),
        values: BTreeMap::from([(key.clone(), values)]),
        populations: BTreeMap::from([(key, 1.0)]),
    }
}

fn c2_filter() -> Result<Verdict> {
    let t = Instant::now();
    let (m0, s0, y, se) = (0.30, 0.02, 0.33, 0.015);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let draws: Vec<f64> = (0..100_000).map(|_| m0 + s0 * normal(&mut rng)).collect();
    let target = BenchmarkTarget::new(Cohort(0), y, se)?;
    let res = rejection_filter(&single_area(draws, Cohort(0)), &[target], 2)?;
    let kept = res.kept.get(&AreaId::new("10001"), Cohort(0)).unwrap();
    let prec = 1.0 / (s0 * s0) + 1.0 / (se * se);
    let mean = (m0 / (s0 * s0) + y / (se * se)) / prec;
    let tilted = Normal::new(mean, prec.powf(-0.5)).unwrap();
    let (d, p) = ks_p_value(kept, |x| tilted.cdf(x));

    // closed forms, including two cohorts judged jointly
    let mut max_err: f64 = 0.0;
    for z in [0.0, 1.0, -1.5, 2.0, 3.0] {
        let draws = single_area(vec![0.2 + z * 0.01], Cohort(1));
        let target = BenchmarkTarget::new(Cohort(1), 0.2, 0.01)?;
        let a = accept_probability(&draws, 0, &[target])?;
        max_err = max_err.max((a - (-z * z / 2.0).exp()).abs());
    }
    let mut joint = single_area(vec![0.21], Cohort(0));
    joint.values.insert((AreaId::new("20001"), Cohort(3)), vec![0.28]);
    joint.populations.insert((AreaId::new("20001"), Cohort(3)), 5.0);
    let targets = [BenchmarkTarget::new(Cohort(0), 0.2, 0.01)?, BenchmarkTarget::new(Cohort(3), 0.3, 0.01)?];
    let a = accept_probability(&joint, 0, &targets)?;
    max_err = max_err.max((a - (-(1.0 + 4.0) / 2.0f64).exp()).abs());
    let two_sigma = accept_probability(&single_area(vec![0.22], Cohort(0)), 0, &[BenchmarkTarget::new(Cohort(0), 0.2, 0.01)?])?;

    let secs = t.elapsed().as_secs_f64();
    verdict(
        p > 0.01 && max_err <= 1e-12 && (two_sigma - 0.1353).abs() < 5e-5 && secs < 30.0,
        format!(
            "kept {} of 100000, KS D={d:.4} p={p:.3}; closed-form max error {max_err:.1e}; 2 sigma -> {two_sigma:.4}",
            kept.len()
        ),
    )
}

// 3 ---------------------------------------------------------------------------

fn random_connected_graph(rng: &mut ChaCha8Rng, n: usize) -> Result<AdjacencyGraph> {
    let nodes: Vec<AreaId> = (0..n).map(|i| AreaId::new(format!("{}", 10_001 + i))).collect();
    let mut edges = Vec::new();
    for i in 1..n {
        let j = rng.random_range(0..i);
        edges.push((nodes[j].clone(), nodes[i].clone()));
    }
    for _ in 0..rng.random_range(0..=n) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            let e = (nodes[a.min(b)].clone(), nodes[a.max(b)].clone());
            if !edges.contains(&e) && !edges.contains(&(e.1.clone(), e.0.clone())) {
                edges.push(e);
            }
        }
    }
    AdjacencyGraph::new(nodes, &edges, GeographyVersion::V2010)
}

fn c3_scaling() -> Result<Verdict> {
    let pair: Vec<AreaId> = vec!["10001".into(), "10002".into()];
    let g = AdjacencyGraph::new(pair.clone(), &[(pair[0].clone(), pair[1].clone())], GeographyVersion::V2010)?;
    let kappa = scale_icar(&g).scale_factor().unwrap_or(f64::NAN);
    let kappa_ok = (kappa - 0.25).abs() <= 1e-15;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(2..=15);
        let s = scale_icar(&random_connected_graph(&mut rng, n)?);
        // generalized inverse under the sum-to-zero constraint:
        // (Q + J/n)^{-1} - J/n for a connected graph
        let j = DMatrix::from_element(n, n, 1.0 / n as f64);
        let inv = (s.precision() + &j).try_inverse().expect("Q + J/n is invertible") - j;
        let log_mean = (0..n).map(|i| inv[(i, i)].ln()).sum::<f64>() / n as f64;
        worst = worst.max((log_mean.exp() - 1.0).abs());
    }
    verdict(
        kappa_ok && worst <= 1e-6,
        format!("two-node kappa {kappa}; 200 random graphs: max |geometric-mean variance - 1| {worst:.1e}"),
    )
}

// 4 ---------------------------------------------------------------------------

fn c4_sampler() -> Result<Verdict> {
    let t = Instant::now();
    let (ok_a, da) = c4a_quadrature()?;
    let (ok_b, db) = c4b_sbc()?;
    let (ok_c, dc) = c4c_gradient()?;
    let secs = t.elapsed().as_secs_f64();
    verdict(ok_a && ok_b && ok_c && secs < 600.0, format!("(a) {da}; (b) {db}; (c) {dc}"))
}

fn c4a_quadrature() -> Result<(bool, String)> {
    let priors = PriorConfig { beta_sd: 2.0, ..Default::default() };
    let spec = ModelSpec::new(
        Variant::Covariate,
        CovariateSet::empty(),
        vec![CohortDomain { cohort: Cohort(0), areas: vec!["10001".into()] }],
        vec![SurveyWave(2017)],
        priors,
        BTreeMap::new(),
    )?;
    let (n, k) = (60, 17);
    let data: Vec<MoverRecord> = (0..n)
        .map(|i| MoverRecord {
            household_id: format!("h{i}"),
            survey_wave: SurveyWave(2017),
            area: "10001".into(),
            geography: GeographyVersion::V2010,
            cohort: Cohort(0),
            displaced: i < k,
            cell: sae_core::cell::CellKey::from_index(i % NUM_CELLS).unwrap(),
        })
        .collect();
    let cfg = SamplerConfig { chains: 4, warmup: 500, draws: 2500, seed: 4, ..Default::default() };
    let post = sample_posterior(&spec, &data, &cfg)?;
    let b = post.column(0);
    let est = stats::mean(b);
    let mcse = stats::sd(b) / diagnostics::effective_sample_size(b, post.num_chains()).sqrt();

    // Simpson's rule on a wide grid
    let m = 40_000;
    let (lo, hi) = (-15.0, 15.0);
    let h = (hi - lo) / m as f64;
    let (mut num, mut den) = (0.0, 0.0);
    let log_peak = {
        let p = k as f64 / n as f64;
        k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
    };
    for i in 0..=m {
        let x = lo + i as f64 * h;
        let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let p = logistic(x);
        let dens = (k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln() - log_peak - x * x / 8.0).exp();
        num += w * dens * x;
        den += w * dens;
    }
    let exact = num / den;
    let ok = (est - exact).abs() <= 2.0 * mcse;
    Ok((ok, format!("intercept mean {est:.4} vs quadrature {exact:.4} (2 MCSE = {:.4})", 2.0 * mcse)))
}

fn sbc_spec(priors: PriorConfig) -> Result<ModelSpec> {
    let mut graphs = BTreeMap::new();
    for geo in [GeographyVersion::V2010, GeographyVersion::V2020] {
        graphs.insert(geo, grid_graph(geo, 1, 3)?);
    }
    ModelSpec::from_graphs(
        Variant::Cohort,
        CovariateSet::empty().with(Covariate::Tenure),
        Cohort(0),
        4,
        vec![SurveyWave(2019), SurveyWave(2023)],
        priors,
        &graphs,
    )
}

fn centered(mut v: Vec<f64>) -> Vec<f64> {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
    v
}

/// One draw of every parameter from the cohort-variant prior.
fn prior_draw(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Parameters {
    let priors = spec.priors();
    let gamma = Gamma::new(priors.precision_shape, 1.0 / priors.precision_rate).unwrap();
    let mut p = Parameters::zeros(spec);
    p.beta0 = priors.beta_sd * normal(rng);
    p.beta.iter_mut().for_each(|b| *b = priors.beta_sd * normal(rng));
    let tau_a: f64 = gamma.sample(rng);
    let mut level = 0.0;
    let walk = (0..spec.num_cohorts())
        .map(|_| {
            level += normal(rng) / tau_a.sqrt();
            level
        })
        .collect();
    p.alpha = centered(walk);
    p.hyper.alpha_precision = Some(tau_a);
    let tau_g: f64 = gamma.sample(rng);
    p.gamma = centered((0..spec.waves().len()).map(|_| normal(rng) / tau_g.sqrt()).collect());
    p.hyper.gamma_precision = Some(tau_g);
    p
}

fn c4b_sbc() -> Result<(bool, String)> {
    let priors = PriorConfig { beta_sd: 1.0, precision_shape: 4.0, precision_rate: 1.0, ..Default::default() };
    let spec = sbc_spec(priors)?;
    let (reps, bins, kept) = (200, 10, 99);
    let tracked: [(&str, fn(&Parameters) -> f64); 5] = [
        ("beta0", |p: &Parameters| p.beta0),
        ("beta[tenure:rent_other]", |p: &Parameters| p.beta[0]),
        ("alpha[2016-2017]", |p: &Parameters| p.alpha[0]),
        ("gamma[2019]", |p: &Parameters| p.gamma[0]),
        ("log_precision_alpha", |p: &Parameters| p.hyper.alpha_precision.unwrap().ln()),
    ];
    let mut counts = vec![vec![0usize; bins]; tracked.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    for rep in 0..reps {
        let truth = prior_draw(&spec, &mut rng);
        let scenario = SyntheticScenario::with_parameters(spec.clone(), truth.clone(), 360, 1000.0, 4.0, 1000 + rep)?;
        let data = simulate(&scenario)?;
        let cfg = SamplerConfig {
            chains: 1,
            warmup: 300,
            draws: kept,
            thin: 5,
            seed: rep,
            execution: Execution::Sequential,
        };
        let post = sample_posterior(&spec, &data.movers, &cfg)?;
        for (q, (name, f)) in tracked.iter().enumerate() {
            let col = post.column_by_name(name).expect("tracked parameter exists");
            let v = f(&truth);
            let rank = col.iter().filter(|&&x| x < v).count();
            counts[q][rank * bins / (kept + 1)] += 1;
        }
    }
    let expected = reps as f64 / bins as f64;
    let chi = ChiSquared::new((bins - 1) as f64).unwrap();
    let ps: Vec<f64> = counts
        .iter()
        .map(|c| {
            let x2: f64 = c.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
            1.0 - chi.cdf(x2)
        })
        .collect();
    let min_p = ps.iter().copied().fold(1.0, f64::min);
    let detail = tracked
        .iter()
        .zip(&ps)
        .map(|((n, _), p)| format!("{n} p={p:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    Ok((min_p > 0.01, format!("SBC over {reps} replicates: {detail}")))
}

fn c4c_gradient() -> Result<(bool, String)> {
    let scenario = SyntheticScenario::generate(&ScenarioConfig { movers: 600, seed: 7, ..Default::default() })?;
    let data = simulate(&scenario)?;
    let idx = scenario.spec.index_data(&data.movers)?;
    let density = PosteriorDensity::new(&scenario.spec, &idx);
    let n = density.layout().len();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let x: Vec<f64> = (0..n).map(|_| 0.5 * normal(&mut rng)).collect();
        let mut g = vec![0.0; n];
        density.evaluate(&x, Some(&mut g))?;
        for k in 0..n {
            let h = 1e-5 * x[k].abs().max(1.0);
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[k] += h;
            xm[k] -= h;
            let fd = (density.evaluate(&xp, None)? - density.evaluate(&xm, None)?) / (2.0 * h);
            worst = worst.max((fd - g[k]).abs() / g[k].abs().max(1.0));
        }
    }
    Ok((worst <= 1e-5, format!("max relative gradient error {worst:.1e} over 10 points x {n} coordinates")))
}

// 5 ---------------------------------------------------------------------------

fn c5_recovery() -> Result<Verdict> {
    const RENTER: usize = 9;
    let mut good_runs = 0;
    let mut renter_abs = Vec::new();
    let mut per_seed = Vec::new();
    for seed in 0..10 {
        let scenario = SyntheticScenario::generate(&ScenarioConfig { seed, ..Default::default() })?;
        let data = simulate(&scenario)?;
        let cfg = SamplerConfig { chains: 2, warmup: 500, draws: 1000, seed, ..Default::default() };
        let post = sample_posterior(&scenario.spec, &data.movers, &cfg)?;
        let mut covered = 0;
        for k in 0..NUM_COEFFICIENTS {
            let sorted = stats::sorted(post.column(1 + k));
            let (lo, hi) = stats::interval_sorted(&sorted, 0.95);
            let truth = scenario.true_params.beta[k];
            if lo <= truth && truth <= hi {
                covered += 1;
            }
        }
        if covered >= 12 {
            good_runs += 1;
        }
        renter_abs.push((stats::mean(post.column(1 + RENTER)) - scenario.true_params.beta[RENTER]).abs());
        per_seed.push(covered.to_string());
    }
    let renter = stats::mean(&renter_abs);
    verdict(
        good_runs >= 8 && renter <= 0.15,
        format!(
            "{good_runs}/10 seeds cover >= 12 of 14 coefficients (per seed: {}); mean |renter error| {renter:.3}",
            per_seed.join(" ")
        ),
    )
}

// 6 ---------------------------------------------------------------------------

fn c6_validation() -> Result<Verdict> {
    let mut wins = 0;
    let (mut covered, mut folds) = (0.0, 0.0);
    let mut notes = Vec::new();
    for rep in 0..10u64 {
        let config = ScenarioConfig {
            seed: 100 + rep,
            movers: 1800,
            grid_rows: 3,
            grid_cols: 3,
            phi: 1.0,
            spatial_sd: 0.7,
            temporal_sd: 0.3,
            priors: PriorConfig { precision_shape: 1.0, precision_rate: 0.1, ..Default::default() },
            ..Default::default()
        };
        let scenario = SyntheticScenario::generate(&config)?;
        let data = simulate(&scenario)?;
        let loao_cfg = LoaoConfig {
            sampler: SamplerConfig { chains: 1, warmup: 200, draws: 400, seed: rep, ..Default::default() },
            ..Default::default()
        };
        let summary = score(&loao(&scenario.spec, &Variant::ALL, &data.movers, &loao_cfg)?)?;
        let best = summary
            .overall
            .iter()
            .min_by(|a, b| a.mse_x1000.partial_cmp(&b.mse_x1000).unwrap())
            .unwrap();
        if best.variant == Variant::Proposed {
            wins += 1;
        }
        let proposed = summary.overall.iter().find(|s| s.variant == Variant::Proposed).unwrap();
        let scored = (proposed.folds - proposed.failed) as f64;
        covered += proposed.coverage[1] / 100.0 * scored;
        folds += scored;
        notes.push(format!("{}:{:.1}", best.variant.name(), proposed.coverage[1]));
    }
    let coverage = 100.0 * covered / folds;
    verdict(
        wins >= 8 && (82.0..=98.0).contains(&coverage),
        format!(
            "proposed lowest MSE in {wins}/10 replicates; pooled 90% coverage {coverage:.1}% (best variant:proposed 90% coverage per replicate: {})",
            notes.join(" ")
        ),
    )
}

// 7 ---------------------------------------------------------------------------

fn survey(rows: &[(bool, f64, &[f64])], fay: f64) -> Result<ReplicateSurvey> {
    ReplicateSurvey::new(
        rows.iter()
            .map(|&(displaced, weight, reps)| ReplicateRow { displaced, weight, rep_weights: reps.to_vec() })
            .collect(),
        fay,
    )
}

fn c7_direct() -> Result<Verdict> {
    // (rows, fay, estimate, standard error) worked out by hand
    type Fixture<'a> = (Vec<(bool, f64, &'a [f64])>, f64, f64, f64);
    let fixtures: Vec<Fixture> = vec![
        (vec![(true, 1.0, &[1.0, 1.0]), (false, 1.0, &[1.0, 1.0]), (true, 2.0, &[2.0, 2.0])], 0.5, 0.75, 0.0),
        (vec![(true, 2.0, &[1.0, 3.0]), (false, 2.0, &[3.0, 1.0])], 0.5, 0.5, 0.5),
        (vec![(true, 1.0, &[2.0, 1.0, 1.0, 1.0]), (false, 1.0, &[1.0, 1.0, 1.0, 1.0])], 0.5, 0.5, 1.0 / 6.0),
        (
            vec![(true, 3.0, &[3.0, 3.0, 6.0]), (false, 1.0, &[1.0, 2.0, 1.0]), (false, 2.0, &[2.0, 1.0, 1.0])],
            0.5,
            0.5,
            (1.0f64 / 12.0).sqrt(),
        ),
        (vec![(true, 1.0, &[2.0, 1.0]), (false, 1.0, &[1.0, 1.0])], 0.3, 0.5, (1.0f64 / 35.28).sqrt()),
    ];
    let mut max_err: f64 = 0.0;
    for (rows, fay, est, se) in &fixtures {
        let t = direct_estimate(&survey(rows, *fay)?, Cohort(0))?;
        max_err = max_err.max((t.estimate - est).abs()).max((t.std_error - se).abs());
    }
    let degenerate = direct_estimate(
        &survey(&[(true, 3.0, &[3.0; 4]), (false, 5.0, &[5.0; 4]), (true, 2.0, &[2.0; 4])], 0.5)?,
        Cohort(2),
    )?;

    let published = "cohort,estimate,std_error\n0,0.266,0.019\n1,0.212,0.018\n2,0.240,0.018\n3,0.228,0.021\n";
    let loaded = read_benchmarks(published.as_bytes(), "published.csv")?;
    let expected = [(0.266, 0.019), (0.212, 0.018), (0.240, 0.018), (0.228, 0.021)];
    let table_ok = loaded.len() == 4
        && loaded
            .iter()
            .zip(expected)
            .enumerate()
            .all(|(c, (t, (e, s)))| t.cohort == Cohort(c as u8) && t.estimate == e && t.std_error == s);

    verdict(
        max_err <= 1e-15 && degenerate.std_error == 0.0 && table_ok,
        format!(
            "5 fixtures max error {max_err:.1e}; degenerate SE {}; published rows reproduced: {table_ok}",
            degenerate.std_error
        ),
    )
}

// 8 ---------------------------------------------------------------------------

fn c8_direction() -> Result<Verdict> {
    let scenario = SyntheticScenario::generate(&ScenarioConfig { movers: 1500, seed: 8, ..Default::default() })?;
    let data = simulate(&scenario)?;
    let cfg = SamplerConfig { chains: 2, warmup: 300, draws: 1000, seed: 8, ..Default::default() };
    let post = sample_posterior(&scenario.spec, &data.movers, &cfg)?;
    let draws = poststratify_posterior(&post, &data.poststrat, None, Execution::default())?;
    let mut instances = 0;
    let mut good = 0;
    for cohort in draws.cohorts() {
        let agg = draws.aggregate(cohort).unwrap();
        let (m, s) = (stats::mean(&agg), stats::sd(&agg));
        for k in [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0] {
            let target = BenchmarkTarget::new(cohort, m + k * s, s)?;
            let res = rejection_filter(&draws, &[target], 80 + instances)?;
            let after = res.kept.aggregate(cohort).unwrap();
            let (m2, s2) = (stats::mean(&after), stats::sd(&after));
            let toward = (target.estimate - m2).abs() < (target.estimate - m).abs() && (m2 - m) * k > 0.0;
            if toward && s2 <= s {
                good += 1;
            }
            instances += 1;
        }
    }
    verdict(
        good == instances,
        format!("{good}/{instances} offset instances moved toward the target without widening"),
    )
}

// 9 ---------------------------------------------------------------------------

fn run_sae(args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sae"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("sae {}: {}", args[0], String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline(out: &Path) -> std::result::Result<(), String> {
    let fx = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let f = |n: &str| fx.join(n).to_string_lossy().into_owned();
    let o = |n: &str| out.join(n).to_string_lossy().into_owned();
    let cfg = f("config.toml");
    let graph = ["--nodes".to_string(), f("nodes.csv"), "--adjacency".to_string(), f("adjacency.csv")];
    let with = |base: &[String]| -> Vec<String> { base.iter().cloned().chain(graph.iter().cloned()).collect() };
    let steps: Vec<Vec<String>> = vec![
        with(&["fit".into(), "--config".into(), cfg.clone(), "--movers".into(), f("movers.csv"), "--out-dir".into(), o("fit")]),
        vec![
            "estimate".into(),
            "--config".into(),
            cfg.clone(),
            "--draws".into(),
            o("fit"),
            "--poststrat".into(),
            f("poststrat.csv"),
            "--benchmarks".into(),
            f("benchmark.csv"),
            "--out-dir".into(),
            o("estimate"),
        ],
        with(&["validate".into(), "--config".into(), cfg.clone(), "--movers".into(), f("movers.csv"), "--out-dir".into(), o("validate")]),
        vec!["direct".into(), "--config".into(), cfg, "--replicates".into(), f("replicates.csv"), "--out-dir".into(), o("direct")],
    ];
    for s in &steps {
        let args: Vec<&str> = s.iter().map(String::as_str).collect();
        run_sae(&args)?;
    }
    Ok(())
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in fs::read_dir(dir).unwrap() {
        let sub = sub.unwrap().path();
        for f in fs::read_dir(&sub).unwrap() {
            let f = f.unwrap().path();
            let name = format!("{}/{}", sub.file_name().unwrap().to_string_lossy(), f.file_name().unwrap().to_string_lossy());
            out.insert(name, fs::read(&f).unwrap());
        }
    }
    out
}

fn c9_end_to_end() -> Result<Verdict> {
    let t = Instant::now();
    let (a, b) = (tempfile::tempdir().expect("temp dir"), tempfile::tempdir().expect("temp dir"));
    if let Err(e) = pipeline(a.path()).and_then(|_| pipeline(b.path())) {
        return verdict(false, e);
    }
    let elapsed = t.elapsed() / 2;
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    let outputs: Vec<&String> = ta.keys().filter(|k| !k.ends_with("run_manifest.json")).collect();
    let identical = ta.keys().eq(tb.keys()) && outputs.iter().all(|k| ta[*k] == tb[*k]);
    let manifests_agree = ta.keys().filter(|k| k.ends_with("run_manifest.json")).all(|k| {
        let strip = |bytes: &[u8]| {
            let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
            let m = v.as_object_mut().unwrap();
            m.remove("started_at");
            m.remove("finished_at");
            // inputs inside the per-run output directory differ by path only
            for input in m["inputs"].as_array_mut().unwrap() {
                input.as_object_mut().unwrap().remove("path");
            }
            v
        };
        strip(&ta[k]) == strip(&tb[k])
    });

    let header = |k: &str| -> String {
        ta.get(k).map(|b| String::from_utf8_lossy(b).lines().next().unwrap_or("").to_string()).unwrap_or_default()
    };
    let layouts = [
        ("direct/benchmark.csv", "cohort,estimate,std_error,n"),
        ("fit/odds_ratios.csv", "covariate,level,odds_ratio,lower95,upper95"),
        ("validate/validation_summary.csv", "model,folds,failed,mse_x1000,coverage_80,coverage_90,coverage_95"),
        ("estimate/estimates.csv", "puma,cohort,posterior_median,ci95_width,posterior_sd"),
        ("estimate/benchmarked_estimates.csv", "puma,cohort,posterior_median,ci95_width,posterior_sd"),
        (
            "estimate/benchmark_comparison.csv",
            "puma,cohort,unbenchmarked_median,unbenchmarked_sd,benchmarked_median,benchmarked_sd",
        ),
        (
            "validate/validation_summary_by_cohort.csv",
            "model,cohort,folds,failed,mse_x1000,coverage_80,coverage_90,coverage_95",
        ),
    ];
    let missing: Vec<&str> = layouts.iter().filter(|(k, h)| header(k) != *h).map(|(k, _)| *k).collect();
    verdict(
        identical && manifests_agree && missing.is_empty() && elapsed < Duration::from_secs(900),
        format!(
            "{} output files byte-identical: {identical}; manifests agree: {manifests_agree}; {:.1}s per run; missing layouts: {missing:?}",
            outputs.len(),
            elapsed.as_secs_f64()
        ),
    )
}
