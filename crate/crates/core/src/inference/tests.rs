use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cell::{Covariate, CovariateSet};
use crate::graph::AdjacencyGraph;
use crate::ingest::{GeographyVersion, SurveyWave};
use crate::model::{CohortDomain, PriorConfig, Variant};

fn intercept_spec(priors: PriorConfig) -> ModelSpec {
    ModelSpec::new(
        Variant::Covariate,
        CovariateSet::empty(),
        vec![CohortDomain { cohort: Cohort(0), areas: vec!["a".into()] }],
        vec![SurveyWave(2017)],
        priors,
        BTreeMap::new(),
    )
    .unwrap()
}

fn bernoulli_records(n: usize, k: usize) -> Vec<MoverRecord> {
    (0..n)
        .map(|i| MoverRecord {
            household_id: format!("h{i}"),
            survey_wave: SurveyWave(2017),
            area: "a".into(),
            geography: GeographyVersion::V2010,
            cohort: Cohort(0),
            displaced: i < k,
            cell: CellKey::from_index(i % 900).unwrap(),
        })
        .collect()
}

fn quick(seed: u64) -> SamplerConfig {
    SamplerConfig {
        chains: 2,
        warmup: 200,
        draws: 500,
        thin: 1,
        seed,
        execution: Execution::Sequential,
    }
}

fn proposed_setup() -> (ModelSpec, Vec<MoverRecord>) {
    let nodes: Vec<AreaId> = ["1", "2", "3"].iter().map(|&s| s.into()).collect();
    let edges = vec![(nodes[0].clone(), nodes[1].clone()), (nodes[1].clone(), nodes[2].clone())];
    let mut graphs = BTreeMap::new();
    graphs.insert(GeographyVersion::V2010, AdjacencyGraph::new(nodes.clone(), &edges, GeographyVersion::V2010).unwrap());
    let spec = ModelSpec::from_graphs(
        Variant::Proposed,
        CovariateSet::empty().with(Covariate::Tenure),
        Cohort(0),
        2,
        vec![SurveyWave(2017), SurveyWave(2019)],
        PriorConfig::default(),
        &graphs,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let recs = (0..150)
        .map(|i| {
            let cohort = Cohort(rng.random_range(0..2));
            MoverRecord {
                household_id: format!("h{i}"),
                survey_wave: if cohort.0 == 0 { SurveyWave(2017) } else { SurveyWave(2019) },
                area: nodes[rng.random_range(0..3)].clone(),
                geography: GeographyVersion::V2010,
                cohort,
                displaced: rng.random_bool(0.3),
                cell: CellKey::from_index(rng.random_range(0..900)).unwrap(),
            }
        })
        .collect();
    (spec, recs)
}

#[test]
fn intercept_only_matches_quadrature() {
    let priors = PriorConfig { beta_sd: 2.0, ..Default::default() };
    let spec = intercept_spec(priors);
    let data = bernoulli_records(50, 20);
    let post = sample_posterior(&spec, &data, &quick(3)).unwrap();
    let p: Vec<f64> = post.column(0).iter().map(|&b| logistic(b)).collect();
    let est = stats::mean(&p);
    let ess = diagnostics::effective_sample_size(&p, post.num_chains());
    let mcse = stats::sd(&p) / ess.sqrt();

    // Simpson's rule over β₀ for the posterior mean of inv-logit(β₀)
    let m = 20_000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / m as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=m {
        let b = lo + i as f64 * h;
        let w = if i == 0 || i == m { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        let pr = logistic(b);
        let dens = (20.0 * pr.ln() + 30.0 * (1.0 - pr).ln() - b * b / 8.0).exp();
        num += w * dens * pr;
        den += w * dens;
    }
    let exact = num / den;
    assert!((est - exact).abs() < 2.0 * mcse, "{est} vs {exact} (mcse {mcse})");
}

#[test]
fn fixed_seed_gives_identical_draws() {
    let (spec, recs) = proposed_setup();
    let a = sample_posterior(&spec, &recs, &quick(9)).unwrap();
    let mut cfg = quick(9);
    cfg.execution = Execution::Parallel;
    let b = sample_posterior(&spec, &recs, &cfg).unwrap();
    assert_eq!(a.values(), b.values());
    let c = sample_posterior(&spec, &recs, &quick(10)).unwrap();
    assert_ne!(a.values(), c.values());
}

#[test]
fn stored_draws_satisfy_parameter_invariants() {
    let (spec, recs) = proposed_setup();
    let post = sample_posterior(&spec, &recs, &quick(2)).unwrap();
    assert_eq!(post.num_draws(), 1000);
    assert_eq!(post.names().len(), post.layout().len());
    let unique: std::collections::BTreeSet<&String> = post.names().iter().collect();
    assert_eq!(unique.len(), post.names().len());
    for r in (0..post.num_draws()).step_by(97) {
        let p = post.parameters(r);
        p.check_invariants().unwrap();
        assert!(p.alpha.iter().sum::<f64>().abs() < 1e-10);
        assert!(p.gamma.iter().sum::<f64>().abs() < 1e-10);
        for u in &p.structured {
            assert!(u.iter().sum::<f64>().abs() < 1e-10);
        }
    }
    assert_eq!(post.meta().acceptance.len(), 4);
    for a in &post.meta().acceptance {
        assert!(a.rate > 0.05 && a.rate < 0.8, "{a:?}");
    }
}

#[test]
fn identical_outcomes_produce_divergence_warning() {
    let spec = intercept_spec(PriorConfig::default());
    let data = bernoulli_records(30, 30);
    let post = sample_posterior(&spec, &data, &quick(1)).unwrap();
    assert!(post.warnings().iter().any(|w| w.contains("divergence")));
}

#[test]
fn empty_data_is_rejected() {
    let spec = intercept_spec(PriorConfig::default());
    assert!(sample_posterior(&spec, &[], &quick(1)).is_err());
}

fn constant_posterior(spec: &ModelSpec, fill: impl Fn(&str) -> f64, draws: usize) -> PosteriorDraws {
    let layout = spec.layout();
    let mut values = Vec::new();
    for name in layout.names() {
        values.extend(std::iter::repeat_n(fill(name), draws));
    }
    let meta = DrawMeta {
        chains: 1,
        draws_per_chain: draws,
        warmup: 0,
        thin: 1,
        seed: 0,
        spec_hash: spec_hash(spec),
        acceptance: vec![],
    };
    PosteriorDraws::from_parts(spec.clone(), meta, values).unwrap()
}

#[test]
fn zero_draw_predicts_one_half() {
    let (spec, _) = proposed_setup();
    let post = constant_posterior(&spec, |_| 0.0, 3);
    let keys = vec![("2".into(), Cohort(1))];
    let cells = predict_cells(&spec, &post, &keys).unwrap();
    assert!(cells.get(&"2".into(), Cohort(1)).unwrap().iter().all(|&p| p == 0.5));
}

#[test]
fn survey_effect_does_not_reach_cells() {
    let (spec, _) = proposed_setup();
    let a = constant_posterior(&spec, |n| if n.starts_with("beta") { 0.3 } else { 0.1 }, 2);
    let b = constant_posterior(
        &spec,
        |n| {
            if n.starts_with("gamma") {
                -0.7
            } else if n.starts_with("beta") {
                0.3
            } else {
                0.1
            }
        },
        2,
    );
    let keys = vec![("1".into(), Cohort(0)), ("3".into(), Cohort(1))];
    assert_eq!(predict_cells(&spec, &a, &keys).unwrap(), predict_cells(&spec, &b, &keys).unwrap());
    assert!(predict_cells(&spec, &a, &[("9".into(), Cohort(0))]).is_err());
}

#[test]
fn covariate_prediction_is_constant_across_areas_and_cohorts() {
    let spec = ModelSpec::new(
        Variant::Covariate,
        CovariateSet::all(),
        vec![
            CohortDomain { cohort: Cohort(0), areas: vec!["a".into(), "b".into()] },
            CohortDomain { cohort: Cohort(1), areas: vec!["a".into(), "c".into()] },
        ],
        vec![SurveyWave(2019)],
        PriorConfig::default(),
        BTreeMap::new(),
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let layout = spec.layout();
    let r = 4;
    let values: Vec<f64> = (0..layout.len() * r).map(|_| rng.random_range(-1.0..1.0)).collect();
    let meta = DrawMeta { chains: 1, draws_per_chain: r, warmup: 0, thin: 1, seed: 0, spec_hash: spec_hash(&spec), acceptance: vec![] };
    let post = PosteriorDraws::from_parts(spec.clone(), meta, values).unwrap();
    let keys = vec![("a".into(), Cohort(0)), ("b".into(), Cohort(0)), ("c".into(), Cohort(1))];
    let cells = predict_cells(&spec, &post, &keys).unwrap();
    let first = cells.get(&"a".into(), Cohort(0)).unwrap();
    for k in &keys {
        assert_eq!(cells.get(&k.0, k.1).unwrap(), first);
    }
    // deterministic pure function
    assert_eq!(predict_cells(&spec, &post, &keys).unwrap(), cells);
}

#[test]
fn odds_ratio_summary() {
    let (spec, _) = proposed_setup();
    let post = constant_posterior(&spec, |n| if n.starts_with("beta[") { 2f64.ln() } else { 0.0 }, 5);
    let or = fixed_effect_summary(&post);
    assert_eq!(or.len(), 1);
    assert!((or[0].odds_ratio - 2.0).abs() < 1e-12);
    assert!((or[0].lower - 2.0).abs() < 1e-12 && (or[0].upper - 2.0).abs() < 1e-12);
    let flipped = constant_posterior(&spec, |n| if n.starts_with("beta[") { -(2f64.ln()) } else { 0.0 }, 5);
    assert!((fixed_effect_summary(&flipped)[0].odds_ratio - 0.5).abs() < 1e-12);
}

#[test]
fn chain_order_does_not_change_pooled_quantiles() {
    let (spec, recs) = proposed_setup();
    let mut cfg = quick(4);
    cfg.chains = 3;
    cfg.draws = 100;
    let post = sample_posterior(&spec, &recs, &cfg).unwrap();
    let r = post.num_draws();
    let d = cfg.draws;
    let order = [2, 0, 1];
    let mut values = Vec::with_capacity(post.values().len());
    for k in 0..post.layout().len() {
        let col = post.column(k);
        for &c in &order {
            values.extend_from_slice(&col[c * d..(c + 1) * d]);
        }
    }
    assert_eq!(values.len(), r * post.layout().len());
    let swapped = PosteriorDraws::from_parts(spec.clone(), post.meta().clone(), values).unwrap();
    for (a, b) in post.diagnostics().iter().zip(swapped.diagnostics()) {
        assert_eq!((a.q025, a.median, a.q975), (b.q025, b.median, b.q975));
    }
    assert_eq!(fixed_effect_summary(&post), fixed_effect_summary(&swapped));
}

#[test]
fn archive_round_trip_is_exact() {
    let (spec, recs) = proposed_setup();
    let post = sample_posterior(&spec, &recs, &quick(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_archive(&post, dir.path()).unwrap();
    let back = read_archive(dir.path()).unwrap();
    assert_eq!(back.values(), post.values());
    assert_eq!(back.spec(), post.spec());
    assert_eq!(back.meta(), post.meta());
    let bytes1 = std::fs::read(dir.path().join(DRAWS_FILE)).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    write_archive(&back, dir2.path()).unwrap();
    assert_eq!(bytes1, std::fs::read(dir2.path().join(DRAWS_FILE)).unwrap());
    assert_eq!(
        std::fs::read(dir.path().join(META_FILE)).unwrap(),
        std::fs::read(dir2.path().join(META_FILE)).unwrap()
    );

    let mut corrupt = bytes1.clone();
    corrupt.truncate(corrupt.len() - 8);
    std::fs::write(dir2.path().join(DRAWS_FILE), corrupt).unwrap();
    assert!(read_archive(dir2.path()).is_err());
}
