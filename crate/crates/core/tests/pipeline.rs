use sae_core::cell::{design_rows, NUM_CELLS};
use sae_core::exec::Execution;
use sae_core::inference::{predict_cells, read_archive, sample_posterior, write_archive, SamplerConfig};
use sae_core::model::{logistic, Variant};
use sae_core::poststrat::{poststratify, poststratify_posterior};
use sae_core::validate::{loao, score, simulate, LoaoConfig, ScenarioConfig, SyntheticData, SyntheticScenario};

fn small() -> (SyntheticScenario, SyntheticData) {
    let s = SyntheticScenario::generate(&ScenarioConfig { movers: 600, seed: 21, ..Default::default() }).unwrap();
    let d = simulate(&s).unwrap();
    (s, d)
}

fn sampler(execution: Execution) -> SamplerConfig {
    SamplerConfig { chains: 2, warmup: 100, draws: 150, thin: 1, seed: 9, execution }
}

#[test]
fn execution_mode_does_not_change_draws() {
    let (s, d) = small();
    let seq = sample_posterior(&s.spec, &d.movers, &sampler(Execution::Sequential)).unwrap();
    let par = sample_posterior(&s.spec, &d.movers, &sampler(Execution::Parallel)).unwrap();
    assert_eq!(seq.values(), par.values());

    let a = poststratify_posterior(&seq, &d.poststrat, None, Execution::Sequential).unwrap();
    let b = poststratify_posterior(&seq, &d.poststrat, None, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn poststratified_draws_match_hand_computation() {
    let (s, d) = small();
    let post = sample_posterior(&s.spec, &d.movers, &sampler(Execution::Sequential)).unwrap();
    let fast = poststratify_posterior(&post, &d.poststrat, None, Execution::Sequential).unwrap();

    let keys: Vec<_> = fast.values.keys().cloned().collect();
    let cells = predict_cells(&s.spec, &post, &keys).unwrap();
    let slow = poststratify(&cells, &d.poststrat).unwrap();

    let rows = design_rows(s.spec.covariates());
    let layout = post.layout();
    for (area, cohort) in keys.iter().take(4) {
        let t = s.spec.cohort_position(*cohort).unwrap();
        let a = s.spec.area_position(t, area).unwrap();
        let counts = d.poststrat.counts(area, *cohort).unwrap();
        let total: f64 = counts.iter().sum();
        for r in [0, post.num_draws() / 2, post.num_draws() - 1] {
            let x = post.coordinates(r);
            let offset = x[layout.alpha.unwrap() + t] + x[layout.omega[t] + a];
            let mut rate = 0.0;
            for j in 0..NUM_CELLS {
                let eta = x[0] + rows[j].iter().map(|&k| x[1 + k]).sum::<f64>() + offset;
                rate += counts[j] * logistic(eta);
            }
            rate /= total;
            assert!((rate - fast.get(area, *cohort).unwrap()[r]).abs() < 1e-12);
            assert!((rate - slow.get(area, *cohort).unwrap()[r]).abs() < 1e-12);
        }
    }
}

#[test]
fn archive_round_trip_preserves_estimates() {
    let (s, d) = small();
    let post = sample_posterior(&s.spec, &d.movers, &sampler(Execution::Sequential)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_archive(&post, dir.path()).unwrap();
    let back = read_archive(dir.path()).unwrap();
    let a = poststratify_posterior(&post, &d.poststrat, None, Execution::Sequential).unwrap();
    let b = poststratify_posterior(&back, &d.poststrat, None, Execution::Sequential).unwrap();
    assert_eq!(a, b);
}

#[test]
fn loao_is_independent_of_execution_mode() {
    let s = SyntheticScenario::generate(&ScenarioConfig { movers: 300, grid_cols: 2, grid_rows: 1, seed: 4, ..Default::default() })
        .unwrap();
    let d = simulate(&s).unwrap();
    let run = |execution| {
        let cfg = LoaoConfig {
            sampler: SamplerConfig { chains: 1, warmup: 60, draws: 80, thin: 1, seed: 2, execution: Execution::Sequential },
            execution,
        };
        loao(&s.spec, &[Variant::Cohort, Variant::Proposed], &d.movers, &cfg).unwrap()
    };
    let seq = run(Execution::Sequential);
    let par = run(Execution::Parallel);
    assert_eq!(seq.rows.len(), 2 * 8);
    assert_eq!(score(&seq).unwrap(), score(&par).unwrap());
}
