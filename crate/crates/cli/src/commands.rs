use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde_json::json;

use sae_core::benchmark::{self, compare};
use sae_core::exec::Execution;
use sae_core::graph::{load_graphs, write_graphs, AdjacencyGraph};
use sae_core::inference::{self, fixed_effect_summary, read_archive, write_archive, SamplerConfig, DRAWS_FILE, META_FILE};
use sae_core::ingest::{
    self, AreaId, BenchmarkTarget, Cohort, GeographyVersion, MoverRecord, PostStratTable,
};
use sae_core::model::{CohortDomain, ModelSpec, Variant};
use sae_core::poststrat::{poststratify_posterior, summarize, AreaDraws};
use sae_core::stats;
use sae_core::validate::{self, grid_graph, LoaoConfig, SyntheticScenario, LEVELS};

use crate::config::Config;
use crate::manifest::{digest_file, now, sha256_hex, FileDigest, RunManifest};
use crate::output::{finish, num, CliError, CliResult, Outputs};
use crate::{Cli, Command, DirectArgs, EstimateArgs, FitArgs, GraphArgs, ValidateArgs};

struct Context {
    config: Config,
    config_sha256: String,
    seed: u64,
    execution: Execution,
}

/// What a command reports for its manifest.
#[derive(Default)]
struct Report {
    inputs: Vec<PathBuf>,
    settings: serde_json::Value,
    warnings: Vec<String>,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let started_at = now();
    let (config, config_sha256) = match &cli.config {
        Some(p) => {
            let (c, bytes) = Config::load(p)?;
            (c, sha256_hex(&bytes))
        }
        None => (Config::default(), sha256_hex(b"")),
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Input("--threads must be at least 1".into()));
        }
        #[cfg(feature = "parallel")]
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Input(format!("cannot configure thread pool: {e}")))?;
    }
    let execution = match cli.threads {
        Some(1) => Execution::Sequential,
        _ => Execution::default(),
    };
    let ctx = Context {
        seed: cli.seed.or(config.seed).unwrap_or(0),
        config,
        config_sha256,
        execution,
    };
    let mut out = Outputs::create(&cli.out_dir)?;
    let (name, report) = match &cli.command {
        Command::Fit(a) => ("fit", fit(&ctx, a, &mut out)?),
        Command::Estimate(a) => ("estimate", estimate(&ctx, a, &mut out)?),
        Command::Validate(a) => ("validate", validate_cmd(&ctx, a, &mut out)?),
        Command::Simulate => ("simulate", simulate(&ctx, &mut out)?),
        Command::Direct(a) => ("direct", direct(&ctx, a, &mut out)?),
    };
    let inputs = report
        .inputs
        .iter()
        .map(|p| Ok(FileDigest { path: p.display().to_string(), sha256: digest_file(p)? }))
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = RunManifest {
        command: name.to_string(),
        software_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: ctx.seed,
        config_sha256: ctx.config_sha256.clone(),
        settings: report.settings,
        inputs,
        outputs: out.digests()?,
        warnings: report.warnings,
        started_at,
        finished_at: now(),
    };
    let path = manifest.write(out.dir())?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_movers(path: &Path) -> CliResult<Vec<MoverRecord>> {
    let load = ingest::load_movers(path)?;
    info!(
        "{}: {} rows, {} kept ({} missing outcome, {} missing covariates, {} outside the cohorts)",
        path.display(),
        load.rows_read,
        load.records.len(),
        load.dropped_missing_outcome,
        load.dropped_missing_covariates,
        load.excluded_by_duration
    );
    if load.records.is_empty() {
        return Err(CliError::Input(format!("{}: no usable mover records", path.display())));
    }
    Ok(load.records)
}

fn load_graph_args(g: &GraphArgs, report: &mut Report) -> CliResult<Option<BTreeMap<GeographyVersion, AdjacencyGraph>>> {
    let Some(nodes) = &g.nodes else { return Ok(None) };
    report.inputs.push(nodes.clone());
    report.inputs.extend(g.adjacency.clone());
    Ok(Some(load_graphs(nodes, g.adjacency.as_deref())?))
}

/// Model over the cohort range present in `records`. Areas come from the
/// graphs when given, otherwise from the records themselves.
fn build_spec(
    ctx: &Context,
    variant: Variant,
    records: &[MoverRecord],
    graphs: Option<&BTreeMap<GeographyVersion, AdjacencyGraph>>,
) -> CliResult<ModelSpec> {
    let cohorts: BTreeSet<Cohort> = records.iter().map(|m| m.cohort).collect();
    let (first, last) = (*cohorts.first().unwrap(), *cohorts.last().unwrap());
    let count = (last.0 - first.0) as usize + 1;
    let waves: Vec<_> = records.iter().map(|m| m.survey_wave).collect::<BTreeSet<_>>().into_iter().collect();
    let priors = ctx.config.model.priors;
    let covariates = ctx.config.model.covariates;
    let spec = match graphs {
        Some(g) => ModelSpec::from_graphs(variant, covariates, first, count, waves, priors, g)?,
        None if variant == Variant::Proposed => {
            return Err(CliError::Input("the proposed variant needs --nodes and --adjacency".into()))
        }
        None => {
            let mut areas: BTreeMap<Cohort, BTreeSet<AreaId>> = BTreeMap::new();
            for m in records {
                areas.entry(m.cohort).or_default().insert(m.area.clone());
            }
            let domains = (0..count)
                .map(|k| {
                    let cohort = Cohort(first.0 + k as u8);
                    let areas = areas.remove(&cohort).ok_or_else(|| {
                        CliError::Input(format!("no movers in cohort {}; supply --nodes to list its areas", cohort.label()))
                    })?;
                    Ok(CohortDomain { cohort, areas: areas.into_iter().collect() })
                })
                .collect::<CliResult<Vec<_>>>()?;
            ModelSpec::new(variant, covariates, domains, waves, priors, BTreeMap::new())?
        }
    };
    Ok(spec)
}

fn fit(ctx: &Context, a: &FitArgs, out: &mut Outputs) -> CliResult<Report> {
    let mut report = Report { inputs: vec![a.movers.clone()], ..Report::default() };
    let records = load_movers(&a.movers)?;
    let graphs = load_graph_args(&a.graph, &mut report)?;
    let variant = a.variant.unwrap_or(ctx.config.model.variant);
    let spec = build_spec(ctx, variant, &records, graphs.as_ref())?;
    let sampler = SamplerConfig { seed: ctx.seed, execution: ctx.execution, ..ctx.config.sampler.clone() };
    info!(
        "fitting the {variant} model: {} records, {} chains x ({} warmup + {} draws)",
        records.len(),
        sampler.chains,
        sampler.warmup,
        sampler.draws
    );
    let posterior = inference::sample_posterior(&spec, &records, &sampler)?;
    write_archive(&posterior, out.dir())?;
    out.record(DRAWS_FILE);
    out.record(META_FILE);

    let mut w = out.csv("odds_ratios.csv", &["covariate", "level", "odds_ratio", "lower95", "upper95"])?;
    for or in fixed_effect_summary(&posterior) {
        w.write_record([
            or.covariate.column().to_string(),
            or.level.to_string(),
            num(or.odds_ratio),
            num(or.lower),
            num(or.upper),
        ])?;
    }
    finish(w, "odds_ratios.csv")?;

    let mut w = out.csv("diagnostics.csv", &["parameter", "mean", "sd", "q025", "median", "q975", "rhat", "ess"])?;
    for d in posterior.diagnostics() {
        w.write_record([
            d.name.clone(),
            num(d.mean),
            num(d.sd),
            num(d.q025),
            num(d.median),
            num(d.q975),
            num(d.rhat),
            num(d.ess),
        ])?;
    }
    finish(w, "diagnostics.csv")?;

    report.settings = json!({
        "variant": variant,
        "sampler": sampler,
        "priors": ctx.config.model.priors,
        "covariates": ctx.config.model.covariates,
        "records": records.len(),
        "acceptance": posterior.meta().acceptance,
    });
    for w in posterior.warnings() {
        warn!("{w}");
    }
    report.warnings = posterior.warnings().to_vec();
    Ok(report)
}

const ESTIMATE_HEADER: [&str; 5] = ["puma", "cohort", "posterior_median", "ci95_width", "posterior_sd"];

fn write_estimates(out: &mut Outputs, name: &str, draws: &AreaDraws) -> CliResult<()> {
    let mut w = out.csv(name, &ESTIMATE_HEADER)?;
    for s in summarize(draws, &[0.95]) {
        w.write_record([
            s.area.to_string(),
            s.cohort.to_string(),
            num(s.median),
            num(s.width(0.95).unwrap_or(f64::NAN)),
            num(s.sd),
        ])?;
    }
    finish(w, name)
}

/// Keys of `table` in the model's cohorts, rejecting areas the model does
/// not know (typically a geography-version mismatch).
fn estimation_keys(spec: &ModelSpec, table: &PostStratTable, warnings: &mut Vec<String>) -> CliResult<Vec<(AreaId, Cohort)>> {
    let mut keys = Vec::new();
    let mut skipped = BTreeSet::new();
    for (area, cohort) in table.keys() {
        let Some(t) = spec.cohort_position(*cohort) else {
            skipped.insert(*cohort);
            continue;
        };
        if spec.area_position(t, area).is_none() {
            return Err(CliError::Input(format!(
                "poststratification area {area} is not a {} area of the fitted model for cohort {} \
                 (check that the table uses the {} geography)",
                cohort.geography(),
                cohort.label(),
                cohort.geography()
            )));
        }
        keys.push((area.clone(), *cohort));
    }
    for c in skipped {
        let w = format!("poststratification cohort {} is not in the fitted model and is skipped", c.label());
        warn!("{w}");
        warnings.push(w);
    }
    if keys.is_empty() {
        return Err(CliError::Input("the poststratification table shares no cohort with the fitted model".into()));
    }
    Ok(keys)
}

fn estimate(ctx: &Context, a: &EstimateArgs, out: &mut Outputs) -> CliResult<Report> {
    let mut report = Report {
        inputs: vec![a.draws.join(DRAWS_FILE), a.draws.join(META_FILE), a.poststrat.clone()],
        ..Report::default()
    };
    let posterior = read_archive(&a.draws)?;
    let table = ingest::load_poststrat(&a.poststrat)?;
    let keys = estimation_keys(posterior.spec(), &table, &mut report.warnings)?;
    let draws = poststratify_posterior(&posterior, &table, Some(&keys), ctx.execution)?;
    write_estimates(out, "estimates.csv", &draws)?;
    let mut settings = json!({ "draws": posterior.num_draws(), "variant": posterior.spec().variant() });

    if let Some(path) = &a.benchmarks {
        report.inputs.push(path.clone());
        let targets = ingest::load_benchmarks(path)?;
        let res = benchmark::rejection_filter(&draws, &targets, ctx.seed)?;
        info!(
            "benchmark filter kept {} of {} draws ({:.1}%)",
            res.kept.num_draws,
            draws.num_draws,
            100.0 * res.acceptance_rate
        );
        write_estimates(out, "benchmarked_estimates.csv", &res.kept)?;

        let mut w = out.csv(
            "benchmark_comparison.csv",
            &["puma", "cohort", "unbenchmarked_median", "unbenchmarked_sd", "benchmarked_median", "benchmarked_sd"],
        )?;
        for c in compare(&draws, &res.kept) {
            w.write_record([
                c.area.to_string(),
                c.cohort.to_string(),
                num(c.unbenchmarked_median),
                num(c.unbenchmarked_sd),
                num(c.benchmarked_median),
                num(c.benchmarked_sd),
            ])?;
        }
        finish(w, "benchmark_comparison.csv")?;

        let mut w = out.csv(
            "benchmark_summary.csv",
            &[
                "cohort",
                "target_estimate",
                "target_std_error",
                "unbenchmarked_mean",
                "unbenchmarked_sd",
                "benchmarked_mean",
                "benchmarked_sd",
            ],
        )?;
        for t in &targets {
            let before = draws.aggregate(t.cohort).unwrap_or_default();
            let after = res.kept.aggregate(t.cohort).unwrap_or_default();
            w.write_record([
                t.cohort.to_string(),
                num(t.estimate),
                num(t.std_error),
                num(stats::mean(&before)),
                num(stats::sd(&before)),
                num(stats::mean(&after)),
                num(stats::sd(&after)),
            ])?;
        }
        finish(w, "benchmark_summary.csv")?;
        settings["benchmark"] = json!({
            "kept_draws": res.kept.num_draws,
            "acceptance_rate": res.acceptance_rate,
        });
    }
    report.settings = settings;
    report.warnings.extend(posterior.warnings().iter().cloned());
    Ok(report)
}

fn validate_cmd(ctx: &Context, a: &ValidateArgs, out: &mut Outputs) -> CliResult<Report> {
    let mut report = Report { inputs: vec![a.movers.clone()], ..Report::default() };
    let records = load_movers(&a.movers)?;
    let graphs = load_graph_args(&a.graph, &mut report)?;
    let variants = &ctx.config.validation.variants;
    if variants.is_empty() {
        return Err(CliError::Input("no validation variants configured".into()));
    }
    let template_variant = if graphs.is_some() { Variant::Proposed } else { Variant::Hierarchical };
    let template = build_spec(ctx, template_variant, &records, graphs.as_ref())?;
    let config = LoaoConfig {
        sampler: SamplerConfig { seed: ctx.seed, ..ctx.config.validation.sampler.clone() },
        execution: ctx.execution,
    };
    info!(
        "leave-one-area-out validation of {} variants, refit budget {} chains x ({} warmup + {} draws)",
        variants.len(),
        config.sampler.chains,
        config.sampler.warmup,
        config.sampler.draws
    );
    let result = validate::loao(&template, variants, &records, &config)?;
    let summary = validate::score(&result)?;

    let level_cols = |prefix: &str| LEVELS.iter().map(move |l| format!("{prefix}_{}", (l * 100.0).round())).collect::<Vec<_>>();
    let mut header: Vec<String> = ["variant", "puma", "cohort", "n_heldout", "observed_rate", "predicted_median"]
        .map(String::from)
        .to_vec();
    for l in LEVELS {
        let p = (l * 100.0).round();
        header.push(format!("lower_{p}"));
        header.push(format!("upper_{p}"));
    }
    header.push("error".into());
    let hdr: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut w = out.csv("validation_report.csv", &hdr)?;
    for r in &result.rows {
        let mut rec = vec![
            r.variant.to_string(),
            r.area.to_string(),
            r.cohort.to_string(),
            r.n_heldout.to_string(),
            num(r.observed_rate),
        ];
        match &r.prediction {
            Ok(p) => {
                rec.push(num(p.median));
                for i in &p.intervals {
                    rec.push(num(i.lower));
                    rec.push(num(i.upper));
                }
                rec.push(String::new());
            }
            Err(e) => {
                rec.extend(std::iter::repeat_n(String::new(), 1 + 2 * LEVELS.len()));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec)?;
    }
    finish(w, "validation_report.csv")?;

    let coverage = level_cols("coverage");
    let mut hdr: Vec<&str> = vec!["model", "folds", "failed", "mse_x1000"];
    hdr.extend(coverage.iter().map(String::as_str));
    let mut w = out.csv("validation_summary.csv", &hdr)?;
    for s in &summary.overall {
        let mut rec = vec![s.variant.to_string(), s.folds.to_string(), s.failed.to_string(), num(s.mse_x1000)];
        rec.extend(s.coverage.iter().map(|&c| num(c)));
        w.write_record(&rec)?;
    }
    finish(w, "validation_summary.csv")?;

    let mut hdr: Vec<&str> = vec!["model", "cohort", "folds", "failed", "mse_x1000"];
    hdr.extend(coverage.iter().map(String::as_str));
    let mut w = out.csv("validation_summary_by_cohort.csv", &hdr)?;
    for s in &summary.by_cohort {
        let cohort = s.cohort.map(|c| c.to_string()).unwrap_or_default();
        let mut rec = vec![s.variant.to_string(), cohort, s.folds.to_string(), s.failed.to_string(), num(s.mse_x1000)];
        rec.extend(s.coverage.iter().map(|&c| num(c)));
        w.write_record(&rec)?;
    }
    finish(w, "validation_summary_by_cohort.csv")?;

    let failed: usize = summary.overall.iter().map(|s| s.failed).sum();
    if failed > 0 {
        let w = format!("{failed} validation refits failed; see the error column of validation_report.csv");
        warn!("{w}");
        report.warnings.push(w);
    }
    report.settings = json!({
        "variants": variants,
        "refit_sampler": result.sampler,
        "priors": ctx.config.model.priors,
        "prediction_weights": "held-out movers' own cell and wave composition",
    });
    Ok(report)
}

fn simulate(ctx: &Context, out: &mut Outputs) -> CliResult<Report> {
    let cfg = validate::ScenarioConfig { seed: ctx.seed, ..ctx.config.scenario.clone() };
    let scenario = SyntheticScenario::generate(&cfg)?;
    let data = validate::simulate(&scenario)?;

    ingest::write_movers(out.file("movers.csv")?, &data.movers)?;
    ingest::write_poststrat(out.file("poststrat.csv")?, &data.poststrat)?;
    let mut graphs = BTreeMap::new();
    for geo in [GeographyVersion::V2010, GeographyVersion::V2020] {
        graphs.insert(geo, grid_graph(geo, cfg.grid_rows, cfg.grid_cols)?);
    }
    write_graphs(&graphs, out.file("nodes.csv")?, out.file("adjacency.csv")?)?;

    let se = ctx.config.simulate.benchmark_se;
    let targets = data
        .aggregate_rates()
        .into_iter()
        .map(|(c, rate)| BenchmarkTarget::new(c, rate, se))
        .collect::<sae_core::Result<Vec<_>>>()?;
    ingest::write_benchmarks(out.file("benchmark.csv")?, &targets)?;

    let mut w = out.csv("true_rates.csv", &["puma", "cohort", "true_rate"])?;
    for ((area, cohort), rate) in &data.true_rates {
        w.write_record([area.to_string(), cohort.to_string(), num(*rate)])?;
    }
    finish(w, "true_rates.csv")?;

    let layout = scenario.spec.layout();
    let values = layout.pack(&scenario.true_params)?;
    let mut w = out.csv("true_parameters.csv", &["parameter", "value"])?;
    for (name, v) in layout.names().iter().zip(values) {
        w.write_record([name.clone(), num(v)])?;
    }
    finish(w, "true_parameters.csv")?;

    info!("simulated {} movers over {} (area, cohort) cells", data.movers.len(), data.true_rates.len());
    Ok(Report {
        settings: json!({ "scenario": cfg, "benchmark_se": se }),
        ..Report::default()
    })
}

fn direct(ctx: &Context, a: &DirectArgs, out: &mut Outputs) -> CliResult<Report> {
    let fay = ctx.config.benchmark.fay;
    let groups = ingest::load_replicates(&a.replicates, fay, a.cohort.map(Cohort))?;
    let mut w = out.csv("benchmark.csv", &["cohort", "estimate", "std_error", "n"])?;
    for (cohort, survey) in &groups {
        let t = benchmark::direct_estimate(survey, *cohort)?;
        w.write_record([cohort.to_string(), num(t.estimate), num(t.std_error), survey.rows().len().to_string()])?;
    }
    finish(w, "benchmark.csv")?;
    Ok(Report {
        inputs: vec![a.replicates.clone()],
        settings: json!({ "fay": fay, "variance_multiplier": benchmark::replicate_multiplier(fay) }),
        ..Report::default()
    })
}
