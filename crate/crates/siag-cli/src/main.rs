//! Command-line front end for the simulator: runs experiments, sweeps a
//! parameter across runs, derives the convergence-bound constants, checks
//! the bounds against Monte Carlo ensembles, and audits schedules.
//!
//! Every run is reproducible from the seeds in the config; nothing defaults
//! to wall-clock entropy. Exit codes are the only failure channel: 0 means
//! success, 1 means a bound check found violations, 2 an invalid or
//! inadmissible configuration, 3 divergence (or a broken staleness
//! certificate), 4 an I/O failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use siag::harness::{
    estimate_noise_constant, run_experiment, run_probe_ensemble, speedup_table, window_mean,
    ExperimentConfig,
};
use siag::optimizer::StepSchedule;
use siag::output;
use siag::problem::LsqInstance;
use siag::schedule::{ScheduleConfig, ScheduleKind, StalenessTracker};
use siag::theory::{
    check_aggregate_norm_bound, check_convergence_bound, check_drift_bound,
    check_error_alignment_bound, AnalysisConstants, GapEstimate, ProblemConstants,
};
use siag::{vecops, Result, SiagError};

#[derive(Parser)]
#[command(
    name = "siag",
    version,
    about = "Deterministic simulator for streaming aggregated-gradient methods"
)]
struct Cli {
    /// Cap the number of threads used for parallel trials (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its gap curve and manifest.
    Run(RunArgs),
    /// Run one experiment per swept value and tabulate the comparison.
    Sweep(SweepArgs),
    /// Derive the convergence-bound constants for given problem parameters.
    Constants(ConstantsArgs),
    /// Check the convergence bound and its supporting inequalities on a
    /// Monte Carlo ensemble.
    Check(CheckArgs),
    /// Simulate a schedule alone; report activation frequencies and staleness.
    ScheduleAudit(AuditArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Path to a JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Dotted-path override, e.g. --set steps.eta=0.01 or --set schedule.kind=cyclic.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override the trial count from the config.
    #[arg(long)]
    trials: Option<usize>,
    /// Override the horizon from the config.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for `<stem>.csv` and `<stem>.json`.
    #[arg(long)]
    out: PathBuf,
    /// File stem for the outputs.
    #[arg(long, default_value = "run")]
    stem: String,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory for the per-value results and the comparison table.
    #[arg(long)]
    out: PathBuf,
    /// What to sweep: `n` (worker count), `method`, or any dotted config path.
    #[arg(long)]
    key: String,
    /// Comma-separated values for the swept key.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Parallel per-value `schedule.active_per_iter` list (only with --key n).
    #[arg(long, value_delimiter = ',')]
    active: Vec<usize>,
    /// Iteration at which the speedup table compares gaps (default: horizon).
    #[arg(long)]
    reference_t: Option<usize>,
}

#[derive(Args)]
struct ConstantsArgs {
    /// Strong-convexity constant of the objective.
    #[arg(long)]
    mu: f64,
    /// Gradient Lipschitz constant.
    #[arg(long)]
    lipschitz: f64,
    /// Per-worker gradient noise constant sigma^2.
    #[arg(long)]
    sigma2: f64,
    /// Worker count n.
    #[arg(long)]
    workers: usize,
    /// Uniform staleness bound T.
    #[arg(long)]
    staleness: usize,
    /// Step numerator beta of eta_t = beta / (t + gamma); needs beta > 4/mu.
    #[arg(long)]
    beta: f64,
    /// Initial gap ||w^0 - w*||^2.
    #[arg(long)]
    e0: f64,
    /// Step offset gamma; defaults to the derived lower bound.
    #[arg(long)]
    gamma: Option<f64>,
    /// Iterations at which to evaluate the gap bound.
    #[arg(long, value_delimiter = ',', default_value = "0,10,100,1000,10000,100000")]
    bound_at: Vec<u64>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Optional directory for the per-check report CSVs.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Probe iterations (default: powers of ten up to the horizon).
    #[arg(long, value_delimiter = ',')]
    probes: Vec<usize>,
    /// Per-worker sample count for the noise-constant estimate.
    #[arg(long, default_value_t = 2000)]
    noise_samples: usize,
}

#[derive(Args)]
struct AuditArgs {
    /// Path to a JSON schedule config (or an experiment config; its
    /// `schedule` field is used).
    #[arg(long)]
    config: PathBuf,
    /// Iterations to simulate.
    #[arg(long, default_value_t = 100_000)]
    horizon: usize,
    /// Trial index selecting the schedule's random substream.
    #[arg(long, default_value_t = 0)]
    trial: usize,
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Constants(args) => cmd_constants(args),
        Command::Check(args) => cmd_check(args),
        Command::ScheduleAudit(args) => cmd_audit(args),
    };
    match outcome {
        Ok(code) => std::process::exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            std::process::exit(err.exit_code());
        }
    }
}

/// Sets `key = raw` inside a JSON document, creating intermediate objects
/// along the dotted path. The value is parsed as JSON when possible and
/// falls back to a plain string (so `--set schedule.kind=cyclic` works
/// without quoting).
fn apply_override(root: &mut serde_json::Value, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (leaf, path) = parts
        .split_last()
        .filter(|(leaf, _)| !leaf.is_empty())
        .ok_or_else(|| SiagError::InvalidConfig(format!("override key '{key}' is empty")))?;
    let mut node = root;
    for part in path {
        let obj = node.as_object_mut().ok_or_else(|| {
            SiagError::InvalidConfig(format!("override path '{key}' walks through a non-object"))
        })?;
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| {
        SiagError::InvalidConfig(format!("override path '{key}' walks through a non-object"))
    })?;
    let value = serde_json::from_str(raw)
        .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    // `steps` and `record` are variant-tagged by their `kind` key; switching
    // the variant drops the old variant's fields so they cannot linger and
    // trip the dropped-key check.
    if *leaf == "kind" && matches!(path, ["steps"] | ["record"]) {
        obj.retain(|k, _| k == "kind");
    }
    obj.insert(leaf.to_string(), value);
    Ok(())
}

/// Serde cannot flag unknown fields inside the variant-tagged `steps` and
/// `record` values, so a config or override naming a key the active variant
/// does not use would be dropped silently. Re-serialize the accepted
/// configuration and reject any input key that did not survive.
fn reject_dropped_keys(
    input: &serde_json::Value,
    accepted: &serde_json::Value,
    path: &str,
) -> Result<()> {
    let (Some(input), Some(accepted)) = (input.as_object(), accepted.as_object()) else {
        return Ok(());
    };
    for (key, value) in input {
        if value.is_null() {
            continue;
        }
        match accepted.get(key) {
            None => {
                return Err(SiagError::InvalidConfig(format!(
                    "config key '{path}{key}' is not used by this configuration"
                )));
            }
            Some(kept) => reject_dropped_keys(value, kept, &format!("{path}{key}."))?,
        }
    }
    Ok(())
}

/// A malformed config is a configuration error (exit 2), not an I/O one.
fn config_error(err: serde_json::Error) -> SiagError {
    SiagError::InvalidConfig(format!("config does not parse: {err}"))
}

fn load_config(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(&args.config)?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(config_error)?;
    for entry in &args.set {
        let (key, raw) = entry.split_once('=').ok_or_else(|| {
            SiagError::InvalidConfig(format!("override '{entry}' is not of the form KEY=VALUE"))
        })?;
        apply_override(&mut value, key, raw)?;
    }
    let mut config: ExperimentConfig = serde_json::from_value(value.clone()).map_err(config_error)?;
    reject_dropped_keys(&value, &serde_json::to_value(&config)?, "")?;
    if let Some(trials) = args.trials {
        config.trials = trials;
    }
    if let Some(horizon) = args.horizon {
        config.horizon = horizon;
    }
    config.validate()?;
    Ok(config)
}

fn cmd_run(args: &RunArgs) -> Result<i32> {
    let config = load_config(&args.config)?;
    let result = run_experiment(&config)?;
    result.save(&args.out, &args.stem)?;
    let last = result.curve.last().expect("curve always records t = 0");
    println!(
        "wrote {} and {}",
        args.out.join(format!("{}.csv", args.stem)).display(),
        args.out.join(format!("{}.json", args.stem)).display()
    );
    println!("recorded points: {}", result.curve.len());
    println!(
        "final gap at t = {}: {:.6e} (stderr {:.2e}, {} trials)",
        last.t, last.mean, last.stderr, last.trials
    );
    println!("observed max staleness: {}", result.metadata.observed_max_staleness);
    println!("curve hash: {}", result.metadata.curve_hash);
    Ok(0)
}

fn swept_stem(key: &str, value: &str) -> String {
    let clean = |part: &str| -> String {
        part.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
            .collect()
    };
    format!("{}_{}", clean(key), clean(value))
}

fn apply_sweep(
    config: &mut ExperimentConfig,
    key: &str,
    value: &str,
    active: Option<usize>,
) -> Result<()> {
    match key {
        "n" => {
            let n: usize = value.parse().map_err(|_| {
                SiagError::InvalidConfig(format!("swept worker count '{value}' is not an integer"))
            })?;
            config.problem.n = n;
            config.schedule.n = n;
            if let Some(active) = active {
                config.schedule.active_per_iter = active;
            }
        }
        "method" => {
            config.method = serde_json::from_value(serde_json::Value::String(value.to_string()))
                .map_err(config_error)?;
        }
        dotted => {
            let mut doc = serde_json::to_value(&*config)?;
            apply_override(&mut doc, dotted, value)?;
            *config = serde_json::from_value(doc.clone()).map_err(config_error)?;
            reject_dropped_keys(&doc, &serde_json::to_value(&*config)?, "")?;
        }
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<i32> {
    let values: Vec<&String> = args.values.iter().filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        return Err(SiagError::InvalidConfig("sweep needs at least one value".into()));
    }
    if !args.active.is_empty() && args.active.len() != values.len() {
        return Err(SiagError::InvalidConfig(format!(
            "--active lists {} entries for {} swept values",
            args.active.len(),
            values.len()
        )));
    }
    if !args.active.is_empty() && args.key != "n" {
        return Err(SiagError::InvalidConfig(
            "--active only applies when sweeping the worker count (--key n)".into(),
        ));
    }
    let mut results = Vec::with_capacity(values.len());
    for (idx, value) in values.iter().enumerate() {
        let mut config = load_config(&args.config)?;
        apply_sweep(&mut config, &args.key, value, args.active.get(idx).copied())?;
        config.validate()?;
        let result = run_experiment(&config)?;
        result.save(&args.out, &swept_stem(&args.key, value))?;
        let last = result.curve.last().expect("curve always records t = 0");
        println!(
            "{} = {}: final gap {:.6e} at t = {} ({} trials, staleness {})",
            args.key,
            value,
            last.mean,
            last.t,
            config.trials,
            result.metadata.observed_max_staleness
        );
        results.push(result);
    }
    if args.key == "n" {
        let reference = args.reference_t.unwrap_or(results[0].config.horizon);
        let rows = speedup_table(&results, reference)?;
        let mut text = String::from("n,mean,stderr,ratio,ideal\n");
        println!("speedup at t = {reference} (ratios against the smallest n):");
        println!("{:<6} {:<14} {:<10} {:<10}", "n", "mean", "ratio", "ideal");
        for row in &rows {
            text.push_str(&format!(
                "{},{},{},{},{}\n",
                row.n, row.mean, row.stderr, row.ratio, row.ideal
            ));
            println!("{:<6} {:<14.6e} {:<10.4} {:<10.4}", row.n, row.mean, row.ratio, row.ideal);
        }
        output::write_atomic(&args.out.join("speedup.csv"), text.as_bytes())?;
        println!("wrote {}", args.out.join("speedup.csv").display());
    } else {
        // generic comparison: mean gap over the last half of each run
        let mut text = String::from("value,window_mean,stderr\n");
        for (value, result) in values.iter().zip(&results) {
            let horizon = result.config.horizon;
            let (mean, se) = window_mean(&result.curve, horizon / 2, horizon)?;
            text.push_str(&format!("{value},{mean},{se}\n"));
            println!("{} = {}: mean gap over t in [{}, {}] is {:.6e}", args.key, value, horizon / 2, horizon, mean);
        }
        output::write_atomic(&args.out.join("summary.csv"), text.as_bytes())?;
        println!("wrote {}", args.out.join("summary.csv").display());
    }
    Ok(0)
}

fn cmd_constants(args: &ConstantsArgs) -> Result<i32> {
    let problem =
        ProblemConstants::new(args.mu, args.lipschitz, args.sigma2, args.workers, args.staleness)?;
    let constants = match args.gamma {
        Some(gamma) => AnalysisConstants::with_gamma(problem, args.beta, gamma, args.e0)?,
        None => AnalysisConstants::derive(problem, args.beta, args.e0)?,
    };
    println!("problem:");
    println!("  mu      = {}", problem.mu);
    println!("  L       = {}", problem.l);
    println!("  sigma^2 = {}", problem.sigma2);
    println!("  n       = {}", problem.n);
    println!("  T       = {}", problem.t_bound);
    println!("  E0      = {}", constants.e0);
    println!("derived:");
    println!("  C_L         = {}", constants.c_l);
    println!("  rho_bar     = {}", constants.rho_bar);
    println!("  gamma_lower = {}", constants.gamma_lower);
    println!("  gamma       = {}", constants.gamma);
    println!("  delta1      = {}", constants.delta1);
    println!("  delta2      = {}", constants.delta2);
    println!("step rule: eta_t = {} / (t + {})", constants.beta, constants.gamma);
    println!("gap bound (noise term + burn-in term):");
    for &t in &args.bound_at {
        let (noise, burnin) = constants.bound_terms(t as f64);
        println!(
            "  t = {:<9} bound = {:<24} ({:.3e} + {:.3e})",
            t,
            constants.bound(t as f64),
            noise,
            burnin
        );
    }
    Ok(0)
}

fn default_probes(horizon: usize) -> Vec<usize> {
    let mut probes = Vec::new();
    let mut t = 10;
    while t <= horizon {
        probes.push(t);
        t *= 10;
    }
    if probes.is_empty() {
        probes.push(horizon);
    }
    probes
}

fn cmd_check(args: &CheckArgs) -> Result<i32> {
    let config = load_config(&args.config)?;
    let instance = LsqInstance::generate(&config.problem)?;
    let sigma2 = estimate_noise_constant(&instance, args.noise_samples)?;
    let t_bound = config.schedule.certified_t()?;
    let problem = ProblemConstants::new(
        instance.mu(),
        instance.lipschitz(),
        sigma2,
        config.problem.n,
        t_bound,
    )?;
    // gate admissibility before burning compute on the ensemble
    let analysis = match config.steps {
        StepSchedule::InverseT { beta, gamma } => {
            let e0 = vecops::norm_sq(instance.w_star());
            Some(AnalysisConstants::with_gamma(problem, beta, gamma, e0)?)
        }
        StepSchedule::Constant { .. } => None,
    };
    println!("curvature: mu = {:.6e}, L = {:.6e}", instance.mu(), instance.lipschitz());
    println!("noise-constant estimate: sigma^2 = {sigma2:.6e}");
    println!("certified staleness bound: T = {t_bound}");
    let probes =
        if args.probes.is_empty() { default_probes(config.horizon) } else { args.probes.clone() };
    let ensemble = run_probe_ensemble(&config, &probes)?;
    let mut reports = vec![
        check_aggregate_norm_bound(&ensemble, &problem)?,
        check_error_alignment_bound(&ensemble, &problem, &config.steps)?,
        check_drift_bound(&ensemble, &problem, &config.steps)?,
    ];
    match &analysis {
        Some(constants) => {
            let curve: Vec<GapEstimate> = config
                .grid()
                .into_iter()
                .map(|t| GapEstimate {
                    t,
                    mean: ensemble.gap_mean[t],
                    stderr: ensemble.gap_stderr[t],
                    trials: ensemble.trials,
                })
                .collect();
            reports.push(check_convergence_bound(constants, &curve)?);
        }
        None => println!("convergence bound: skipped (needs inverse_t steps)"),
    }
    let mut all_ok = true;
    for report in &reports {
        println!("{report}");
        if let Some(dir) = &args.out {
            std::fs::create_dir_all(dir)?;
            let mut bytes = Vec::new();
            report.write_csv(&mut bytes)?;
            let stem = report.name.replace([' ', '-'], "_");
            let path = dir.join(format!("{stem}.csv"));
            output::write_atomic(&path, &bytes)?;
            println!("wrote {}", path.display());
        }
        all_ok &= report.passed();
    }
    Ok(if all_ok { 0 } else { 1 })
}

fn kind_name(kind: ScheduleKind) -> &'static str {
    match kind {
        ScheduleKind::Cyclic => "cyclic",
        ScheduleKind::UniformCover => "uniform_cover",
        ScheduleKind::Nonuniform => "nonuniform",
    }
}

fn cmd_audit(args: &AuditArgs) -> Result<i32> {
    if args.horizon == 0 {
        return Err(SiagError::InvalidConfig("audit horizon must be at least 1".into()));
    }
    let text = std::fs::read_to_string(&args.config)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(config_error)?;
    let schedule_value = value.get("schedule").cloned().unwrap_or(value);
    let schedule: ScheduleConfig =
        serde_json::from_value(schedule_value).map_err(config_error)?;
    schedule.validate()?;
    let certified = schedule.certified_t()?;
    let mut stream = schedule.stream(args.trial)?;
    let mut tracker = StalenessTracker::new(schedule.n);
    let mut activations = vec![0usize; schedule.n];
    for _ in 0..args.horizon {
        let active = stream.next_active_set();
        tracker.advance(&active)?;
        for &worker in &active.workers {
            activations[worker] += 1;
        }
    }
    println!(
        "schedule: {} over n = {} workers, certified staleness bound T = {}",
        kind_name(schedule.kind),
        schedule.n,
        certified
    );
    println!("iterations simulated: {} (trial {})", args.horizon, args.trial);
    println!("{:<8} {:<13} {}", "worker", "activations", "frequency");
    for (worker, &count) in activations.iter().enumerate() {
        println!("{:<8} {:<13} {:.4}", worker, count, count as f64 / args.horizon as f64);
    }
    println!("observed max staleness: {}", tracker.observed_max());
    if tracker.observed_max() > certified as i64 {
        eprintln!(
            "error: observed staleness {} exceeds the certificate {certified}",
            tracker.observed_max()
        );
        return Ok(3);
    }
    Ok(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_walk_and_create_dotted_paths() {
        let mut doc = serde_json::json!({"steps": {"kind": "constant", "eta": 0.1}, "trials": 5});
        apply_override(&mut doc, "steps.eta", "0.01").unwrap();
        apply_override(&mut doc, "trials", "50").unwrap();
        apply_override(&mut doc, "schedule.kind", "cyclic").unwrap();
        assert_eq!(doc["steps"]["eta"], serde_json::json!(0.01));
        assert_eq!(doc["trials"], serde_json::json!(50));
        // bare words fall back to strings
        assert_eq!(doc["schedule"]["kind"], serde_json::json!("cyclic"));
    }

    #[test]
    fn overrides_reject_bad_paths() {
        let mut doc = serde_json::json!({"trials": 5});
        assert!(apply_override(&mut doc, "", "1").is_err());
        assert!(apply_override(&mut doc, "trials.inner", "1").is_err());
    }

    #[test]
    fn switching_a_tagged_kind_drops_the_old_variant_fields() {
        let mut doc = serde_json::json!({"steps": {"kind": "constant", "eta": 0.1}});
        apply_override(&mut doc, "steps.kind", "inverse_t").unwrap();
        apply_override(&mut doc, "steps.beta", "5").unwrap();
        apply_override(&mut doc, "steps.gamma", "3000").unwrap();
        assert_eq!(
            doc["steps"],
            serde_json::json!({"kind": "inverse_t", "beta": 5, "gamma": 3000})
        );
        // `kind` inside plain structs (not under steps/record) is untouched
        let mut doc = serde_json::json!({"schedule": {"kind": "cyclic", "n": 3, "seed": 1}});
        apply_override(&mut doc, "schedule.kind", "uniform_cover").unwrap();
        assert_eq!(doc["schedule"]["n"], serde_json::json!(3));
    }

    #[test]
    fn dropped_config_keys_are_detected() {
        let accepted = serde_json::json!({"steps": {"kind": "constant", "eta": 0.1}});
        let ok = serde_json::json!({"steps": {"kind": "constant", "eta": 0.5}});
        assert!(reject_dropped_keys(&ok, &accepted, "").is_ok());
        let ignored = serde_json::json!({"steps": {"kind": "constant", "eta": 0.5, "beta": 2.0}});
        let err = reject_dropped_keys(&ignored, &accepted, "").unwrap_err();
        assert!(err.to_string().contains("steps.beta"), "{err}");
        // explicit nulls stand for absent optional fields
        let nulled = serde_json::json!({"steps": {"kind": "constant", "eta": 0.5}, "caps": null});
        assert!(reject_dropped_keys(&nulled, &accepted, "").is_ok());
    }

    #[test]
    fn swept_stems_stay_filesystem_safe() {
        assert_eq!(swept_stem("n", "10"), "n_10");
        assert_eq!(swept_stem("steps.eta", "0.01"), "steps.eta_0.01");
        assert_eq!(swept_stem("a/b", "x y"), "a_b_x_y");
    }

    #[test]
    fn default_probes_cover_decades_up_to_the_horizon() {
        assert_eq!(default_probes(100_000), vec![10, 100, 1000, 10_000, 100_000]);
        assert_eq!(default_probes(500), vec![10, 100]);
        assert_eq!(default_probes(5), vec![5]);
    }
}
