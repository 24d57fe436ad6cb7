//! Command-line front end: single runs, algorithm/seed comparison grids,
//! configuration checking and partition inspection.
//!
//! Every subcommand starts from the built-in defaults, layers an optional
//! TOML config file on top, then applies flag overrides (flags are named
//! exactly like the config keys). Exit codes: 0 success, 1 configuration or
//! I/O problem, 2 numerical divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use fedcpsl::baselines::AlgorithmKind;
use fedcpsl::client::{
    client_round, effective_steps, momentum_weights, steps_per_epoch, LocalPlan, PseudoLabelMode,
    RoundCtx, RoundObserver,
};
use fedcpsl::config::{BetaSetting, DatasetKind, EtaGMode, ExperimentConfig};
use fedcpsl::data::{gen_blobs, take_rows};
use fedcpsl::error::{Error, Result};
use fedcpsl::metrics::{write_trace, TraceFormat, TraceRecord};
use fedcpsl::nn::{finite_diff_grad, init_params, Activation, ModelSpec, ParamVector, ProbMatrix};
use fedcpsl::objective::{grad_semisup_theta, loss_semisup, Batch, SemiSupHyper};
use fedcpsl::rng::{derive_rng, StreamKind};
use fedcpsl::server::{
    build_experiment, run_training, stepsize_bounds, validate_stepsizes, StepsizeBounds,
};

#[derive(Parser)]
#[command(
    name = "fedcpsl",
    version,
    about = "Personalized semi-supervised federated learning simulator",
    after_help = "Environment:\n  FEDCPSL_DATA_DIR  dataset directory when data_dir is unset\n\nExit codes: 0 success, 1 configuration error, 2 divergence"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its round trace.
    Run {
        #[command(flatten)]
        common: Common,
        /// Trace path; defaults to trace.csv / trace.jsonl per --format.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Trace format: csv or jsonl.
        #[arg(long, default_value = "csv")]
        format: TraceFormat,
    },
    /// Run an algorithm x seed grid and tabulate final metrics.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated algorithm names, or `all` (the default).
        #[arg(long, value_name = "LIST")]
        algorithms: Option<String>,
        /// Comma-separated seeds; defaults to the configured seed.
        #[arg(long, value_name = "LIST")]
        seeds: Option<String>,
        /// Write the comparison CSV here instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Validate the config, step-size bounds and core identities.
    Check {
        #[command(flatten)]
        common: Common,
    },
    /// Report per-client pool sizes, weights and class coverage.
    PartitionStats {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file; omitted keys keep their defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(flatten)]
    set: Overrides,
}

impl Common {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        self.set.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Inclusive epoch range: `3` or `1,4`.
#[derive(Clone)]
struct EpochRange(usize, usize);

impl std::str::FromStr for EpochRange {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::config("epoch_range", format!("`{p}` is not a count")))
        };
        match s.split_once(',') {
            None => {
                let e = parse(s)?;
                Ok(EpochRange(e, e))
            }
            Some((lo, hi)) => Ok(EpochRange(parse(lo)?, parse(hi)?)),
        }
    }
}

/// Comma-separated hidden-layer widths; `none` means a linear model.
#[derive(Clone)]
struct HiddenDims(Vec<usize>);

impl std::str::FromStr for HiddenDims {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(HiddenDims(Vec::new()));
        }
        let dims = s
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::config("hidden_dims", format!("`{p}` is not a width")))
            })
            .collect::<Result<_>>()?;
        Ok(HiddenDims(dims))
    }
}

/// One optional flag per config key. Anything set here replaces the file or
/// default value.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long = "algorithm")]
    algorithm: Option<AlgorithmKind>,
    #[arg(long = "dataset")]
    dataset: Option<DatasetKind>,
    #[arg(long = "n_clients")]
    n_clients: Option<usize>,
    #[arg(long = "m")]
    m: Option<usize>,
    #[arg(long = "rounds")]
    rounds: Option<usize>,
    #[arg(long = "epsilon")]
    epsilon: Option<f64>,
    /// One value, or one per client: `0.75` or `0.5,0.9,0.7`.
    #[arg(long = "beta")]
    beta: Option<BetaSetting>,
    #[arg(long = "gamma")]
    gamma: Option<f64>,
    #[arg(long = "eta")]
    eta: Option<f64>,
    #[arg(long = "eta_c")]
    eta_c: Option<f64>,
    /// A number, or `auto` for the mean discounted step count.
    #[arg(long = "eta_g")]
    eta_g: Option<EtaGMode>,
    #[arg(long = "eta_v")]
    eta_v: Option<f64>,
    #[arg(long = "alpha_p")]
    alpha_p: Option<f64>,
    #[arg(long = "alpha_r")]
    alpha_r: Option<f64>,
    #[arg(long = "s_l")]
    s_l: Option<usize>,
    #[arg(long = "s_u")]
    s_u: Option<usize>,
    /// Local epochs per round: `2`, or an inclusive range `1,4`.
    #[arg(long = "epoch_range")]
    epoch_range: Option<EpochRange>,
    #[arg(long = "shards_per_client")]
    shards_per_client: Option<usize>,
    #[arg(long = "seed")]
    seed: Option<u64>,
    #[arg(long = "full_batch", value_name = "BOOL")]
    full_batch: Option<bool>,
    #[arg(long = "l_estimate")]
    l_estimate: Option<f64>,
    #[arg(long = "l_f_estimate")]
    l_f_estimate: Option<f64>,
    #[arg(long = "dataset_size")]
    dataset_size: Option<usize>,
    #[arg(long = "blobs_classes")]
    blobs_classes: Option<usize>,
    #[arg(long = "blobs_dim")]
    blobs_dim: Option<usize>,
    #[arg(long = "blobs_per_class")]
    blobs_per_class: Option<usize>,
    #[arg(long = "blobs_spread")]
    blobs_spread: Option<f64>,
    #[arg(long = "test_frac")]
    test_frac: Option<f64>,
    /// Comma-separated widths, or `none` for a linear model.
    #[arg(long = "hidden_dims")]
    hidden_dims: Option<HiddenDims>,
    #[arg(long = "activation")]
    activation: Option<Activation>,
    #[arg(long = "acc_threshold")]
    acc_threshold: Option<f64>,
    #[arg(long = "pseudo_label_mode")]
    pseudo_label_mode: Option<PseudoLabelMode>,
    #[arg(long = "disable_control_variates", value_name = "BOOL")]
    disable_control_variates: Option<bool>,
    #[arg(long = "trace_gaps", value_name = "BOOL")]
    trace_gaps: Option<bool>,
    #[arg(long = "trace_timing", value_name = "BOOL")]
    trace_timing: Option<bool>,
    /// Dataset directory (overrides the FEDCPSL_DATA_DIR env var).
    #[arg(long = "data_dir")]
    data_dir: Option<PathBuf>,
}

impl Overrides {
    fn apply(self, cfg: &mut ExperimentConfig) {
        macro_rules! set {
            ($($field:ident),* $(,)?) => {
                $(if let Some(v) = self.$field { cfg.$field = v; })*
            };
        }
        set!(
            algorithm,
            dataset,
            n_clients,
            m,
            rounds,
            epsilon,
            beta,
            gamma,
            eta,
            eta_g,
            eta_v,
            alpha_p,
            alpha_r,
            s_l,
            s_u,
            shards_per_client,
            seed,
            full_batch,
            dataset_size,
            blobs_classes,
            blobs_dim,
            blobs_per_class,
            blobs_spread,
            test_frac,
            activation,
            acc_threshold,
            pseudo_label_mode,
            disable_control_variates,
            trace_gaps,
            trace_timing,
        );
        if let Some(v) = self.eta_c {
            cfg.eta_c = Some(v);
        }
        if let Some(v) = self.l_estimate {
            cfg.l_estimate = Some(v);
        }
        if let Some(v) = self.l_f_estimate {
            cfg.l_f_estimate = Some(v);
        }
        if let Some(v) = self.epoch_range {
            cfg.epoch_range = (v.0, v.1);
        }
        if let Some(v) = self.hidden_dims {
            cfg.hidden_dims = v.0;
        }
        if let Some(v) = self.data_dir {
            cfg.data_dir = Some(v);
        }
    }
}

fn main() -> ExitCode {
    // Die quietly on a closed pipe (`fedcpsl ... | head`) like other Unix
    // tools instead of panicking in println!.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; they are not errors.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 1 for configuration and I/O problems, 2 for numerical blow-ups.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } | Error::NonFinite(_) => 2,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run {
            common,
            out,
            format,
        } => cmd_run(common.resolve()?, out, format),
        Command::Compare {
            common,
            algorithms,
            seeds,
            out,
        } => {
            let cfg = common.resolve()?;
            let algorithms = match algorithms {
                Some(list) => parse_algorithms(&list)?,
                None => AlgorithmKind::ALL.to_vec(),
            };
            let seeds = match seeds {
                Some(list) => parse_seeds(&list)?,
                None => vec![cfg.seed],
            };
            cmd_compare(cfg, algorithms, seeds, out)
        }
        Command::Check { common } => cmd_check(common.resolve()?),
        Command::PartitionStats { common } => cmd_partition_stats(common.resolve()?),
    }
}

fn parse_algorithms(list: &str) -> Result<Vec<AlgorithmKind>> {
    if list == "all" {
        return Ok(AlgorithmKind::ALL.to_vec());
    }
    list.split(',').map(|p| p.trim().parse()).collect()
}

fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| Error::config("seeds", format!("`{p}` is not a seed")))
        })
        .collect()
}

fn dataset_name(d: DatasetKind) -> &'static str {
    match d {
        DatasetKind::Blobs => "blobs",
        DatasetKind::MnistSubset => "mnist_subset",
    }
}

fn cmd_run(cfg: ExperimentConfig, out: Option<PathBuf>, format: TraceFormat) -> Result<()> {
    let out = out.unwrap_or_else(|| {
        PathBuf::from(match format {
            TraceFormat::Csv => "trace.csv",
            TraceFormat::JsonLines => "trace.jsonl",
        })
    });
    let run = run_training(&cfg)?;
    write_trace(&out, &run.records, format)?;
    let last = run
        .records
        .last()
        .expect("a validated config runs at least one round");
    println!(
        "{} seed={} rounds={}: train_loss={:.6} test_acc_global={:.4} test_acc_personalized={:.4} pseudo_label_acc={:.4} -> {}",
        cfg.algorithm,
        cfg.seed,
        last.round,
        last.train_loss,
        last.test_acc_global,
        last.test_acc_personalized,
        last.pseudo_label_acc,
        out.display()
    );
    Ok(())
}

struct CompareRow {
    algorithm: AlgorithmKind,
    seed: u64,
    last: TraceRecord,
    to_threshold: i64,
}

/// 1-based round where the personalized accuracy first clears `threshold`,
/// or -1 if it never does.
fn rounds_to_threshold(records: &[TraceRecord], threshold: f64) -> i64 {
    records
        .iter()
        .find(|rec| rec.test_acc_personalized >= threshold)
        .map_or(-1, |rec| rec.round as i64)
}

fn cmd_compare(
    cfg: ExperimentConfig,
    algorithms: Vec<AlgorithmKind>,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut jobs = Vec::new();
    for &algorithm in &algorithms {
        for &seed in &seeds {
            jobs.push((algorithm, seed));
        }
    }
    jobs.sort_by_key(|&(a, s)| (a.name(), s));
    jobs.dedup();

    let results: Vec<Result<CompareRow>> = jobs
        .par_iter()
        .map(|&(algorithm, seed)| {
            let mut job = cfg.clone();
            job.algorithm = algorithm;
            job.seed = seed;
            let run = run_training(&job)?;
            let to_threshold = rounds_to_threshold(&run.records, job.acc_threshold);
            let last = run
                .records
                .last()
                .cloned()
                .expect("a validated config runs at least one round");
            Ok(CompareRow {
                algorithm,
                seed,
                last,
                to_threshold,
            })
        })
        .collect();

    let mut text = String::from(
        "algorithm,seed,rounds,train_loss,test_acc_global,test_acc_personalized,pseudo_label_acc,rounds_to_threshold\n",
    );
    let n_rows = results.len();
    for res in results {
        let row = res?;
        text.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            row.algorithm,
            row.seed,
            row.last.round,
            row.last.train_loss,
            row.last.test_acc_global,
            row.last.test_acc_personalized,
            row.last.pseudo_label_acc,
            row.to_threshold
        ));
    }
    match out {
        Some(path) => {
            std::fs::write(&path, text)?;
            let s = if n_rows == 1 { "" } else { "s" };
            println!("wrote {n_rows} row{s} to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

enum StepsizeReport {
    Unchecked(String),
    Report {
        bounds: StepsizeBounds,
        q_eff_min: f64,
        q_eff_max: f64,
        eta_g: f64,
        warnings: Vec<String>,
    },
}

/// Evaluates the convergence bounds when a smoothness estimate is present.
/// The discounted step-count range comes from the actual client pool sizes,
/// so the experiment has to be buildable; when it is not (e.g. dataset files
/// missing), the bounds are reported as unchecked rather than failing.
fn stepsize_report(cfg: &ExperimentConfig) -> Result<StepsizeReport> {
    let Some(l) = cfg.l_estimate else {
        return Ok(StepsizeReport::Unchecked(
            "no l_estimate; set one to evaluate the bounds".into(),
        ));
    };
    let l_f = cfg.resolved_l_f().unwrap_or(l);
    let exp = match build_experiment(cfg) {
        Ok(exp) => exp,
        Err(e) => {
            return Ok(StepsizeReport::Unchecked(format!(
                "could not build the experiment: {e}"
            )))
        }
    };
    // Baselines run undiscounted local steps regardless of gamma.
    let gamma = if cfg.algorithm == AlgorithmKind::FedCpsl {
        cfg.gamma
    } else {
        0.0
    };
    let (e_lo, e_hi) = cfg.epoch_range;
    let mut q_eff_min = f64::INFINITY;
    let mut q_eff_max: f64 = 0.0;
    let mut mean = 0.0;
    for client in &exp.clients {
        let spe = steps_per_epoch(client.n_labeled(), client.n_unlabeled(), &exp.batches);
        let lo = effective_steps(e_lo * spe, gamma)?;
        let hi = effective_steps(e_hi * spe, gamma)?;
        q_eff_min = q_eff_min.min(lo);
        q_eff_max = q_eff_max.max(hi);
        mean += 0.5 * (lo + hi);
    }
    mean /= exp.clients.len() as f64;
    let eta_g = match cfg.eta_g {
        EtaGMode::Fixed(v) => v,
        EtaGMode::Auto => mean,
    };
    let warnings = validate_stepsizes(
        cfg.n_clients,
        cfg.m,
        cfg.eta,
        cfg.resolved_eta_c(),
        cfg.eta_v,
        eta_g,
        l,
        l_f,
        q_eff_max,
        q_eff_min,
    );
    let bounds = stepsize_bounds(
        cfg.n_clients,
        cfg.m,
        cfg.eta,
        eta_g,
        l,
        l_f,
        q_eff_max,
        q_eff_min,
    );
    Ok(StepsizeReport::Report {
        bounds,
        q_eff_min,
        q_eff_max,
        eta_g,
        warnings,
    })
}

/// Central finite differences against the analytic semi-supervised gradient
/// on a few tiny random instances. Returns the worst relative error.
fn gradient_self_test(seed: u64) -> Result<f64> {
    let hyper = SemiSupHyper::new(1.0, 0.5)?;
    let mut worst: f64 = 0.0;
    for i in 0..3u64 {
        let mut rng = derive_rng(seed, StreamKind::Init, 1_000 + i, 0);
        let data = gen_blobs(3, 2, 4, 0.6, &mut rng)?;
        let activation = if i % 2 == 0 {
            Activation::Tanh
        } else {
            Activation::Relu
        };
        let model = ModelSpec::mlp(2, &[4], 3, activation)?;
        let theta = init_params(&model, &mut rng);
        let labeled: Vec<usize> = (0..4).collect();
        let unlabeled: Vec<usize> = (4..10).collect();
        let labels: Vec<usize> = labeled.iter().map(|&j| data.y[j]).collect();
        let batch = Batch::new(
            take_rows(&data.x, &labeled),
            ProbMatrix::one_hot(&labels, 3)?.into_array(),
            take_rows(&data.x, &unlabeled),
            (0..unlabeled.len()).collect(),
        )?;
        let nu = ProbMatrix::uniform(unlabeled.len(), 3);
        let grad = grad_semisup_theta(&model, &theta, nu.as_array(), &batch, &hyper)?;
        let fd = finite_diff_grad(
            |p| loss_semisup(&model, p, nu.as_array(), &batch, &hyper),
            &theta,
            1e-6,
        )?;
        let err = fd.sub(&grad).norm() / grad.norm().max(1e-12);
        worst = worst.max(err);
    }
    Ok(worst)
}

struct GradLog {
    grads: Vec<ParamVector>,
}

impl RoundObserver for GradLog {
    fn on_local_step(&mut self, _t: usize, g: &ParamVector, _g_lc: &ParamVector) {
        self.grads.push(g.clone());
    }
}

/// One deterministic full-batch client round checked against the telescoped
/// form of its update and of its control variate. Returns both residuals.
fn identity_self_test(seed: u64) -> Result<(f64, f64)> {
    let cfg = ExperimentConfig {
        n_clients: 2,
        m: 2,
        rounds: 1,
        blobs_per_class: 12,
        full_batch: true,
        seed,
        trace_gaps: false,
        ..ExperimentConfig::default()
    };
    let mut exp = build_experiment(&cfg)?;
    let model = exp.model.clone();
    let ctx = RoundCtx {
        model: &model,
        hyper: exp.hyper,
        pseudo: exp.pseudo,
        batches: exp.batches,
        use_control_variates: exp.use_control_variates,
    };
    let theta_g = exp.server.theta.clone();
    let ctl_g = exp.server.ctl.clone();
    let (q, gamma) = (5, 0.6);
    let plan = LocalPlan::new(q, gamma, 0.01, 0.02, cfg.eta_v)?;
    let mut rng = derive_rng(seed, StreamKind::Batch, 0, 0);
    let mut log = GradLog { grads: Vec::new() };
    let report = client_round(
        &mut exp.clients[0],
        &theta_g,
        &ctl_g,
        &plan,
        &ctx,
        &mut rng,
        &mut log,
    )?;

    // With zero initial controls the update telescopes to
    // delta = -eta * sum_t b_t g_t and the new control variate is
    // sum_t b_t g_t / q_eff.
    let weights = momentum_weights(q, gamma)?;
    let mut acc = ParamVector::zeros(theta_g.len());
    for (w, g) in weights.iter().zip(&log.grads) {
        acc.add_scaled(*w, g);
    }
    let q_eff = effective_steps(q, gamma)?;
    let tele = acc.scaled(-plan.eta).sub(&report.delta).norm() / report.delta.norm().max(1.0);
    let ctl = acc.scaled(1.0 / q_eff).sub(&exp.clients[0].ctl).norm()
        / exp.clients[0].ctl.norm().max(1.0);
    Ok((tele, ctl))
}

fn cmd_check(cfg: ExperimentConfig) -> Result<()> {
    let mut failures = 0;

    // Parsing and validation already succeeded to get this far.
    println!(
        "config: ok ({} on {}, n_clients={}, m={}, rounds={})",
        cfg.algorithm,
        dataset_name(cfg.dataset),
        cfg.n_clients,
        cfg.m,
        cfg.rounds
    );

    match stepsize_report(&cfg)? {
        StepsizeReport::Unchecked(reason) => println!("stepsizes: unchecked ({reason})"),
        StepsizeReport::Report {
            bounds,
            q_eff_min,
            q_eff_max,
            eta_g,
            warnings,
        } => {
            println!(
                "stepsizes: {} (eta {:.3e} vs bound {:.3e}, eta_v {:.3e} vs {:.3e}, eta_c {:.3e} vs {:.3e}; q_eff in [{:.2}, {:.2}], eta_g {:.2})",
                if warnings.is_empty() { "ok" } else { "warnings" },
                cfg.eta,
                bounds.eta_max,
                cfg.eta_v,
                bounds.eta_v_max,
                cfg.resolved_eta_c(),
                bounds.eta_c_max,
                q_eff_min,
                q_eff_max,
                eta_g
            );
            for w in &warnings {
                println!("  {w}");
            }
        }
    }

    let worst = gradient_self_test(cfg.seed)?;
    if worst < 1e-5 {
        println!("gradient self-test: pass (max relative error {worst:.2e} over 3 instances)");
    } else {
        println!("gradient self-test: FAIL (max relative error {worst:.2e})");
        failures += 1;
    }

    let (tele, ctl) = identity_self_test(cfg.seed)?;
    if tele < 1e-9 && ctl < 1e-9 {
        println!("identity self-test: pass (telescoping {tele:.2e}, control rewrite {ctl:.2e})");
    } else {
        println!("identity self-test: FAIL (telescoping {tele:.2e}, control rewrite {ctl:.2e})");
        failures += 1;
    }

    if failures > 0 {
        eprintln!("error: {failures} check(s) failed");
        std::process::exit(1);
    }
    Ok(())
}

fn cmd_partition_stats(cfg: ExperimentConfig) -> Result<()> {
    let exp = build_experiment(&cfg)?;
    let classes = exp.model.n_classes();
    println!("client  labeled  unlabeled  test  omega   classes (train)");
    for client in &exp.clients {
        let mut counts = vec![0usize; classes];
        for &y in &client.data.labeled.y {
            counts[y] += 1;
        }
        for &y in &client.data.unlabeled_truth {
            counts[y] += 1;
        }
        let hist = counts
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c > 0)
            .map(|(k, &c)| format!("{k}:{c}"))
            .collect::<Vec<_>>()
            .join(" ");
        println!(
            "{:<6}  {:>7}  {:>9}  {:>4}  {:.4}  {}",
            client.id,
            client.n_labeled(),
            client.n_unlabeled(),
            client.data.test.len(),
            client.omega,
            hist
        );
    }
    let labeled: usize = exp.clients.iter().map(|c| c.n_labeled()).sum();
    let unlabeled: usize = exp.clients.iter().map(|c| c.n_unlabeled()).sum();
    let test: usize = exp.clients.iter().map(|c| c.data.test.len()).sum();
    println!("total   {labeled:>7}  {unlabeled:>9}  {test:>4}");
    Ok(())
}
