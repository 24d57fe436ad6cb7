//! Server-side orchestration: participant sampling, normalized aggregation,
//! control-variate maintenance, the round loop, and step-size validation.
//!
//! The round structure is a fixed determinism contract: sample participants,
//! then visit them in ascending id order (epoch draw, then local work, each
//! from its own derived stream), then aggregate. Inactive clients are not
//! touched at all — their personal track, control variate and pseudo-labels
//! stay bit-identical across the round.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::baselines::{baseline_aggregate, baseline_client_round, AlgorithmKind, BaselineReport};
use crate::client::{
    client_round, draw_epochs, steps_per_epoch, BatchPlan, ClientReport, ClientState, LocalPlan,
    PseudoLabelMode, RoundCtx,
};
use crate::config::{DatasetKind, EtaGMode, ExperimentConfig};
use crate::data::{gen_blobs, load_mnist_subset, partition_shards, split_semi};
use crate::error::{Error, Result};
use crate::metrics::{
    global_gap_components, personalized_gap, pseudo_label_accuracy, test_accuracies,
    weighted_train_loss, TraceRecord,
};
use crate::nn::{init_params, ModelSpec, ParamVector};
use crate::objective::SemiSupHyper;
use crate::rng::{derive_rng, StreamKind};

/// Parameter magnitude beyond which a run is declared diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Global model and server control variate.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta: ParamVector,
    pub ctl: ParamVector,
}

/// Uniform sample of `m` distinct client ids out of `n`, ascending.
pub fn sample_participants<R: rand::Rng>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::config("m", format!("need 1 <= m <= {n}, got {m}")));
    }
    if m == n {
        return Ok((0..n).collect());
    }
    let mut picked = rand::seq::index::sample(rng, n, m).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

pub(crate) fn check_reports<T>(participants: &[usize], reports: &BTreeMap<usize, T>) -> Result<()> {
    for &i in participants {
        if !reports.contains_key(&i) {
            return Err(Error::MissingReport { client: i });
        }
    }
    if reports.len() != participants.len() {
        let extra = reports
            .keys()
            .find(|k| !participants.contains(k))
            .copied()
            .unwrap_or(usize::MAX);
        return Err(Error::UnexpectedReport { client: extra });
    }
    Ok(())
}

/// Normalized aggregation of the global model:
/// `theta + eta_g (n/m) sum_{i in A} omega_i delta_i / q_eff_i`.
pub fn aggregate_global(
    theta: &ParamVector,
    participants: &[usize],
    reports: &BTreeMap<usize, ClientReport>,
    omega: &[f64],
    eta_g: f64,
) -> Result<ParamVector> {
    check_reports(participants, reports)?;
    if !eta_g.is_finite() || eta_g <= 0.0 {
        return Err(Error::config("eta_g", format!("must be > 0, got {eta_g}")));
    }
    let n = omega.len() as f64;
    let m = participants.len() as f64;
    let mut next = theta.clone();
    for &i in participants {
        let rep = &reports[&i];
        if !rep.q_eff.is_finite() || rep.q_eff <= 0.0 {
            return Err(Error::config(
                "q_eff",
                format!("client {i} reported q_eff = {}", rep.q_eff),
            ));
        }
        next.add_scaled(eta_g * n / m * omega[i] / rep.q_eff, &rep.delta);
    }
    if !next.all_finite() {
        return Err(Error::NonFinite("aggregated global model".into()));
    }
    Ok(next)
}

/// Server control update:
/// `c - sum_{i in A} omega_i (c + delta_i / (eta q_eff_i))`.
pub fn update_server_control(
    ctl: &ParamVector,
    participants: &[usize],
    reports: &BTreeMap<usize, ClientReport>,
    omega: &[f64],
    eta: f64,
) -> Result<ParamVector> {
    check_reports(participants, reports)?;
    let mut next = ctl.clone();
    for &i in participants {
        let rep = &reports[&i];
        next.add_scaled(-omega[i], ctl);
        next.add_scaled(-omega[i] / (eta * rep.q_eff), &rep.delta);
    }
    if !next.all_finite() {
        return Err(Error::NonFinite("server control".into()));
    }
    Ok(next)
}

/// Theoretical step-size ceilings for the chosen configuration.
#[derive(Debug, Clone, Copy)]
pub struct StepsizeBounds {
    pub eta_max: f64,
    pub eta_v_max: f64,
    pub eta_c_max: f64,
}

/// Ceilings from the convergence analysis. `q_eff_max` / `q_eff_min` bound
/// the discounted step counts across clients and rounds; `l` and `l_f` are
/// smoothness estimates for the global and personalized objectives.
#[allow(clippy::too_many_arguments)]
pub fn stepsize_bounds(
    n: usize,
    m: usize,
    eta: f64,
    eta_g: f64,
    l: f64,
    l_f: f64,
    q_eff_max: f64,
    q_eff_min: f64,
) -> StepsizeBounds {
    let nf = n as f64;
    let mf = m as f64;
    let eta_max = [
        mf / (48.0 * eta_g * nf * l),
        1.0 / (8.0 * l * q_eff_max),
        3.0 * eta_g * nf / (100.0 * mf * l * q_eff_max * q_eff_max),
        mf / (32.0 * eta_g * nf * l) / (1.0 + 2.0 * nf / mf).sqrt(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    let eta_v_max = 1.0 / (4.0 * l);
    let tilde = eta * eta_g;
    let eta_c_max = [
        1.0 / (2.0 * q_eff_max * l_f),
        tilde * nf * l * l / (q_eff_min * mf * l_f * l_f),
        tilde * nf / (q_eff_min * mf),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    StepsizeBounds {
        eta_max,
        eta_v_max,
        eta_c_max,
    }
}

/// Compares configured rates against [`stepsize_bounds`] and returns one
/// warning line per violation. Empty means every rate is inside its ceiling.
#[allow(clippy::too_many_arguments)]
pub fn validate_stepsizes(
    n: usize,
    m: usize,
    eta: f64,
    eta_c: f64,
    eta_v: f64,
    eta_g: f64,
    l: f64,
    l_f: f64,
    q_eff_max: f64,
    q_eff_min: f64,
) -> Vec<String> {
    let bounds = stepsize_bounds(n, m, eta, eta_g, l, l_f, q_eff_max, q_eff_min);
    let mut warnings = Vec::new();
    if eta > bounds.eta_max {
        warnings.push(format!(
            "eta = {eta} exceeds the convergence bound {:.6e} (n={n}, m={m}, eta_g={eta_g}, L={l}, q_eff_max={q_eff_max})",
            bounds.eta_max
        ));
    }
    if eta_v > bounds.eta_v_max {
        warnings.push(format!(
            "eta_v = {eta_v} exceeds the convergence bound {:.6e} (L={l})",
            bounds.eta_v_max
        ));
    }
    if eta_c > bounds.eta_c_max {
        warnings.push(format!(
            "eta_c = {eta_c} exceeds the convergence bound {:.6e} (L_F={l_f}, q_eff_min={q_eff_min})",
            bounds.eta_c_max
        ));
    }
    warnings
}

/// A fully assembled run: model, fleet, server state, and the resolved
/// per-algorithm knobs.
pub struct Experiment {
    pub model: ModelSpec,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub cfg: ExperimentConfig,
    /// Objective weights after algorithm overrides (zeroed for the
    /// label-only baseline).
    pub hyper: SemiSupHyper,
    pub pseudo: PseudoLabelMode,
    pub batches: BatchPlan,
    pub use_control_variates: bool,
}

impl Experiment {
    pub fn round_ctx(&self) -> RoundCtx<'_> {
        RoundCtx {
            model: &self.model,
            hyper: self.hyper,
            pseudo: self.pseudo,
            batches: self.batches,
            use_control_variates: self.use_control_variates,
        }
    }

    pub fn omega(&self) -> Vec<f64> {
        self.clients.iter().map(|c| c.omega).collect()
    }

    pub fn n_clients(&self) -> usize {
        self.clients.len()
    }
}

/// Reports from one round, by algorithm family.
pub enum ReportSet {
    Main(BTreeMap<usize, ClientReport>),
    Baseline(BTreeMap<usize, BaselineReport>),
}

/// Everything observable about one completed round.
pub struct RoundSummary {
    /// 1-based round index.
    pub round: usize,
    pub participants: Vec<usize>,
    pub plans: BTreeMap<usize, LocalPlan>,
    pub reports: ReportSet,
    /// Global rate actually used this round (after `auto` resolution).
    pub eta_g: f64,
    pub theta_before: ParamVector,
    pub ctl_before: ParamVector,
}

/// Builds the model, partitions the data, and initializes every piece of
/// state from the seed. Pure function of the configuration.
pub fn build_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    cfg.validate()?;
    let seed = cfg.seed;

    let dataset = match cfg.dataset {
        DatasetKind::Blobs => {
            let mut rng = derive_rng(seed, StreamKind::Synthetic, 0, 0);
            gen_blobs(
                cfg.blobs_classes,
                cfg.blobs_dim,
                cfg.blobs_per_class,
                cfg.blobs_spread,
                &mut rng,
            )?
        }
        DatasetKind::MnistSubset => {
            let dir = cfg.resolved_data_dir();
            load_mnist_subset(&dir, cfg.dataset_size)?
        }
    };

    let model = ModelSpec::mlp(
        dataset.dim(),
        &cfg.hidden_dims,
        dataset.n_classes,
        cfg.activation,
    )?;

    let mut part_rng = derive_rng(seed, StreamKind::Partition, 0, 0);
    let shards = partition_shards(
        &dataset,
        cfg.n_clients,
        cfg.shards_per_client,
        &mut part_rng,
    )?;

    // Algorithm overrides: the label-only baseline ignores unlabeled data
    // and pseudo-labels entirely; global-only algorithms pin beta to 0 so
    // the mixture equals the global model.
    let algo = cfg.algorithm;
    let hyper = if algo == AlgorithmKind::Apfl {
        SemiSupHyper::new(0.0, 0.0)?
    } else {
        SemiSupHyper::new(cfg.alpha_p, cfg.alpha_r)?
    };
    let pseudo = if algo == AlgorithmKind::Apfl {
        PseudoLabelMode::Frozen
    } else {
        cfg.pseudo_mode()
    };
    let batches = BatchPlan {
        full_batch: cfg.full_batch,
        s_l: cfg.s_l,
        s_u: if algo == AlgorithmKind::Apfl {
            0
        } else {
            cfg.s_u
        },
    };
    let betas = cfg.resolved_betas()?;

    let mut init_rng = derive_rng(seed, StreamKind::Init, 0, 0);
    let theta0 = init_params(&model, &mut init_rng);

    let mut splits = Vec::with_capacity(cfg.n_clients);
    for (i, shard) in shards.iter().enumerate() {
        let mut split_rng = derive_rng(seed, StreamKind::SemiSplit, i as u64, 0);
        splits.push(split_semi(
            shard,
            cfg.epsilon,
            cfg.test_frac,
            &mut split_rng,
        )?);
    }
    let total_train: usize = splits.iter().map(|s| s.n_labeled() + s.n_unlabeled()).sum();
    if total_train == 0 {
        return Err(Error::EmptyPool {
            context: "training pools",
        });
    }

    let mut clients = Vec::with_capacity(cfg.n_clients);
    for (i, split) in splits.into_iter().enumerate() {
        let omega = (split.n_labeled() + split.n_unlabeled()) as f64 / total_train as f64;
        clients.push(ClientState::fresh(
            i,
            &theta0,
            dataset.n_classes,
            betas[i],
            omega,
            split,
        )?);
    }

    let dim = theta0.len();
    Ok(Experiment {
        model,
        clients,
        server: ServerState {
            theta: theta0,
            ctl: ParamVector::zeros(dim),
        },
        cfg: cfg.clone(),
        hyper,
        pseudo,
        batches,
        use_control_variates: algo == AlgorithmKind::FedCpsl && !cfg.disable_control_variates,
    })
}

/// Advances the experiment by one round (`r` is 0-based). Returns what the
/// server saw; client and server state are mutated in place.
pub fn run_round(exp: &mut Experiment, r: usize) -> Result<RoundSummary> {
    let round = r + 1;
    let n = exp.n_clients();
    let omega = exp.omega();
    let theta_before = exp.server.theta.clone();
    let ctl_before = exp.server.ctl.clone();

    let mut part_rng = derive_rng(exp.cfg.seed, StreamKind::Participation, 0, r as u64);
    let participants = sample_participants(n, exp.cfg.m, &mut part_rng)?;

    let algo = exp.cfg.algorithm;
    let eta_c = exp.cfg.resolved_eta_c();
    let mut plans: BTreeMap<usize, LocalPlan> = BTreeMap::new();
    let mut main_reports: BTreeMap<usize, ClientReport> = BTreeMap::new();
    let mut baseline_reports: BTreeMap<usize, BaselineReport> = BTreeMap::new();

    // Split the borrow: the context only needs the model immutably while
    // clients are mutated one at a time.
    let model = exp.model.clone();
    let ctx = RoundCtx {
        model: &model,
        hyper: exp.hyper,
        pseudo: exp.pseudo,
        batches: exp.batches,
        use_control_variates: exp.use_control_variates,
    };

    let blowup = |e: Error| -> Error {
        match e {
            Error::NonFinite(msg) => Error::Diverged {
                round,
                message: msg,
            },
            other => other,
        }
    };

    for &i in &participants {
        let mut epoch_rng = derive_rng(exp.cfg.seed, StreamKind::EpochDraw, i as u64, r as u64);
        let epochs = draw_epochs(exp.cfg.epoch_range, &mut epoch_rng)?;
        let client = &mut exp.clients[i];
        let spe = steps_per_epoch(client.n_labeled(), client.n_unlabeled(), &ctx.batches);
        // Momentum discount only applies to the main algorithm; baselines
        // run undiscounted local steps.
        let gamma = if algo == AlgorithmKind::FedCpsl {
            exp.cfg.gamma
        } else {
            0.0
        };
        let plan = LocalPlan::new(epochs * spe, gamma, exp.cfg.eta, eta_c, exp.cfg.eta_v)?;
        plans.insert(i, plan);

        let mut batch_rng = derive_rng(exp.cfg.seed, StreamKind::Batch, i as u64, r as u64);
        match algo {
            AlgorithmKind::FedCpsl => {
                let rep = client_round(
                    client,
                    &theta_before,
                    &ctl_before,
                    &plan,
                    &ctx,
                    &mut batch_rng,
                    &mut (),
                )
                .map_err(blowup)?;
                main_reports.insert(i, rep);
            }
            _ => {
                let rep = baseline_client_round(
                    algo,
                    client,
                    &theta_before,
                    &ctl_before,
                    &plan,
                    &ctx,
                    &mut batch_rng,
                )
                .map_err(blowup)?;
                baseline_reports.insert(i, rep);
            }
        }
    }

    let (eta_g, reports) = match algo {
        AlgorithmKind::FedCpsl => {
            let eta_g = match exp.cfg.eta_g {
                EtaGMode::Fixed(v) => v,
                EtaGMode::Auto => {
                    let sum: f64 = participants.iter().map(|i| main_reports[i].q_eff).sum();
                    sum / participants.len() as f64
                }
            };
            exp.server.theta =
                aggregate_global(&theta_before, &participants, &main_reports, &omega, eta_g)
                    .map_err(blowup)?;
            if exp.use_control_variates {
                exp.server.ctl = update_server_control(
                    &ctl_before,
                    &participants,
                    &main_reports,
                    &omega,
                    exp.cfg.eta,
                )
                .map_err(blowup)?;
            }
            (eta_g, ReportSet::Main(main_reports))
        }
        _ => {
            let (theta, ctl) = baseline_aggregate(
                algo,
                &theta_before,
                &ctl_before,
                &participants,
                &baseline_reports,
                &omega,
            )
            .map_err(blowup)?;
            exp.server.theta = theta;
            exp.server.ctl = ctl;
            (1.0, ReportSet::Baseline(baseline_reports))
        }
    };

    if exp.server.theta.max_abs() > DIVERGENCE_LIMIT {
        return Err(Error::Diverged {
            round,
            message: format!(
                "global parameter magnitude {} exceeds {DIVERGENCE_LIMIT}",
                exp.server.theta.max_abs()
            ),
        });
    }

    Ok(RoundSummary {
        round,
        participants,
        plans,
        reports,
        eta_g,
        theta_before,
        ctl_before,
    })
}

/// A finished run: the trace plus final state.
pub struct TrainingRun {
    pub records: Vec<TraceRecord>,
    pub experiment: Experiment,
}

/// Builds the experiment and runs all configured rounds, collecting one
/// trace record per round.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainingRun> {
    let mut exp = build_experiment(cfg)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    let model = exp.model.clone();

    for r in 0..cfg.rounds {
        let started = Instant::now();
        let ctx = RoundCtx {
            model: &model,
            hyper: exp.hyper,
            pseudo: exp.pseudo,
            batches: exp.batches,
            use_control_variates: exp.use_control_variates,
        };

        // Round-start stationarity metrics at (theta^r, nu^r).
        let (gap, gap_personal) = if cfg.trace_gaps {
            (
                global_gap_components(&exp.clients, &exp.server.theta, &ctx, cfg.eta_v)?,
                personalized_gap(&exp.clients, &exp.server.theta, &ctx)?,
            )
        } else {
            (
                crate::metrics::GapComponents {
                    gradnorm2: 0.0,
                    nu_term: 0.0,
                },
                0.0,
            )
        };

        let summary = run_round(&mut exp, r)?;

        // Post-round quality metrics at theta^{r+1}.
        let ctx = RoundCtx {
            model: &model,
            hyper: exp.hyper,
            pseudo: exp.pseudo,
            batches: exp.batches,
            use_control_variates: exp.use_control_variates,
        };
        let train_loss = weighted_train_loss(&exp.clients, &exp.server.theta, &ctx)?;
        let (acc_global, acc_personal) = test_accuracies(&exp.clients, &exp.server.theta, &model)?;
        let pseudo_acc = pseudo_label_accuracy(&exp.clients);

        let wall_ms = if cfg.trace_timing {
            started.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        records.push(TraceRecord {
            round: summary.round,
            gap_global_gradnorm2: gap.gradnorm2,
            gap_nu_term: gap.nu_term,
            gap_personalized: gap_personal,
            train_loss,
            test_acc_global: acc_global,
            test_acc_personalized: acc_personal,
            pseudo_label_acc: pseudo_acc,
            wall_ms,
        });
    }

    Ok(TrainingRun {
        records,
        experiment: exp,
    })
}
