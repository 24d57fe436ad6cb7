//! Client-side round logic: pseudo-label refresh, momentum local SGD with
//! control variates on the global track, and the interpolated personal track.
//!
//! Both tracks advance with the same momentum discount and read the same
//! minibatch at every local step; the personal-track gradient is evaluated
//! at the *pre-update* local iterate, so step `t` of the two tracks is
//! simultaneous rather than sequential.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::{take_rows, ClientSplit};
use crate::error::{Error, Result};
use crate::nn::{forward, ModelSpec, ParamVector, ProbMatrix};
use crate::objective::{
    grad_personalized_local, grad_semisup_nu, grad_semisup_theta, pseudo_label_gd_step,
    solve_pseudo_labels, Batch, SemiSupHyper,
};

/// Discounted step count `q/(1-g) - g(1-g^q)/(1-g)^2`; the l1 norm of
/// [`momentum_weights`]. Reduces to `q` at `gamma = 0`.
pub fn effective_steps(q: usize, gamma: f64) -> Result<f64> {
    check_momentum_args(q, gamma)?;
    if gamma == 0.0 || q == 1 {
        // A single step always carries weight exactly 1.
        return Ok(q as f64);
    }
    let one_minus = 1.0 - gamma;
    Ok(q as f64 / one_minus - gamma * (1.0 - gamma.powi(q as i32)) / (one_minus * one_minus))
}

/// Weight of the step-`t` gradient in the end-of-round parameter delta:
/// `b_t = (1 - g^(q-t)) / (1 - g)` for `t = 0..q-1`. Strictly positive and
/// nonincreasing in `t`; all ones at `gamma = 0`.
pub fn momentum_weights(q: usize, gamma: f64) -> Result<Vec<f64>> {
    check_momentum_args(q, gamma)?;
    if gamma == 0.0 {
        return Ok(vec![1.0; q]);
    }
    let one_minus = 1.0 - gamma;
    Ok((0..q)
        .map(|t| (1.0 - gamma.powi((q - t) as i32)) / one_minus)
        .collect())
}

fn check_momentum_args(q: usize, gamma: f64) -> Result<()> {
    if q == 0 {
        return Err(Error::config("q_steps", "need at least one local step"));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::config(
            "gamma",
            format!("must be in [0, 1), got {gamma}"),
        ));
    }
    Ok(())
}

/// How pseudo-labels are refreshed at the start of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    /// Exact minimizer of the label subproblem (needs `alpha_r > 0`).
    ClosedForm,
    /// One projected-gradient step with rate `eta_v`.
    #[serde(rename = "gd")]
    GradStep,
    /// No refresh; labels stay as they are.
    Frozen,
}

impl std::str::FromStr for PseudoLabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed_form" => Ok(PseudoLabelMode::ClosedForm),
            "gd" => Ok(PseudoLabelMode::GradStep),
            "frozen" => Ok(PseudoLabelMode::Frozen),
            other => Err(Error::config(
                "pseudo_label_mode",
                format!("expected `closed_form`, `gd` or `frozen`, got `{other}`"),
            )),
        }
    }
}

/// Minibatch shape for local steps.
#[derive(Debug, Clone, Copy)]
pub struct BatchPlan {
    /// Use the whole labeled and unlabeled pools every step.
    pub full_batch: bool,
    /// Labeled draws per step (with replacement).
    pub s_l: usize,
    /// Unlabeled draws per step (with replacement).
    pub s_u: usize,
}

/// Everything a client needs for one round besides its own state.
pub struct RoundCtx<'a> {
    pub model: &'a ModelSpec,
    pub hyper: SemiSupHyper,
    pub pseudo: PseudoLabelMode,
    pub batches: BatchPlan,
    /// Disabled only for diagnostics (plain momentum SGD, no drift
    /// correction); the server-side control state stays at zero then.
    pub use_control_variates: bool,
}

/// Per-round local schedule and step sizes.
#[derive(Debug, Clone, Copy)]
pub struct LocalPlan {
    pub q_steps: usize,
    pub gamma: f64,
    pub eta: f64,
    pub eta_c: f64,
    pub eta_v: f64,
}

impl LocalPlan {
    pub fn new(q_steps: usize, gamma: f64, eta: f64, eta_c: f64, eta_v: f64) -> Result<Self> {
        check_momentum_args(q_steps, gamma)?;
        for (key, v) in [("eta", eta), ("eta_c", eta_c), ("eta_v", eta_v)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(key, format!("must be > 0, got {v}")));
            }
        }
        Ok(LocalPlan {
            q_steps,
            gamma,
            eta,
            eta_c,
            eta_v,
        })
    }
}

/// What a participating client sends back: the raw parameter delta and its
/// discounted step count. The server does all normalization.
#[derive(Debug, Clone)]
pub struct ClientReport {
    pub delta: ParamVector,
    pub q_eff: f64,
}

/// Persistent per-client state. Everything here survives across rounds and
/// is frozen while the client is inactive.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    /// Localized (personal-track) parameters.
    pub theta_lc: ParamVector,
    /// Client control variate.
    pub ctl: ParamVector,
    /// Pseudo-label table, one row per unlabeled sample.
    pub nu: ProbMatrix,
    /// Interpolation weight toward the personal track.
    pub beta: f64,
    /// Aggregation weight (data share).
    pub omega: f64,
    pub data: ClientSplit,
}

impl ClientState {
    /// Fresh state: personal track starts at the initial global model,
    /// control at zero, pseudo-labels uniform.
    pub fn fresh(
        id: usize,
        theta0: &ParamVector,
        n_classes: usize,
        beta: f64,
        omega: f64,
        data: ClientSplit,
    ) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::config(
                "beta",
                format!("must be in [0, 1], got {beta}"),
            ));
        }
        let nu = ProbMatrix::uniform(data.n_unlabeled(), n_classes);
        Ok(ClientState {
            id,
            theta_lc: theta0.clone(),
            ctl: ParamVector::zeros(theta0.len()),
            nu,
            beta,
            omega,
            data,
        })
    }

    pub fn n_labeled(&self) -> usize {
        self.data.n_labeled()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.data.n_unlabeled()
    }
}

/// Observation hook for the local loop; used by identity checks to capture
/// per-step gradients without touching the production path.
pub trait RoundObserver {
    fn on_round_start(&mut self, _mu: &ParamVector, _mu_lc: &ParamVector) {}
    fn on_local_step(&mut self, _t: usize, _g: &ParamVector, _g_lc: &ParamVector) {}
}

impl RoundObserver for () {}

/// Uniform epoch draw from an inclusive range.
pub fn draw_epochs<R: Rng>(range: (usize, usize), rng: &mut R) -> Result<usize> {
    let (lo, hi) = range;
    if lo == 0 || hi < lo {
        return Err(Error::config(
            "epoch_range",
            format!("need 1 <= lo <= hi, got [{lo}, {hi}]"),
        ));
    }
    Ok(rng.random_range(lo..=hi))
}

/// Steps per epoch: enough draws to cover the larger pool once, at least 1.
/// Full-batch mode is one step per epoch by definition.
pub fn steps_per_epoch(n_labeled: usize, n_unlabeled: usize, batches: &BatchPlan) -> usize {
    if batches.full_batch {
        return 1;
    }
    let cover = |pool: usize, draw: usize| -> usize {
        if pool == 0 || draw == 0 {
            0
        } else {
            pool.div_ceil(draw)
        }
    };
    cover(n_labeled, batches.s_l)
        .max(cover(n_unlabeled, batches.s_u))
        .max(1)
}

/// One-hot rows for a label slice.
fn one_hot_rows(y: &[usize], classes: usize) -> ndarray::Array2<f64> {
    let mut m = ndarray::Array2::zeros((y.len(), classes));
    for (r, &l) in y.iter().enumerate() {
        m[(r, l)] = 1.0;
    }
    m
}

/// Draws the batch for one local step. Consumes the rng in a fixed order
/// (labeled side first), which is part of the determinism contract.
pub fn draw_step_batch(state: &ClientState, ctx: &RoundCtx, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let classes = ctx.model.n_classes();
    let (lab_idx, unl_idx): (Vec<usize>, Vec<usize>) = if ctx.batches.full_batch {
        (
            (0..state.n_labeled()).collect(),
            (0..state.n_unlabeled()).collect(),
        )
    } else {
        let draw = |pool: usize, count: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            if pool == 0 {
                Vec::new()
            } else {
                (0..count).map(|_| rng.random_range(0..pool)).collect()
            }
        };
        (
            draw(state.n_labeled(), ctx.batches.s_l, rng),
            draw(state.n_unlabeled(), ctx.batches.s_u, rng),
        )
    };
    let labeled_y: Vec<usize> = lab_idx.iter().map(|&i| state.data.labeled.y[i]).collect();
    Batch::new(
        take_rows(&state.data.labeled.x, &lab_idx),
        one_hot_rows(&labeled_y, classes),
        take_rows(&state.data.unlabeled_x, &unl_idx),
        unl_idx,
    )
}

/// The whole labeled and unlabeled pool as one batch.
pub fn full_batch(state: &ClientState, classes: usize) -> Result<Batch> {
    Batch::new(
        state.data.labeled.x.clone(),
        one_hot_rows(&state.data.labeled.y, classes),
        state.data.unlabeled_x.clone(),
        (0..state.n_unlabeled()).collect(),
    )
}

/// The pseudo-label table the client would adopt at `theta`, without
/// mutating anything. Used both by the real refresh and by the gap metric.
pub fn refresh_pseudo_labels_preview(
    state: &ClientState,
    theta: &ParamVector,
    ctx: &RoundCtx,
    eta_v: f64,
) -> Result<ProbMatrix> {
    if state.n_unlabeled() == 0 || ctx.pseudo == PseudoLabelMode::Frozen {
        return Ok(state.nu.clone());
    }
    let h_u = forward(ctx.model, theta, &state.data.unlabeled_x)?;
    match ctx.pseudo {
        PseudoLabelMode::ClosedForm => solve_pseudo_labels(&h_u, &ctx.hyper),
        PseudoLabelMode::GradStep => {
            let g = grad_semisup_nu(&h_u, state.nu.as_array(), &ctx.hyper)?;
            pseudo_label_gd_step(&state.nu, &g, eta_v)
        }
        PseudoLabelMode::Frozen => unreachable!(),
    }
}

/// Refreshes the pseudo-label table against the given (global) parameters.
pub fn refresh_pseudo_labels(
    state: &mut ClientState,
    theta: &ParamVector,
    ctx: &RoundCtx,
    eta_v: f64,
) -> Result<()> {
    if state.n_unlabeled() == 0 || ctx.pseudo == PseudoLabelMode::Frozen {
        return Ok(());
    }
    state.nu = refresh_pseudo_labels_preview(state, theta, ctx, eta_v)?;
    Ok(())
}

/// One full client round. Mutates `theta_lc`, `nu` and `ctl` in place and
/// returns the global-track report. `rng` must be the dedicated batch
/// stream for this `(client, round)` pair.
pub fn client_round(
    state: &mut ClientState,
    theta_global: &ParamVector,
    ctl_global: &ParamVector,
    plan: &LocalPlan,
    ctx: &RoundCtx,
    rng: &mut ChaCha8Rng,
    observer: &mut impl RoundObserver,
) -> Result<ClientReport> {
    if theta_global.len() != ctl_global.len() {
        return Err(Error::DimMismatch {
            context: "client round control",
            expected: theta_global.len(),
            got: ctl_global.len(),
        });
    }

    // Pseudo-labels are refreshed against the incoming global model, before
    // any local step, and held fixed for the rest of the round.
    refresh_pseudo_labels(state, theta_global, ctx, plan.eta_v)?;

    let dim = theta_global.len();
    let mut theta = theta_global.clone();
    let mut mu = ParamVector::zeros(dim);
    let mut mu_lc = ParamVector::zeros(dim);
    observer.on_round_start(&mu, &mu_lc);

    // Drift correction c - c_i, constant within the round.
    let mut correction = ParamVector::zeros(dim);
    if ctx.use_control_variates {
        correction.add_scaled(1.0, ctl_global);
        correction.add_scaled(-1.0, &state.ctl);
    }

    for t in 0..plan.q_steps {
        let batch = draw_step_batch(state, ctx, rng)?;
        let g = grad_semisup_theta(ctx.model, &theta, state.nu.as_array(), &batch, &ctx.hyper)?;
        // Personal-track gradient at the *current* local iterate, before the
        // global-track step below moves it.
        let g_lc = grad_personalized_local(
            ctx.model,
            &state.theta_lc,
            &theta,
            state.nu.as_array(),
            &batch,
            &ctx.hyper,
            state.beta,
        )?;
        observer.on_local_step(t, &g, &g_lc);

        mu.scale(plan.gamma);
        mu.add_scaled(1.0, &g);
        mu.add_scaled(1.0, &correction);
        theta.add_scaled(-plan.eta, &mu);

        mu_lc.scale(plan.gamma);
        mu_lc.add_scaled(1.0, &g_lc);
        state.theta_lc.add_scaled(-plan.eta_c, &mu_lc);
    }

    if !theta.all_finite() || !state.theta_lc.all_finite() {
        return Err(Error::NonFinite(format!(
            "client {} local update",
            state.id
        )));
    }

    let delta = theta.sub(theta_global);
    let q_eff = effective_steps(plan.q_steps, plan.gamma)?;

    if ctx.use_control_variates {
        // c_i <- c_i - c - delta / (eta * q_eff).
        state.ctl.add_scaled(-1.0, ctl_global);
        state.ctl.add_scaled(-1.0 / (plan.eta * q_eff), &delta);
        if !state.ctl.all_finite() {
            return Err(Error::NonFinite(format!(
                "client {} control update",
                state.id
            )));
        }
    }

    Ok(ClientReport { delta, q_eff })
}
