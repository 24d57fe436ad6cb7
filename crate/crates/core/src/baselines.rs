//! Baseline algorithms sharing the simulator's round structure.
//!
//! * `fedavg_ss` — plain local SGD on the semi-supervised objective with
//!   parameter averaging; no personalization, no drift correction.
//! * `fedshvrp` — local SGD with SCAFFOLD-style control variates (no
//!   momentum, no normalization by discounted step counts).
//! * `apfl` — interpolation personalization on labels only: unlabeled data
//!   and pseudo-labels are ignored (`alpha_p = alpha_r = 0`, frozen labels).
//! * `apsfl` — the semi-supervised variant of `apfl`: same plain-SGD tracks,
//!   but with pseudo-label refresh and the full objective.
//!
//! All baselines reuse the per-round epoch draws and batch streams of the
//! main algorithm, so a comparison across algorithms sees identical data
//! order wherever the algorithms would consume it identically.

use std::collections::BTreeMap;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::client::{refresh_pseudo_labels, ClientState, LocalPlan, RoundCtx};
use crate::error::{Error, Result};
use crate::nn::ParamVector;
use crate::objective::{grad_personalized_local, grad_semisup_theta};
use crate::server::check_reports;

/// Which algorithm drives the round loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AlgorithmKind {
    #[serde(rename = "fedcpsl")]
    FedCpsl,
    #[serde(rename = "fedavg_ss")]
    FedAvgSs,
    #[serde(rename = "fedshvrp")]
    FedShvrp,
    #[serde(rename = "apfl")]
    Apfl,
    #[serde(rename = "apsfl")]
    Apsfl,
}

impl AlgorithmKind {
    pub const ALL: [AlgorithmKind; 5] = [
        AlgorithmKind::FedCpsl,
        AlgorithmKind::FedAvgSs,
        AlgorithmKind::FedShvrp,
        AlgorithmKind::Apfl,
        AlgorithmKind::Apsfl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmKind::FedCpsl => "fedcpsl",
            AlgorithmKind::FedAvgSs => "fedavg_ss",
            AlgorithmKind::FedShvrp => "fedshvrp",
            AlgorithmKind::Apfl => "apfl",
            AlgorithmKind::Apsfl => "apsfl",
        }
    }

    /// Algorithms with no personal track; their mixture weight is pinned to
    /// zero so personalized predictions equal global ones.
    pub fn is_global_only(self) -> bool {
        matches!(self, AlgorithmKind::FedAvgSs | AlgorithmKind::FedShvrp)
    }
}

impl std::fmt::Display for AlgorithmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AlgorithmKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AlgorithmKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "algorithm",
                    format!(
                        "unknown algorithm `{s}`; expected one of {}",
                        AlgorithmKind::ALL.map(|k| k.name()).join(", ")
                    ),
                )
            })
    }
}

/// What a baseline client sends back.
#[derive(Debug, Clone)]
pub struct BaselineReport {
    pub delta: ParamVector,
    /// Control-variate delta; present only for the variance-reduced
    /// baseline.
    pub ctl_delta: Option<ParamVector>,
    pub q_steps: usize,
}

/// True when every local batch would come out empty for this client under
/// the given batch plan (possible for the label-only baseline on a client
/// whose labeled pool is empty).
fn no_usable_rows(state: &ClientState, ctx: &RoundCtx) -> bool {
    let labeled_empty = state.n_labeled() == 0 || (!ctx.batches.full_batch && ctx.batches.s_l == 0);
    let unlabeled_empty =
        state.n_unlabeled() == 0 || (!ctx.batches.full_batch && ctx.batches.s_u == 0);
    labeled_empty && unlabeled_empty
}

/// One baseline client round. Plain SGD tracks (momentum is a property of
/// the main algorithm); the variance-reduced baseline adds the SCAFFOLD
/// correction and control update.
pub fn baseline_client_round(
    kind: AlgorithmKind,
    state: &mut ClientState,
    theta_global: &ParamVector,
    ctl_global: &ParamVector,
    plan: &LocalPlan,
    ctx: &RoundCtx,
    rng: &mut ChaCha8Rng,
) -> Result<BaselineReport> {
    debug_assert_ne!(kind, AlgorithmKind::FedCpsl);
    refresh_pseudo_labels(state, theta_global, ctx, plan.eta_v)?;

    let dim = theta_global.len();
    if no_usable_rows(state, ctx) {
        return Ok(BaselineReport {
            delta: ParamVector::zeros(dim),
            ctl_delta: if kind == AlgorithmKind::FedShvrp {
                Some(ParamVector::zeros(dim))
            } else {
                None
            },
            q_steps: plan.q_steps,
        });
    }

    let variance_reduced = kind == AlgorithmKind::FedShvrp;
    let personalized = matches!(kind, AlgorithmKind::Apfl | AlgorithmKind::Apsfl);

    let mut correction = ParamVector::zeros(dim);
    if variance_reduced {
        correction.add_scaled(1.0, ctl_global);
        correction.add_scaled(-1.0, &state.ctl);
    }

    let mut theta = theta_global.clone();
    for _ in 0..plan.q_steps {
        let batch = crate::client::draw_step_batch(state, ctx, rng)?;
        let g = grad_semisup_theta(ctx.model, &theta, state.nu.as_array(), &batch, &ctx.hyper)?;
        if personalized && state.beta > 0.0 {
            // Personal step from the pre-update local iterate, like the
            // main algorithm.
            let g_lc = grad_personalized_local(
                ctx.model,
                &state.theta_lc,
                &theta,
                state.nu.as_array(),
                &batch,
                &ctx.hyper,
                state.beta,
            )?;
            state.theta_lc.add_scaled(-plan.eta_c, &g_lc);
        }
        theta.add_scaled(-plan.eta, &g);
        theta.add_scaled(-plan.eta, &correction);
    }

    if !theta.all_finite() || !state.theta_lc.all_finite() {
        return Err(Error::NonFinite(format!(
            "client {} baseline update",
            state.id
        )));
    }

    let delta = theta.sub(theta_global);
    let ctl_delta = if variance_reduced {
        // c_i' = c_i - c - delta / (Q eta); report the difference.
        let mut d = ParamVector::zeros(dim);
        d.add_scaled(-1.0, ctl_global);
        d.add_scaled(-1.0 / (plan.q_steps as f64 * plan.eta), &delta);
        state.ctl.add_scaled(1.0, &d);
        if !state.ctl.all_finite() {
            return Err(Error::NonFinite(format!(
                "client {} baseline control",
                state.id
            )));
        }
        Some(d)
    } else {
        None
    };

    Ok(BaselineReport {
        delta,
        ctl_delta,
        q_steps: plan.q_steps,
    })
}

/// Baseline aggregation: weighted parameter averaging over participants
/// (weights renormalized to the active set); the variance-reduced baseline
/// additionally moves the server control by the `m/n`-scaled weighted mean
/// of the client control deltas.
pub fn baseline_aggregate(
    kind: AlgorithmKind,
    theta: &ParamVector,
    ctl: &ParamVector,
    participants: &[usize],
    reports: &BTreeMap<usize, BaselineReport>,
    omega: &[f64],
) -> Result<(ParamVector, ParamVector)> {
    check_reports(participants, reports)?;
    let active_mass: f64 = participants.iter().map(|&i| omega[i]).sum();
    if active_mass <= 0.0 {
        return Err(Error::config("omega", "active clients carry zero weight"));
    }

    let mut next_theta = theta.clone();
    for &i in participants {
        next_theta.add_scaled(omega[i] / active_mass, &reports[&i].delta);
    }
    if !next_theta.all_finite() {
        return Err(Error::NonFinite("aggregated baseline model".into()));
    }

    let mut next_ctl = ctl.clone();
    if kind == AlgorithmKind::FedShvrp {
        let scale = participants.len() as f64 / omega.len() as f64;
        for &i in participants {
            let d = reports[&i].ctl_delta.as_ref().ok_or_else(|| {
                Error::config("ctl_delta", format!("client {i} sent no control delta"))
            })?;
            next_ctl.add_scaled(scale * omega[i] / active_mass, d);
        }
        if !next_ctl.all_finite() {
            return Err(Error::NonFinite("baseline server control".into()));
        }
    }
    Ok((next_theta, next_ctl))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::client::{BatchPlan, PseudoLabelMode};
    use crate::data::{gen_blobs, split_semi};
    use crate::nn::{init_params, Activation, ModelSpec};
    use crate::objective::SemiSupHyper;
    use crate::rng::{derive_rng, StreamKind};

    #[test]
    fn algorithm_names_round_trip() {
        for kind in AlgorithmKind::ALL {
            assert_eq!(kind.name().parse::<AlgorithmKind>().unwrap(), kind);
            // serde string form matches the display form.
            let json = serde_json::to_string(&kind).unwrap();
            assert_eq!(json, format!("\"{}\"", kind.name()));
        }
        assert!("fedavg".parse::<AlgorithmKind>().is_err());
        assert!(AlgorithmKind::FedAvgSs.is_global_only());
        assert!(!AlgorithmKind::Apsfl.is_global_only());
    }

    fn toy_client(seed: u64, beta: f64) -> (ModelSpec, ParamVector, ClientState) {
        let spec = ModelSpec::mlp(2, &[4], 3, Activation::Tanh).unwrap();
        let mut init_rng = derive_rng(seed, StreamKind::Init, 0, 0);
        let theta0 = init_params(&spec, &mut init_rng);
        let mut data_rng = derive_rng(seed, StreamKind::Synthetic, 0, 0);
        let ds = gen_blobs(3, 2, 20, 0.3, &mut data_rng).unwrap();
        let mut split_rng = derive_rng(seed, StreamKind::SemiSplit, 0, 0);
        let split = split_semi(&ds, 0.5, 0.2, &mut split_rng).unwrap();
        let state = ClientState::fresh(0, &theta0, 3, beta, 1.0, split).unwrap();
        (spec, theta0, state)
    }

    fn ctx<'a>(
        spec: &'a ModelSpec,
        hyper: SemiSupHyper,
        pseudo: PseudoLabelMode,
        s_u: usize,
    ) -> RoundCtx<'a> {
        RoundCtx {
            model: spec,
            hyper,
            pseudo,
            batches: BatchPlan {
                full_batch: false,
                s_l: 4,
                s_u,
            },
            use_control_variates: false,
        }
    }

    /// The sgd baseline trajectory must match a hand-rolled reference loop
    /// reading the same batch stream.
    #[test]
    fn fedavg_round_matches_reference_loop() {
        let (spec, theta0, mut state) = toy_client(61, 0.0);
        let hyper = SemiSupHyper::new(0.9, 0.45).unwrap();
        let c = ctx(&spec, hyper, PseudoLabelMode::ClosedForm, 6);
        let plan = LocalPlan::new(5, 0.0, 0.03, 0.06, 0.2).unwrap();
        let zero = ParamVector::zeros(theta0.len());

        // Reference: replicate with an identical state clone and stream.
        let mut ref_state = state.clone();
        let mut ref_rng = derive_rng(61, StreamKind::Batch, 0, 0);
        refresh_pseudo_labels(&mut ref_state, &theta0, &c, plan.eta_v).unwrap();
        let mut expected = theta0.clone();
        for _ in 0..plan.q_steps {
            let batch = crate::client::draw_step_batch(&ref_state, &c, &mut ref_rng).unwrap();
            let g = grad_semisup_theta(&spec, &expected, ref_state.nu.as_array(), &batch, &hyper)
                .unwrap();
            expected.add_scaled(-plan.eta, &g);
        }

        let mut rng = derive_rng(61, StreamKind::Batch, 0, 0);
        let rep = baseline_client_round(
            AlgorithmKind::FedAvgSs,
            &mut state,
            &theta0,
            &zero,
            &plan,
            &c,
            &mut rng,
        )
        .unwrap();
        assert!(rep.ctl_delta.is_none());
        let got = theta0.add(&rep.delta);
        assert!(got.sub(&expected).max_abs() < 1e-12);
        // No personal track movement for a global-only baseline.
        assert_eq!(state.theta_lc, theta0);
    }

    #[test]
    fn scaffold_control_update_identity() {
        let (spec, theta0, mut state) = toy_client(62, 0.0);
        let hyper = SemiSupHyper::new(1.0, 0.5).unwrap();
        let c = ctx(&spec, hyper, PseudoLabelMode::ClosedForm, 4);
        let plan = LocalPlan::new(4, 0.0, 0.02, 0.04, 0.2).unwrap();
        let mut ctl_rng = derive_rng(63, StreamKind::Init, 5, 5);
        state.ctl = init_params(&spec, &mut ctl_rng).scaled(0.01);
        let ctl_global = init_params(&spec, &mut ctl_rng).scaled(0.005);
        let ctl_before = state.ctl.clone();

        let mut rng = derive_rng(62, StreamKind::Batch, 0, 0);
        let rep = baseline_client_round(
            AlgorithmKind::FedShvrp,
            &mut state,
            &theta0,
            &ctl_global,
            &plan,
            &c,
            &mut rng,
        )
        .unwrap();

        // c_i' = c_i - c - delta/(Q eta), and the report carries c_i' - c_i.
        let mut expected = ctl_before.clone();
        expected.add_scaled(-1.0, &ctl_global);
        expected.add_scaled(-1.0 / (4.0 * plan.eta), &rep.delta);
        assert!(state.ctl.sub(&expected).max_abs() < 1e-12);
        let d = rep.ctl_delta.unwrap();
        assert!(state.ctl.sub(&ctl_before.add(&d)).max_abs() < 1e-12);
    }

    /// With alpha_p = alpha_r = 0 and s_u = 0, a round must coincide with
    /// supervised-only SGD: unlabeled data contributes nothing.
    #[test]
    fn apfl_ignores_unlabeled_pool() {
        let (spec, theta0, mut state) = toy_client(64, 0.6);
        let hyper = SemiSupHyper::new(0.0, 0.0).unwrap();
        let c = ctx(&spec, hyper, PseudoLabelMode::Frozen, 0);
        let plan = LocalPlan::new(6, 0.0, 0.05, 0.05, 0.2).unwrap();
        let zero = ParamVector::zeros(theta0.len());
        let nu_before = state.nu.clone();

        let mut rng = derive_rng(64, StreamKind::Batch, 0, 0);
        let rep = baseline_client_round(
            AlgorithmKind::Apfl,
            &mut state,
            &theta0,
            &zero,
            &plan,
            &c,
            &mut rng,
        )
        .unwrap();
        // Pseudo-labels frozen at uniform.
        assert_eq!(state.nu, nu_before);
        // Reference: labeled-only SGD reading the same stream.
        let mut expected = theta0.clone();
        let mut expected_lc = theta0.clone();
        let mut ref_rng = derive_rng(64, StreamKind::Batch, 0, 0);
        for _ in 0..plan.q_steps {
            let batch = crate::client::draw_step_batch(&state, &c, &mut ref_rng).unwrap();
            assert_eq!(batch.n_unlabeled(), 0);
            let g =
                grad_semisup_theta(&spec, &expected, state.nu.as_array(), &batch, &hyper).unwrap();
            let g_lc = grad_personalized_local(
                &spec,
                &expected_lc,
                &expected,
                state.nu.as_array(),
                &batch,
                &hyper,
                0.6,
            )
            .unwrap();
            expected_lc.add_scaled(-plan.eta_c, &g_lc);
            expected.add_scaled(-plan.eta, &g);
        }
        assert!(theta0.add(&rep.delta).sub(&expected).max_abs() < 1e-12);
        assert!(state.theta_lc.sub(&expected_lc).max_abs() < 1e-12);
    }

    #[test]
    fn apfl_with_no_labels_reports_zero_delta() {
        let (spec, theta0, mut state) = toy_client(65, 0.5);
        // Hollow out the labeled pool.
        state.data.labeled = state.data.labeled.subset(&[]);
        let hyper = SemiSupHyper::new(0.0, 0.0).unwrap();
        let c = ctx(&spec, hyper, PseudoLabelMode::Frozen, 0);
        let plan = LocalPlan::new(3, 0.0, 0.05, 0.05, 0.2).unwrap();
        let zero = ParamVector::zeros(theta0.len());
        let mut rng = derive_rng(65, StreamKind::Batch, 0, 0);
        let rep = baseline_client_round(
            AlgorithmKind::Apfl,
            &mut state,
            &theta0,
            &zero,
            &plan,
            &c,
            &mut rng,
        )
        .unwrap();
        assert_eq!(rep.delta.max_abs(), 0.0);
        assert_eq!(state.theta_lc, theta0);
    }

    #[test]
    fn baseline_aggregation_renormalizes_active_weights() {
        let theta = ParamVector::from_vec(vec![1.0]).unwrap();
        let ctl = ParamVector::zeros(1);
        let omega = vec![0.5, 0.3, 0.2];
        let mut reports = BTreeMap::new();
        reports.insert(
            0,
            BaselineReport {
                delta: ParamVector::from_vec(vec![1.0]).unwrap(),
                ctl_delta: None,
                q_steps: 1,
            },
        );
        reports.insert(
            2,
            BaselineReport {
                delta: ParamVector::from_vec(vec![-1.0]).unwrap(),
                ctl_delta: None,
                q_steps: 1,
            },
        );
        let (next, _) = baseline_aggregate(
            AlgorithmKind::FedAvgSs,
            &theta,
            &ctl,
            &[0, 2],
            &reports,
            &omega,
        )
        .unwrap();
        // Active mass 0.7: 1 + (0.5 - 0.2)/0.7.
        assert!((next.as_slice()[0] - (1.0 + 0.3 / 0.7)).abs() < 1e-12);
    }

    #[test]
    fn scaffold_server_control_scales_by_participation() {
        let theta = ParamVector::zeros(1);
        let ctl = ParamVector::from_vec(vec![0.5]).unwrap();
        let omega = vec![0.25; 4];
        let mut reports = BTreeMap::new();
        reports.insert(
            1,
            BaselineReport {
                delta: ParamVector::zeros(1),
                ctl_delta: Some(ParamVector::from_vec(vec![2.0]).unwrap()),
                q_steps: 1,
            },
        );
        let (_, next_ctl) = baseline_aggregate(
            AlgorithmKind::FedShvrp,
            &theta,
            &ctl,
            &[1],
            &reports,
            &omega,
        )
        .unwrap();
        // c + (m/n) * mean = 0.5 + (1/4) * 2.0.
        assert!((next_ctl.as_slice()[0] - 1.0).abs() < 1e-12);
    }
}
