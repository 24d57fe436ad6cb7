//! Semi-supervised training objective and its gradients.
//!
//! Per-client loss over a batch with `n_l` labeled and `n_u` unlabeled rows:
//!
//! ```text
//! f(theta, nu) = (1/n_l) sum_labeled   -<y_j, ln h_j>
//!              + (a_p/n_u) sum_unlabeled -<nu_j, ln h_j>
//!              + (a_r/n_u) sum_unlabeled [ KL(nu_j || d) + KL(h_j || d) ]
//! ```
//!
//! where `h_j` are model probabilities, `nu_j` the pseudo-label row paired
//! with unlabeled sample `j`, and `d` the uniform distribution. Logs are
//! natural, probabilities are floored at [`PROB_FLOOR`] inside logs and
//! divisions, and `0 * ln 0 = 0`. If a batch side is empty its terms drop
//! out; a batch with no rows at all is an error.
//!
//! The personalized objective replaces `h_j` by the mixture
//! `z_j = beta * h(theta_lc) + (1 - beta) * h(theta)` and is only ever
//! differentiated with respect to `theta_lc` (the global side is treated as
//! a constant there).

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::{backprop, forward, ModelSpec, ParamVector, ProbMatrix};
use crate::simplex::project_rows;

/// Floor applied to probabilities inside logarithms and divisions.
pub const PROB_FLOOR: f64 = 1e-12;

/// Weights of the two unsupervised terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemiSupHyper {
    /// Pseudo-label cross-entropy weight.
    pub alpha_p: f64,
    /// Uniform-KL regularizer weight.
    pub alpha_r: f64,
}

impl SemiSupHyper {
    pub fn new(alpha_p: f64, alpha_r: f64) -> Result<Self> {
        if !alpha_p.is_finite() || alpha_p < 0.0 {
            return Err(Error::config(
                "alpha_p",
                format!("must be >= 0, got {alpha_p}"),
            ));
        }
        if !alpha_r.is_finite() || alpha_r < 0.0 {
            return Err(Error::config(
                "alpha_r",
                format!("must be >= 0, got {alpha_r}"),
            ));
        }
        Ok(SemiSupHyper { alpha_p, alpha_r })
    }
}

/// A training batch. Unlabeled rows carry the index of their pseudo-label
/// row in the client's table so gradients stay paired with the right `nu_j`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub labeled_x: Array2<f64>,
    /// One-hot label rows, aligned with `labeled_x`.
    pub labeled_y: Array2<f64>,
    pub unlabeled_x: Array2<f64>,
    /// Index into the client pseudo-label table for each unlabeled row.
    pub unlabeled_rows: Vec<usize>,
}

impl Batch {
    pub fn new(
        labeled_x: Array2<f64>,
        labeled_y: Array2<f64>,
        unlabeled_x: Array2<f64>,
        unlabeled_rows: Vec<usize>,
    ) -> Result<Self> {
        if labeled_x.nrows() != labeled_y.nrows() {
            return Err(Error::DimMismatch {
                context: "batch labels",
                expected: labeled_x.nrows(),
                got: labeled_y.nrows(),
            });
        }
        if unlabeled_x.nrows() != unlabeled_rows.len() {
            return Err(Error::DimMismatch {
                context: "batch pseudo-label indices",
                expected: unlabeled_x.nrows(),
                got: unlabeled_rows.len(),
            });
        }
        if labeled_x.nrows() == 0 && unlabeled_x.nrows() == 0 {
            return Err(Error::EmptyPool { context: "batch" });
        }
        Ok(Batch {
            labeled_x,
            labeled_y,
            unlabeled_x,
            unlabeled_rows,
        })
    }

    pub fn n_labeled(&self) -> usize {
        self.labeled_x.nrows()
    }

    pub fn n_unlabeled(&self) -> usize {
        self.unlabeled_x.nrows()
    }
}

fn ln_floor(v: f64) -> f64 {
    v.max(PROB_FLOOR).ln()
}

/// Pulls the pseudo-label rows referenced by a batch out of the full table.
fn gather_rows(nu: &Array2<f64>, idx: &[usize]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((idx.len(), nu.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        if i >= nu.nrows() {
            return Err(Error::DimMismatch {
                context: "pseudo-label row index",
                expected: nu.nrows(),
                got: i,
            });
        }
        out.row_mut(r).assign(&nu.row(i));
    }
    Ok(out)
}

/// `sum_jc t_jc * ln(max(p_jc, floor))`, with `0 * ln 0 = 0`.
fn weighted_log_sum(targets: &Array2<f64>, probs: &Array2<f64>) -> f64 {
    targets
        .iter()
        .zip(probs.iter())
        .map(|(&t, &p)| if t == 0.0 { 0.0 } else { t * ln_floor(p) })
        .sum()
}

/// `sum_jc p_jc * ln(C * max(p_jc, floor))` = sum of row-wise KL to uniform.
fn kl_to_uniform_sum(rows: &Array2<f64>) -> f64 {
    let c = rows.ncols() as f64;
    rows.iter()
        .map(|&p| {
            if p == 0.0 {
                0.0
            } else {
                p * (ln_floor(p) + c.ln())
            }
        })
        .sum()
}

fn check_nu_table(spec: &ModelSpec, nu: &Array2<f64>) -> Result<()> {
    if nu.ncols() != spec.n_classes() {
        return Err(Error::DimMismatch {
            context: "pseudo-label table width",
            expected: spec.n_classes(),
            got: nu.ncols(),
        });
    }
    Ok(())
}

/// Loss terms given probability rows for both batch sides. Shared by the
/// plain and mixture objectives (which differ only in where the
/// probabilities come from).
fn loss_from_probs(
    h_l: Option<&Array2<f64>>,
    y: &Array2<f64>,
    h_u: Option<&Array2<f64>>,
    nu_rows: &Array2<f64>,
    hyper: &SemiSupHyper,
) -> f64 {
    let mut total = 0.0;
    if let Some(h) = h_l {
        total += -weighted_log_sum(y, h) / h.nrows() as f64;
    }
    if let Some(h) = h_u {
        let n_u = h.nrows() as f64;
        total += -hyper.alpha_p * weighted_log_sum(nu_rows, h) / n_u;
        total += hyper.alpha_r * (kl_to_uniform_sum(nu_rows) + kl_to_uniform_sum(h)) / n_u;
    }
    total
}

/// d(loss)/d(probs) for the labeled side: `-(1/n_l) y_c / max(h_c, floor)`.
fn sup_output_grad(h: &Array2<f64>, y: &Array2<f64>) -> Array2<f64> {
    let scale = 1.0 / h.nrows() as f64;
    let mut g = Array2::zeros(h.raw_dim());
    for ((g, &p), &t) in g.iter_mut().zip(h.iter()).zip(y.iter()) {
        if t != 0.0 {
            *g = -scale * t / p.max(PROB_FLOOR);
        }
    }
    g
}

/// d(loss)/d(probs) for the unlabeled side:
/// `-(a_p/n_u) nu_c / max(h_c, floor) + (a_r/n_u) (ln(C * max(h_c, floor)) + 1)`.
fn unsup_output_grad(h: &Array2<f64>, nu_rows: &Array2<f64>, hyper: &SemiSupHyper) -> Array2<f64> {
    let n_u = h.nrows() as f64;
    let c_ln = (h.ncols() as f64).ln();
    let mut g = Array2::zeros(h.raw_dim());
    for ((g, &p), &t) in g.iter_mut().zip(h.iter()).zip(nu_rows.iter()) {
        let mut v = hyper.alpha_r * (ln_floor(p) + c_ln + 1.0) / n_u;
        if t != 0.0 {
            v -= hyper.alpha_p * t / (p.max(PROB_FLOOR) * n_u);
        }
        *g = v;
    }
    g
}

/// Semi-supervised loss at `(theta, nu)` on one batch.
pub fn loss_semisup(
    spec: &ModelSpec,
    theta: &ParamVector,
    nu: &Array2<f64>,
    batch: &Batch,
    hyper: &SemiSupHyper,
) -> Result<f64> {
    check_nu_table(spec, nu)?;
    let h_l = if batch.n_labeled() > 0 {
        Some(forward(spec, theta, &batch.labeled_x)?.into_array())
    } else {
        None
    };
    let (h_u, nu_rows) = if batch.n_unlabeled() > 0 {
        (
            Some(forward(spec, theta, &batch.unlabeled_x)?.into_array()),
            gather_rows(nu, &batch.unlabeled_rows)?,
        )
    } else {
        (None, Array2::zeros((0, spec.n_classes())))
    };
    let loss = loss_from_probs(
        h_l.as_ref(),
        &batch.labeled_y,
        h_u.as_ref(),
        &nu_rows,
        hyper,
    );
    if !loss.is_finite() {
        return Err(Error::NonFinite("semi-supervised loss".into()));
    }
    Ok(loss)
}

/// Gradient of [`loss_semisup`] with respect to `theta`.
pub fn grad_semisup_theta(
    spec: &ModelSpec,
    theta: &ParamVector,
    nu: &Array2<f64>,
    batch: &Batch,
    hyper: &SemiSupHyper,
) -> Result<ParamVector> {
    check_nu_table(spec, nu)?;
    let mut grad = ParamVector::zeros(theta.len());
    if batch.n_labeled() > 0 {
        let h = forward(spec, theta, &batch.labeled_x)?.into_array();
        let g = sup_output_grad(&h, &batch.labeled_y);
        grad.add_scaled(1.0, &backprop(spec, theta, &batch.labeled_x, &g)?);
    }
    if batch.n_unlabeled() > 0 {
        let h = forward(spec, theta, &batch.unlabeled_x)?.into_array();
        let nu_rows = gather_rows(nu, &batch.unlabeled_rows)?;
        let g = unsup_output_grad(&h, &nu_rows, hyper);
        grad.add_scaled(1.0, &backprop(spec, theta, &batch.unlabeled_x, &g)?);
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("semi-supervised gradient".into()));
    }
    Ok(grad)
}

/// Per-row gradient of the loss with respect to the pseudo-labels, for rows
/// aligned 1:1 with `h_u` (typically the client's whole unlabeled set):
/// `g_c = -(a_p/n) ln h_c + (a_r/n) (ln(C nu_c) + 1)`.
pub fn grad_semisup_nu(
    h_u: &ProbMatrix,
    nu_rows: &Array2<f64>,
    hyper: &SemiSupHyper,
) -> Result<Array2<f64>> {
    if h_u.nrows() != nu_rows.nrows() || h_u.ncols() != nu_rows.ncols() {
        return Err(Error::DimMismatch {
            context: "pseudo-label gradient rows",
            expected: h_u.nrows() * h_u.ncols(),
            got: nu_rows.nrows() * nu_rows.ncols(),
        });
    }
    let n = h_u.nrows() as f64;
    let c_ln = (h_u.ncols() as f64).ln();
    let h = h_u.as_array();
    let mut g = Array2::zeros(h.raw_dim());
    for ((g, &p), &t) in g.iter_mut().zip(h.iter()).zip(nu_rows.iter()) {
        *g = (-hyper.alpha_p * ln_floor(p) + hyper.alpha_r * (ln_floor(t) + c_ln + 1.0)) / n;
    }
    Ok(g)
}

/// Exact minimizer of the pseudo-label subproblem over the simplex, row-wise:
/// `nu_c  ~  h_c^(a_p / a_r)`, computed in log space. Requires `a_r > 0`
/// (with `a_r = 0` the subproblem has no interior regularizer and no closed
/// form; use the projected-gradient step instead).
pub fn solve_pseudo_labels(h_u: &ProbMatrix, hyper: &SemiSupHyper) -> Result<ProbMatrix> {
    if hyper.alpha_r <= 0.0 {
        return Err(Error::config(
            "alpha_r",
            "closed-form pseudo-labels require alpha_r > 0",
        ));
    }
    let ratio = hyper.alpha_p / hyper.alpha_r;
    let mut out = Array2::zeros((h_u.nrows(), h_u.ncols()));
    for (mut row, h_row) in out.outer_iter_mut().zip(h_u.as_array().outer_iter()) {
        // softmax(ratio * ln h) with max shift.
        let logits: Vec<f64> = h_row.iter().map(|&p| ratio * ln_floor(p)).collect();
        let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (dst, &l) in row.iter_mut().zip(&logits) {
            *dst = (l - m).exp();
            sum += *dst;
        }
        for dst in row.iter_mut() {
            *dst /= sum;
        }
    }
    Ok(ProbMatrix::from_normalized(out))
}

/// One projected-gradient step on the pseudo-labels:
/// `project(nu - eta_v * grad)` row-wise.
pub fn pseudo_label_gd_step(nu: &ProbMatrix, grad: &Array2<f64>, eta_v: f64) -> Result<ProbMatrix> {
    if nu.nrows() != grad.nrows() || nu.ncols() != grad.ncols() {
        return Err(Error::DimMismatch {
            context: "pseudo-label step",
            expected: nu.nrows() * nu.ncols(),
            got: grad.nrows() * grad.ncols(),
        });
    }
    if !eta_v.is_finite() || eta_v <= 0.0 {
        return Err(Error::config("eta_v", format!("must be > 0, got {eta_v}")));
    }
    let mut stepped = nu.as_array().clone();
    stepped.scaled_add(-eta_v, grad);
    Ok(ProbMatrix::from_normalized(project_rows(&stepped)))
}

/// Mixture probabilities `beta * h(theta_lc) + (1 - beta) * h(theta)`.
pub fn mixture_probs(
    spec: &ModelSpec,
    theta_lc: &ParamVector,
    theta: &ParamVector,
    beta: f64,
    x: &Array2<f64>,
) -> Result<Array2<f64>> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(
            "beta",
            format!("must be in [0, 1], got {beta}"),
        ));
    }
    // Skip the unused forward pass at the endpoints.
    if beta == 0.0 {
        return Ok(forward(spec, theta, x)?.into_array());
    }
    if beta == 1.0 {
        return Ok(forward(spec, theta_lc, x)?.into_array());
    }
    let mut z = forward(spec, theta_lc, x)?.into_array();
    z *= beta;
    z.scaled_add(1.0 - beta, forward(spec, theta, x)?.as_array());
    Ok(z)
}

/// Personalized loss: the semi-supervised objective evaluated on mixture
/// probabilities instead of plain model output.
pub fn loss_personalized(
    spec: &ModelSpec,
    theta_lc: &ParamVector,
    theta: &ParamVector,
    nu: &Array2<f64>,
    batch: &Batch,
    hyper: &SemiSupHyper,
    beta: f64,
) -> Result<f64> {
    check_nu_table(spec, nu)?;
    let z_l = if batch.n_labeled() > 0 {
        Some(mixture_probs(
            spec,
            theta_lc,
            theta,
            beta,
            &batch.labeled_x,
        )?)
    } else {
        None
    };
    let (z_u, nu_rows) = if batch.n_unlabeled() > 0 {
        (
            Some(mixture_probs(
                spec,
                theta_lc,
                theta,
                beta,
                &batch.unlabeled_x,
            )?),
            gather_rows(nu, &batch.unlabeled_rows)?,
        )
    } else {
        (None, Array2::zeros((0, spec.n_classes())))
    };
    let loss = loss_from_probs(
        z_l.as_ref(),
        &batch.labeled_y,
        z_u.as_ref(),
        &nu_rows,
        hyper,
    );
    if !loss.is_finite() {
        return Err(Error::NonFinite("personalized loss".into()));
    }
    Ok(loss)
}

/// Gradient of [`loss_personalized`] with respect to the localized
/// parameters only; the global parameters are treated as constants, so the
/// chain rule contributes a single factor `beta`.
pub fn grad_personalized_local(
    spec: &ModelSpec,
    theta_lc: &ParamVector,
    theta: &ParamVector,
    nu: &Array2<f64>,
    batch: &Batch,
    hyper: &SemiSupHyper,
    beta: f64,
) -> Result<ParamVector> {
    check_nu_table(spec, nu)?;
    let mut grad = ParamVector::zeros(theta_lc.len());
    if beta == 0.0 {
        // Mixture does not depend on theta_lc at all.
        return Ok(grad);
    }
    if batch.n_labeled() > 0 {
        let z = mixture_probs(spec, theta_lc, theta, beta, &batch.labeled_x)?;
        let g = sup_output_grad(&z, &batch.labeled_y);
        grad.add_scaled(beta, &backprop(spec, theta_lc, &batch.labeled_x, &g)?);
    }
    if batch.n_unlabeled() > 0 {
        let z = mixture_probs(spec, theta_lc, theta, beta, &batch.unlabeled_x)?;
        let nu_rows = gather_rows(nu, &batch.unlabeled_rows)?;
        let g = unsup_output_grad(&z, &nu_rows, hyper);
        grad.add_scaled(beta, &backprop(spec, theta_lc, &batch.unlabeled_x, &g)?);
    }
    if !grad.all_finite() {
        return Err(Error::NonFinite("personalized gradient".into()));
    }
    Ok(grad)
}

/// Class predictions from the mixture model (ties break low).
pub fn predict_personalized(
    spec: &ModelSpec,
    theta_lc: &ParamVector,
    theta: &ParamVector,
    beta: f64,
    x: &Array2<f64>,
) -> Result<Vec<usize>> {
    let z = mixture_probs(spec, theta_lc, theta, beta, x)?;
    Ok(ProbMatrix::from_normalized(z).argmax_rows())
}

/// Class predictions from the global model alone.
pub fn predict_global(
    spec: &ModelSpec,
    theta: &ParamVector,
    x: &Array2<f64>,
) -> Result<Vec<usize>> {
    Ok(forward(spec, theta, x)?.argmax_rows())
}
