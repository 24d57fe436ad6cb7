//! Round-level metrics and trace files.
//!
//! The two raw gap components are always reported separately: the squared
//! norm of the full global-objective gradient, and the weighted squared
//! pseudo-label shift. Their combination into a single stationarity number
//! needs a smoothness constant, so [`GapComponents::combined`] takes it as
//! an argument instead of baking one in.
//!
//! Pooled conventions: accuracies pool raw counts across clients (a client
//! with twice the test data counts twice); any metric over an empty pool is
//! reported as `0.0` so traces stay JSON-representable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::client::{full_batch, refresh_pseudo_labels_preview, ClientState, RoundCtx};
use crate::error::{Error, Result};
use crate::nn::{ModelSpec, ParamVector};
use crate::objective::{
    grad_personalized_local, grad_semisup_theta, loss_semisup, predict_global, predict_personalized,
};

/// One row of the training trace. Field order here is the column order of
/// every trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// 1-based round index.
    pub round: usize,
    /// Squared norm of the global-objective gradient at the round start.
    pub gap_global_gradnorm2: f64,
    /// Weighted squared pseudo-label shift at the round start.
    pub gap_nu_term: f64,
    /// Weighted squared personal-track gradient norm at the round start.
    pub gap_personalized: f64,
    /// Weighted full-batch training loss after the round.
    pub train_loss: f64,
    /// Pooled test accuracy of the global model after the round.
    pub test_acc_global: f64,
    /// Pooled test accuracy of the per-client mixtures after the round.
    pub test_acc_personalized: f64,
    /// Pooled pseudo-label accuracy against quarantined ground truth.
    pub pseudo_label_acc: f64,
    /// Wall-clock round time; written as 0 unless timing is enabled, so
    /// repeated runs produce byte-identical traces.
    pub wall_ms: f64,
}

/// Column names, in declared order. Kept in sync with the struct by a test.
pub const TRACE_FIELDS: [&str; 9] = [
    "round",
    "gap_global_gradnorm2",
    "gap_nu_term",
    "gap_personalized",
    "train_loss",
    "test_acc_global",
    "test_acc_personalized",
    "pseudo_label_acc",
    "wall_ms",
];

/// Trace file format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceFormat {
    Csv,
    JsonLines,
}

impl FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(TraceFormat::Csv),
            "jsonl" => Ok(TraceFormat::JsonLines),
            other => Err(Error::config(
                "format",
                format!("expected `csv` or `jsonl`, got `{other}`"),
            )),
        }
    }
}

/// Fraction of matching predictions. Errors on length mismatch; an empty
/// pool reports 0.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::DimMismatch {
            context: "accuracy",
            expected: truth.len(),
            got: pred.len(),
        });
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let correct = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// The two raw components of the round-start stationarity measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapComponents {
    pub gradnorm2: f64,
    pub nu_term: f64,
}

impl GapComponents {
    /// `gradnorm2 + (31 L / 64) * nu_term` for a given smoothness constant.
    pub fn combined(&self, l: f64) -> f64 {
        self.gradnorm2 + 31.0 * l / 64.0 * self.nu_term
    }
}

/// Squared norm of `sum_i omega_i grad f_i(theta, nu_i)` over full batches,
/// plus the weighted squared shift the pseudo-label refresh would apply at
/// `theta`. Both are round-start quantities: call before any client moves.
pub fn global_gap_components(
    clients: &[ClientState],
    theta: &ParamVector,
    ctx: &RoundCtx,
    eta_v: f64,
) -> Result<GapComponents> {
    let mut grad = ParamVector::zeros(theta.len());
    let mut nu_term = 0.0;
    for client in clients {
        let batch = full_batch(client, ctx.model.n_classes())?;
        let g = grad_semisup_theta(ctx.model, theta, client.nu.as_array(), &batch, &ctx.hyper)?;
        grad.add_scaled(client.omega, &g);

        if client.n_unlabeled() > 0 {
            let next = refresh_pseudo_labels_preview(client, theta, ctx, eta_v)?;
            let mut shift = 0.0;
            for (a, b) in next.as_array().iter().zip(client.nu.as_array().iter()) {
                shift += (a - b) * (a - b);
            }
            nu_term += client.omega * shift;
        }
    }
    Ok(GapComponents {
        gradnorm2: grad.norm_sq(),
        nu_term,
    })
}

/// Weighted squared norm of each client's personal-track gradient at its
/// current localized parameters: `sum_i omega_i ||grad_lc F_i||^2`.
pub fn personalized_gap(
    clients: &[ClientState],
    theta: &ParamVector,
    ctx: &RoundCtx,
) -> Result<f64> {
    let mut total = 0.0;
    for client in clients {
        if client.beta == 0.0 {
            continue; // mixture ignores the personal track entirely
        }
        let batch = full_batch(client, ctx.model.n_classes())?;
        let g = grad_personalized_local(
            ctx.model,
            &client.theta_lc,
            theta,
            client.nu.as_array(),
            &batch,
            &ctx.hyper,
            client.beta,
        )?;
        total += client.omega * g.norm_sq();
    }
    Ok(total)
}

/// Weighted full-batch training loss `sum_i omega_i f_i(theta, nu_i)`.
pub fn weighted_train_loss(
    clients: &[ClientState],
    theta: &ParamVector,
    ctx: &RoundCtx,
) -> Result<f64> {
    let mut total = 0.0;
    for client in clients {
        let batch = full_batch(client, ctx.model.n_classes())?;
        total += client.omega
            * loss_semisup(ctx.model, theta, client.nu.as_array(), &batch, &ctx.hyper)?;
    }
    Ok(total)
}

/// Pooled global and personalized test accuracy over all client test sets.
pub fn test_accuracies(
    clients: &[ClientState],
    theta: &ParamVector,
    model: &ModelSpec,
) -> Result<(f64, f64)> {
    let mut correct_global = 0usize;
    let mut correct_personal = 0usize;
    let mut total = 0usize;
    for client in clients {
        if client.data.test.is_empty() {
            continue;
        }
        let x = &client.data.test.x;
        let truth = &client.data.test.y;
        let pred_g = predict_global(model, theta, x)?;
        let pred_p = predict_personalized(model, &client.theta_lc, theta, client.beta, x)?;
        correct_global += pred_g.iter().zip(truth).filter(|(a, b)| a == b).count();
        correct_personal += pred_p.iter().zip(truth).filter(|(a, b)| a == b).count();
        total += truth.len();
    }
    if total == 0 {
        return Ok((0.0, 0.0));
    }
    Ok((
        correct_global as f64 / total as f64,
        correct_personal as f64 / total as f64,
    ))
}

/// Pooled accuracy of `argmax nu` against the quarantined true labels of
/// the unlabeled pools.
pub fn pseudo_label_accuracy(clients: &[ClientState]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for client in clients {
        if client.n_unlabeled() == 0 {
            continue;
        }
        let pred = client.nu.argmax_rows();
        correct += pred
            .iter()
            .zip(&client.data.unlabeled_truth)
            .filter(|(a, b)| a == b)
            .count();
        total += pred.len();
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

/// Writes records to `path`. CSV always starts with the header row, even
/// for an empty trace; JSONL is one object per line.
pub fn write_trace(path: &Path, records: &[TraceRecord], format: TraceFormat) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    match format {
        TraceFormat::Csv => {
            writeln!(out, "{}", TRACE_FIELDS.join(","))?;
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(out);
            for rec in records {
                w.serialize(rec).map_err(|e| Error::TraceFormat {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
            }
            w.flush()?;
        }
        TraceFormat::JsonLines => {
            for rec in records {
                let line = serde_json::to_string(rec).map_err(|e| Error::TraceFormat {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                writeln!(out, "{line}")?;
            }
            out.flush()?;
        }
    }
    Ok(())
}

/// Reads a trace back. The format is inferred the same way it was written.
pub fn read_trace(path: &Path, format: TraceFormat) -> Result<Vec<TraceRecord>> {
    let file = File::open(path)?;
    match format {
        TraceFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .has_headers(true)
                .from_reader(BufReader::new(file));
            {
                let headers = reader.headers().map_err(|e| Error::TraceFormat {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                let got: Vec<&str> = headers.iter().collect();
                if got != TRACE_FIELDS {
                    return Err(Error::TraceFormat {
                        path: path.display().to_string(),
                        message: format!("unexpected header {got:?}"),
                    });
                }
            }
            let mut out = Vec::new();
            for row in reader.deserialize() {
                out.push(row.map_err(|e| Error::TraceFormat {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?);
            }
            Ok(out)
        }
        TraceFormat::JsonLines => {
            let mut out = Vec::new();
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                out.push(serde_json::from_str(&line).map_err(|e| Error::TraceFormat {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?);
            }
            Ok(out)
        }
    }
}
