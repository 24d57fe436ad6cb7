//! Experiment configuration: TOML parsing, defaults, validation.
//!
//! Every run is a pure function of one [`ExperimentConfig`]. Unknown keys
//! in a config file are hard errors, not warnings, so typos cannot silently
//! fall back to defaults. All validation failures name the offending key.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::AlgorithmKind;
use crate::client::PseudoLabelMode;
use crate::error::{Error, Result};
use crate::nn::Activation;

/// Environment variable consulted for the dataset directory when
/// `data_dir` is not set in the config.
pub const DATA_DIR_ENV: &str = "FEDCPSL_DATA_DIR";

/// Which dataset the run trains on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Self-contained synthetic Gaussian blobs.
    Blobs,
    /// Prefix of the MNIST training set, loaded from IDX files on disk.
    MnistSubset,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(DatasetKind::Blobs),
            "mnist_subset" => Ok(DatasetKind::MnistSubset),
            other => Err(Error::config(
                "dataset",
                format!("expected `blobs` or `mnist_subset`, got `{other}`"),
            )),
        }
    }
}

/// Mixture weight: one value for everybody, or one per client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BetaSetting {
    Scalar(f64),
    PerClient(Vec<f64>),
}

impl FromStr for BetaSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').collect();
        let parse = |p: &str| -> Result<f64> {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::config("beta", format!("`{p}` is not a number")))
        };
        if parts.len() == 1 {
            Ok(BetaSetting::Scalar(parse(parts[0])?))
        } else {
            Ok(BetaSetting::PerClient(
                parts.into_iter().map(parse).collect::<Result<_>>()?,
            ))
        }
    }
}

/// Server-rate selection: a fixed number, or `auto` = mean discounted step
/// count of the round's participants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaGMode {
    Auto,
    Fixed(f64),
}

impl Serialize for EtaGMode {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EtaGMode::Auto => ser.serialize_str("auto"),
            EtaGMode::Fixed(v) => ser.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for EtaGMode {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Num(f64),
            Text(String),
        }
        match Repr::deserialize(de)? {
            Repr::Num(v) => Ok(EtaGMode::Fixed(v)),
            Repr::Text(s) if s == "auto" => Ok(EtaGMode::Auto),
            Repr::Text(s) => Err(serde::de::Error::custom(format!(
                "eta_g must be a number or \"auto\", got \"{s}\""
            ))),
        }
    }
}

impl FromStr for EtaGMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(EtaGMode::Auto);
        }
        s.parse::<f64>()
            .map(EtaGMode::Fixed)
            .map_err(|_| Error::config("eta_g", format!("expected a number or `auto`, got `{s}`")))
    }
}

/// Complete run description. TOML keys match field names exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmKind,
    pub dataset: DatasetKind,
    pub n_clients: usize,
    /// Participants sampled per round.
    pub m: usize,
    pub rounds: usize,
    /// Fraction of each client's training pool that loses its labels.
    pub epsilon: f64,
    pub beta: BetaSetting,
    /// Momentum discount of the local updates.
    pub gamma: f64,
    /// Local step size.
    pub eta: f64,
    /// Personal-track step size; defaults to `2 * eta` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta_c: Option<f64>,
    pub eta_g: EtaGMode,
    /// Pseudo-label step size (projected-gradient mode only).
    pub eta_v: f64,
    pub alpha_p: f64,
    pub alpha_r: f64,
    /// Labeled minibatch draws per local step.
    pub s_l: usize,
    /// Unlabeled minibatch draws per local step.
    pub s_u: usize,
    /// Inclusive range of local epochs drawn uniformly per client per round.
    pub epoch_range: (usize, usize),
    pub shards_per_client: usize,
    pub seed: u64,
    /// Every local step reads the whole pools instead of minibatches.
    pub full_batch: bool,
    /// Smoothness estimate used by the step-size validator; the bounds are
    /// reported as unchecked when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_estimate: Option<f64>,
    /// Personalized-objective smoothness; defaults to `l_estimate`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l_f_estimate: Option<f64>,
    /// Rows taken from the MNIST training prefix.
    pub dataset_size: usize,
    pub blobs_classes: usize,
    pub blobs_dim: usize,
    pub blobs_per_class: usize,
    pub blobs_spread: f64,
    /// Per-client holdout fraction.
    pub test_frac: f64,
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
    /// Target used by rounds-to-threshold comparisons.
    pub acc_threshold: f64,
    pub pseudo_label_mode: PseudoLabelMode,
    /// Diagnostic switch: run the main algorithm without drift correction.
    pub disable_control_variates: bool,
    /// Compute the (expensive) stationarity gaps every round.
    pub trace_gaps: bool,
    /// Record wall-clock time per round. Off by default so traces are
    /// byte-identical across repeated runs.
    pub trace_timing: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            algorithm: AlgorithmKind::FedCpsl,
            dataset: DatasetKind::Blobs,
            n_clients: 20,
            m: 4,
            rounds: 100,
            epsilon: 0.9,
            beta: BetaSetting::Scalar(0.75),
            gamma: 0.8,
            eta: 0.005,
            eta_c: None,
            eta_g: EtaGMode::Auto,
            eta_v: 0.05,
            alpha_p: 1.0,
            alpha_r: 0.5,
            s_l: 32,
            s_u: 32,
            epoch_range: (2, 2),
            shards_per_client: 2,
            seed: 17,
            full_batch: false,
            l_estimate: None,
            l_f_estimate: None,
            dataset_size: 2000,
            blobs_classes: 3,
            blobs_dim: 2,
            blobs_per_class: 100,
            blobs_spread: 0.25,
            test_frac: 0.2,
            hidden_dims: vec![32],
            activation: Activation::Tanh,
            acc_threshold: 0.9,
            pseudo_label_mode: PseudoLabelMode::ClosedForm,
            disable_control_variates: false,
            trace_gaps: true,
            trace_timing: false,
            data_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML string. Unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigFile {
            path: "<inline>".into(),
            message: e.to_string(),
        })
    }

    /// Reads and parses a config file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        toml::from_str(&text).map_err(|e| Error::ConfigFile {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::ConfigFile {
            path: "<serialize>".into(),
            message: e.to_string(),
        })
    }

    /// Personal-track rate after defaulting.
    pub fn resolved_eta_c(&self) -> f64 {
        self.eta_c.unwrap_or(2.0 * self.eta)
    }

    /// Personalized smoothness estimate after defaulting.
    pub fn resolved_l_f(&self) -> Option<f64> {
        self.l_f_estimate.or(self.l_estimate)
    }

    /// Dataset directory: explicit config, then `FEDCPSL_DATA_DIR`, then
    /// `./data`.
    pub fn resolved_data_dir(&self) -> PathBuf {
        if let Some(dir) = &self.data_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        PathBuf::from("data")
    }

    /// One mixture weight per client, with the algorithm override applied:
    /// global-only algorithms have no personal track, so their weight is 0.
    pub fn resolved_betas(&self) -> Result<Vec<f64>> {
        if self.algorithm.is_global_only() {
            return Ok(vec![0.0; self.n_clients]);
        }
        match &self.beta {
            BetaSetting::Scalar(b) => Ok(vec![*b; self.n_clients]),
            BetaSetting::PerClient(v) => {
                if v.len() != self.n_clients {
                    return Err(Error::config(
                        "beta",
                        format!("{} values for {} clients", v.len(), self.n_clients),
                    ));
                }
                Ok(v.clone())
            }
        }
    }

    pub fn pseudo_mode(&self) -> PseudoLabelMode {
        self.pseudo_label_mode
    }

    /// Full validation; every failure names its key.
    pub fn validate(&self) -> Result<()> {
        fn positive(key: &str, v: f64) -> Result<()> {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::config(key, format!("must be > 0, got {v}")));
            }
            Ok(())
        }
        fn unit_interval(key: &str, v: f64, open_top: bool) -> Result<()> {
            let ok = if open_top {
                (0.0..1.0).contains(&v)
            } else {
                (0.0..=1.0).contains(&v)
            };
            if !ok {
                let top = if open_top { "1)" } else { "1]" };
                return Err(Error::config(key, format!("must be in [0, {top}, got {v}")));
            }
            Ok(())
        }

        if self.n_clients == 0 {
            return Err(Error::config("n_clients", "must be at least 1"));
        }
        if self.m == 0 || self.m > self.n_clients {
            return Err(Error::config(
                "m",
                format!(
                    "need 1 <= m <= n_clients = {}, got {}",
                    self.n_clients, self.m
                ),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be at least 1"));
        }
        unit_interval("epsilon", self.epsilon, false)?;
        unit_interval("gamma", self.gamma, true)?;
        positive("eta", self.eta)?;
        positive("eta_c", self.resolved_eta_c())?;
        positive("eta_v", self.eta_v)?;
        if let EtaGMode::Fixed(v) = self.eta_g {
            positive("eta_g", v)?;
        }
        if !self.alpha_p.is_finite() || self.alpha_p < 0.0 {
            return Err(Error::config(
                "alpha_p",
                format!("must be >= 0, got {}", self.alpha_p),
            ));
        }
        if !self.alpha_r.is_finite() || self.alpha_r < 0.0 {
            return Err(Error::config(
                "alpha_r",
                format!("must be >= 0, got {}", self.alpha_r),
            ));
        }
        if self.algorithm != AlgorithmKind::Apfl
            && self.pseudo_label_mode == PseudoLabelMode::ClosedForm
            && self.alpha_r == 0.0
            && self.epsilon > 0.0
        {
            return Err(Error::config(
                "alpha_r",
                "closed-form pseudo-labels need alpha_r > 0; use pseudo_label_mode = \"gd\"",
            ));
        }
        if !self.full_batch && self.s_l + self.s_u == 0 {
            return Err(Error::config(
                "s_l",
                "need s_l + s_u >= 1 unless full_batch",
            ));
        }
        let (lo, hi) = self.epoch_range;
        if lo == 0 || hi < lo {
            return Err(Error::config(
                "epoch_range",
                format!("need 1 <= lo <= hi, got [{lo}, {hi}]"),
            ));
        }
        if self.shards_per_client == 0 {
            return Err(Error::config("shards_per_client", "must be at least 1"));
        }
        match &self.beta {
            BetaSetting::Scalar(b) => unit_interval("beta", *b, false)?,
            BetaSetting::PerClient(v) => {
                if v.len() != self.n_clients {
                    return Err(Error::config(
                        "beta",
                        format!("{} values for {} clients", v.len(), self.n_clients),
                    ));
                }
                for &b in v {
                    unit_interval("beta", b, false)?;
                }
            }
        }
        if let Some(l) = self.l_estimate {
            positive("l_estimate", l)?;
        }
        if let Some(lf) = self.l_f_estimate {
            positive("l_f_estimate", lf)?;
        }
        unit_interval("test_frac", self.test_frac, true)?;
        if !self.acc_threshold.is_finite() || self.acc_threshold <= 0.0 || self.acc_threshold > 1.0
        {
            return Err(Error::config(
                "acc_threshold",
                format!("must be in (0, 1], got {}", self.acc_threshold),
            ));
        }
        match self.dataset {
            DatasetKind::MnistSubset => {
                if self.dataset_size == 0 {
                    return Err(Error::config("dataset_size", "must be at least 1"));
                }
            }
            DatasetKind::Blobs => {
                if self.blobs_classes < 2 {
                    return Err(Error::config("blobs_classes", "need at least 2 classes"));
                }
                if self.blobs_dim == 0 {
                    return Err(Error::config("blobs_dim", "must be at least 1"));
                }
                if self.blobs_per_class == 0 {
                    return Err(Error::config("blobs_per_class", "must be at least 1"));
                }
                positive("blobs_spread", self.blobs_spread)?;
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::config(
                "hidden_dims",
                "layer widths must be positive",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn toml_round_trip_preserves_everything() {
        let cfg = ExperimentConfig {
            algorithm: AlgorithmKind::Apsfl,
            dataset: DatasetKind::MnistSubset,
            beta: BetaSetting::PerClient(vec![0.5; 20]),
            eta_g: EtaGMode::Fixed(12.5),
            eta_c: Some(0.011),
            epoch_range: (1, 5),
            data_dir: Some(PathBuf::from("/tmp/mnist")),
            ..ExperimentConfig::default()
        };
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("rounds = 3\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = ExperimentConfig::from_toml_str("rounds = 7\nseed = 99\n").unwrap();
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.n_clients, 20);
        assert_eq!(cfg.algorithm, AlgorithmKind::FedCpsl);
    }

    #[test]
    fn eta_g_accepts_number_or_auto() {
        let auto = ExperimentConfig::from_toml_str("eta_g = \"auto\"\n").unwrap();
        assert_eq!(auto.eta_g, EtaGMode::Auto);
        let fixed = ExperimentConfig::from_toml_str("eta_g = 20.0\n").unwrap();
        assert_eq!(fixed.eta_g, EtaGMode::Fixed(20.0));
        assert!(ExperimentConfig::from_toml_str("eta_g = \"fast\"\n").is_err());
        assert_eq!("auto".parse::<EtaGMode>().unwrap(), EtaGMode::Auto);
        assert_eq!("3.5".parse::<EtaGMode>().unwrap(), EtaGMode::Fixed(3.5));
    }

    #[test]
    fn beta_accepts_scalar_or_vector() {
        let s = ExperimentConfig::from_toml_str("beta = 0.5\n").unwrap();
        assert_eq!(s.beta, BetaSetting::Scalar(0.5));
        let v =
            ExperimentConfig::from_toml_str("n_clients = 2\nm = 1\nbeta = [0.1, 0.9]\n").unwrap();
        assert_eq!(v.beta, BetaSetting::PerClient(vec![0.1, 0.9]));
        v.validate().unwrap();
        assert_eq!(
            "0.2,0.8".parse::<BetaSetting>().unwrap(),
            BetaSetting::PerClient(vec![0.2, 0.8])
        );
    }

    #[test]
    fn beta_length_must_match_clients() {
        let cfg =
            ExperimentConfig::from_toml_str("n_clients = 3\nm = 1\nbeta = [0.1, 0.9]\n").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("beta"), "{err}");
    }

    #[test]
    fn validation_names_offending_keys() {
        let cases: &[(&str, &str)] = &[
            ("m = 0\n", "m"),
            ("n_clients = 2\nm = 3\n", "m"),
            ("gamma = 1.0\n", "gamma"),
            ("epsilon = 1.5\n", "epsilon"),
            ("eta = 0.0\n", "eta"),
            ("eta_v = -1.0\n", "eta_v"),
            ("alpha_r = -0.5\n", "alpha_r"),
            ("epoch_range = [0, 2]\n", "epoch_range"),
            ("epoch_range = [3, 2]\n", "epoch_range"),
            ("shards_per_client = 0\n", "shards_per_client"),
            ("test_frac = 1.0\n", "test_frac"),
            ("acc_threshold = 0.0\n", "acc_threshold"),
            ("blobs_classes = 1\n", "blobs_classes"),
            ("hidden_dims = [32, 0]\n", "hidden_dims"),
            ("s_l = 0\ns_u = 0\n", "s_l"),
            ("l_estimate = 0.0\n", "l_estimate"),
        ];
        for (text, key) in cases {
            let cfg = ExperimentConfig::from_toml_str(text).unwrap();
            let err = cfg.validate().unwrap_err();
            match &err {
                Error::InvalidConfig { key: k, .. } => {
                    assert_eq!(k, key, "wrong key for `{text}`: {err}")
                }
                other => panic!("expected InvalidConfig for `{text}`, got {other}"),
            }
        }
    }

    #[test]
    fn closed_form_requires_regularizer() {
        let cfg = ExperimentConfig::from_toml_str("alpha_r = 0.0\n").unwrap();
        assert!(cfg.validate().is_err());
        // ...unless nothing is unlabeled,
        let cfg = ExperimentConfig::from_toml_str("alpha_r = 0.0\nepsilon = 0.0\n").unwrap();
        cfg.validate().unwrap();
        // ...or the refresh runs in projected-gradient mode.
        let cfg =
            ExperimentConfig::from_toml_str("alpha_r = 0.0\npseudo_label_mode = \"gd\"\n").unwrap();
        cfg.validate().unwrap();
    }

    #[test]
    fn resolved_rates_default_sensibly() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.resolved_eta_c(), 2.0 * cfg.eta);
        assert_eq!(cfg.resolved_l_f(), None);
        let mut cfg = cfg;
        cfg.eta_c = Some(0.5);
        cfg.l_estimate = Some(2.0);
        assert_eq!(cfg.resolved_eta_c(), 0.5);
        assert_eq!(cfg.resolved_l_f(), Some(2.0));
        cfg.l_f_estimate = Some(3.0);
        assert_eq!(cfg.resolved_l_f(), Some(3.0));
    }

    #[test]
    fn global_only_algorithms_pin_beta_to_zero() {
        let mut cfg = ExperimentConfig {
            n_clients: 3,
            beta: BetaSetting::Scalar(0.75),
            algorithm: AlgorithmKind::FedShvrp,
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.resolved_betas().unwrap(), vec![0.0, 0.0, 0.0]);
        cfg.algorithm = AlgorithmKind::Apfl;
        assert_eq!(cfg.resolved_betas().unwrap(), vec![0.75; 3]);
    }

    #[test]
    fn explicit_data_dir_wins() {
        let cfg = ExperimentConfig {
            data_dir: Some(PathBuf::from("/explicit")),
            ..ExperimentConfig::default()
        };
        assert_eq!(cfg.resolved_data_dir(), PathBuf::from("/explicit"));
    }

    #[test]
    fn pseudo_mode_strings() {
        let cfg = ExperimentConfig::from_toml_str("pseudo_label_mode = \"gd\"\n").unwrap();
        assert_eq!(cfg.pseudo_label_mode, PseudoLabelMode::GradStep);
        let cfg = ExperimentConfig::from_toml_str("pseudo_label_mode = \"frozen\"\n").unwrap();
        assert_eq!(cfg.pseudo_label_mode, PseudoLabelMode::Frozen);
        assert!(ExperimentConfig::from_toml_str("pseudo_label_mode = \"magic\"\n").is_err());
    }
}
