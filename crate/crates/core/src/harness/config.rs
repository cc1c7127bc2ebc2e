//! Flat `key = value` experiment configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fplg::ThresholdPolicy;
use crate::glpc::Strategy;
use crate::model::NUM_VIEWS;
use crate::objectives::{BalanceWeights, DEFAULT_BALANCE};
use crate::synthdata::{Augmenter, DatasetSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Shift,
    Imbalance,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Shift => "shift",
            Preset::Imbalance => "imbalance",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "shift" => Ok(Preset::Shift),
            "imbalance" => Ok(Preset::Imbalance),
            _ => Err(Error::Config(format!("unknown preset: {s}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SimMode {
    /// Score the target stream once with a fixed model and replay it per cell.
    Replay,
    /// Train a fresh second stage per cell.
    Train,
}

impl SimMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SimMode::Replay => "replay",
            SimMode::Train => "train",
        }
    }
}

impl FromStr for SimMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "replay" => Ok(SimMode::Replay),
            "train" => Ok(SimMode::Train),
            _ => Err(Error::Config(format!("unknown sim_mode: {s}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub means_seed: u64,
    pub source_count: Option<usize>,
    pub target_count: Option<usize>,
    pub shift_angle: Option<f64>,
    pub shift_scale: Option<f64>,
    pub source_noise: Option<f64>,
    pub target_noise: Option<f64>,
    pub source_data: Option<PathBuf>,
    pub target_data: Option<PathBuf>,
    pub d_f: usize,
    pub hidden: usize,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub lr_stage1: f64,
    pub lr_stage2_fg: f64,
    pub lr_stage2_d: f64,
    pub lr_decay_after: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub theta: f64,
    pub policy: ThresholdPolicy,
    pub beta: [f64; NUM_VIEWS],
    pub eta: [f64; NUM_VIEWS],
    pub adversarial: bool,
    pub pseudo_labels: bool,
    pub strategies: Vec<Strategy>,
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub dropout_prob: f64,
    pub sim_mode: SimMode,
    pub sim_thetas: Vec<f64>,
    pub sim_policies: Vec<ThresholdPolicy>,
    pub sim_epochs: usize,
    /// Source epochs before the simulated stream is scored.
    pub sim_stage1_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = Augmenter::default();
        Self {
            preset: Preset::Shift,
            means_seed: 0,
            source_count: None,
            target_count: None,
            shift_angle: None,
            shift_scale: None,
            source_noise: None,
            target_noise: None,
            source_data: None,
            target_data: None,
            d_f: 8,
            hidden: 16,
            stage1_epochs: 15,
            stage2_epochs: 20,
            lr_stage1: 0.002,
            lr_stage2_fg: 0.0002,
            lr_stage2_d: 0.001,
            lr_decay_after: 20,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 32,
            theta: 0.95,
            policy: ThresholdPolicy::ImprovedDynamic,
            beta: DEFAULT_BALANCE,
            eta: DEFAULT_BALANCE,
            adversarial: true,
            pseudo_labels: true,
            strategies: Strategy::ALL.to_vec(),
            weak_sigma: aug.weak_sigma,
            strong_sigma: aug.strong_sigma,
            dropout_prob: aug.dropout_prob,
            sim_mode: SimMode::Replay,
            sim_thetas: vec![0.99, 0.95, 0.90, 0.85, 0.80],
            sim_policies: ThresholdPolicy::ALL.to_vec(),
            sim_epochs: 5,
            sim_stage1_epochs: 1,
            seed: 0,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true/false, got '{value}'"
        ))),
    }
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

fn parse_weights(key: &str, value: &str) -> Result<[f64; NUM_VIEWS]> {
    let v: Vec<f64> = parse_list(key, value)?;
    v.try_into().map_err(|_| {
        Error::Config(format!(
            "{key}: expected {NUM_VIEWS} comma-separated values"
        ))
    })
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                message: format!("expected 'key = value', got '{line}'"),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::Parse {
                    line: idx + 1,
                    message: e.to_string(),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "preset" => self.preset = value.parse()?,
            "means_seed" => self.means_seed = parse_num(key, value)?,
            "source_count" => self.source_count = Some(parse_num(key, value)?),
            "target_count" => self.target_count = Some(parse_num(key, value)?),
            "shift_angle" => self.shift_angle = Some(parse_num(key, value)?),
            "shift_scale" => self.shift_scale = Some(parse_num(key, value)?),
            "source_noise" => self.source_noise = Some(parse_num(key, value)?),
            "target_noise" => self.target_noise = Some(parse_num(key, value)?),
            "source_data" => self.source_data = opt_path(value),
            "target_data" => self.target_data = opt_path(value),
            "d_f" => self.d_f = parse_num(key, value)?,
            "hidden" => self.hidden = parse_num(key, value)?,
            "stage1_epochs" => self.stage1_epochs = parse_num(key, value)?,
            "stage2_epochs" => self.stage2_epochs = parse_num(key, value)?,
            "lr_stage1" => self.lr_stage1 = parse_num(key, value)?,
            "lr_stage2_fg" => self.lr_stage2_fg = parse_num(key, value)?,
            "lr_stage2_d" => self.lr_stage2_d = parse_num(key, value)?,
            "lr_decay_after" => self.lr_decay_after = parse_num(key, value)?,
            "momentum" => self.momentum = parse_num(key, value)?,
            "weight_decay" => self.weight_decay = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "theta" => self.theta = parse_num(key, value)?,
            "policy" => self.policy = value.parse()?,
            "beta" => self.beta = parse_weights(key, value)?,
            "eta" => self.eta = parse_weights(key, value)?,
            "adversarial" => self.adversarial = parse_bool(key, value)?,
            "pseudo_labels" => self.pseudo_labels = parse_bool(key, value)?,
            "strategies" => self.strategies = parse_list(key, value)?,
            "weak_sigma" => self.weak_sigma = parse_num(key, value)?,
            "strong_sigma" => self.strong_sigma = parse_num(key, value)?,
            "dropout_prob" => self.dropout_prob = parse_num(key, value)?,
            "sim_mode" => self.sim_mode = value.parse()?,
            "sim_thetas" => self.sim_thetas = parse_list(key, value)?,
            "sim_policies" => self.sim_policies = parse_list(key, value)?,
            "sim_epochs" => self.sim_epochs = parse_num(key, value)?,
            "sim_stage1_epochs" => self.sim_stage1_epochs = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key: {key}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_f == 0 || self.hidden == 0 {
            return bad("d_f and hidden must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.theta > 0.0 && self.theta <= 1.0) {
            return bad("theta must lie in (0, 1]");
        }
        if self.sim_thetas.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("sim_thetas must lie in (0, 1]");
        }
        if self.strategies.is_empty() {
            return bad("at least one strategy is required");
        }
        for lr in [self.lr_stage1, self.lr_stage2_fg, self.lr_stage2_d] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad("learning rates must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.momentum)
            || self.weight_decay.is_nan()
            || self.weight_decay < 0.0
        {
            return bad("momentum must lie in [0, 1) and weight_decay must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.dropout_prob)
            || !(self.weak_sigma >= 0.0 && self.strong_sigma >= 0.0)
        {
            return bad("augmentation parameters out of range");
        }
        if self.source_data.is_some() != self.target_data.is_some() {
            return bad("source_data and target_data must be given together");
        }
        self.balance().validate()
    }

    pub fn balance(&self) -> BalanceWeights {
        BalanceWeights {
            beta: self.beta,
            eta: self.eta,
        }
    }

    pub fn augmenter(&self) -> Augmenter {
        Augmenter {
            weak_sigma: self.weak_sigma,
            strong_sigma: self.strong_sigma,
            dropout_prob: self.dropout_prob,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let mut spec = match self.preset {
            Preset::Shift => DatasetSpec::default_shift(self.means_seed),
            Preset::Imbalance => DatasetSpec::imbalanced(self.means_seed),
        };
        if let Some(n) = self.source_count {
            spec.source_count = n;
        }
        if let Some(n) = self.target_count {
            spec.target_count = n;
        }
        if let Some(a) = self.shift_angle {
            spec.shift.angle = a;
        }
        if let Some(k) = self.shift_scale {
            spec.shift.offset.iter_mut().for_each(|o| *o *= k);
        }
        if let Some(s) = self.source_noise {
            spec.source_noise = s;
        }
        if let Some(s) = self.target_noise {
            spec.target_noise = s;
        }
        spec
    }

    /// Canonical text form: every key, fixed order. Parsing it back yields
    /// an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default()
        };
        let count = |c: Option<usize>| c.map(|c| c.to_string());
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("preset", self.preset.as_str().into());
        put("means_seed", self.means_seed.to_string());
        if let Some(n) = count(self.source_count) {
            put("source_count", n);
        }
        if let Some(n) = count(self.target_count) {
            put("target_count", n);
        }
        for (k, v) in [
            ("shift_angle", self.shift_angle),
            ("shift_scale", self.shift_scale),
            ("source_noise", self.source_noise),
            ("target_noise", self.target_noise),
        ] {
            if let Some(v) = v {
                put(k, v.to_string());
            }
        }
        put("source_data", path(&self.source_data));
        put("target_data", path(&self.target_data));
        put("d_f", self.d_f.to_string());
        put("hidden", self.hidden.to_string());
        put("stage1_epochs", self.stage1_epochs.to_string());
        put("stage2_epochs", self.stage2_epochs.to_string());
        put("lr_stage1", self.lr_stage1.to_string());
        put("lr_stage2_fg", self.lr_stage2_fg.to_string());
        put("lr_stage2_d", self.lr_stage2_d.to_string());
        put("lr_decay_after", self.lr_decay_after.to_string());
        put("momentum", self.momentum.to_string());
        put("weight_decay", self.weight_decay.to_string());
        put("batch_size", self.batch_size.to_string());
        put("theta", self.theta.to_string());
        put("policy", self.policy.to_string());
        put("beta", join(&self.beta));
        put("eta", join(&self.eta));
        put("adversarial", self.adversarial.to_string());
        put("pseudo_labels", self.pseudo_labels.to_string());
        put("strategies", join(&self.strategies));
        put("weak_sigma", self.weak_sigma.to_string());
        put("strong_sigma", self.strong_sigma.to_string());
        put("dropout_prob", self.dropout_prob.to_string());
        put("sim_mode", self.sim_mode.as_str().into());
        put("sim_thetas", join(&self.sim_thetas));
        put("sim_policies", join(&self.sim_policies));
        put("sim_epochs", self.sim_epochs.to_string());
        put("sim_stage1_epochs", self.sim_stage1_epochs.to_string());
        put("seed", self.seed.to_string());
        out
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}
