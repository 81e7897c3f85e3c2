//! Experiment configuration as flat `key = value` text.
//!
//! Precedence is command-line override > file > built-in default. The
//! canonical text (every key, fixed order) is hashed to identify a run.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::clustering::{ClusterParams, ClusterSchedule, FeatureLayer, UpdateInterval};
use crate::error::{CclError, Result};
use crate::losses::LossHyperparams;
use crate::model::ModelWidths;
use crate::scoring::ScoreKind;

/// Synthetic data generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub dim: usize,
    /// Latent classes `C` of the ID mixture.
    pub components: usize,
    pub train_per_component: usize,
    pub test_per_component: usize,
    pub ood_per_set: usize,
    /// Isotropic standard deviation of each ID component before projecting
    /// onto the unit sphere.
    pub spread: f64,
    /// Rotation of the shifted-OOD means away from the ID means, in radians.
    pub shift_angle: f64,
    /// Covariance multiplier of the scaled-OOD set.
    pub scale_factor: f64,
    /// Noise added to the interpolated-OOD midpoints.
    pub interp_noise: f64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            dim: 16,
            components: 4,
            train_per_component: 100,
            test_per_component: 50,
            ood_per_set: 200,
            spread: 0.1,
            shift_angle: 0.6,
            scale_factor: 3.0,
            interp_noise: 0.05,
        }
    }
}

/// View-generation settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Probability of zeroing each coordinate.
    pub mask_prob: f64,
    pub gain_min: f64,
    pub gain_max: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            noise: 0.1,
            mask_prob: 0.2,
            gain_min: 0.5,
            gain_max: 1.5,
        }
    }
}

/// Every hyperparameter of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DatasetSpec,
    pub augment: AugmentSpec,
    pub widths: ModelWidths,
    pub batch_size: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub update_interval: UpdateInterval,
    pub clusters: usize,
    pub loss: LossHyperparams,
    pub lr: f64,
    pub cosine_lr: bool,
    pub clustering_layer: FeatureLayer,
    pub use_ccl: bool,
    pub use_cil: bool,
    pub score_kind: ScoreKind,
    pub k_top: usize,
    pub score_layer: FeatureLayer,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Record a probe AUROC every this many epochs (0 disables).
    pub probe_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            data: DatasetSpec::default(),
            augment: AugmentSpec::default(),
            widths: ModelWidths::default(),
            batch_size: 32,
            epochs: 400,
            warmup_epochs: 200,
            update_interval: UpdateInterval::Epochs(10),
            clusters: 4,
            loss: LossHyperparams::default(),
            lr: 0.05,
            cosine_lr: true,
            clustering_layer: FeatureLayer::Embedding,
            use_ccl: true,
            use_cil: true,
            score_kind: ScoreKind::Var,
            k_top: 10,
            score_layer: FeatureLayer::Projection,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            probe_every: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| CclError::Config(format!("cannot parse {key} = {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(CclError::Config(format!(
            "cannot parse {key} = {value:?} as a boolean"
        ))),
    }
}

fn parse_widths(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|w| parse(key, w.trim())).collect()
}

fn join(w: &[usize]) -> String {
    w.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "data.dim" => self.data.dim = parse(key, v)?,
            "data.components" => self.data.components = parse(key, v)?,
            "data.train_per_component" => self.data.train_per_component = parse(key, v)?,
            "data.test_per_component" => self.data.test_per_component = parse(key, v)?,
            "data.ood_per_set" => self.data.ood_per_set = parse(key, v)?,
            "data.spread" => self.data.spread = parse(key, v)?,
            "data.shift_angle" => self.data.shift_angle = parse(key, v)?,
            "data.scale_factor" => self.data.scale_factor = parse(key, v)?,
            "data.interp_noise" => self.data.interp_noise = parse(key, v)?,
            "augment.noise" => self.augment.noise = parse(key, v)?,
            "augment.mask_prob" => self.augment.mask_prob = parse(key, v)?,
            "augment.gain_min" => self.augment.gain_min = parse(key, v)?,
            "augment.gain_max" => self.augment.gain_max = parse(key, v)?,
            "model.encoder" => self.widths.encoder = parse_widths(key, v)?,
            "model.projection" => self.widths.projection = parse_widths(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "update_interval" => self.update_interval = v.parse()?,
            "clusters" => self.clusters = parse(key, v)?,
            "tau" => self.loss.tau = parse(key, v)?,
            "alpha" => self.loss.alpha = parse(key, v)?,
            "lambda" => self.loss.lambda_weight = parse(key, v)?,
            "phi_floor" => self.loss.phi_floor = parse(key, v)?,
            "ccl_include_positive" => self.loss.denominator_includes_positive = parse_bool(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "cosine_lr" => self.cosine_lr = parse_bool(key, v)?,
            "clustering_layer" => self.clustering_layer = v.parse()?,
            "use_ccl" => self.use_ccl = parse_bool(key, v)?,
            "use_cil" => self.use_cil = parse_bool(key, v)?,
            "score_kind" => self.score_kind = v.parse()?,
            "k_top" => self.k_top = parse(key, v)?,
            "score_layer" => self.score_layer = v.parse()?,
            "kmeans.max_iters" => self.kmeans_max_iters = parse(key, v)?,
            "kmeans.tol" => self.kmeans_tol = parse(key, v)?,
            "probe_every" => self.probe_every = parse(key, v)?,
            other => return Err(CclError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| CclError::Config(format!("override {o:?} is not key=value")))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Every key with its canonical text value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("data.dim", self.data.dim.to_string()),
            ("data.components", self.data.components.to_string()),
            (
                "data.train_per_component",
                self.data.train_per_component.to_string(),
            ),
            (
                "data.test_per_component",
                self.data.test_per_component.to_string(),
            ),
            ("data.ood_per_set", self.data.ood_per_set.to_string()),
            ("data.spread", self.data.spread.to_string()),
            ("data.shift_angle", self.data.shift_angle.to_string()),
            ("data.scale_factor", self.data.scale_factor.to_string()),
            ("data.interp_noise", self.data.interp_noise.to_string()),
            ("augment.noise", self.augment.noise.to_string()),
            ("augment.mask_prob", self.augment.mask_prob.to_string()),
            ("augment.gain_min", self.augment.gain_min.to_string()),
            ("augment.gain_max", self.augment.gain_max.to_string()),
            ("model.encoder", join(&self.widths.encoder)),
            ("model.projection", join(&self.widths.projection)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("update_interval", self.update_interval.to_string()),
            ("clusters", self.clusters.to_string()),
            ("tau", self.loss.tau.to_string()),
            ("alpha", self.loss.alpha.to_string()),
            ("lambda", self.loss.lambda_weight.to_string()),
            ("phi_floor", self.loss.phi_floor.to_string()),
            (
                "ccl_include_positive",
                self.loss.denominator_includes_positive.to_string(),
            ),
            ("lr", self.lr.to_string()),
            ("cosine_lr", self.cosine_lr.to_string()),
            ("clustering_layer", self.clustering_layer.to_string()),
            ("use_ccl", self.use_ccl.to_string()),
            ("use_cil", self.use_cil.to_string()),
            ("score_kind", self.score_kind.to_string()),
            ("k_top", self.k_top.to_string()),
            ("score_layer", self.score_layer.to_string()),
            ("kmeans.max_iters", self.kmeans_max_iters.to_string()),
            ("kmeans.tol", self.kmeans_tol.to_string()),
            ("probe_every", self.probe_every.to_string()),
        ]
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Defaults overridden by the lines of `text`. Blank lines and `#`
    /// comments are ignored.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CclError::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::from_text(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// First 12 hex digits of [`TrainConfig::hash`], for tables and logs.
    pub fn short_hash(&self) -> String {
        self.hash()[..12].to_string()
    }

    pub fn schedule(&self) -> Result<ClusterSchedule> {
        ClusterSchedule::new(self.warmup_epochs, self.update_interval)
    }

    pub fn cluster_params(&self) -> ClusterParams {
        ClusterParams {
            clusters: self.clusters,
            alpha: self.loss.alpha,
            phi_floor: self.loss.phi_floor,
            max_iters: self.kmeans_max_iters,
            tol: self.kmeans_tol,
        }
    }

    /// Whether any cluster-aware term is trained.
    pub fn clustering_enabled(&self) -> bool {
        self.use_ccl || self.use_cil
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CclError::Config(m));
        self.loss.validate()?;
        self.widths.validate()?;
        self.schedule()?;
        if self.widths.input_dim() != self.data.dim {
            return fail(format!(
                "encoder input width {} differs from data.dim {}",
                self.widths.input_dim(),
                self.data.dim
            ));
        }
        if self.warmup_epochs > self.epochs {
            return fail("warmup_epochs must not exceed epochs".into());
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.clusters < 2 {
            return fail("clusters must be at least 2".into());
        }
        let train = self.data.components * self.data.train_per_component;
        if self.batch_size > train {
            return fail(format!(
                "batch_size {} exceeds training set size {train}",
                self.batch_size
            ));
        }
        if self.clustering_enabled() && self.clusters > train {
            return fail(format!(
                "clusters {} exceeds training set size {train}",
                self.clusters
            ));
        }
        if self.k_top < 2 || self.k_top > train {
            return fail(format!("k_top must lie in 2..={train}, got {}", self.k_top));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.kmeans_max_iters == 0 || !(self.kmeans_tol >= 0.0) {
            return fail("kmeans settings must be positive".into());
        }
        let a = &self.augment;
        if !(a.noise >= 0.0) || !(0.0..1.0).contains(&a.mask_prob) {
            return fail("augment.noise must be >= 0 and augment.mask_prob in [0, 1)".into());
        }
        if !(a.gain_min > 0.0 && a.gain_min <= a.gain_max && a.gain_max.is_finite()) {
            return fail("augment gains must satisfy 0 < gain_min <= gain_max".into());
        }
        super::data::validate_spec(&self.data)
    }

    /// Learning rate used during `epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        if self.cosine_lr {
            let t = epoch as f64 / self.epochs as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.lr
        }
    }
}
