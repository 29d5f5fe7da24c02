use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attacks::AttackKind;
use crate::cvae::{BetaSchedule, CvaeConfig};
use crate::data::{BackdoorPattern, InverseLawParams};
use crate::error::{Error, Result};
use crate::geomed::GeoMedOptions;
use crate::nn::{LayerMask, ModelSpec, Shape, TrainParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    Dirichlet,
    InverseLaw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    FlCleaner,
    MeanThreshold,
    GeomedAgg,
    None,
}

impl DefenseKind {
    pub fn uses_cvae(self) -> bool {
        matches!(self, DefenseKind::FlCleaner | DefenseKind::MeanThreshold)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackName {
    None,
    SignFlip,
    AdditiveNoise,
    SameValue,
    Scaling,
    Dba,
    Neurotoxin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mlp,
    Cnn,
}

/// Every knob of a run. The file format is flat TOML; any key left out takes
/// the default shown in [`ExperimentConfig::default`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    /// `mnist` or `fashion_mnist`; both are read from IDX files in `data_dir`.
    pub dataset: String,
    pub data_dir: PathBuf,
    /// Leading training samples kept (0 keeps all).
    pub train_limit: usize,
    /// Evaluation samples kept after removing the trigger set (0 keeps all).
    pub test_limit: usize,

    pub partition: PartitionScheme,
    pub dirichlet_alpha: f64,
    pub inverse_alpha: f64,
    pub inverse_gamma: usize,
    pub inverse_r: f64,

    pub num_clients: usize,
    pub participation: f64,
    pub attacker_fraction: f64,
    pub rounds: usize,

    pub model: ModelKind,
    pub hidden: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,

    pub attack: AttackName,
    pub xi: f64,
    pub sigma: f64,
    pub noise_fraction: f64,
    pub same_value: f64,
    pub scale: f64,
    pub k_percent: f64,
    pub poison_rate: f64,
    pub trigger_row: usize,
    pub trigger_col: usize,
    pub trigger_pattern_size: usize,
    pub target_class: usize,

    pub defense: DefenseKind,
    pub lambda: f64,
    pub trigger_size: usize,
    /// Parametric layer positions used for activation maps; empty means all.
    pub layers: Vec<usize>,
    pub geomed_tol: f64,
    pub geomed_max_iters: usize,

    pub warmup_epochs: usize,
    pub harvest_epochs: usize,
    pub cvae_latent: usize,
    pub cvae_hidden: usize,
    pub cvae_epochs: usize,
    pub cvae_lr: f64,
    pub cvae_batch_size: usize,
    pub beta_initial: f64,
    pub beta_increment: f64,
    pub beta_step_epoch: usize,

    pub seed_data: u64,
    pub seed_init: u64,
    pub seed_selection: u64,
    pub seed_attack: u64,

    pub plots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            dataset: "mnist".into(),
            data_dir: "data/mnist".into(),
            train_limit: 10_000,
            test_limit: 2_000,
            partition: PartitionScheme::Dirichlet,
            dirichlet_alpha: 1.0,
            inverse_alpha: 2000.0,
            inverse_gamma: 20,
            inverse_r: 2.0,
            num_clients: 20,
            participation: 0.5,
            attacker_fraction: 0.3,
            rounds: 15,
            model: ModelKind::Mlp,
            hidden: 128,
            local_epochs: 2,
            lr: 0.05,
            batch_size: 32,
            attack: AttackName::None,
            xi: 1.0,
            sigma: 0.1,
            noise_fraction: 1.0,
            same_value: 0.01,
            scale: 10.0,
            k_percent: 95.0,
            poison_rate: 0.3,
            trigger_row: 0,
            trigger_col: 0,
            trigger_pattern_size: 10,
            target_class: 0,
            defense: DefenseKind::FlCleaner,
            lambda: 0.3,
            trigger_size: 250,
            layers: Vec::new(),
            geomed_tol: 1e-6,
            geomed_max_iters: 200,
            warmup_epochs: 10,
            harvest_epochs: 10,
            cvae_latent: 16,
            cvae_hidden: 100,
            cvae_epochs: 20,
            cvae_lr: 1e-2,
            cvae_batch_size: 64,
            beta_initial: 0.0,
            beta_increment: 0.5,
            beta_step_epoch: 10,
            seed_data: 1,
            seed_init: 2,
            seed_selection: 3,
            seed_attack: 4,
            plots: true,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; a relative `data_dir` is resolved against the
    /// file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.data_dir.is_relative() {
            if let Some(dir) = path.parent() {
                let candidate = dir.join(&cfg.data_dir);
                if candidate.exists() {
                    cfg.data_dir = candidate;
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !matches!(self.dataset.as_str(), "mnist" | "fashion_mnist") {
            return fail(format!("unknown dataset {:?}", self.dataset));
        }
        if self.num_clients == 0 {
            return fail("num_clients must be positive".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return fail(format!("participation {} is not in (0, 1]", self.participation));
        }
        if !(self.attacker_fraction >= 0.0 && self.attacker_fraction < 0.5) {
            return fail(format!("attacker_fraction {} is not in [0, 0.5)", self.attacker_fraction));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return fail(format!("lambda {} is not in [0, 1]", self.lambda));
        }
        if self.rounds == 0 || self.trigger_size == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return fail("rounds, trigger_size, batch_size and lr must be positive".into());
        }
        if self.defense.uses_cvae() && (self.harvest_epochs == 0 || self.cvae_epochs == 0) {
            return fail("the CVAE needs at least one harvest epoch and one training epoch".into());
        }
        if self.defense != DefenseKind::None && self.selected_per_round() < 2 {
            return fail("filtering needs at least two clients per round".into());
        }
        if !(self.dirichlet_alpha > 0.0) {
            return fail("dirichlet_alpha must be positive".into());
        }
        if let Some(kind) = self.attack_kind(0) {
            kind.validate()?;
        }
        self.pattern().validate(self.input_shape()).map_err(|e| Error::Config(e.to_string()))?;
        if self.target_class >= 10 {
            return fail(format!("target_class {} out of range", self.target_class));
        }
        self.model_spec().layout()?;
        self.layer_mask()
            .validate(&self.model_spec())
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        Shape::new(1, 28, 28)
    }

    pub fn model_spec(&self) -> ModelSpec {
        match self.model {
            ModelKind::Mlp => ModelSpec::mlp(self.input_shape(), self.hidden, 10, self.seed_init),
            ModelKind::Cnn => ModelSpec::small_cnn(self.input_shape(), 10, self.seed_init),
        }
    }

    pub fn layer_mask(&self) -> LayerMask {
        if self.layers.is_empty() {
            LayerMask::All
        } else {
            LayerMask::Layers(self.layers.clone())
        }
    }

    pub fn geomed_options(&self) -> GeoMedOptions {
        GeoMedOptions {
            tol: self.geomed_tol,
            max_iters: self.geomed_max_iters,
        }
    }

    pub fn pattern(&self) -> BackdoorPattern {
        BackdoorPattern {
            row: self.trigger_row,
            col: self.trigger_col,
            size: self.trigger_pattern_size,
            target_class: self.target_class,
            part_index: None,
        }
    }

    pub fn inverse_law(&self) -> InverseLawParams {
        InverseLawParams {
            alpha: self.inverse_alpha,
            gamma: self.inverse_gamma,
            r: self.inverse_r,
        }
    }

    pub fn train_params(&self, seed: u64) -> TrainParams {
        TrainParams {
            epochs: self.local_epochs,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }

    pub fn cvae_config(&self, seed: u64) -> CvaeConfig {
        CvaeConfig {
            latent_dim: self.cvae_latent,
            hidden: self.cvae_hidden,
            epochs: self.cvae_epochs,
            lr: self.cvae_lr,
            batch_size: self.cvae_batch_size,
            beta: BetaSchedule {
                initial: self.beta_initial,
                increment: self.beta_increment,
                step_epoch: self.beta_step_epoch,
            },
            seed,
        }
    }

    pub fn num_attackers(&self) -> usize {
        if self.attack == AttackName::None {
            0
        } else {
            (self.attacker_fraction * self.num_clients as f64).round() as usize
        }
    }

    pub fn selected_per_round(&self) -> usize {
        ((self.participation * self.num_clients as f64).ceil() as usize).clamp(1, self.num_clients)
    }

    /// Attack bound to the attacker with position `attacker_index` among all
    /// attackers (ordered by client id).
    pub fn attack_kind(&self, attacker_index: usize) -> Option<AttackKind> {
        let pattern = self.pattern();
        Some(match self.attack {
            AttackName::None => return None,
            AttackName::SignFlip => AttackKind::SignFlip { xi: self.xi },
            AttackName::AdditiveNoise => AttackKind::AdditiveNoise {
                sigma: self.sigma,
                fraction: self.noise_fraction,
            },
            AttackName::SameValue => AttackKind::SameValue { c: self.same_value },
            AttackName::Scaling => AttackKind::Scaling { a: self.scale },
            AttackName::Dba => AttackKind::Dba {
                pattern,
                part_index: (attacker_index % 4) as u8,
                poison_rate: self.poison_rate,
            },
            AttackName::Neurotoxin => AttackKind::Neurotoxin {
                pattern,
                k_percent: self.k_percent,
                poison_rate: self.poison_rate,
            },
        })
    }
}
