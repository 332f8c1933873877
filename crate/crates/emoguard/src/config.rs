use std::fs;
use std::path::Path;

use emoguard_core::attack::ProbeConfig;
use emoguard_core::data::{GenConfig, Task};
use emoguard_core::model::{AdversaryTarget, GrlPlacement, LayerSpec, Modality, Mode, ModelSpec, LAMBDA_GRID};
use emoguard_core::train::{Grid, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Cross-validation folds used by every scenario.
pub const FOLDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Q1Leakage,
    Q2Privacy,
    Q3Utility,
    Q4LambdaSweep,
    Q5PerGender,
    Q6Placement,
    Q7Membership,
    Q7Multi,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::Q1Leakage,
        Scenario::Q2Privacy,
        Scenario::Q3Utility,
        Scenario::Q4LambdaSweep,
        Scenario::Q5PerGender,
        Scenario::Q6Placement,
        Scenario::Q7Membership,
        Scenario::Q7Multi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Q1Leakage => "q1-leakage",
            Scenario::Q2Privacy => "q2-privacy",
            Scenario::Q3Utility => "q3-utility",
            Scenario::Q4LambdaSweep => "q4-lambda-sweep",
            Scenario::Q5PerGender => "q5-per-gender",
            Scenario::Q6Placement => "q6-placement",
            Scenario::Q7Membership => "q7-membership",
            Scenario::Q7Multi => "q7-multi",
        }
    }

    /// Adversaries of the Priv models in this scenario.
    pub fn adversary_targets(self) -> &'static [AdversaryTarget] {
        match self {
            Scenario::Q7Membership => &[AdversaryTarget::Speaker],
            Scenario::Q7Multi => &[AdversaryTarget::Gender, AdversaryTarget::Speaker],
            _ => &[AdversaryTarget::Gender],
        }
    }

    pub fn needs_membership(self) -> bool {
        matches!(self, Scenario::Q7Membership | Scenario::Q7Multi)
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MembershipConfig {
    /// Share of s4/s5 speakers whose samples are partly moved into training.
    pub select_fraction: f64,
    /// Share of each selected speaker's samples moved.
    pub move_fraction: f64,
}

impl Default for MembershipConfig {
    fn default() -> Self {
        Self {
            select_fraction: 0.5,
            move_fraction: 0.5,
        }
    }
}

/// Which comparisons share one Benjamini-Hochberg correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BhFamily {
    /// All comparisons of one task, like one pair of Gen/Priv tables.
    PerTask,
    /// One family per task and metric.
    PerMetric,
    /// Every comparison in the scenario.
    Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub generator: GenConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub membership: MembershipConfig,
    /// Fixed architecture, used when `grid` is absent.
    pub layers: LayerSpec,
    /// Searched on the first fold rotation when present.
    pub grid: Option<Grid>,
    pub modalities: Vec<Modality>,
    pub tasks: Vec<Task>,
    /// λ of every Priv adversary. `None` searches it with `grid`.
    pub lambda: Option<f64>,
    /// λ values of the sweep scenario.
    pub lambda_sweep: Vec<f64>,
    pub alpha: f64,
    pub bh_family: BhFamily,
    pub output_dir: Option<String>,
    pub master_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::Q3Utility,
            generator: GenConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            membership: MembershipConfig::default(),
            layers: LayerSpec::default(),
            grid: None,
            modalities: vec![Modality::Acoustic, Modality::Lexical, Modality::Multimodal],
            tasks: vec![Task::Activation, Task::Valence],
            lambda: Some(0.5),
            lambda_sweep: LAMBDA_GRID.to_vec(),
            alpha: 0.05,
            bh_family: BhFamily::PerTask,
            output_dir: None,
            master_seed: 0,
        }
    }
}

fn on_grid(l: f64) -> bool {
    LAMBDA_GRID.contains(&l)
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// A scenario preset with every other setting at its default.
    pub fn preset(scenario: Scenario) -> Self {
        let mut cfg = Self {
            scenario,
            ..Self::default()
        };
        if scenario == Scenario::Q6Placement {
            cfg.modalities = vec![Modality::Multimodal];
        }
        if scenario.needs_membership() {
            cfg.generator.speaker_variance = 2.0;
        }
        cfg
    }

    /// Applies `--seed`: it drives both the corpus and every derived stream.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self.generator.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.modalities.is_empty() || self.tasks.is_empty() {
            return Err(Error::Config("modalities and tasks must be non-empty".into()));
        }
        if let Some(l) = self.lambda {
            if !on_grid(l) {
                return Err(Error::Config(format!("lambda {l} is not in {LAMBDA_GRID:?}")));
            }
        } else if self.grid.is_none() {
            return Err(Error::Config("lambda may only be left open when a grid is given".into()));
        }
        if let Some(l) = self.lambda_sweep.iter().find(|&&l| !on_grid(l)) {
            return Err(Error::Config(format!("sweep value {l} is not in {LAMBDA_GRID:?}")));
        }
        if self.scenario == Scenario::Q4LambdaSweep && self.lambda_sweep.is_empty() {
            return Err(Error::Config("the lambda sweep is empty".into()));
        }
        if let Some(g) = &self.grid {
            if let Some(l) = g.lambdas.iter().find(|&&l| !on_grid(l)) {
                return Err(Error::Config(format!("grid lambda {l} is not in {LAMBDA_GRID:?}")));
            }
        }
        if self.scenario == Scenario::Q6Placement && self.modalities != [Modality::Multimodal] {
            return Err(Error::Config("q6-placement compares GRL placements and needs modalities = [multimodal]".into()));
        }
        if self.generator.n_speakers < FOLDS {
            return Err(Error::Config(format!("{} speakers cannot fill {FOLDS} folds", self.generator.n_speakers)));
        }
        for (name, v) in [
            ("select_fraction", self.membership.select_fraction),
            ("move_fraction", self.membership.move_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("membership.{name} = {v} must lie in (0, 1)")));
            }
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        self.layers.validate()?;
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_value(self).and_then(|v| serde_json::to_string(&v)).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// A spec for one modality, task and mode under this scenario.
    pub fn spec(&self, modality: Modality, task: Task, mode: Mode, lambda: f64, placement: GrlPlacement) -> ModelSpec {
        let mut spec = match mode {
            Mode::Gen => ModelSpec::gen(modality, task),
            Mode::Priv => {
                let advs: Vec<(AdversaryTarget, f64)> = self.scenario.adversary_targets().iter().map(|&t| (t, lambda)).collect();
                ModelSpec::private(modality, task, &advs)
            }
        };
        spec.layers = self.layers;
        spec.grl_placement = placement;
        spec
    }
}
