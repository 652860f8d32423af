//! TOML experiment files.
//!
//! One file describes a whole experiment: the domain pair, the source
//! corruption, optional target corruption, training hyperparameters and the
//! optional sweep and ablation batteries.
//!
//! ```toml
//! [domain]
//! num_classes = 3
//! feature_dim = 2
//! samples_per_class = 200
//!
//! [noise]
//! p_noise = 0.4
//! kind = "mixed"
//!
//! [train]
//! max_epochs = 40
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datagen::{DomainSpec, NoiseKind, NoiseSpec};
use crate::error::{Error, Result};
use crate::eval::Method;
use crate::rng::derive_seed;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub levels: Vec<f64>,
    #[serde(default = "default_sweep_methods")]
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

fn default_sweep_methods() -> Vec<Method> {
    vec![Method::Full, Method::NoCorrection]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationSection {
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Experiment {
    pub domain: DomainSpec,
    pub noise: NoiseSpec,
    /// Corruption of the target domain. Absent means clean target data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_noise: Option<NoiseSpec>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSection>,
}

impl Experiment {
    pub fn from_toml(text: &str) -> Result<Experiment> {
        let exp: Experiment = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        exp.validate()?;
        Ok(exp)
    }

    pub fn load(path: &Path) -> Result<Experiment> {
        let text = std::fs::read_to_string(path)?;
        Experiment::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The fully resolved experiment, every default written out.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment serializes to TOML")
    }

    /// Checks every section; failures become config errors naming the section.
    pub fn validate(&self) -> Result<()> {
        let section = |name: &str, r: Result<()>| r.map_err(|e| Error::Config(format!("[{name}] {e}")));
        section("domain", self.domain.validate())?;
        section("noise", self.noise.validate())?;
        if let Some(t) = &self.target_noise {
            section("target_noise", t.validate())?;
        }
        section("train", self.train.validate())?;
        if let Some(s) = &self.sweep {
            if s.levels.is_empty() || s.seeds.is_empty() || s.methods.is_empty() {
                return Err(Error::Config("[sweep] levels, methods and seeds must be non-empty".into()));
            }
            if let Some(l) = s.levels.iter().find(|l| !(0.0..=2.0).contains(*l)) {
                return Err(Error::Config(format!("[sweep] level {l} outside [0, 2]")));
            }
        }
        if let Some(a) = &self.ablation {
            if a.seeds.is_empty() {
                return Err(Error::Config("[ablation] seeds must be non-empty".into()));
            }
        }
        Ok(())
    }

    /// Re-seeds data generation, corruption and training from one number.
    pub fn with_seed(&self, seed: u64) -> Experiment {
        let mut e = self.clone();
        e.domain.seed = derive_seed(seed, &[1]);
        e.noise.seed = derive_seed(seed, &[2]);
        if let Some(t) = &mut e.target_noise {
            t.seed = derive_seed(seed, &[3]);
        }
        e.train.seed = derive_seed(seed, &[4]);
        e
    }

    /// The reference task: three classes in the plane, the target rotated by
    /// a sixth of pi, 40% mixed source corruption. Matches
    /// `configs/reference.toml`.
    pub fn reference() -> Experiment {
        Experiment {
            domain: DomainSpec {
                num_classes: 3,
                feature_dim: 2,
                samples_per_class: 200,
                class_center_scale: 3.0,
                class_spread: 1.0,
                shift_rotation: std::f64::consts::FRAC_PI_6,
                shift_translation: vec![],
                seed: 20,
            },
            noise: NoiseSpec {
                p_noise: 0.4,
                kind: NoiseKind::Mixed,
                feature_noise_sigma: 2.0,
                feature_mask_fraction: 0.0,
                seed: 21,
            },
            target_noise: None,
            train: TrainConfig {
                max_epochs: 30,
                warmup_epochs: 10,
                lr: 0.02,
                separation_ratio: 0.3,
                seed: 22,
                ..TrainConfig::default()
            },
            sweep: Some(SweepSection {
                levels: vec![0.0, 0.4, 0.8, 1.2, 1.6],
                methods: default_sweep_methods(),
                seeds: vec![1, 2, 3, 4, 5],
            }),
            ablation: Some(AblationSection {
                seeds: vec![1, 2, 3, 4, 5],
            }),
        }
    }
}
