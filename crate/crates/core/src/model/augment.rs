use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strength {
    Weak,
    Strong,
}

/// Perturbations for the consistency branch of the target objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub weak_sigma: f64,
    pub strong_sigma: f64,
    pub strong_mask_prob: f64,
    pub seed: u64,
}

impl AugmentSpec {
    /// Defaults relative to the typical feature magnitude of the data.
    pub fn scaled(feature_scale: f64, seed: u64) -> Self {
        AugmentSpec {
            weak_sigma: 0.05 * feature_scale,
            strong_sigma: 0.2 * feature_scale,
            strong_mask_prob: 0.1,
            seed,
        }
    }

    pub fn disabled() -> Self {
        AugmentSpec {
            weak_sigma: 0.0,
            strong_sigma: 0.0,
            strong_mask_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |s: f64| s >= 0.0 && s.is_finite();
        if !(ok(self.weak_sigma) && ok(self.strong_sigma)) {
            return Err(Error::param("augmentation sigmas must be finite and non-negative"));
        }
        if self.weak_sigma > self.strong_sigma {
            return Err(Error::param("weak_sigma must not exceed strong_sigma"));
        }
        if !(0.0..=1.0).contains(&self.strong_mask_prob) {
            return Err(Error::param("strong_mask_prob outside [0, 1]"));
        }
        Ok(())
    }
}

/// Weak: additive Gaussian noise. Strong: larger Gaussian noise, then each
/// coordinate zeroed independently with `strong_mask_prob`.
pub fn augment(x: &[f64], aug: &AugmentSpec, strength: Strength, seed: u64) -> Vec<f64> {
    let mut rng = seeded(seed);
    let sigma = match strength {
        Strength::Weak => aug.weak_sigma,
        Strength::Strong => aug.strong_sigma,
    };
    let mut out: Vec<f64> = x
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    if strength == Strength::Strong {
        for v in out.iter_mut() {
            if rng.random::<f64>() < aug.strong_mask_prob {
                *v = 0.0;
            }
        }
    }
    out
}
