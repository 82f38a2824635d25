//! Simulated semantic extractor.
//!
//! Ground-truth labels are corrupted pixel by pixel: a pixel keeps its label
//! with probability `p_correct`, otherwise it receives one of the other classes
//! uniformly. Every pixel also carries a confidence drawn from a range that
//! depends on whether its label ended up correct.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, CameraPose};
use crate::scene::GroundTruthFrame;

pub const NUM_CLASSES: usize = 3;

/// Ordered semantic set; the discriminant is the dense class id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticClass {
    Fruit = 0,
    Leaf = 1,
    Background = 2,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] =
        [SemanticClass::Fruit, SemanticClass::Leaf, SemanticClass::Background];

    #[inline]
    pub fn id(self) -> u8 {
        self as u8
    }

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Fruit => "fruit",
            SemanticClass::Leaf => "leaf",
            SemanticClass::Background => "background",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub p_correct: f64,
    pub conf_correct_range: (f64, f64),
    pub conf_wrong_range: (f64, f64),
    pub rng_seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::noise_free()
    }
}

impl NoiseConfig {
    pub fn noise_free() -> Self {
        Self {
            p_correct: 1.0,
            conf_correct_range: (0.7, 1.0),
            conf_wrong_range: (0.2, 0.6),
            rng_seed: 0,
        }
    }

    pub fn with_p_correct(p_correct: f64) -> Self {
        Self {
            p_correct,
            ..Self::noise_free()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_correct) {
            return Err(Error::config("p_correct must lie in [0, 1]"));
        }
        for (lo, hi) in [self.conf_correct_range, self.conf_wrong_range] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::config("confidence ranges must satisfy 0 <= low <= high <= 1"));
            }
        }
        Ok(())
    }

    /// Copy of this config reseeded for one frame of a stream.
    pub fn for_frame(&self, stream_key: u64) -> Self {
        Self {
            rng_seed: mix_seed(self.rng_seed, stream_key),
            ..*self
        }
    }
}

/// Derives an independent seed for one element of a keyed stream.
pub fn mix_seed(seed: u64, stream_key: u64) -> u64 {
    splitmix(seed ^ splitmix(stream_key))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Posed RGB-D frame with noisy per-pixel labels and confidences.
#[derive(Debug, Clone)]
pub struct SemanticObservation {
    pub camera: CameraModel,
    pub pose: CameraPose,
    pub color: Vec<[f64; 3]>,
    /// z-depth in meters; values `>= camera.far` mean no return.
    pub depth: Vec<f64>,
    pub labels: Vec<u8>,
    pub confidence: Vec<f64>,
}

impl SemanticObservation {
    #[inline]
    pub fn depth_valid(&self, idx: usize) -> bool {
        let d = self.depth[idx];
        d.is_finite() && d >= self.camera.near && d < self.camera.far
    }

    /// Same observation with every confidence forced to one.
    pub fn with_unit_confidence(&self) -> Self {
        let mut out = self.clone();
        out.confidence.iter_mut().for_each(|c| *c = 1.0);
        out
    }

    /// Noise-free observation straight from a ground-truth frame.
    pub fn from_ground_truth(frame: &GroundTruthFrame) -> Self {
        Self {
            camera: frame.camera,
            pose: frame.pose,
            color: frame.color.clone(),
            depth: frame.depth.clone(),
            labels: frame.labels.clone(),
            confidence: vec![1.0; frame.labels.len()],
        }
    }
}

/// Applies the label-noise model to a ground-truth frame.
pub fn corrupt_labels(frame: &GroundTruthFrame, cfg: &NoiseConfig) -> SemanticObservation {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let n = frame.labels.len();
    let mut labels = Vec::with_capacity(n);
    let mut confidence = Vec::with_capacity(n);
    for &truth in &frame.labels {
        let keep = rng.gen::<f64>() < cfg.p_correct;
        let label = if keep {
            truth
        } else {
            // uniform over the other classes
            let k = rng.gen_range(0..NUM_CLASSES as u8 - 1);
            if k >= truth {
                k + 1
            } else {
                k
            }
        };
        let (lo, hi) = if label == truth {
            cfg.conf_correct_range
        } else {
            cfg.conf_wrong_range
        };
        let u: f64 = rng.gen();
        labels.push(label);
        confidence.push(lo + (hi - lo) * u);
    }
    SemanticObservation {
        camera: frame.camera,
        pose: frame.pose,
        color: frame.color.clone(),
        depth: frame.depth.clone(),
        labels,
        confidence,
    }
}
