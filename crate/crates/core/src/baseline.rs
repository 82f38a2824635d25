//! Octree-only mapping baseline: clustering and reconstruction read directly
//! from a fine semantic octree.

use nalgebra::Point3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::octomap::{OctomapConfig, SemanticOctomap};
use crate::perception::SemanticClass;
use crate::target::ClusterConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub resolution: f64,
    /// Occupancy and label parameters; the resolution field is overridden.
    pub octree: OctomapConfig,
    /// Clustering radius as a multiple of the voxel size.
    pub eps_factor: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            resolution: 0.01,
            octree: OctomapConfig::default(),
            eps_factor: 2.0,
        }
    }
}

impl BaselineConfig {
    pub fn with_resolution(resolution: f64) -> Self {
        Self {
            resolution,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::config("baseline resolution must be positive"));
        }
        if !(self.eps_factor > 0.0) {
            return Err(Error::config("eps_factor must be positive"));
        }
        self.octree_config().validate()
    }

    pub fn octree_config(&self) -> OctomapConfig {
        OctomapConfig {
            resolution: self.resolution,
            ..self.octree
        }
    }

    /// Clustering parameters for voxel centers.
    pub fn cluster_config(&self, base: &ClusterConfig) -> ClusterConfig {
        ClusterConfig {
            eps: self.eps_factor * self.resolution,
            ..*base
        }
    }

    pub fn method_name(&self) -> String {
        format!("octomap-{}", self.resolution)
    }
}

/// Centers of occupied voxels whose most likely class is fruit, in key order.
pub fn baseline_fruit_cloud(map: &SemanticOctomap) -> Vec<Point3<f64>> {
    map.occupied_keys_of_class(SemanticClass::Fruit)
        .iter()
        .map(|k| map.center(k))
        .collect()
}
