use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxgrid::GridGeometry;

pub const DEFAULT_MAX_POINTS_PER_VOXEL: usize = 32;

/// Clipping range and voxel size. `geometry.origin` equals `range_min` and the
/// extents are `round((range_max - range_min) / voxel_size)` per axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelizeConfig {
    pub geometry: GridGeometry,
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    /// `None` keeps every point.
    pub max_points_per_voxel: Option<usize>,
}

/// On-disk form (TOML). `max_points_per_voxel = 0` means unlimited.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    voxel_size: [f64; 3],
    range_min: [f64; 3],
    range_max: [f64; 3],
    #[serde(default = "default_cap")]
    max_points_per_voxel: usize,
}

fn default_cap() -> usize {
    DEFAULT_MAX_POINTS_PER_VOXEL
}

impl VoxelizeConfig {
    pub fn new(
        voxel_size: [f64; 3],
        range_min: [f64; 3],
        range_max: [f64; 3],
        max_points_per_voxel: Option<usize>,
    ) -> Result<Self> {
        let mut extents = [0usize; 3];
        for a in 0..3 {
            let span = range_max[a] - range_min[a];
            if !(span.is_finite() && span > 0.0) {
                return Err(Error::Config(format!(
                    "range_max[{a}] = {} must exceed range_min[{a}] = {}",
                    range_max[a], range_min[a]
                )));
            }
            if !(voxel_size[a].is_finite() && voxel_size[a] > 0.0) {
                return Err(Error::Config(format!("voxel_size[{a}] must be positive")));
            }
            let n = (span / voxel_size[a]).round();
            if n < 1.0 || (n * voxel_size[a] - span).abs() > 1e-6 * span.max(1.0) {
                return Err(Error::Config(format!(
                    "axis {a}: range span {span} is not a whole number of {} m voxels",
                    voxel_size[a]
                )));
            }
            extents[a] = n as usize;
        }
        if max_points_per_voxel == Some(0) {
            return Err(Error::Config("max_points_per_voxel must be positive".into()));
        }
        let geometry = GridGeometry::new(range_min, voxel_size, extents)
            .map_err(|e| Error::Config(e.to_string()))?;
        Ok(VoxelizeConfig {
            geometry,
            range_min,
            range_max,
            max_points_per_voxel,
        })
    }

    /// nuScenes-style range with (0.1, 0.1, 0.2) m voxels: 1024 x 1024 x 40.
    pub fn nuscenes() -> Self {
        Self::new([0.1, 0.1, 0.2], [-51.2, -51.2, -5.0], [51.2, 51.2, 3.0], Some(DEFAULT_MAX_POINTS_PER_VOXEL))
            .expect("valid preset")
    }

    /// nuScenes-style range with (0.075, 0.075, 0.2) m voxels: 1440 x 1440 x 40.
    pub fn nuscenes_fine() -> Self {
        Self::new([0.075, 0.075, 0.2], [-54.0, -54.0, -5.0], [54.0, 54.0, 3.0], Some(DEFAULT_MAX_POINTS_PER_VOXEL))
            .expect("valid preset")
    }

    /// KITTI-style range with (0.05, 0.05, 0.1) m voxels: 1408 x 1600 x 40.
    pub fn kitti() -> Self {
        Self::new([0.05, 0.05, 0.1], [0.0, -40.0, -3.0], [70.4, 40.0, 1.0], Some(DEFAULT_MAX_POINTS_PER_VOXEL))
            .expect("valid preset")
    }

    /// Desk-scale 16 m x 16 m x 4 m scene at (0.5, 0.5, 0.25) m: 32 x 32 x 16.
    pub fn toy() -> Self {
        Self::new([0.5, 0.5, 0.25], [0.0, -8.0, -3.0], [16.0, 8.0, 1.0], Some(DEFAULT_MAX_POINTS_PER_VOXEL))
            .expect("valid preset")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let f: ConfigFile = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let cap = (f.max_points_per_voxel > 0).then_some(f.max_points_per_voxel);
        Self::new(f.voxel_size, f.range_min, f.range_max, cap)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        let f = ConfigFile {
            voxel_size: self.geometry.voxel_size,
            range_min: self.range_min,
            range_max: self.range_max,
            max_points_per_voxel: self.max_points_per_voxel.unwrap_or(0),
        };
        toml::to_string(&f).expect("plain struct serializes")
    }
}
