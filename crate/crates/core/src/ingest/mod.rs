//! Point-cloud input, voxelization and synthetic data.

mod bin;
mod config;
mod synth;
mod tensor_file;
mod voxelize;

pub use bin::{load_bin, parse_bin, save_bin, to_bin_bytes, Point, PointCloud};
pub use config::VoxelizeConfig;
pub use synth::{random_sparse, synth_scene, synth_scene_with, SynthObject, SynthParams, SynthScene};
pub use tensor_file::{read_tensor, read_tensor_bytes, tensor_to_bytes, write_tensor};
pub use voxelize::{voxelize, voxelize_with_stats, VoxelizeStats};
