use crate::error::Result;
use crate::voxgrid::{Coord, SparseVoxelTensor};

use super::{Point, PointCloud, VoxelizeConfig};

/// Point bookkeeping for one voxelization. `kept + out_of_range == input`;
/// `capped` counts kept points discarded by the per-voxel cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct VoxelizeStats {
    pub input: usize,
    pub kept: usize,
    pub out_of_range: usize,
    pub capped: usize,
    pub voxels: usize,
}

/// Bins points into voxels of `cfg.geometry` and averages their features.
///
/// Output channels are `(dx, dy, dz, intensity)` where `d*` is the point's
/// offset from its voxel center. The range is half-open on every axis. Within a
/// voxel points are ordered by value before capping and averaging, so the
/// result does not depend on input order.
pub fn voxelize(pc: &PointCloud, cfg: &VoxelizeConfig) -> Result<SparseVoxelTensor> {
    voxelize_with_stats(pc, cfg).map(|(t, _)| t)
}

pub fn voxelize_with_stats(pc: &PointCloud, cfg: &VoxelizeConfig) -> Result<(SparseVoxelTensor, VoxelizeStats)> {
    let g = &cfg.geometry;
    let mut stats = VoxelizeStats {
        input: pc.len(),
        ..Default::default()
    };
    let mut binned: Vec<(Coord, Point)> = Vec::with_capacity(pc.len());
    'points: for p in &pc.points {
        let xyz = p.xyz();
        let mut idx = [0u32; 3];
        for a in 0..3 {
            if !(xyz[a] >= cfg.range_min[a] && xyz[a] < cfg.range_max[a]) {
                stats.out_of_range += 1;
                continue 'points;
            }
            let n = ((xyz[a] - g.origin[a]) / g.voxel_size[a]).floor();
            // guards against rounding at the upper edge
            if n < 0.0 || n as usize >= g.extents[a] {
                stats.out_of_range += 1;
                continue 'points;
            }
            idx[a] = n as u32;
        }
        binned.push((Coord::new(idx[0], idx[1], idx[2]), *p));
    }
    stats.kept = binned.len();

    binned.sort_by(|(ca, pa), (cb, pb)| {
        ca.cmp(cb)
            .then(pa.x.total_cmp(&pb.x))
            .then(pa.y.total_cmp(&pb.y))
            .then(pa.z.total_cmp(&pb.z))
            .then(pa.intensity.total_cmp(&pb.intensity))
    });

    let cap = cfg.max_points_per_voxel.unwrap_or(usize::MAX);
    let mut coords = Vec::new();
    let mut features = Vec::new();
    for group in binned.chunk_by(|a, b| a.0 == b.0) {
        let coord = group[0].0;
        let used = &group[..group.len().min(cap)];
        stats.capped += group.len() - used.len();
        let center = g.voxel_center(coord);
        let mut acc = [0.0f64; 4];
        for (_, p) in used {
            let xyz = p.xyz();
            for a in 0..3 {
                acc[a] += xyz[a] - center[a];
            }
            acc[3] += p.intensity as f64;
        }
        let n = used.len() as f64;
        coords.push(coord);
        features.extend(acc.iter().map(|v| v / n));
    }
    stats.voxels = coords.len();
    if stats.capped > 0 {
        log::debug!("per-voxel cap dropped {} points", stats.capped);
    }
    Ok((SparseVoxelTensor::from_sorted_parts(*g, 4, coords, features), stats))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(cap: Option<usize>) -> VoxelizeConfig {
        VoxelizeConfig::new([1.0; 3], [0.0; 3], [4.0; 3], cap).unwrap()
    }

    #[test]
    fn single_point_offsets() {
        let pc = PointCloud::new(vec![Point::new(1.25, 2.5, 0.75, 0.5)]);
        let t = voxelize(&pc, &cfg(None)).unwrap();
        assert_eq!(t.coords(), &[Coord::new(1, 2, 0)]);
        assert_eq!(t.feature(0), &[-0.25, 0.0, 0.25, 0.5]);
    }

    #[test]
    fn half_open_range() {
        let pc = PointCloud::new(vec![
            Point::new(0.0, 0.0, 0.0, 0.1),
            Point::new(4.0, 1.0, 1.0, 0.1),
            Point::new(-0.001, 1.0, 1.0, 0.1),
        ]);
        let (t, s) = voxelize_with_stats(&pc, &cfg(None)).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!((s.kept, s.out_of_range, s.input), (1, 2, 3));
    }

    #[test]
    fn cap_applies_to_sorted_points() {
        let pts: Vec<Point> = (0..5).rev().map(|n| Point::new(0.1 * n as f32, 0.5, 0.5, 0.0)).collect();
        let (t, s) = voxelize_with_stats(&PointCloud::new(pts), &cfg(Some(2))).unwrap();
        assert_eq!(s.capped, 3);
        let expect = ((0.0f32 as f64 - 0.5) + (0.1f32 as f64 - 0.5)) / 2.0;
        assert_eq!(t.feature(0)[0], expect);
    }
}
