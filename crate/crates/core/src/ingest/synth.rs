use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::voxgrid::{Coord, GridGeometry, SparseVoxelTensor};

use super::{Point, PointCloud, VoxelizeConfig};

/// Axis-aligned box resting on the ground plane.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthObject {
    pub center: [f64; 3],
    pub size: [f64; 3],
}

impl SynthObject {
    fn overlaps_xy(&self, other: &SynthObject, gap: f64) -> bool {
        (0..2).all(|a| (self.center[a] - other.center[a]).abs() < (self.size[a] + other.size[a]) / 2.0 + gap)
    }

    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        (x - self.center[0]).abs() <= self.size[0] / 2.0 && (y - self.center[1]).abs() <= self.size[1] / 2.0
    }

    /// BEV cells `(i, j)` of `g` whose centers fall inside the footprint.
    pub fn footprint_cells(&self, g: &GridGeometry) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..g.nx() {
            for j in 0..g.ny() {
                let c = g.voxel_center(Coord::new(i as u32, j as u32, 0));
                if self.contains_xy(c[0], c[1]) {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct SynthScene {
    pub cloud: PointCloud,
    pub objects: Vec<SynthObject>,
    pub ground_z: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    /// Points per square metre on box surfaces.
    pub object_density: f64,
    /// Points per square metre on the ground plane.
    pub ground_density: f64,
    pub size_min: [f64; 3],
    pub size_max: [f64; 3],
    /// Minimum free space between box footprints.
    pub min_gap: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            object_density: 40.0,
            ground_density: 1.0,
            size_min: [1.5, 1.0, 1.0],
            size_max: [3.0, 2.0, 2.0],
            min_gap: 1.0,
        }
    }
}

pub fn synth_scene(seed: u64, n_objects: usize, cfg: &VoxelizeConfig) -> Result<SynthScene> {
    synth_scene_with(seed, n_objects, cfg, &SynthParams::default())
}

/// Generates a ground plane plus `n_objects` surface-sampled boxes inside the
/// configured range. Ground returns are not generated under boxes. The output
/// is a pure function of the arguments.
pub fn synth_scene_with(
    seed: u64,
    n_objects: usize,
    cfg: &VoxelizeConfig,
    params: &SynthParams,
) -> Result<SynthScene> {
    let (lo, hi) = (cfg.range_min, cfg.range_max);
    let ground_z = lo[2] + 0.25 * (hi[2] - lo[2]);
    let max_h = 0.7 * (hi[2] - ground_z);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut objects: Vec<SynthObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let mut placed = None;
        for _attempt in 0..1000 {
            let size: [f64; 3] = std::array::from_fn(|a| rng.gen_range(params.size_min[a]..=params.size_max[a]));
            let size = [size[0], size[1], size[2].min(max_h)];
            let mut center = [0.0; 3];
            for a in 0..2 {
                let margin = size[a] / 2.0 + 0.5;
                if hi[a] - lo[a] <= 2.0 * margin {
                    return Err(Error::Config(format!("range on axis {a} too small for synthetic objects")));
                }
                center[a] = rng.gen_range(lo[a] + margin..hi[a] - margin);
            }
            center[2] = ground_z + size[2] / 2.0;
            let obj = SynthObject { center, size };
            if objects.iter().all(|o| !o.overlaps_xy(&obj, params.min_gap)) {
                placed = Some(obj);
                break;
            }
        }
        match placed {
            Some(o) => objects.push(o),
            None => log::warn!("could not place object {} without overlap; skipping", objects.len()),
        }
    }

    let mut points = Vec::new();
    for o in &objects {
        sample_box(&mut rng, o, params.object_density, &mut points);
    }
    let area = (hi[0] - lo[0]) * (hi[1] - lo[1]);
    let n_ground = (params.ground_density * area).round() as usize;
    for _ in 0..n_ground {
        let x = rng.gen_range(lo[0]..hi[0]);
        let y = rng.gen_range(lo[1]..hi[1]);
        let z = ground_z + rng.gen_range(-0.03..0.03);
        let intensity = rng.gen_range(0.05..0.3);
        if objects.iter().any(|o| o.contains_xy(x, y)) {
            continue;
        }
        points.push(Point::new(x as f32, y as f32, z as f32, intensity as f32));
    }
    Ok(SynthScene {
        cloud: PointCloud::new(points),
        objects,
        ground_z,
    })
}

fn sample_box(rng: &mut ChaCha8Rng, o: &SynthObject, density: f64, out: &mut Vec<Point>) {
    let [cx, cy, cz] = o.center;
    let [l, w, h] = o.size;
    let (x0, y0, z0) = (cx - l / 2.0, cy - w / 2.0, cz - h / 2.0);
    let mut emit = |rng: &mut ChaCha8Rng, x: f64, y: f64, z: f64| {
        let intensity = rng.gen_range(0.3..0.9);
        out.push(Point::new(x as f32, y as f32, z as f32, intensity as f32));
    };
    let count = |area: f64| (density * area).round() as usize;
    for _ in 0..count(l * w) {
        let (x, y) = (x0 + rng.gen::<f64>() * l, y0 + rng.gen::<f64>() * w);
        emit(rng, x, y, z0 + h);
    }
    for side in 0..2 {
        for _ in 0..count(l * h) {
            let (x, z) = (x0 + rng.gen::<f64>() * l, z0 + rng.gen::<f64>() * h);
            emit(rng, x, y0 + side as f64 * w, z);
        }
        for _ in 0..count(w * h) {
            let (y, z) = (y0 + rng.gen::<f64>() * w, z0 + rng.gen::<f64>() * h);
            emit(rng, x0 + side as f64 * l, y, z);
        }
    }
}

/// Random tensor with `round(density * cells)` active voxels (at least one
/// when `density > 0`) and features uniform in `[-1, 1)`.
pub fn random_sparse<R: Rng>(
    geometry: GridGeometry,
    channels: usize,
    density: f64,
    rng: &mut R,
) -> Result<SparseVoxelTensor> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::Usage(format!("density {density} outside [0, 1]")));
    }
    let cells = geometry.cell_count();
    let mut n = (density * cells as f64).round() as usize;
    if density > 0.0 {
        n = n.max(1);
    }
    let mut idx = rand::seq::index::sample(rng, cells, n).into_vec();
    idx.sort_unstable();
    let [_, ny, nz] = geometry.extents;
    let coords: Vec<Coord> = idx
        .iter()
        .map(|&f| Coord::new((f / (ny * nz)) as u32, (f / nz % ny) as u32, (f % nz) as u32))
        .collect();
    let features = (0..n * channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Ok(SparseVoxelTensor::from_sorted_parts(geometry, channels, coords, features))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::to_bin_bytes;

    #[test]
    fn deterministic_per_seed() {
        let cfg = VoxelizeConfig::toy();
        let a = synth_scene(7, 3, &cfg).unwrap();
        let b = synth_scene(7, 3, &cfg).unwrap();
        let c = synth_scene(8, 3, &cfg).unwrap();
        assert_eq!(to_bin_bytes(&a.cloud), to_bin_bytes(&b.cloud));
        assert_ne!(to_bin_bytes(&a.cloud), to_bin_bytes(&c.cloud));
        assert_eq!(a.objects.len(), 3);
    }

    #[test]
    fn points_inside_range() {
        let cfg = VoxelizeConfig::toy();
        let s = synth_scene(1, 4, &cfg).unwrap();
        for p in &s.cloud.points {
            let xyz = p.xyz();
            for a in 0..3 {
                assert!(xyz[a] >= cfg.range_min[a] && xyz[a] <= cfg.range_max[a], "{p:?}");
            }
        }
    }

    #[test]
    fn random_sparse_count_and_order() {
        let g = GridGeometry::from_extents([8, 8, 8]).unwrap();
        let t = random_sparse(g, 3, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.len(), 51);
        assert!(t.coords().windows(2).all(|w| w[0] < w[1]));
    }
}
