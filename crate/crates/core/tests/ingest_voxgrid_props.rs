mod common;

use std::collections::BTreeMap;

use common::{rng, tensor};
use mdrnet_core::ingest::{
    parse_bin, read_tensor_bytes, synth_scene, tensor_to_bytes, to_bin_bytes, voxelize, voxelize_with_stats, Point,
    PointCloud, VoxelizeConfig,
};
use mdrnet_core::{Coord, GridGeometry, SparseVoxelTensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn coord_strategy(ext: [usize; 3]) -> impl Strategy<Value = Coord> {
    (0..ext[0] as u32, 0..ext[1] as u32, 0..ext[2] as u32).prop_map(|(i, j, k)| Coord::new(i, j, k))
}

fn entries() -> impl Strategy<Value = ([usize; 3], Vec<(Coord, f64)>)> {
    [1usize..=8, 1usize..=8, 1usize..=8].prop_flat_map(|ext| {
        (Just(ext), prop::collection::vec((coord_strategy(ext), -5.0f64..5.0), 0..60))
    })
}

fn random_cloud(r: &mut rand_chacha::ChaCha8Rng, n: usize, cfg: &VoxelizeConfig) -> PointCloud {
    let pts = (0..n)
        .map(|_| {
            let p: [f32; 3] = std::array::from_fn(|d| {
                let span = cfg.range_max[d] - cfg.range_min[d];
                r.gen_range(cfg.range_min[d] - 0.1 * span..cfg.range_max[d] + 0.1 * span) as f32
            });
            Point::new(p[0], p[1], p[2], r.gen_range(0.0f32..1.0))
        })
        .collect();
    PointCloud::new(pts)
}

proptest! {
    #[test]
    fn set_then_get_is_identity((ext, es) in entries()) {
        let mut t = SparseVoxelTensor::new(GridGeometry::from_extents(ext).unwrap(), 1).unwrap();
        let mut last = BTreeMap::new();
        for (c, v) in &es {
            t.set_voxel(*c, &[*v]).unwrap();
            prop_assert_eq!(t.get(*c), Some(&[*v][..]));
            last.insert(*c, *v);
        }
        prop_assert_eq!(t.len(), last.len());
        for (c, v) in last {
            prop_assert_eq!(t.get(c), Some(&[v][..]));
        }
    }

    #[test]
    fn columns_match_exhaustive_scan((ext, es) in entries()) {
        let g = GridGeometry::from_extents(ext).unwrap();
        let t = SparseVoxelTensor::from_entries(g, 1, es.iter().map(|(c, v)| (*c, vec![*v]))).unwrap();
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                let mut expect: Vec<(usize, f64)> = Vec::new();
                for k in 0..ext[2] {
                    if let Some(f) = t.get(Coord::new(i as u32, j as u32, k as u32)) {
                        expect.push((k, f[0]));
                    }
                }
                let got: Vec<(usize, f64)> = t.column(i, j).unwrap().into_iter().map(|(k, f)| (k, f[0])).collect();
                prop_assert_eq!(got, expect);
            }
        }
    }

    #[test]
    fn insertion_order_does_not_matter((ext, es) in entries(), seed in any::<u64>()) {
        let g = GridGeometry::from_extents(ext).unwrap();
        let mut dedup: BTreeMap<Coord, f64> = BTreeMap::new();
        for (c, v) in es {
            dedup.insert(c, v);
        }
        let mut shuffled: Vec<(Coord, f64)> = dedup.into_iter().collect();
        let a = SparseVoxelTensor::from_entries(g, 1, shuffled.iter().map(|(c, v)| (*c, vec![*v]))).unwrap();
        shuffled.shuffle(&mut rng(seed));
        let mut b = SparseVoxelTensor::new(g, 1).unwrap();
        for (c, v) in &shuffled {
            b.set_voxel(*c, &[*v]).unwrap();
        }
        prop_assert!(a.iter().eq(b.iter()));
    }

    #[test]
    fn densify_sparsify_round_trip(seed in any::<u64>(), ext in [1usize..=6, 1usize..=6, 1usize..=6], c in 1usize..=3) {
        let t = tensor(&mut rng(seed), ext, c, 0.3);
        let back = SparseVoxelTensor::sparsify(*t.geometry(), &t.densify()).unwrap();
        prop_assert_eq!(back.coords(), t.coords());
        prop_assert_eq!(back.features(), t.features());
    }

    #[test]
    fn tensor_file_round_trip(seed in any::<u64>(), ext in [1usize..=6, 1usize..=6, 1usize..=6], c in 1usize..=4) {
        let t = tensor(&mut rng(seed), ext, c, 0.4);
        let back = read_tensor_bytes(&tensor_to_bytes(&t)).unwrap();
        prop_assert_eq!(back.geometry().extents, ext);
        prop_assert_eq!(back.channels(), c);
        prop_assert_eq!(back.coords(), t.coords());
        prop_assert_eq!(back.features(), t.features());
    }

    #[test]
    fn voxelize_is_permutation_invariant(seed in any::<u64>(), n in 0usize..400) {
        let cfg = VoxelizeConfig::toy();
        let mut r = rng(seed);
        let cloud = random_cloud(&mut r, n, &cfg);
        let (a, stats) = voxelize_with_stats(&cloud, &cfg).unwrap();
        let mut pts = cloud.points.clone();
        pts.shuffle(&mut r);
        let b = voxelize(&PointCloud::new(pts), &cfg).unwrap();
        prop_assert_eq!(a.coords(), b.coords());
        prop_assert!(a.features().iter().zip(b.features()).all(|(x, y)| (x - y).abs() <= 1e-12));
        prop_assert_eq!(stats.kept + stats.out_of_range, stats.input);
        prop_assert!(a.coords().iter().all(|c| a.geometry().contains(*c)));
    }

    #[test]
    fn bin_round_trip(pts in prop::collection::vec((-50.0f32..50.0, -50.0f32..50.0, -5.0f32..5.0, 0.0f32..=1.0), 0..50)) {
        let pc = PointCloud::new(pts.iter().map(|&(x, y, z, i)| Point::new(x, y, z, i)).collect());
        let (back, rejected) = parse_bin(&to_bin_bytes(&pc)).unwrap();
        prop_assert_eq!(rejected, 0);
        prop_assert_eq!(back, pc);
    }
}

#[test]
fn voxelize_matches_brute_force_binning() {
    let cfg = VoxelizeConfig { max_points_per_voxel: None, ..VoxelizeConfig::toy() };
    let cloud = random_cloud(&mut rng(99), 1000, &cfg);
    let t = voxelize(&cloud, &cfg).unwrap();
    let g = cfg.geometry;
    let mut expected = 0;
    for i in 0..g.nx() {
        for j in 0..g.ny() {
            for k in 0..g.nz() {
                let c = Coord::new(i as u32, j as u32, k as u32);
                let lo: [f64; 3] = std::array::from_fn(|d| g.origin[d] + [i, j, k][d] as f64 * g.voxel_size[d]);
                let inside: Vec<&Point> = cloud
                    .points
                    .iter()
                    .filter(|p| (0..3).all(|d| p.xyz()[d] >= lo[d] && p.xyz()[d] < lo[d] + g.voxel_size[d]))
                    .collect();
                if inside.is_empty() {
                    assert!(t.get(c).is_none());
                    continue;
                }
                expected += 1;
                let n = inside.len() as f64;
                let center = g.voxel_center(c);
                let mut mean = [0.0; 4];
                for p in &inside {
                    for d in 0..3 {
                        mean[d] += (p.xyz()[d] - center[d]) / n;
                    }
                    mean[3] += p.intensity as f64 / n;
                }
                let got = t.get(c).expect("occupied voxel");
                for (a, b) in got.iter().zip(mean) {
                    assert!((a - b).abs() < 1e-12, "{c:?}: {got:?} vs {mean:?}");
                }
            }
        }
    }
    assert_eq!(t.len(), expected);
}

#[test]
fn voxel_center_point_and_symmetric_pair() {
    let cfg = VoxelizeConfig::toy();
    let c = Coord::new(3, 4, 5);
    let p = cfg.geometry.voxel_center(c);
    let one = PointCloud::new(vec![Point::new(p[0] as f32, p[1] as f32, p[2] as f32, 0.5)]);
    assert_eq!(voxelize(&one, &cfg).unwrap().get(c), Some(&[0.0, 0.0, 0.0, 0.5][..]));
    let d = [0.1, -0.05, 0.08];
    let pair = PointCloud::new(
        [1.0, -1.0]
            .iter()
            .map(|s| Point::new((p[0] + s * d[0]) as f32, (p[1] + s * d[1]) as f32, (p[2] + s * d[2]) as f32, 0.2))
            .collect(),
    );
    let t = voxelize(&pair, &cfg).unwrap();
    let f = t.get(c).unwrap();
    assert!(f[..3].iter().all(|v| v.abs() < 1e-6), "{f:?}");
}

#[test]
fn bin_rejects_nan_and_bad_length() {
    let mut pts: Vec<Point> = (0..10).map(|n| Point::new(n as f32, 0.0, 0.0, 0.1)).collect();
    pts[4].x = f32::NAN;
    let (pc, rejected) = parse_bin(&to_bin_bytes(&PointCloud::new(pts))).unwrap();
    assert_eq!((pc.len(), rejected), (9, 1));
    assert!(parse_bin(&[0u8; 17]).is_err());
    assert_eq!(parse_bin(&[0u8; 32]).unwrap().0.len(), 2);
}

#[test]
fn synthetic_scenes() {
    let cfg = VoxelizeConfig::toy();
    let a = synth_scene(7, 3, &cfg).unwrap();
    let b = synth_scene(7, 3, &cfg).unwrap();
    assert_eq!(to_bin_bytes(&a.cloud), to_bin_bytes(&b.cloud));
    assert_eq!(a.objects.len(), 3);
    for o in &a.objects {
        assert!((0..3).all(|d| o.center[d] >= cfg.range_min[d] && o.center[d] < cfg.range_max[d]));
    }
    let ground = synth_scene(7, 0, &cfg).unwrap();
    assert!(ground.objects.is_empty());
    assert!(ground.cloud.points.iter().all(|p| (p.z as f64 - ground.ground_z).abs() <= 0.031));
}
