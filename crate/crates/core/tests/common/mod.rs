#![allow(dead_code)]

use mdrnet_core::ingest::random_sparse;
use mdrnet_core::reduce::{ReductionKind, ReductionTag};
use mdrnet_core::sparseconv::ConvKernel;
use mdrnet_core::{GridGeometry, SparseVoxelTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tensor(rng: &mut ChaCha8Rng, extents: [usize; 3], channels: usize, density: f64) -> SparseVoxelTensor {
    random_sparse(GridGeometry::from_extents(extents).unwrap(), channels, density, rng).unwrap()
}

/// Kernel with weights and biases in `[-scale, scale)`.
pub fn kernel(rng: &mut ChaCha8Rng, spatial: &[usize], cin: usize, cout: usize, scale: f64) -> ConvKernel {
    let taps: usize = spatial.iter().product();
    let w = (0..taps * cin * cout).map(|_| rng.gen_range(-scale..scale)).collect();
    let b = (0..cout).map(|_| rng.gen_range(-scale..scale)).collect();
    ConvKernel::from_parts(spatial, cin, cout, w, b).unwrap()
}

pub fn zero_bias(mut k: ConvKernel) -> ConvKernel {
    k.bias_mut().iter_mut().for_each(|b| *b = 0.0);
    k
}

/// Every kind with random parameters large enough to give uneven SDR weights.
pub fn all_kinds(rng: &mut ChaCha8Rng, channels: usize, nz: usize) -> Vec<ReductionKind> {
    ReductionTag::ALL
        .into_iter()
        .map(|tag| {
            let k = match tag {
                ReductionTag::MeanPool | ReductionTag::MaxPool => None,
                ReductionTag::FlattenConv | ReductionTag::FullHeightSparseConv => {
                    Some(kernel(rng, &[1, 1, nz], channels, channels, 1.0))
                }
                _ => Some(kernel(rng, &[3, 3, 3], channels, 1, 2.0)),
            };
            ReductionKind::from_tag(tag, k).unwrap()
        })
        .collect()
}
