//! Rulebook-based sparse 3D convolutions.
//!
//! Both operators first build a rulebook: for every output voxel, the list of
//! `(input entry, kernel tap)` pairs that contribute to it, in ascending tap
//! order. Forward evaluation is a gather over the rulebook, so each output sum
//! is produced by a single worker in a fixed order.

use rayon::prelude::*;

use super::kernel::ConvKernel;
use super::tape::GradTape;
use crate::error::{Error, Result};
use crate::voxgrid::{Coord, GridGeometry, SparseVoxelTensor};

#[derive(Debug, Clone)]
pub(crate) struct Rulebook {
    offsets: Vec<usize>,
    pairs: Vec<(u32, u32)>,
}

impl Rulebook {
    fn outputs(&self) -> usize {
        self.offsets.len() - 1
    }

    fn of(&self, out: usize) -> &[(u32, u32)] {
        &self.pairs[self.offsets[out]..self.offsets[out + 1]]
    }

    pub(crate) fn pair_count(&self) -> usize {
        self.pairs.len()
    }
}

fn tap_offsets(spatial: &[usize]) -> Vec<[i64; 3]> {
    let [kx, ky, kz] = [spatial[0], spatial[1], spatial[2]];
    let mut out = Vec::with_capacity(kx * ky * kz);
    for a in 0..kx {
        for b in 0..ky {
            for c in 0..kz {
                out.push([a as i64, b as i64, c as i64]);
            }
        }
    }
    out
}

fn shifted(c: Coord, d: [i64; 3], extents: [usize; 3]) -> Option<Coord> {
    let p = [c.i as i64 + d[0], c.j as i64 + d[1], c.k as i64 + d[2]];
    if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < extents[a]) {
        Some(Coord::new(p[0] as u32, p[1] as u32, p[2] as u32))
    } else {
        None
    }
}

fn submanifold_rulebook(t: &SparseVoxelTensor, spatial: &[usize]) -> Rulebook {
    let half: Vec<i64> = spatial.iter().map(|&s| (s / 2) as i64).collect();
    let deltas: Vec<[i64; 3]> = tap_offsets(spatial)
        .into_iter()
        .map(|o| [o[0] - half[0], o[1] - half[1], o[2] - half[2]])
        .collect();
    let extents = t.geometry().extents;
    let mut offsets = Vec::with_capacity(t.len() + 1);
    let mut pairs = Vec::new();
    offsets.push(0);
    for &c in t.coords() {
        for (tap, d) in deltas.iter().enumerate() {
            if let Some(n) = shifted(c, *d, extents).and_then(|p| t.index_of(p)) {
                pairs.push((n as u32, tap as u32));
            }
        }
        offsets.push(pairs.len());
    }
    Rulebook { offsets, pairs }
}

fn strided_rulebook(
    t: &SparseVoxelTensor,
    spatial: &[usize],
    stride: [usize; 3],
    out_extents: [usize; 3],
) -> (Vec<Coord>, Rulebook) {
    // output o covers inputs o * s + a for a in 0..k
    let mut outs: Vec<Coord> = Vec::new();
    for &c in t.coords() {
        let p = c.as_array();
        let mut cand: [Vec<u32>; 3] = Default::default();
        for axis in 0..3 {
            for a in 0..spatial[axis] {
                if p[axis] >= a && (p[axis] - a) % stride[axis] == 0 {
                    let o = (p[axis] - a) / stride[axis];
                    if o < out_extents[axis] {
                        cand[axis].push(o as u32);
                    }
                }
            }
        }
        for &i in &cand[0] {
            for &j in &cand[1] {
                for &k in &cand[2] {
                    outs.push(Coord::new(i, j, k));
                }
            }
        }
    }
    outs.sort_unstable();
    outs.dedup();

    let taps = tap_offsets(spatial);
    let extents = t.geometry().extents;
    let mut offsets = Vec::with_capacity(outs.len() + 1);
    let mut pairs = Vec::new();
    offsets.push(0);
    for &o in &outs {
        let base = [
            o.i as i64 * stride[0] as i64,
            o.j as i64 * stride[1] as i64,
            o.k as i64 * stride[2] as i64,
        ];
        for (tap, d) in taps.iter().enumerate() {
            let p = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
            if (0..3).all(|a| (p[a] as usize) < extents[a]) {
                let c = Coord::new(p[0] as u32, p[1] as u32, p[2] as u32);
                if let Some(n) = t.index_of(c) {
                    pairs.push((n as u32, tap as u32));
                }
            }
        }
        offsets.push(pairs.len());
    }
    (outs, Rulebook { offsets, pairs })
}

fn gather_forward(rb: &Rulebook, input: &[f64], k: &ConvKernel) -> Vec<f64> {
    let cin = k.in_channels();
    let cout = k.out_channels();
    let mut out = vec![0.0; rb.outputs() * cout];
    out.par_chunks_mut(cout).enumerate().for_each(|(n, y)| {
        y.copy_from_slice(k.bias());
        for &(src, tap) in rb.of(n) {
            let x = &input[src as usize * cin..(src as usize + 1) * cin];
            let w = k.tap(tap as usize);
            for (ci, &xv) in x.iter().enumerate() {
                let row = &w[ci * cout..(ci + 1) * cout];
                for (yo, &wv) in y.iter_mut().zip(row) {
                    *yo += xv * wv;
                }
            }
        }
    });
    out
}

fn gather_backward(
    rb: &Rulebook,
    input: &[f64],
    k: &ConvKernel,
    upstream: &[f64],
) -> (ConvKernel, Vec<f64>) {
    let cin = k.in_channels();
    let cout = k.out_channels();
    let mut gk = k.zeros_like();
    let mut gx = vec![0.0; input.len()];
    let block = cin * cout;
    for n in 0..rb.outputs() {
        let g = &upstream[n * cout..(n + 1) * cout];
        for (b, &gv) in gk.bias_mut().iter_mut().zip(g) {
            *b += gv;
        }
        for &(src, tap) in rb.of(n) {
            let src = src as usize;
            let tap = tap as usize;
            let x = &input[src * cin..(src + 1) * cin];
            let w = k.tap(tap);
            let gw = &mut gk.weights_mut()[tap * block..(tap + 1) * block];
            let gxs = &mut gx[src * cin..(src + 1) * cin];
            for ci in 0..cin {
                let row = ci * cout;
                let mut acc = 0.0;
                for co in 0..cout {
                    gw[row + co] += x[ci] * g[co];
                    acc += w[row + co] * g[co];
                }
                gxs[ci] += acc;
            }
        }
    }
    (gk, gx)
}

/// Saved state for the backward pass of a sparse 3D convolution.
#[derive(Debug)]
pub struct SparseConvRecord {
    input: SparseVoxelTensor,
    kernel: ConvKernel,
    rulebook: Rulebook,
    out_coords: Vec<Coord>,
}

#[derive(Debug, Clone)]
pub struct SparseConvGrads {
    pub kernel: ConvKernel,
    /// Gradient with respect to the input features, on the input's active set.
    pub input: SparseVoxelTensor,
}

fn check_3d(t: &SparseVoxelTensor, k: &ConvKernel, op: &str) -> Result<()> {
    if k.spatial().len() != 3 {
        return Err(Error::Shape(format!("{op}: kernel must be 3D, got {:?}", k.spatial())));
    }
    k.require_in_channels(t.channels(), op)
}

/// Submanifold convolution: the output has exactly the input's active set.
pub fn submanifold_conv3d(t: &SparseVoxelTensor, k: &ConvKernel) -> Result<SparseVoxelTensor> {
    submanifold_conv3d_taped(t, k).map(|(out, _)| out)
}

pub fn submanifold_conv3d_taped(
    t: &SparseVoxelTensor,
    k: &ConvKernel,
) -> Result<(SparseVoxelTensor, GradTape<SparseConvRecord>)> {
    check_3d(t, k, "submanifold_conv3d")?;
    if k.spatial().iter().any(|s| s % 2 == 0) {
        return Err(Error::Shape(format!(
            "submanifold_conv3d: kernel shape {:?} must be odd",
            k.spatial()
        )));
    }
    let rb = submanifold_rulebook(t, k.spatial());
    let feats = gather_forward(&rb, t.features(), k);
    let out = t.with_features(k.out_channels(), feats)?;
    let rec = SparseConvRecord {
        input: t.clone(),
        kernel: k.clone(),
        out_coords: t.coords().to_vec(),
        rulebook: rb,
    };
    Ok((out, GradTape::record("submanifold_conv3d", rec)))
}

/// Strided sparse convolution. Output extents are `ceil(n / stride)`; output
/// voxel `o` sees inputs `o * stride + a` for kernel offsets `a`, and is active
/// iff at least one of those inputs is active.
pub fn strided_sparse_conv3d(
    t: &SparseVoxelTensor,
    k: &ConvKernel,
    stride: [usize; 3],
) -> Result<SparseVoxelTensor> {
    strided_sparse_conv3d_taped(t, k, stride).map(|(out, _)| out)
}

pub fn strided_sparse_conv3d_taped(
    t: &SparseVoxelTensor,
    k: &ConvKernel,
    stride: [usize; 3],
) -> Result<(SparseVoxelTensor, GradTape<SparseConvRecord>)> {
    check_3d(t, k, "strided_sparse_conv3d")?;
    let out_geom: GridGeometry = t.geometry().downsampled(stride)?;
    let (coords, rb) = strided_rulebook(t, k.spatial(), stride, out_geom.extents);
    let feats = gather_forward(&rb, t.features(), k);
    let out = SparseVoxelTensor::from_sorted_parts(out_geom, k.out_channels(), coords.clone(), feats);
    let rec = SparseConvRecord {
        input: t.clone(),
        kernel: k.clone(),
        out_coords: coords,
        rulebook: rb,
    };
    Ok((out, GradTape::record("strided_sparse_conv3d", rec)))
}

impl GradTape<SparseConvRecord> {
    /// Upstream must live on the forward output's active set.
    pub fn backward(&mut self, upstream: &SparseVoxelTensor) -> Result<SparseConvGrads> {
        {
            let rec = self.peek()?;
            if upstream.coords() != rec.out_coords.as_slice()
                || upstream.channels() != rec.kernel.out_channels()
            {
                return Err(Error::Shape(format!(
                    "{} backward: upstream does not match the forward output",
                    self.op()
                )));
            }
        }
        let rec = self.take()?;
        let (kernel, gx) = gather_backward(&rec.rulebook, rec.input.features(), &rec.kernel, upstream.features());
        let input = rec.input.with_features(rec.input.channels(), gx)?;
        Ok(SparseConvGrads { kernel, input })
    }

    /// Number of (input, tap) contributions in the rulebook.
    pub fn rulebook_size(&self) -> Result<usize> {
        Ok(self.peek()?.rulebook.pair_count())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn geo(n: [usize; 3]) -> GridGeometry {
        GridGeometry::from_extents(n).unwrap()
    }

    #[test]
    fn single_voxel_sees_only_center_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = ConvKernel::init_uniform(&[3, 3, 3], 2, 3, &mut rng).unwrap();
        let mut t = SparseVoxelTensor::new(geo([4, 4, 4]), 2).unwrap();
        t.set_voxel(Coord::new(1, 2, 3), &[0.5, -2.0]).unwrap();
        let y = submanifold_conv3d(&t, &k).unwrap();
        let w = k.tap(13);
        for co in 0..3 {
            let expect = k.bias()[co] + 0.5 * w[co] - 2.0 * w[3 + co];
            assert_eq!(y.feature(0)[co], expect);
        }
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut t = SparseVoxelTensor::new(geo([5, 5, 5]), 3).unwrap();
        for _ in 0..30 {
            let c = Coord::new(rng.gen_range(0..5), rng.gen_range(0..5), rng.gen_range(0..5));
            let f: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            t.set_voxel(c, &f).unwrap();
        }
        let y = submanifold_conv3d(&t, &ConvKernel::identity3d(3, 3).unwrap()).unwrap();
        assert_eq!(y, t);
    }

    #[test]
    fn strided_single_voxel_maps_to_one_output() {
        let k = ConvKernel::zeros(&[2, 2, 2], 1, 1).unwrap();
        for (i, j, kk) in [(0, 0, 0), (3, 1, 2), (7, 6, 5)] {
            let mut t = SparseVoxelTensor::new(geo([8, 7, 6]), 1).unwrap();
            t.set_voxel(Coord::new(i, j, kk), &[1.0]).unwrap();
            let y = strided_sparse_conv3d(&t, &k, [2, 2, 2]).unwrap();
            assert_eq!(y.geometry().extents, [4, 4, 3]);
            assert_eq!(y.coords(), &[Coord::new(i / 2, j / 2, kk / 2)]);
        }
    }

    #[test]
    fn strided_full_grid_counts() {
        let k = ConvKernel::zeros(&[2, 2, 2], 1, 1).unwrap();
        let mut t = SparseVoxelTensor::new(geo([4, 4, 4]), 1).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                for kk in 0..4 {
                    t.set_voxel(Coord::new(i, j, kk), &[1.0]).unwrap();
                }
            }
        }
        let y = strided_sparse_conv3d(&t, &k, [2, 2, 2]).unwrap();
        assert_eq!(y.len(), 8);
    }

    #[test]
    fn channel_mismatch_and_even_kernel_rejected() {
        let t = SparseVoxelTensor::new(geo([2, 2, 2]), 2).unwrap();
        let k = ConvKernel::zeros(&[3, 3, 3], 3, 1).unwrap();
        assert!(matches!(submanifold_conv3d(&t, &k), Err(Error::Shape(_))));
        let k = ConvKernel::zeros(&[2, 2, 2], 2, 1).unwrap();
        assert!(submanifold_conv3d(&t, &k).is_err());
    }

    #[test]
    fn identity_backward_passes_upstream_and_bias_sums() {
        let mut t = SparseVoxelTensor::new(geo([3, 3, 3]), 1).unwrap();
        t.set_voxel(Coord::new(0, 0, 0), &[1.0]).unwrap();
        t.set_voxel(Coord::new(0, 0, 1), &[2.0]).unwrap();
        let k = ConvKernel::identity3d(3, 1).unwrap();
        let (y, mut tape) = submanifold_conv3d_taped(&t, &k).unwrap();
        let up = y.with_features(1, vec![0.25, -4.0]).unwrap();
        let g = tape.backward(&up).unwrap();
        assert_eq!(g.input.features(), &[0.25, -4.0]);
        assert_eq!(g.kernel.bias(), &[0.25 - 4.0]);
        assert!(matches!(tape.backward(&up), Err(Error::Usage(_))));
    }
}
