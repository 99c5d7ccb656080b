//! Dense brute-force reference implementations.
//!
//! Everything here works on densified arrays with plain nested loops and
//! shares no code with the rulebook convolutions or the column-run reductions.
//! The benchmark harness uses these to gate every timed operator, and the test
//! suites use them as ground truth.

use crate::error::{Error, Result};
use crate::reduce::ReductionKind;
use crate::sparseconv::ConvKernel;
use crate::voxgrid::{DenseBevMap, DenseVolume, SparseVoxelTensor};

/// Occupancy mask of a sparse tensor, indexed `(i * Ny + j) * Nz + k`.
pub fn occupancy(t: &SparseVoxelTensor) -> Vec<bool> {
    let [_, ny, nz] = t.geometry().extents;
    let mut m = vec![false; t.geometry().cell_count()];
    for c in t.coords() {
        m[(c.i as usize * ny + c.j as usize) * nz + c.k as usize] = true;
    }
    m
}

/// Centered, zero-padded dense 3D cross-correlation evaluated at every cell.
pub fn dense_conv3d_same(input: &DenseVolume, k: &ConvKernel) -> DenseVolume {
    let [nx, ny, nz] = input.extents;
    let [kx, ky, kz] = [k.spatial()[0], k.spatial()[1], k.spatial()[2]];
    let (cin, cout) = (k.in_channels(), k.out_channels());
    let mut out = DenseVolume::zeros(input.extents, cout);
    for i in 0..nx {
        for j in 0..ny {
            for kk in 0..nz {
                for co in 0..cout {
                    let mut acc = k.bias()[co];
                    for a in 0..kx {
                        for b in 0..ky {
                            for c in 0..kz {
                                let si = i as i64 + a as i64 - (kx / 2) as i64;
                                let sj = j as i64 + b as i64 - (ky / 2) as i64;
                                let sk = kk as i64 + c as i64 - (kz / 2) as i64;
                                if si < 0 || sj < 0 || sk < 0 {
                                    continue;
                                }
                                let (si, sj, sk) = (si as usize, sj as usize, sk as usize);
                                if si >= nx || sj >= ny || sk >= nz {
                                    continue;
                                }
                                let tap = (a * ky + b) * kz + c;
                                for ci in 0..cin {
                                    acc += input.cell(si, sj, sk)[ci]
                                        * k.weights()[(tap * cin + ci) * cout + co];
                                }
                            }
                        }
                    }
                    out.cell_mut(i, j, kk)[co] = acc;
                }
            }
        }
    }
    out
}

/// Dense strided 3D cross-correlation with window `o * s + a`, plus the mask
/// of outputs whose receptive field holds at least one active input.
pub fn dense_strided_conv3d(
    input: &DenseVolume,
    mask: &[bool],
    k: &ConvKernel,
    stride: [usize; 3],
) -> (DenseVolume, Vec<bool>) {
    let [nx, ny, nz] = input.extents;
    let out_ext = [
        nx.div_ceil(stride[0]),
        ny.div_ceil(stride[1]),
        nz.div_ceil(stride[2]),
    ];
    let [kx, ky, kz] = [k.spatial()[0], k.spatial()[1], k.spatial()[2]];
    let (cin, cout) = (k.in_channels(), k.out_channels());
    let mut out = DenseVolume::zeros(out_ext, cout);
    let mut active = vec![false; out_ext.iter().product()];
    for oi in 0..out_ext[0] {
        for oj in 0..out_ext[1] {
            for ok in 0..out_ext[2] {
                let mut acc = k.bias().to_vec();
                let mut any = false;
                for a in 0..kx {
                    for b in 0..ky {
                        for c in 0..kz {
                            let (si, sj, sk) = (oi * stride[0] + a, oj * stride[1] + b, ok * stride[2] + c);
                            if si >= nx || sj >= ny || sk >= nz {
                                continue;
                            }
                            any |= mask[(si * ny + sj) * nz + sk];
                            let tap = (a * ky + b) * kz + c;
                            for ci in 0..cin {
                                for (co, acc_co) in acc.iter_mut().enumerate() {
                                    *acc_co += input.cell(si, sj, sk)[ci]
                                        * k.weights()[(tap * cin + ci) * cout + co];
                                }
                            }
                        }
                    }
                }
                out.cell_mut(oi, oj, ok).copy_from_slice(&acc);
                active[(oi * out_ext[1] + oj) * out_ext[2] + ok] = any;
            }
        }
    }
    (out, active)
}

/// Naive 2D cross-correlation with symmetric zero padding.
pub fn naive_conv2d(m: &DenseBevMap, k: &ConvKernel, stride: usize, pad: usize) -> DenseBevMap {
    let (w, h) = (m.width(), m.height());
    let (kx, ky) = (k.spatial()[0], k.spatial()[1]);
    let (cin, cout) = (k.in_channels(), k.out_channels());
    let ow = (w + 2 * pad - kx) / stride + 1;
    let oh = (h + 2 * pad - ky) / stride + 1;
    let mut out = DenseBevMap::zeros(ow, oh, cout);
    for oi in 0..ow {
        for oj in 0..oh {
            for co in 0..cout {
                let mut acc = k.bias()[co];
                for a in 0..kx {
                    for b in 0..ky {
                        let si = (oi * stride + a) as i64 - pad as i64;
                        let sj = (oj * stride + b) as i64 - pad as i64;
                        if si < 0 || sj < 0 || si >= w as i64 || sj >= h as i64 {
                            continue;
                        }
                        for ci in 0..cin {
                            acc += m.pixel(si as usize, sj as usize)[ci]
                                * k.weights()[((a * ky + b) * cin + ci) * cout + co];
                        }
                    }
                }
                out.pixel_mut(oi, oj)[co] = acc;
            }
        }
    }
    out
}

fn relu_map(m: &DenseBevMap) -> DenseBevMap {
    let v = m.values().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
    DenseBevMap::from_values(m.width(), m.height(), m.channels(), v).expect("same shape")
}

/// Residual block composed from the naive convolution.
pub fn naive_residual_block(m: &DenseBevMap, k1: &ConvKernel, k2: &ConvKernel) -> DenseBevMap {
    let a1 = relu_map(&naive_conv2d(m, k1, 1, 1));
    let h2 = naive_conv2d(&a1, k2, 1, 1);
    relu_map(&h2.add(m).expect("same shape"))
}

/// Brute-force height reduction: enumerate every column of the densified
/// tensor and apply the weighted column sum with the kind's weights.
pub fn reduce_oracle(t: &SparseVoxelTensor, kind: &ReductionKind) -> Result<DenseBevMap> {
    let dense = t.densify();
    let mask = occupancy(t);
    let [nx, ny, nz] = t.geometry().extents;
    let c = t.channels();
    let logits = match kind {
        ReductionKind::SdrRelu(k) | ReductionKind::SdrSigmoid(k) | ReductionKind::SdrSoftmax(k) => {
            if k.in_channels() != c || k.out_channels() != 1 {
                return Err(Error::Shape("oracle: estimator shape".into()));
            }
            Some(dense_conv3d_same(&dense, k))
        }
        _ => None,
    };
    let out_c = match kind {
        ReductionKind::FlattenConv(k) | ReductionKind::FullHeightSparseConv(k) => {
            if k.spatial() != [1, 1, nz] || k.in_channels() != c {
                return Err(Error::Shape("oracle: full-height kernel shape".into()));
            }
            k.out_channels()
        }
        _ => c,
    };
    let mut out = DenseBevMap::zeros(nx, ny, out_c);
    for i in 0..nx {
        for j in 0..ny {
            let ks: Vec<usize> = (0..nz).filter(|&k| mask[(i * ny + j) * nz + k]).collect();
            if ks.is_empty() {
                continue;
            }
            let y = out.pixel_mut(i, j);
            match kind {
                ReductionKind::MeanPool => {
                    for &k in &ks {
                        for ch in 0..c {
                            y[ch] += dense.cell(i, j, k)[ch] / ks.len() as f64;
                        }
                    }
                }
                ReductionKind::MaxPool => {
                    for ch in 0..c {
                        y[ch] = ks
                            .iter()
                            .map(|&k| dense.cell(i, j, k)[ch])
                            .fold(f64::NEG_INFINITY, f64::max);
                    }
                }
                ReductionKind::FlattenConv(w) | ReductionKind::FullHeightSparseConv(w) => {
                    let flat: Vec<f64> = (0..nz).flat_map(|k| dense.cell(i, j, k).to_vec()).collect();
                    for co in 0..out_c {
                        y[co] = w.bias()[co];
                        for (row, x) in flat.iter().enumerate() {
                            y[co] += x * w.weights()[row * out_c + co];
                        }
                    }
                }
                ReductionKind::SdrRelu(_) | ReductionKind::SdrSigmoid(_) | ReductionKind::SdrSoftmax(_) => {
                    let lg = logits.as_ref().expect("computed above");
                    let l: Vec<f64> = ks.iter().map(|&k| lg.cell(i, j, k)[0]).collect();
                    let w: Vec<f64> = match kind {
                        ReductionKind::SdrSoftmax(_) => {
                            let m = l.iter().cloned().fold(f64::MIN, f64::max);
                            let z: f64 = l.iter().map(|v| (v - m).exp()).sum();
                            l.iter().map(|v| (v - m).exp() / z).collect()
                        }
                        ReductionKind::SdrSigmoid(_) => l.iter().map(|v| 1.0 / (1.0 + (-v).exp())).collect(),
                        _ => {
                            let z: f64 = l.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).sum();
                            if z == 0.0 {
                                vec![1.0 / l.len() as f64; l.len()]
                            } else {
                                l.iter().map(|v| if *v > 0.0 { v / z } else { 0.0 }).collect()
                            }
                        }
                    };
                    for (&k, wk) in ks.iter().zip(&w) {
                        for ch in 0..c {
                            y[ch] += wk * dense.cell(i, j, k)[ch];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Max deviation between a sparse result and a dense reference over the
/// sparse result's active set; infinite if channel counts differ.
pub fn sparse_vs_dense(sparse: &SparseVoxelTensor, dense: &DenseVolume) -> f64 {
    if sparse.channels() != dense.channels || sparse.geometry().extents != dense.extents {
        return f64::INFINITY;
    }
    sparse
        .iter()
        .flat_map(|(c, f)| {
            let d = dense.cell(c.i as usize, c.j as usize, c.k as usize);
            f.iter().zip(d).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}
