mod common;

use common::{kernel, rng, tensor};
use mdrnet_core::reduce::{max_weights, mean_weights, normalize_column, reduce, ReductionKind, SdrNorm};
use mdrnet_core::sparseconv::ConvKernel;
use mdrnet_core::{Coord, GridGeometry, SparseVoxelTensor};
use num_rational::Ratio;
use proptest::prelude::*;

fn instance() -> impl Strategy<Value = (u64, [usize; 3], f64, usize)> {
    (any::<u64>(), [1usize..=6, 1usize..=6, 1usize..=6], prop_oneof![Just(0.1), Just(0.5), Just(1.0)], 1usize..=3)
}

fn sdr_kind(norm: SdrNorm, k: ConvKernel) -> ReductionKind {
    match norm {
        SdrNorm::Relu => ReductionKind::SdrRelu(k),
        SdrNorm::Sigmoid => ReductionKind::SdrSigmoid(k),
        SdrNorm::Softmax => ReductionKind::SdrSoftmax(k),
    }
}

fn constant_columns(t: &SparseVoxelTensor, v: &[f64]) -> SparseVoxelTensor {
    t.with_features(v.len(), v.repeat(t.len())).unwrap()
}

proptest! {
    #[test]
    fn normalized_weights_sum_to_one((seed, ext, p, c) in instance()) {
        let mut r = rng(seed);
        let t = tensor(&mut r, ext, c, p);
        for norm in [SdrNorm::Relu, SdrNorm::Softmax] {
            let w = reduce(&t, &sdr_kind(norm, kernel(&mut r, &[3, 3, 3], c, 1, 3.0))).unwrap().weights.unwrap();
            for (_, sums) in w.column_sums() {
                prop_assert!(sums.iter().all(|s| (s - 1.0).abs() <= 1e-9), "{norm:?}: {sums:?}");
            }
        }
        let w = reduce(&t, &sdr_kind(SdrNorm::Sigmoid, kernel(&mut r, &[3, 3, 3], c, 1, 3.0))).unwrap().weights.unwrap();
        prop_assert!(w.weights().iter().all(|&x| x > 0.0 && x < 1.0));
    }

    #[test]
    fn max_weights_are_one_hot_at_scan_argmax((seed, ext, p, _c) in instance()) {
        let mut r = rng(seed);
        let t = tensor(&mut r, ext, 4, p);
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                let col = t.column(i, j).unwrap();
                let w = max_weights(&t, i, j).unwrap();
                prop_assert_eq!(w.len(), col.len());
                for ch in 0..4 {
                    let mut best = None::<(usize, f64)>;
                    for (k, f) in &col {
                        if best.is_none_or(|(_, b)| f[ch] > b) {
                            best = Some((*k, f[ch]));
                        }
                    }
                    let hot: Vec<usize> = w.iter().filter(|(_, v)| v[ch] == 1.0).map(|(k, _)| *k).collect();
                    prop_assert!(w.iter().all(|(_, v)| v[ch] == 0.0 || v[ch] == 1.0));
                    prop_assert_eq!(hot, best.map(|(k, _)| k).into_iter().collect::<Vec<_>>());
                }
            }
        }
    }

    #[test]
    fn mean_weights_are_exact_reciprocals((seed, ext, p, c) in instance()) {
        let mut r = rng(seed);
        let t = tensor(&mut r, ext, c, p);
        for i in 0..ext[0] {
            for j in 0..ext[1] {
                let w = mean_weights(&t, i, j).unwrap();
                let n = w.len() as i64;
                if n == 0 {
                    continue;
                }
                let n = n as i128;
                let exact = Ratio::new(1i128, n);
                prop_assert_eq!(exact * n, Ratio::from_integer(1));
                for (_, x) in w {
                    let scaled = x * (1u64 << 60) as f64;
                    prop_assert_eq!(scaled.fract(), 0.0);
                    let d = Ratio::new(scaled as i128, 1i128 << 60) - exact;
                    let err = if d < Ratio::from_integer(0) { -d } else { d };
                    prop_assert!(err <= Ratio::new(1, 1i128 << 53) / n);
                }
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant((seed, ext, p, c) in instance(), shift in -50.0f64..50.0) {
        let mut r = rng(seed);
        let t = tensor(&mut r, ext, c, p);
        let k = kernel(&mut r, &[3, 3, 3], c, 1, 2.0);
        let mut shifted = k.clone();
        shifted.bias_mut()[0] += shift;
        let a = reduce(&t, &ReductionKind::SdrSoftmax(k)).unwrap().map;
        let b = reduce(&t, &ReductionKind::SdrSoftmax(shifted)).unwrap().map;
        prop_assert!(a.max_abs_diff(&b) <= 1e-10);
    }

    #[test]
    fn normalized_kinds_conserve_constant_columns((seed, ext, p, c) in instance()) {
        let mut r = rng(seed);
        let v: Vec<f64> = (0..c).map(|n| n as f64 - 0.75).collect();
        let t = constant_columns(&tensor(&mut r, ext, c, p), &v);
        let kinds = [
            ReductionKind::MeanPool,
            ReductionKind::MaxPool,
            ReductionKind::SdrRelu(kernel(&mut r, &[3, 3, 3], c, 1, 2.0)),
            ReductionKind::SdrSoftmax(kernel(&mut r, &[3, 3, 3], c, 1, 2.0)),
        ];
        for kind in kinds {
            let m = reduce(&t, &kind).unwrap().map;
            for run in t.column_runs() {
                for (a, b) in m.pixel(run.i, run.j).iter().zip(&v) {
                    prop_assert!((a - b).abs() <= 1e-12, "{}: {a} vs {b}", kind.tag().name());
                }
            }
        }
    }

    #[test]
    fn zero_estimator_softmax_equals_mean_pool((seed, ext, p, c) in instance()) {
        let mut r = rng(seed);
        let t = tensor(&mut r, ext, c, p);
        let zero = ConvKernel::zeros(&[3, 3, 3], c, 1).unwrap();
        let a = reduce(&t, &ReductionKind::SdrSoftmax(zero)).unwrap().map;
        let b = reduce(&t, &ReductionKind::MeanPool).unwrap().map;
        prop_assert_eq!(a, b);
    }

    #[test]
    fn softmax_column_is_distribution(logits in prop::collection::vec(-30.0f64..30.0, 1..12), shift in -100.0f64..100.0) {
        let w = normalize_column(&logits, SdrNorm::Softmax);
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let ws = normalize_column(&shifted, SdrNorm::Softmax);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        prop_assert!(w.iter().zip(&ws).all(|(a, b)| (a - b).abs() <= 1e-10));
    }
}

#[test]
fn sigmoid_is_not_scale_invariant() {
    let mut r = rng(3);
    let t = tensor(&mut r, [4, 4, 4], 2, 0.5);
    let k = kernel(&mut r, &[3, 3, 3], 2, 1, 1.0);
    let mut doubled = k.clone();
    doubled.weights_mut().iter_mut().for_each(|w| *w *= 2.0);
    doubled.bias_mut().iter_mut().for_each(|b| *b *= 2.0);
    let a = reduce(&t, &ReductionKind::SdrSigmoid(k)).unwrap().map;
    let b = reduce(&t, &ReductionKind::SdrSigmoid(doubled)).unwrap().map;
    assert!(a.max_abs_diff(&b) > 1e-6);
}

fn uniform_full_height(c: usize, nz: usize) -> ConvKernel {
    let mut k = ConvKernel::zeros(&[1, 1, nz], c, c).unwrap();
    let w = 1.0 / nz as f64;
    for tap in 0..nz {
        for ch in 0..c {
            k.weights_mut()[(tap * c + ch) * c + ch] = w;
        }
    }
    k
}

#[test]
fn full_height_uniform_differs_from_mean_on_partial_columns() {
    let g = GridGeometry::from_extents([1, 1, 4]).unwrap();
    let partial =
        SparseVoxelTensor::from_entries(g, 1, [(Coord::new(0, 0, 0), vec![1.0]), (Coord::new(0, 0, 1), vec![3.0])]).unwrap();
    let fh = ReductionKind::FullHeightSparseConv(uniform_full_height(1, 4));
    let a = reduce(&partial, &fh).unwrap().map;
    let b = reduce(&partial, &ReductionKind::MeanPool).unwrap().map;
    assert_eq!(a.values(), &[1.0]);
    assert_eq!(b.values(), &[2.0]);

    let mut r = rng(4);
    let full = tensor(&mut r, [3, 3, 4], 2, 1.0);
    let fh = ReductionKind::FullHeightSparseConv(uniform_full_height(2, 4));
    let a = reduce(&full, &fh).unwrap().map;
    let b = reduce(&full, &ReductionKind::MeanPool).unwrap().map;
    assert!(a.max_abs_diff(&b) < 1e-12);
}

#[test]
fn single_voxel_columns_get_unit_weight() {
    let g = GridGeometry::from_extents([2, 1, 5]).unwrap();
    let t = SparseVoxelTensor::from_entries(g, 1, [(Coord::new(0, 0, 3), vec![0.4]), (Coord::new(1, 0, 0), vec![-2.0])]).unwrap();
    let mut r = rng(5);
    for norm in [SdrNorm::Relu, SdrNorm::Softmax] {
        let red = reduce(&t, &sdr_kind(norm, kernel(&mut r, &[3, 3, 3], 1, 1, 5.0))).unwrap();
        assert_eq!(red.weights.unwrap().weights(), &[1.0, 1.0]);
        assert_eq!(red.map.values(), &[0.4, -2.0]);
    }
}
