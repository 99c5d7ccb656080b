//! Height-axis reduction from sparse voxels to a dense BEV map.
//!
//! Every kind produces, for each occupied column `(i, j)` with active set
//! `Z(i, j)`, an output of the form `y(i, j) = sum_k w(i, j, k) * x(i, j, k)`.
//! The kinds differ only in where the weights come from:
//!
//! * mean pooling: `w = 1 / |Z|`
//! * max pooling: channelwise 0/1 indicator of the largest value (smallest `k` on ties)
//! * flatten / full-height sparse conv: a static learned matrix per height slot, plus bias
//! * SDR: a scalar logit per voxel from a 3x3x3 submanifold conv, normalized
//!   within the column by ReLU-ratio, sigmoid gating or softmax
//!
//! Vacant columns produce zero vectors.

mod weights;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use weights::ReductionWeights;

use crate::error::{Error, Result};
use crate::sparseconv::{
    submanifold_conv3d, submanifold_conv3d_taped, ConvKernel, GradTape, SparseConvRecord,
};
use crate::voxgrid::{ColumnRun, DenseBevMap, SparseVoxelTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SdrNorm {
    Relu,
    Sigmoid,
    Softmax,
}

/// Parameter-free name of a reduction kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionTag {
    MeanPool,
    MaxPool,
    FlattenConv,
    FullHeightSparseConv,
    SdrRelu,
    SdrSigmoid,
    SdrSoftmax,
}

impl ReductionTag {
    pub const ALL: [ReductionTag; 7] = [
        ReductionTag::MeanPool,
        ReductionTag::MaxPool,
        ReductionTag::FlattenConv,
        ReductionTag::FullHeightSparseConv,
        ReductionTag::SdrRelu,
        ReductionTag::SdrSigmoid,
        ReductionTag::SdrSoftmax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ReductionTag::MeanPool => "mean_pool",
            ReductionTag::MaxPool => "max_pool",
            ReductionTag::FlattenConv => "flatten_conv",
            ReductionTag::FullHeightSparseConv => "full_height_sparse_conv",
            ReductionTag::SdrRelu => "sdr_relu",
            ReductionTag::SdrSigmoid => "sdr_sigmoid",
            ReductionTag::SdrSoftmax => "sdr_softmax",
        }
    }

    pub fn sdr_norm(self) -> Option<SdrNorm> {
        match self {
            ReductionTag::SdrRelu => Some(SdrNorm::Relu),
            ReductionTag::SdrSigmoid => Some(SdrNorm::Sigmoid),
            ReductionTag::SdrSoftmax => Some(SdrNorm::Softmax),
            _ => None,
        }
    }
}

impl std::str::FromStr for ReductionTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ReductionTag::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown reduction kind `{s}`")))
    }
}

/// A reduction operator together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ReductionKind {
    MeanPool,
    MaxPool,
    /// Kernel `[1, 1, Nz]`, `C -> C_out`; evaluated on the dense flattened column.
    FlattenConv(ConvKernel),
    /// Kernel `[1, 1, Nz]`, `C -> C_out`; evaluated on active voxels only.
    FullHeightSparseConv(ConvKernel),
    /// Estimator kernel `[3, 3, 3]`, `C -> 1`.
    SdrRelu(ConvKernel),
    SdrSigmoid(ConvKernel),
    SdrSoftmax(ConvKernel),
}

impl ReductionKind {
    pub fn tag(&self) -> ReductionTag {
        match self {
            ReductionKind::MeanPool => ReductionTag::MeanPool,
            ReductionKind::MaxPool => ReductionTag::MaxPool,
            ReductionKind::FlattenConv(_) => ReductionTag::FlattenConv,
            ReductionKind::FullHeightSparseConv(_) => ReductionTag::FullHeightSparseConv,
            ReductionKind::SdrRelu(_) => ReductionTag::SdrRelu,
            ReductionKind::SdrSigmoid(_) => ReductionTag::SdrSigmoid,
            ReductionKind::SdrSoftmax(_) => ReductionTag::SdrSoftmax,
        }
    }

    pub fn kernel(&self) -> Option<&ConvKernel> {
        match self {
            ReductionKind::MeanPool | ReductionKind::MaxPool => None,
            ReductionKind::FlattenConv(k)
            | ReductionKind::FullHeightSparseConv(k)
            | ReductionKind::SdrRelu(k)
            | ReductionKind::SdrSigmoid(k)
            | ReductionKind::SdrSoftmax(k) => Some(k),
        }
    }

    pub fn kernel_mut(&mut self) -> Option<&mut ConvKernel> {
        match self {
            ReductionKind::MeanPool | ReductionKind::MaxPool => None,
            ReductionKind::FlattenConv(k)
            | ReductionKind::FullHeightSparseConv(k)
            | ReductionKind::SdrRelu(k)
            | ReductionKind::SdrSigmoid(k)
            | ReductionKind::SdrSoftmax(k) => Some(k),
        }
    }

    /// Pairs a tag with a kernel (ignored for the pooling kinds).
    pub fn from_tag(tag: ReductionTag, kernel: Option<ConvKernel>) -> Result<Self> {
        let need = || {
            kernel
                .clone()
                .ok_or_else(|| Error::Config(format!("{} needs a kernel", tag.name())))
        };
        Ok(match tag {
            ReductionTag::MeanPool => ReductionKind::MeanPool,
            ReductionTag::MaxPool => ReductionKind::MaxPool,
            ReductionTag::FlattenConv => ReductionKind::FlattenConv(need()?),
            ReductionTag::FullHeightSparseConv => ReductionKind::FullHeightSparseConv(need()?),
            ReductionTag::SdrRelu => ReductionKind::SdrRelu(need()?),
            ReductionTag::SdrSigmoid => ReductionKind::SdrSigmoid(need()?),
            ReductionTag::SdrSoftmax => ReductionKind::SdrSoftmax(need()?),
        })
    }

    /// Randomly initialized operator for a tensor with `channels` channels and
    /// height `nz`. Static conv kinds keep the channel count.
    pub fn init<R: Rng + ?Sized>(tag: ReductionTag, channels: usize, nz: usize, rng: &mut R) -> Result<Self> {
        let kernel = match tag {
            ReductionTag::MeanPool | ReductionTag::MaxPool => None,
            ReductionTag::FlattenConv | ReductionTag::FullHeightSparseConv => {
                Some(ConvKernel::init_uniform(&[1, 1, nz], channels, channels, rng)?)
            }
            _ => Some(ConvKernel::init_uniform(&[3, 3, 3], channels, 1, rng)?),
        };
        Self::from_tag(tag, kernel)
    }

    pub fn num_params(&self) -> usize {
        self.kernel().map_or(0, ConvKernel::num_params)
    }

    fn out_channels(&self, input_channels: usize) -> usize {
        match self {
            ReductionKind::FlattenConv(k) | ReductionKind::FullHeightSparseConv(k) => k.out_channels(),
            _ => input_channels,
        }
    }

    fn validate(&self, t: &SparseVoxelTensor) -> Result<()> {
        match self {
            ReductionKind::MeanPool | ReductionKind::MaxPool => Ok(()),
            ReductionKind::FlattenConv(k) | ReductionKind::FullHeightSparseConv(k) => {
                k.require_in_channels(t.channels(), self.tag().name())?;
                let nz = t.geometry().nz();
                if k.spatial() != [1, 1, nz] {
                    return Err(Error::Shape(format!(
                        "{}: kernel shape {:?} must be [1, 1, {nz}]",
                        self.tag().name(),
                        k.spatial()
                    )));
                }
                Ok(())
            }
            ReductionKind::SdrRelu(k) | ReductionKind::SdrSigmoid(k) | ReductionKind::SdrSoftmax(k) => {
                k.require_in_channels(t.channels(), self.tag().name())?;
                if k.spatial().len() != 3 || k.out_channels() != 1 {
                    return Err(Error::Shape(format!(
                        "{}: estimator must be a 3D kernel producing 1 channel",
                        self.tag().name()
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Weights for one column under mean pooling: `1 / |Z|` for each active `k`.
pub fn mean_weights(t: &SparseVoxelTensor, i: usize, j: usize) -> Result<Vec<(usize, f64)>> {
    let col = t.column(i, j)?;
    let w = 1.0 / col.len() as f64;
    Ok(col.iter().map(|(k, _)| (*k, w)).collect())
}

/// Channelwise max-pooling indicators for one column: for each `k`, a 0/1 per
/// channel marking the argmax (smallest `k` on ties).
pub fn max_weights(t: &SparseVoxelTensor, i: usize, j: usize) -> Result<Vec<(usize, Vec<f64>)>> {
    let col = t.column(i, j)?;
    let c = t.channels();
    let mut out: Vec<(usize, Vec<f64>)> = col.iter().map(|(k, _)| (*k, vec![0.0; c])).collect();
    for ch in 0..c {
        if let Some(best) = argmax_by_channel(col.iter().map(|(_, f)| f[ch])) {
            out[best].1[ch] = 1.0;
        }
    }
    Ok(out)
}

fn argmax_by_channel(values: impl Iterator<Item = f64>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (n, v) in values.enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((n, v)),
        }
    }
    best.map(|(n, _)| n)
}

/// Normalizes one column of logits into weights.
///
/// ReLU: `relu(l) / sum relu(l)`, falling back to uniform when the sum is zero.
/// Sigmoid: element-wise logistic, no column coupling. Softmax: max-subtracted.
pub fn normalize_column(logits: &[f64], norm: SdrNorm) -> Vec<f64> {
    match norm {
        SdrNorm::Relu => {
            let r: Vec<f64> = logits.iter().map(|l| l.max(0.0)).collect();
            let s: f64 = r.iter().sum();
            if s > 0.0 {
                r.iter().map(|v| v / s).collect()
            } else {
                vec![1.0 / logits.len() as f64; logits.len()]
            }
        }
        SdrNorm::Sigmoid => logits.iter().map(|&l| sigmoid(l)).collect(),
        SdrNorm::Softmax => {
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.iter().map(|v| v / s).collect()
        }
    }
}

fn sigmoid(l: f64) -> f64 {
    if l >= 0.0 {
        1.0 / (1.0 + (-l).exp())
    } else {
        let e = l.exp();
        e / (1.0 + e)
    }
}

/// Maps upstream weight gradients to logit gradients for one column.
fn normalize_column_backward(logits: &[f64], w: &[f64], gw: &[f64], norm: SdrNorm) -> Vec<f64> {
    match norm {
        SdrNorm::Softmax => {
            let dot: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
            w.iter().zip(gw).map(|(wk, gk)| wk * (gk - dot)).collect()
        }
        SdrNorm::Sigmoid => w.iter().zip(gw).map(|(wk, gk)| gk * wk * (1.0 - wk)).collect(),
        SdrNorm::Relu => {
            let s: f64 = logits.iter().map(|l| l.max(0.0)).sum();
            if s > 0.0 {
                let dot: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
                logits
                    .iter()
                    .zip(gw)
                    .map(|(l, gk)| if *l > 0.0 { (gk - dot) / s } else { 0.0 })
                    .collect()
            } else {
                vec![0.0; logits.len()]
            }
        }
    }
}

/// Output of a reduction: the BEV map plus, for the per-voxel weight kinds,
/// the weights that produced it.
#[derive(Debug, Clone)]
pub struct Reduced {
    pub map: DenseBevMap,
    pub weights: Option<ReductionWeights>,
}

pub fn reduce(t: &SparseVoxelTensor, kind: &ReductionKind) -> Result<Reduced> {
    reduce_impl(t, kind, false).map(|(r, _)| r)
}

pub fn reduce_taped(t: &SparseVoxelTensor, kind: &ReductionKind) -> Result<(Reduced, GradTape<ReduceRecord>)> {
    let (r, rec) = reduce_impl(t, kind, true)?;
    Ok((r, GradTape::record("reduce", rec.expect("taped reduce records state"))))
}

/// Static full-height convolution: `y = b + sum_{k active} W[k]^T x_k` on occupied columns.
pub fn full_height_conv_reduce(t: &SparseVoxelTensor, k: &ConvKernel) -> Result<DenseBevMap> {
    reduce(t, &ReductionKind::FullHeightSparseConv(k.clone())).map(|r| r.map)
}

/// Spatial-aware reduction with a learned per-voxel weight.
pub fn sdr(t: &SparseVoxelTensor, estimator: &ConvKernel, norm: SdrNorm) -> Result<(DenseBevMap, ReductionWeights)> {
    let kind = match norm {
        SdrNorm::Relu => ReductionKind::SdrRelu(estimator.clone()),
        SdrNorm::Sigmoid => ReductionKind::SdrSigmoid(estimator.clone()),
        SdrNorm::Softmax => ReductionKind::SdrSoftmax(estimator.clone()),
    };
    let r = reduce(t, &kind)?;
    Ok((r.map, r.weights.expect("sdr always yields weights")))
}

#[derive(Debug)]
pub struct ReduceRecord {
    input: SparseVoxelTensor,
    runs: Vec<ColumnRun>,
    state: RecordState,
}

#[derive(Debug)]
enum RecordState {
    Mean,
    /// Argmax entry index per (run, channel).
    Max(Vec<usize>),
    Static(ConvKernel),
    Sdr {
        norm: SdrNorm,
        logits: Vec<f64>,
        weights: Vec<f64>,
        estimator: GradTape<SparseConvRecord>,
    },
}

#[derive(Debug, Clone)]
pub struct ReduceGrads {
    /// Gradient with respect to the input features, on the input's active set.
    pub input: SparseVoxelTensor,
    /// Gradient with respect to the operator's kernel, if it has one.
    pub kernel: Option<ConvKernel>,
}

fn scatter(map: &mut DenseBevMap, runs: &[ColumnRun], ys: Vec<Vec<f64>>) {
    for (run, y) in runs.iter().zip(ys) {
        map.pixel_mut(run.i, run.j).copy_from_slice(&y);
    }
}

fn weighted_sum(t: &SparseVoxelTensor, run: &ColumnRun, w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; t.channels()];
    for (n, wk) in run.entries.clone().zip(w) {
        for (yc, xc) in y.iter_mut().zip(t.feature(n)) {
            *yc += wk * xc;
        }
    }
    y
}

fn reduce_impl(t: &SparseVoxelTensor, kind: &ReductionKind, taped: bool) -> Result<(Reduced, Option<ReduceRecord>)> {
    kind.validate(t)?;
    let [nx, ny, nz] = t.geometry().extents;
    let c = t.channels();
    let runs = t.column_runs();
    let mut map = DenseBevMap::zeros(nx, ny, kind.out_channels(c));

    let (weights, state) = match kind {
        ReductionKind::MeanPool => {
            let per_run: Vec<(Vec<f64>, Vec<f64>)> = runs
                .par_iter()
                .map(|run| {
                    let w = vec![1.0 / run.entries.len() as f64; run.entries.len()];
                    let y = weighted_sum(t, run, &w);
                    (y, w)
                })
                .collect();
            let (ys, ws): (Vec<_>, Vec<_>) = per_run.into_iter().unzip();
            scatter(&mut map, &runs, ys);
            let w = ReductionWeights::new(t.geometry().extents, t.coords().to_vec(), 1, ws.concat(), None);
            (Some(w), RecordState::Mean)
        }
        ReductionKind::MaxPool => {
            let argmax: Vec<Vec<usize>> = runs
                .par_iter()
                .map(|run| {
                    (0..c)
                        .map(|ch| {
                            let local = argmax_by_channel(run.entries.clone().map(|n| t.feature(n)[ch]))
                                .expect("occupied column is nonempty");
                            run.entries.start + local
                        })
                        .collect()
                })
                .collect();
            let mut mask = vec![0.0; t.len() * c];
            let ys: Vec<Vec<f64>> = argmax
                .iter()
                .map(|am| {
                    am.iter()
                        .enumerate()
                        .map(|(ch, &n)| {
                            mask[n * c + ch] = 1.0;
                            t.feature(n)[ch]
                        })
                        .collect()
                })
                .collect();
            scatter(&mut map, &runs, ys);
            let w = ReductionWeights::new(t.geometry().extents, t.coords().to_vec(), c, mask, None);
            (Some(w), RecordState::Max(argmax.concat()))
        }
        ReductionKind::FullHeightSparseConv(k) => {
            let ys: Vec<Vec<f64>> = runs
                .par_iter()
                .map(|run| {
                    let cout = k.out_channels();
                    let mut y = k.bias().to_vec();
                    for n in run.entries.clone() {
                        let w = k.tap(t.coords()[n].k as usize);
                        for (ci, &xv) in t.feature(n).iter().enumerate() {
                            for (yo, &wv) in y.iter_mut().zip(&w[ci * cout..(ci + 1) * cout]) {
                                *yo += xv * wv;
                            }
                        }
                    }
                    y
                })
                .collect();
            scatter(&mut map, &runs, ys);
            (None, RecordState::Static(k.clone()))
        }
        ReductionKind::FlattenConv(k) => {
            // dense (Nz * C) column vector times a (Nz * C) x C_out matrix
            let cout = k.out_channels();
            let ys: Vec<Vec<f64>> = runs
                .par_iter()
                .map(|run| {
                    let mut flat = vec![0.0; nz * c];
                    for n in run.entries.clone() {
                        let kk = t.coords()[n].k as usize;
                        flat[kk * c..(kk + 1) * c].copy_from_slice(t.feature(n));
                    }
                    let mut y = k.bias().to_vec();
                    for (row, &xv) in flat.iter().enumerate() {
                        let w = &k.weights()[row * cout..(row + 1) * cout];
                        for (yo, &wv) in y.iter_mut().zip(w) {
                            *yo += xv * wv;
                        }
                    }
                    y
                })
                .collect();
            scatter(&mut map, &runs, ys);
            (None, RecordState::Static(k.clone()))
        }
        ReductionKind::SdrRelu(k) | ReductionKind::SdrSigmoid(k) | ReductionKind::SdrSoftmax(k) => {
            let norm = kind.tag().sdr_norm().expect("sdr kinds carry a norm");
            let (logit_t, estimator) = if taped {
                let (l, tape) = submanifold_conv3d_taped(t, k)?;
                (l, Some(tape))
            } else {
                (submanifold_conv3d(t, k)?, None)
            };
            let logits = logit_t.features();
            let per_run: Vec<(Vec<f64>, Vec<f64>)> = runs
                .par_iter()
                .map(|run| {
                    let w = normalize_column(&logits[run.entries.clone()], norm);
                    let y = weighted_sum(t, run, &w);
                    (y, w)
                })
                .collect();
            let (ys, ws): (Vec<_>, Vec<_>) = per_run.into_iter().unzip();
            scatter(&mut map, &runs, ys);
            let ws = ws.concat();
            let w = ReductionWeights::new(
                t.geometry().extents,
                t.coords().to_vec(),
                1,
                ws.clone(),
                Some(logits.to_vec()),
            );
            let state = match estimator {
                Some(estimator) => RecordState::Sdr {
                    norm,
                    logits: logits.to_vec(),
                    weights: ws,
                    estimator,
                },
                None => RecordState::Mean,
            };
            (Some(w), state)
        }
    };

    let record = taped.then(|| ReduceRecord {
        input: t.clone(),
        runs,
        state,
    });
    Ok((Reduced { map, weights }, record))
}

impl GradTape<ReduceRecord> {
    pub fn backward(&mut self, upstream: &DenseBevMap) -> Result<ReduceGrads> {
        {
            let rec = self.peek()?;
            let e = rec.input.geometry().extents;
            let cout = match &rec.state {
                RecordState::Static(k) => k.out_channels(),
                _ => rec.input.channels(),
            };
            if upstream.extents() != [e[0], e[1]] || upstream.channels() != cout {
                return Err(Error::Shape("reduce backward: upstream does not match the forward output".into()));
            }
        }
        let ReduceRecord { input, runs, state } = self.take()?;
        let c = input.channels();
        let mut gx = vec![0.0; input.features().len()];
        let kernel = match state {
            RecordState::Mean => {
                for run in &runs {
                    let g = upstream.pixel(run.i, run.j);
                    let w = 1.0 / run.entries.len() as f64;
                    for n in run.entries.clone() {
                        for (d, gv) in gx[n * c..(n + 1) * c].iter_mut().zip(g) {
                            *d = w * gv;
                        }
                    }
                }
                None
            }
            RecordState::Max(argmax) => {
                for (r, run) in runs.iter().enumerate() {
                    let g = upstream.pixel(run.i, run.j);
                    for ch in 0..c {
                        gx[argmax[r * c + ch] * c + ch] += g[ch];
                    }
                }
                None
            }
            RecordState::Static(k) => {
                let cout = k.out_channels();
                let mut gk = k.zeros_like();
                for run in &runs {
                    let g = upstream.pixel(run.i, run.j);
                    for (b, gv) in gk.bias_mut().iter_mut().zip(g) {
                        *b += gv;
                    }
                    for n in run.entries.clone() {
                        let tap = input.coords()[n].k as usize;
                        let x = input.feature(n);
                        let w = k.tap(tap);
                        let block = c * cout;
                        let gw = &mut gk.weights_mut()[tap * block..(tap + 1) * block];
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for co in 0..cout {
                                gw[ci * cout + co] += x[ci] * g[co];
                                acc += w[ci * cout + co] * g[co];
                            }
                            gx[n * c + ci] = acc;
                        }
                    }
                }
                Some(gk)
            }
            RecordState::Sdr {
                norm,
                logits,
                weights,
                mut estimator,
            } => {
                let mut glogit = vec![0.0; input.len()];
                for run in &runs {
                    let g = upstream.pixel(run.i, run.j);
                    let r = run.entries.clone();
                    let gw: Vec<f64> = r
                        .clone()
                        .map(|n| input.feature(n).iter().zip(g).map(|(x, gv)| x * gv).sum())
                        .collect();
                    let gl = normalize_column_backward(&logits[r.clone()], &weights[r.clone()], &gw, norm);
                    for (n, gln) in r.zip(gl) {
                        glogit[n] = gln;
                        for (d, gv) in gx[n * c..(n + 1) * c].iter_mut().zip(g) {
                            *d = weights[n] * gv;
                        }
                    }
                }
                let up = input.with_features(1, glogit)?;
                let eg = estimator.backward(&up)?;
                for (d, e) in gx.iter_mut().zip(eg.input.features()) {
                    *d += e;
                }
                Some(eg.kernel)
            }
        };
        Ok(ReduceGrads {
            input: input.with_features(c, gx)?,
            kernel,
        })
    }
}
