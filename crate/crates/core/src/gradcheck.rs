//! Central-difference gradient checks for every differentiable operator.
//!
//! Each check draws a random input and a random upstream map `u`, takes the
//! scalar loss `L = sum(u * op(x))`, and compares the hand-written backward
//! pass against `(L(p + h) - L(p - h)) / 2h` for every parameter and input
//! entry. Relu and max-pool make the loss piecewise smooth, so an entry whose
//! difference at `h = 1e-4` straddles a kink is retried with smaller steps; a
//! wrong gradient disagrees at every step.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{self, BackboneConfig, BackboneState, Variant};
use crate::error::{Error, Result};
use crate::ingest::random_sparse;
use crate::reduce::{reduce, reduce_taped, ReductionKind, ReductionTag};
use crate::sparseconv::{
    conv2d, conv2d_taped, residual_block2d, residual_block2d_taped, strided_sparse_conv3d,
    strided_sparse_conv3d_taped, submanifold_conv3d, submanifold_conv3d_taped, ConvKernel, Padding,
};
use crate::voxgrid::{DenseBevMap, GridGeometry, SparseVoxelTensor};

/// Step schedule; the first step that agrees wins.
pub const FD_STEPS: [f64; 3] = [1e-4, 1e-5, 1e-6];
pub const PER_OP_THRESHOLD: f64 = 1e-5;
pub const END_TO_END_THRESHOLD: f64 = 1e-4;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SuiteSize {
    #[default]
    Tiny,
    Small,
}

impl std::str::FromStr for SuiteSize {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(SuiteSize::Tiny),
            "small" => Ok(SuiteSize::Small),
            _ => Err(Error::Usage(format!("unknown size `{s}` (expected tiny or small)"))),
        }
    }
}

/// Deliberate corruption of the analytic gradients, used to prove the suite
/// catches broken backward passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    FlipBiasGradient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuiteConfig {
    pub seed: u64,
    pub size: SuiteSize,
    pub fault: Option<Fault>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckRow {
    pub op: String,
    pub entries: usize,
    /// Entries that needed a step below the first.
    pub retried: usize,
    pub worst_rel_error: f64,
    pub threshold: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.threshold
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub rows: Vec<CheckRow>,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(CheckRow::passed)
    }

    pub fn failures(&self) -> Vec<&CheckRow> {
        self.rows.iter().filter(|r| !r.passed()).collect()
    }
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<32} {:>8} {:>8} {:>12} {:>10}  status",
            "op", "entries", "retried", "worst_rel", "threshold"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<32} {:>8} {:>8} {:>12.3e} {:>10.0e}  {}",
                r.op,
                r.entries,
                r.retried,
                r.worst_rel_error,
                r.threshold,
                if r.passed() { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Worst relative error between `analytic[n]` and the central difference of
/// `eval(n, delta)` (the loss with entry `n` shifted by `delta`), plus the
/// number of entries that needed a smaller step. An entry stops retrying once
/// it is within `threshold / 100`.
pub fn fd_worst(
    analytic: &[f64],
    threshold: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<(f64, usize)> {
    let mut worst = 0.0f64;
    let mut retried = 0;
    for (n, &a) in analytic.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (attempt, h) in FD_STEPS.iter().enumerate() {
            let numeric = (eval(n, *h)? - eval(n, -*h)?) / (2.0 * h);
            best = best.min(rel_error(a, numeric));
            if best < threshold * 1e-2 {
                retried += (attempt > 0) as usize;
                break;
            }
        }
        worst = worst.max(best);
    }
    Ok((worst, retried))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn kernel_flat(k: &ConvKernel) -> Vec<f64> {
    k.weights().iter().chain(k.bias()).copied().collect()
}

fn perturb_kernel(k: &ConvKernel, n: usize, delta: f64) -> ConvKernel {
    let mut p = k.clone();
    let nw = p.weights().len();
    if n < nw {
        p.weights_mut()[n] += delta;
    } else {
        p.bias_mut()[n - nw] += delta;
    }
    p
}

fn perturb_sparse(t: &SparseVoxelTensor, n: usize, delta: f64) -> SparseVoxelTensor {
    let mut p = t.clone();
    p.features_mut()[n] += delta;
    p
}

fn perturb_map(m: &DenseBevMap, n: usize, delta: f64) -> DenseBevMap {
    let mut p = m.clone();
    p.values_mut()[n] += delta;
    p
}

/// Analytic kernel gradient flattened as weights then bias, with the fault applied.
fn kernel_grad(g: &ConvKernel, fault: Option<Fault>) -> Vec<f64> {
    let mut v = kernel_flat(g);
    if fault == Some(Fault::FlipBiasGradient) {
        let nw = g.weights().len();
        for b in &mut v[nw..] {
            *b = -*b;
        }
    }
    v
}

fn uniform(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_map(w: usize, h: usize, c: usize, rng: &mut ChaCha8Rng) -> DenseBevMap {
    DenseBevMap::from_values(w, h, c, uniform(w * h * c, rng)).expect("sized buffer")
}

struct Suite {
    rng: ChaCha8Rng,
    fault: Option<Fault>,
    rows: Vec<CheckRow>,
}

/// Running totals for one row.
struct Row {
    threshold: f64,
    entries: usize,
    retried: usize,
    worst: f64,
}

impl Row {
    fn new(threshold: f64) -> Self {
        Row {
            threshold,
            entries: 0,
            retried: 0,
            worst: 0.0,
        }
    }

    fn check(&mut self, analytic: &[f64], eval: impl FnMut(usize, f64) -> Result<f64>) -> Result<()> {
        let (w, r) = fd_worst(analytic, self.threshold, eval)?;
        self.entries += analytic.len();
        self.retried += r;
        self.worst = self.worst.max(w);
        Ok(())
    }
}

impl Suite {
    fn push(&mut self, op: &str, row: Row) {
        log::debug!("{op}: {} entries, worst rel error {:.3e}", row.entries, row.worst);
        self.rows.push(CheckRow {
            op: op.to_string(),
            entries: row.entries,
            retried: row.retried,
            worst_rel_error: row.worst,
            threshold: row.threshold,
        });
    }

    fn sparse_conv(&mut self, name: &str, t: &SparseVoxelTensor, k: &ConvKernel, stride: Option<[usize; 3]>) -> Result<()> {
        let op = |t: &SparseVoxelTensor, k: &ConvKernel| match stride {
            None => submanifold_conv3d(t, k),
            Some(s) => strided_sparse_conv3d(t, k, s),
        };
        let (out, mut tape) = match stride {
            None => submanifold_conv3d_taped(t, k)?,
            Some(s) => strided_sparse_conv3d_taped(t, k, s)?,
        };
        let u = uniform(out.features().len(), &mut self.rng);
        let g = tape.backward(&out.with_features(out.channels(), u.clone())?)?;
        let loss = |t: &SparseVoxelTensor, k: &ConvKernel| op(t, k).map(|o| dot(o.features(), &u));
        let mut row = Row::new(PER_OP_THRESHOLD);
        row.check(&kernel_grad(&g.kernel, self.fault), |n, d| loss(t, &perturb_kernel(k, n, d)))?;
        row.check(g.input.features(), |n, d| loss(&perturb_sparse(t, n, d), k))?;
        self.push(name, row);
        Ok(())
    }

    fn conv2d(&mut self, name: &str, m: &DenseBevMap, k: &ConvKernel, stride: usize, pad: Padding) -> Result<()> {
        let (out, mut tape) = conv2d_taped(m, k, stride, pad)?;
        let u = random_map(out.width(), out.height(), out.channels(), &mut self.rng);
        let g = tape.backward(&u)?;
        let loss = |m: &DenseBevMap, k: &ConvKernel| conv2d(m, k, stride, pad).map(|o| dot(o.values(), u.values()));
        let mut row = Row::new(PER_OP_THRESHOLD);
        row.check(&kernel_grad(&g.kernel, self.fault), |n, d| loss(m, &perturb_kernel(k, n, d)))?;
        row.check(g.input.values(), |n, d| loss(&perturb_map(m, n, d), k))?;
        self.push(name, row);
        Ok(())
    }

    fn residual(&mut self, m: &DenseBevMap, k1: &ConvKernel, k2: &ConvKernel) -> Result<()> {
        let (out, mut tape) = residual_block2d_taped(m, k1, k2)?;
        let u = random_map(out.width(), out.height(), out.channels(), &mut self.rng);
        let g = tape.backward(&u)?;
        let loss = |m: &DenseBevMap, k1: &ConvKernel, k2: &ConvKernel| {
            residual_block2d(m, k1, k2).map(|o| dot(o.values(), u.values()))
        };
        let mut row = Row::new(PER_OP_THRESHOLD);
        row.check(&kernel_grad(&g.k1, self.fault), |n, d| loss(m, &perturb_kernel(k1, n, d), k2))?;
        row.check(&kernel_grad(&g.k2, self.fault), |n, d| loss(m, k1, &perturb_kernel(k2, n, d)))?;
        row.check(g.input.values(), |n, d| loss(&perturb_map(m, n, d), k1, k2))?;
        self.push("residual_block2d", row);
        Ok(())
    }

    fn reduction(&mut self, t: &SparseVoxelTensor, kind: &ReductionKind) -> Result<()> {
        let (out, mut tape) = reduce_taped(t, kind)?;
        let u = random_map(out.map.width(), out.map.height(), out.map.channels(), &mut self.rng);
        let g = tape.backward(&u)?;
        let loss = |t: &SparseVoxelTensor, kind: &ReductionKind| reduce(t, kind).map(|r| dot(r.map.values(), u.values()));
        let mut row = Row::new(PER_OP_THRESHOLD);
        row.check(g.input.features(), |n, d| loss(&perturb_sparse(t, n, d), kind))?;
        if let (Some(k), Some(gk)) = (kind.kernel(), &g.kernel) {
            row.check(&kernel_grad(gk, self.fault), |n, d| {
                let mut p = kind.clone();
                *p.kernel_mut().expect("has kernel") = perturb_kernel(k, n, d);
                loss(t, &p)
            })?;
        }
        self.push(&format!("reduce_{}", kind.tag().name()), row);
        Ok(())
    }

    fn backbone(&mut self, name: &str, state: &BackboneState, t0: &SparseVoxelTensor) -> Result<()> {
        let (trace, mut tape) = backbone::forward_taped(state, t0)?;
        let out = trace.output();
        // loss is the plain sum of the final map
        let ones = DenseBevMap::from_values(out.width(), out.height(), out.channels(), vec![1.0; out.values().len()])?;
        let grads = tape.backward(&ones)?;
        let loss = |s: &BackboneState| backbone::forward(s, t0).map(|o| o.values().iter().sum::<f64>());
        let mut row = Row::new(END_TO_END_THRESHOLD);
        for (pname, gk) in grads.named_params() {
            let k = state.param(&pname).expect("same parameter set");
            row.check(&kernel_grad(gk, self.fault), |n, d| {
                let mut s = state.clone();
                *s.param_mut(&pname).expect("same parameter set") = perturb_kernel(k, n, d);
                loss(&s)
            })?;
        }
        self.push(name, row);
        Ok(())
    }
}

/// Input tensor for the end-to-end check: an 8x8x8 grid with 10 active voxels.
pub fn end_to_end_input(seed: u64) -> Result<SparseVoxelTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    random_sparse(GridGeometry::from_extents([8, 8, 8])?, 4, 10.0 / 512.0, &mut rng)
}

pub fn end_to_end_config(variant: Variant) -> BackboneConfig {
    BackboneConfig {
        variant,
        input_extents: [8, 8, 8],
        stage_channels: [2, 4, 4, 4],
        msr_stages: if variant == Variant::Mdrnet { vec![2, 3, 4] } else { Vec::new() },
        ..BackboneConfig::default()
    }
}

/// Runs every check. Deterministic for a fixed configuration.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteReport> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        fault: cfg.fault,
        rows: Vec::new(),
    };
    let (n, c) = match cfg.size {
        SuiteSize::Tiny => (4, 2),
        SuiteSize::Small => (6, 3),
    };
    let g = GridGeometry::from_extents([n, n, n])?;

    let t = random_sparse(g, c, 0.3, &mut s.rng)?;
    let k = ConvKernel::init_uniform(&[3, 3, 3], c, c + 1, &mut s.rng)?;
    s.sparse_conv("submanifold_conv3d", &t, &k, None)?;
    let k = ConvKernel::init_uniform(&[2, 2, 2], c, c + 1, &mut s.rng)?;
    s.sparse_conv("strided_sparse_conv3d", &t, &k, Some([2, 2, 2]))?;
    let k = ConvKernel::init_uniform(&[3, 3, 3], c, c, &mut s.rng)?;
    s.sparse_conv("strided_sparse_conv3d_k3", &t, &k, Some([2, 2, 2]))?;

    let m = random_map(n + 1, n, c, &mut s.rng);
    let k = ConvKernel::init_uniform(&[3, 3], c, c + 1, &mut s.rng)?;
    s.conv2d("conv2d", &m, &k, 1, Padding::Same)?;
    s.conv2d("conv2d_stride2", &m, &k, 2, Padding::Explicit(1))?;
    let k1 = ConvKernel::init_uniform(&[3, 3], c, c, &mut s.rng)?;
    let k2 = ConvKernel::init_uniform(&[3, 3], c, c, &mut s.rng)?;
    s.residual(&m, &k1, &k2)?;

    let t = random_sparse(g, c, 0.5, &mut s.rng)?;
    for tag in ReductionTag::ALL {
        let mut kind = ReductionKind::init(tag, c, n, &mut s.rng)?;
        if tag.sdr_norm().is_some() {
            // sharper logits so the normalization is far from uniform
            let k = kind.kernel_mut().expect("estimator");
            k.weights_mut().iter_mut().for_each(|w| *w *= 4.0);
        }
        s.reduction(&t, &kind)?;
    }

    let t0 = end_to_end_input(cfg.seed)?;
    for (name, variant) in [("backbone_end_to_end", Variant::Mdrnet), ("backbone_pillar_end_to_end", Variant::Pillar)] {
        let state = BackboneState::build(&end_to_end_config(variant), cfg.seed)?;
        s.backbone(name, &state, &t0)?;
    }
    Ok(SuiteReport { rows: s.rows })
}
