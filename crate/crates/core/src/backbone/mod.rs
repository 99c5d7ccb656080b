//! Dual-branch backbone: a 4-stage sparse voxel branch and a 4-stage dense BEV
//! branch joined by per-stage height reductions.
//!
//! Stage `l` of the voxel branch is `x_l = relu(down(relu(subm(x_{l-1}))))`
//! where `x_0 = relu(lift(t0))`. The BEV branch starts from `y_1 =
//! blocks_1(reduce_1(x_0))`; later stages compute
//! `y_l = blocks_l(reduce_l(x_{l-1}) + relu(down2d(y_{l-1})))`, with the
//! addition dropped for stages outside `msr_stages`.

mod forward;
mod io;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use forward::{forward, forward_baseline_pillar, forward_taped, forward_trace, BackboneRecord, ForwardTrace};
pub use io::{load, save, MANIFEST_FILE, PARAMS_FILE};

use crate::error::{Error, Result};
use crate::reduce::{ReductionKind, ReductionTag};
use crate::sparseconv::ConvKernel;

pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Voxel branch plus BEV branch with reductions at every fused stage.
    Mdrnet,
    /// Max-pooled pillars fed straight into the BEV branch.
    Pillar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOrder {
    /// `blocks(reduce + down)`
    BeforeBlocks,
    /// `blocks(down) + reduce`
    AfterBlocks,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    pub input_extents: [usize; 3],
    pub input_channels: usize,
    pub stage_channels: [usize; STAGES],
    pub bev_blocks: [usize; STAGES],
    pub reduction_stage1: ReductionTag,
    pub reduction_stages2to4: ReductionTag,
    pub downsample_stride: [usize; 3],
    /// Stages (from 2, 3, 4) that add the reduced voxel features.
    pub msr_stages: Vec<usize>,
    pub fusion: FusionOrder,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: Variant::Mdrnet,
            input_extents: [32, 32, 16],
            input_channels: 4,
            stage_channels: [16, 32, 64, 128],
            bev_blocks: [1, 2, 2, 2],
            reduction_stage1: ReductionTag::SdrSoftmax,
            reduction_stages2to4: ReductionTag::FullHeightSparseConv,
            downsample_stride: [2, 2, 2],
            msr_stages: vec![2, 3, 4],
            fusion: FusionOrder::BeforeBlocks,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_extents.iter().any(|&n| n == 0) {
            return bad(format!("input extents {:?} must be positive", self.input_extents));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return bad(format!("stage_channels {:?} must all be positive", self.stage_channels));
        }
        let s = self.downsample_stride;
        if s.iter().any(|&v| v == 0) || s[0] != s[1] {
            return bad(format!("downsample_stride {s:?} must be positive with equal x and y"));
        }
        for (n, &st) in self.msr_stages.iter().enumerate() {
            if !(2..=STAGES).contains(&st) || self.msr_stages[..n].contains(&st) {
                return bad(format!("msr_stages {:?} must be distinct values from 2..=4", self.msr_stages));
            }
        }
        Ok(())
    }

    pub fn msr_enabled(&self, stage: usize) -> bool {
        self.variant == Variant::Mdrnet && self.msr_stages.contains(&stage)
    }

    /// Channels of the BEV map produced by stage `l` (1-based).
    pub fn bev_channels(&self, stage: usize) -> usize {
        self.stage_channels[stage - 1]
    }

    /// Channels of voxel tensor `x_l` (`l` in 0..=4).
    pub fn voxel_channels(&self, l: usize) -> usize {
        self.stage_channels[l.min(STAGES - 1)]
    }

    /// Extents of voxel tensor `x_l`.
    pub fn voxel_extents(&self, l: usize) -> [usize; 3] {
        let mut e = self.input_extents;
        for _ in 0..l {
            e = std::array::from_fn(|a| e[a].div_ceil(self.downsample_stride[a]));
        }
        e
    }

    /// `[width, height]` of the BEV map at stage `l` (1-based).
    pub fn bev_extents(&self, stage: usize) -> [usize; 2] {
        let e = self.voxel_extents(stage - 1);
        [e[0], e[1]]
    }

    fn reduction_tag(&self, stage: usize) -> Option<ReductionTag> {
        match (self.variant, stage) {
            (Variant::Pillar, 1) => Some(ReductionTag::MaxPool),
            (Variant::Pillar, _) => None,
            (Variant::Mdrnet, 1) => Some(self.reduction_stage1),
            (Variant::Mdrnet, l) => self.msr_enabled(l).then_some(self.reduction_stages2to4),
        }
    }
}

/// Default configuration with the voxel-to-BEV addition enabled only at the
/// given stages. An empty set leaves only the stage-1 reduction.
pub fn msr_ablation_config(stages_enabled: &[usize]) -> Result<BackboneConfig> {
    let mut msr: Vec<usize> = stages_enabled.to_vec();
    msr.sort_unstable();
    let cfg = BackboneConfig {
        msr_stages: msr,
        ..BackboneConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn pillar_config() -> BackboneConfig {
    BackboneConfig {
        variant: Variant::Pillar,
        msr_stages: Vec::new(),
        ..BackboneConfig::default()
    }
}

/// The five configurations of the ablation ladder, from the pillar baseline
/// to the full model, sharing every other setting with `base`.
pub fn ablation_ladder(base: &BackboneConfig) -> Vec<(&'static str, BackboneConfig)> {
    let with = |variant, msr: &[usize]| BackboneConfig {
        variant,
        msr_stages: msr.to_vec(),
        ..base.clone()
    };
    vec![
        ("pillar", with(Variant::Pillar, &[])),
        ("sdr", with(Variant::Mdrnet, &[])),
        ("sdr+msr2", with(Variant::Mdrnet, &[2])),
        ("sdr+msr23", with(Variant::Mdrnet, &[2, 3])),
        ("mdrnet", with(Variant::Mdrnet, &[2, 3, 4])),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct VoxelStage {
    subm: ConvKernel,
    down: ConvKernel,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BevStage {
    down: Option<ConvKernel>,
    blocks: Vec<[ConvKernel; 2]>,
}

/// All parameters of a built backbone. The same type holds gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneState {
    config: BackboneConfig,
    lift: Option<ConvKernel>,
    stem: Option<ConvKernel>,
    voxel: Vec<VoxelStage>,
    reductions: Vec<Option<ReductionKind>>,
    bev: Vec<BevStage>,
}

// Each kernel draws from its own ChaCha stream so configurations that share a
// parameter also share its initial values.
mod stream {
    pub const LIFT: u64 = 1;
    pub const STEM: u64 = 2;
    pub fn voxel(l: usize, down: bool) -> u64 {
        10 + 2 * l as u64 + down as u64
    }
    pub fn reduce(stage: usize) -> u64 {
        30 + stage as u64
    }
    pub fn bev_down(stage: usize) -> u64 {
        40 + stage as u64
    }
    pub fn block(stage: usize, b: usize, conv: usize) -> u64 {
        1000 + 100 * stage as u64 + 2 * b as u64 + conv as u64
    }
}

fn reduction_kernel_shape(tag: ReductionTag, nz: usize) -> Option<Vec<usize>> {
    match tag {
        ReductionTag::MeanPool | ReductionTag::MaxPool => None,
        ReductionTag::FlattenConv | ReductionTag::FullHeightSparseConv => Some(vec![1, 1, nz]),
        _ => Some(vec![3, 3, 3]),
    }
}

impl BackboneState {
    /// Deterministically initialized parameters for `cfg`.
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        Self::assemble(cfg, &mut |stream, spatial, cin, cout| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(stream);
            ConvKernel::init_uniform(spatial, cin, cout, &mut rng)
        })
    }

    /// All-zero parameters with the shapes `cfg` implies.
    pub fn zeros(cfg: &BackboneConfig) -> Result<Self> {
        Self::assemble(cfg, &mut |_, spatial, cin, cout| ConvKernel::zeros(spatial, cin, cout))
    }

    fn assemble(
        cfg: &BackboneConfig,
        make: &mut dyn FnMut(u64, &[usize], usize, usize) -> Result<ConvKernel>,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.stage_channels;
        let (lift, stem, voxel) = match cfg.variant {
            Variant::Mdrnet => {
                let lift = make(stream::LIFT, &[1, 1, 1], cfg.input_channels, c[0])?;
                let mut voxel = Vec::with_capacity(STAGES);
                for l in 0..STAGES {
                    let (cin, cout) = (cfg.voxel_channels(l), cfg.voxel_channels(l + 1));
                    voxel.push(VoxelStage {
                        subm: make(stream::voxel(l, false), &[3, 3, 3], cin, cin)?,
                        down: make(stream::voxel(l, true), &cfg.downsample_stride, cin, cout)?,
                    });
                }
                (Some(lift), None, voxel)
            }
            Variant::Pillar => (None, Some(make(stream::STEM, &[1, 1], cfg.input_channels, c[0])?), Vec::new()),
        };
        let mut reductions = Vec::with_capacity(STAGES);
        for stage in 1..=STAGES {
            let kind = match cfg.reduction_tag(stage) {
                None => None,
                Some(tag) => {
                    let ch = cfg.voxel_channels(stage - 1);
                    let nz = cfg.voxel_extents(stage - 1)[2];
                    let kernel = match reduction_kernel_shape(tag, nz) {
                        None => None,
                        Some(shape) => {
                            let cout = if tag.sdr_norm().is_some() { 1 } else { ch };
                            Some(make(stream::reduce(stage), &shape, ch, cout)?)
                        }
                    };
                    Some(ReductionKind::from_tag(tag, kernel)?)
                }
            };
            reductions.push(kind);
        }
        let mut bev = Vec::with_capacity(STAGES);
        for stage in 1..=STAGES {
            let ch = cfg.bev_channels(stage);
            let down = if stage == 1 {
                None
            } else {
                Some(make(stream::bev_down(stage), &[3, 3], cfg.bev_channels(stage - 1), ch)?)
            };
            let blocks = (0..cfg.bev_blocks[stage - 1])
                .map(|b| {
                    Ok([
                        make(stream::block(stage, b, 0), &[3, 3], ch, ch)?,
                        make(stream::block(stage, b, 1), &[3, 3], ch, ch)?,
                    ])
                })
                .collect::<Result<Vec<_>>>()?;
            bev.push(BevStage { down, blocks });
        }
        Ok(BackboneState {
            config: cfg.clone(),
            lift,
            stem,
            voxel,
            reductions,
            bev,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Same shapes, all parameters zero.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config).expect("config already validated")
    }

    /// Every parameter kernel with a stable name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &ConvKernel)> {
        let mut out = Vec::new();
        if let Some(k) = &self.lift {
            out.push(("lift".to_string(), k));
        }
        if let Some(k) = &self.stem {
            out.push(("stem".to_string(), k));
        }
        for (l, v) in self.voxel.iter().enumerate() {
            out.push((format!("voxel{}.subm", l + 1), &v.subm));
            out.push((format!("voxel{}.down", l + 1), &v.down));
        }
        for (s, r) in self.reductions.iter().enumerate() {
            if let Some(k) = r.as_ref().and_then(ReductionKind::kernel) {
                out.push((format!("reduce{}", s + 1), k));
            }
        }
        for (s, b) in self.bev.iter().enumerate() {
            if let Some(k) = &b.down {
                out.push((format!("bev{}.down", s + 1), k));
            }
            for (n, [k1, k2]) in b.blocks.iter().enumerate() {
                out.push((format!("bev{}.block{}.conv1", s + 1, n + 1), k1));
                out.push((format!("bev{}.block{}.conv2", s + 1, n + 1), k2));
            }
        }
        out
    }

    /// Mutable counterpart of [`named_params`](Self::named_params), same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ConvKernel)> {
        let mut out = Vec::new();
        if let Some(k) = &mut self.lift {
            out.push(("lift".to_string(), k));
        }
        if let Some(k) = &mut self.stem {
            out.push(("stem".to_string(), k));
        }
        for (l, v) in self.voxel.iter_mut().enumerate() {
            out.push((format!("voxel{}.subm", l + 1), &mut v.subm));
            out.push((format!("voxel{}.down", l + 1), &mut v.down));
        }
        for (s, r) in self.reductions.iter_mut().enumerate() {
            if let Some(k) = r.as_mut().and_then(ReductionKind::kernel_mut) {
                out.push((format!("reduce{}", s + 1), k));
            }
        }
        for (s, b) in self.bev.iter_mut().enumerate() {
            if let Some(k) = &mut b.down {
                out.push((format!("bev{}.down", s + 1), k));
            }
            for (n, [k1, k2]) in b.blocks.iter_mut().enumerate() {
                out.push((format!("bev{}.block{}.conv1", s + 1, n + 1), k1));
                out.push((format!("bev{}.block{}.conv2", s + 1, n + 1), k2));
            }
        }
        out
    }

    pub fn param(&self, name: &str) -> Option<&ConvKernel> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, k)| k)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut ConvKernel> {
        self.named_params_mut().into_iter().find(|(n, _)| n == name).map(|(_, k)| k)
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, k)| k.num_params()).sum()
    }

    /// Concatenated kernel blobs in parameter order.
    pub fn to_blob(&self) -> Vec<u8> {
        self.named_params().iter().flat_map(|(_, k)| k.to_blob()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, k)| k.is_finite())
    }

    /// Number of voxel stages, each one submanifold conv plus one strided conv.
    pub fn voxel_stage_count(&self) -> usize {
        self.voxel.len()
    }

    /// `(submanifold kernel, downsampling kernel)` of voxel stage `l` (1-based).
    pub fn voxel_stage(&self, stage: usize) -> Option<(&ConvKernel, &ConvKernel)> {
        self.voxel.get(stage.checked_sub(1)?).map(|v| (&v.subm, &v.down))
    }

    /// Reduction feeding BEV stage `l` (1-based), if that stage has one.
    pub fn reduction(&self, stage: usize) -> Option<&ReductionKind> {
        self.reductions.get(stage.checked_sub(1)?)?.as_ref()
    }

    pub fn bev_block_count(&self, stage: usize) -> usize {
        stage
            .checked_sub(1)
            .and_then(|s| self.bev.get(s))
            .map_or(0, |b| b.blocks.len())
    }

    pub fn total_bev_blocks(&self) -> usize {
        self.bev.iter().map(|b| b.blocks.len()).sum()
    }

    /// `self += alpha * other`, parameter by parameter.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        let theirs = other.named_params();
        let mut mine = self.named_params_mut();
        if mine.len() != theirs.len() {
            return Err(Error::Shape("axpy: parameter sets differ".into()));
        }
        for ((_, a), (_, b)) in mine.iter_mut().zip(&theirs) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }
}

/// Convenience wrapper matching the free-function style of the other modules.
pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<BackboneState> {
    BackboneState::build(cfg, seed)
}
