use super::{BackboneState, FusionOrder, Variant, STAGES};
use crate::error::{Error, Result};
use crate::reduce::{reduce_taped, ReduceRecord, ReductionWeights};
use crate::sparseconv::{
    conv2d_taped, relu_taped, residual_block2d_taped, strided_sparse_conv3d_taped, submanifold_conv3d_taped,
    Conv2dRecord, ConvKernel, GradTape, Padding, ReluRecord, ResidualRecord, SparseConvRecord,
};
use crate::voxgrid::{DenseBevMap, SparseVoxelTensor};

/// Intermediate values of one forward pass. Stage vectors are indexed by
/// `stage - 1`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `x_0 ..= x_4` (empty for the pillar variant).
    pub voxels: Vec<SparseVoxelTensor>,
    /// Reduced voxel features entering each stage, if any.
    pub reduced: Vec<Option<DenseBevMap>>,
    /// `relu(down2d(y_{l-1}))`, absent at stage 1.
    pub downsampled: Vec<Option<DenseBevMap>>,
    /// Input of each stage's residual blocks.
    pub block_inputs: Vec<DenseBevMap>,
    /// Stage outputs `y_1 ..= y_4`.
    pub bev: Vec<DenseBevMap>,
    /// Per-voxel weights of the stage-1 reduction, for kinds that have them.
    pub stage1_weights: Option<ReductionWeights>,
}

impl ForwardTrace {
    pub fn output(&self) -> &DenseBevMap {
        self.bev.last().expect("four stages")
    }
}

#[derive(Debug)]
struct VoxelTape {
    subm: GradTape<SparseConvRecord>,
    relu1: GradTape<ReluRecord>,
    down: GradTape<SparseConvRecord>,
    relu2: GradTape<ReluRecord>,
}

#[derive(Debug)]
struct StageTape {
    reduce: Option<GradTape<ReduceRecord>>,
    stem: Option<(GradTape<Conv2dRecord>, GradTape<ReluRecord>)>,
    down: Option<(GradTape<Conv2dRecord>, GradTape<ReluRecord>)>,
    blocks: Vec<GradTape<ResidualRecord>>,
}

/// Saved state of a whole backbone forward pass.
#[derive(Debug)]
pub struct BackboneRecord {
    grads: BackboneState,
    lift: Option<(GradTape<SparseConvRecord>, GradTape<ReluRecord>)>,
    voxel: Vec<VoxelTape>,
    voxels: Vec<SparseVoxelTensor>,
    stages: Vec<StageTape>,
    output_shape: ([usize; 2], usize),
}

fn relu_sparse(t: SparseVoxelTensor) -> Result<(SparseVoxelTensor, GradTape<ReluRecord>)> {
    let (v, tape) = relu_taped(t.features());
    Ok((t.with_features(t.channels(), v)?, tape))
}

fn relu_map(m: DenseBevMap) -> Result<(DenseBevMap, GradTape<ReluRecord>)> {
    let (v, tape) = relu_taped(m.values());
    Ok((DenseBevMap::from_values(m.width(), m.height(), m.channels(), v)?, tape))
}

fn map_like(m: &DenseBevMap, values: Vec<f64>) -> Result<DenseBevMap> {
    DenseBevMap::from_values(m.width(), m.height(), m.channels(), values)
}

fn run(state: &BackboneState, t0: &SparseVoxelTensor) -> Result<(ForwardTrace, BackboneRecord)> {
    let cfg = &state.config;
    if t0.geometry().extents != cfg.input_extents || t0.channels() != cfg.input_channels {
        return Err(Error::Shape(format!(
            "backbone input is {:?} x {} channels, config expects {:?} x {}",
            t0.geometry().extents,
            t0.channels(),
            cfg.input_extents,
            cfg.input_channels
        )));
    }

    let mut voxels = Vec::new();
    let mut voxel_tapes = Vec::new();
    let mut lift_tape = None;
    if let Some(lift) = &state.lift {
        let (h, conv) = submanifold_conv3d_taped(t0, lift)?;
        let (x0, relu) = relu_sparse(h)?;
        lift_tape = Some((conv, relu));
        voxels.push(x0);
        for v in &state.voxel {
            let x = voxels.last().expect("x0 pushed");
            let (h, subm) = submanifold_conv3d_taped(x, &v.subm)?;
            let (a, relu1) = relu_sparse(h)?;
            let (d, down) = strided_sparse_conv3d_taped(&a, &v.down, cfg.downsample_stride)?;
            let (x, relu2) = relu_sparse(d)?;
            voxel_tapes.push(VoxelTape {
                subm,
                relu1,
                down,
                relu2,
            });
            voxels.push(x);
        }
    }

    let mut trace = ForwardTrace {
        voxels: Vec::new(),
        reduced: Vec::with_capacity(STAGES),
        downsampled: Vec::with_capacity(STAGES),
        block_inputs: Vec::with_capacity(STAGES),
        bev: Vec::with_capacity(STAGES),
        stage1_weights: None,
    };
    let mut stage_tapes = Vec::with_capacity(STAGES);
    for s in 0..STAGES {
        let stage = s + 1;
        let mut tape = StageTape {
            reduce: None,
            stem: None,
            down: None,
            blocks: Vec::new(),
        };
        let reduced = match &state.reductions[s] {
            None => None,
            Some(kind) => {
                let source = match cfg.variant {
                    Variant::Mdrnet => &voxels[s],
                    Variant::Pillar => t0,
                };
                let (r, rt) = reduce_taped(source, kind)?;
                tape.reduce = Some(rt);
                if s == 0 {
                    trace.stage1_weights = r.weights;
                }
                Some(r.map)
            }
        };
        let down = match &state.bev[s].down {
            None => None,
            Some(k) => {
                let prev = trace.bev.last().expect("stage > 1");
                let (h, conv) = conv2d_taped(prev, k, cfg.downsample_stride[0], Padding::Explicit(1))?;
                let (d, relu) = relu_map(h)?;
                tape.down = Some((conv, relu));
                Some(d)
            }
        };
        if let (Some(r), Some(d)) = (&reduced, &down) {
            r.check_same_shape(d, &format!("stage {stage} fusion"))?;
        }
        let block_input = match (&state.stem, s) {
            (Some(stem), 0) => {
                let pooled = reduced.as_ref().expect("pillar stage 1 pools");
                let (h, conv) = conv2d_taped(pooled, stem, 1, Padding::Same)?;
                let (a, relu) = relu_map(h)?;
                tape.stem = Some((conv, relu));
                a
            }
            _ => match (&reduced, &down, cfg.fusion) {
                (Some(r), None, _) => r.clone(),
                (None, Some(d), _) | (Some(_), Some(d), FusionOrder::AfterBlocks) => d.clone(),
                (Some(r), Some(d), FusionOrder::BeforeBlocks) => r.add(d)?,
                (None, None, _) => unreachable!("stage 1 always reduces"),
            },
        };
        let mut y = block_input.clone();
        for [k1, k2] in &state.bev[s].blocks {
            let (out, bt) = residual_block2d_taped(&y, k1, k2)?;
            tape.blocks.push(bt);
            y = out;
        }
        if cfg.fusion == FusionOrder::AfterBlocks && s > 0 {
            if let Some(r) = &reduced {
                y = y.add(r)?;
            }
        }
        trace.reduced.push(reduced);
        trace.downsampled.push(down);
        trace.block_inputs.push(block_input);
        trace.bev.push(y);
        stage_tapes.push(tape);
    }

    let out = trace.output();
    let record = BackboneRecord {
        grads: state.zeros_like(),
        lift: lift_tape,
        voxel: voxel_tapes,
        voxels: voxels.clone(),
        stages: stage_tapes,
        output_shape: (out.extents(), out.channels()),
    };
    trace.voxels = voxels;
    Ok((trace, record))
}

/// Stage-4 BEV map for `t0`.
pub fn forward(state: &BackboneState, t0: &SparseVoxelTensor) -> Result<DenseBevMap> {
    forward_trace(state, t0).map(|t| t.bev.into_iter().last().expect("four stages"))
}

pub fn forward_trace(state: &BackboneState, t0: &SparseVoxelTensor) -> Result<ForwardTrace> {
    run(state, t0).map(|(t, _)| t)
}

/// Forward pass of a pillar-variant state.
pub fn forward_baseline_pillar(state: &BackboneState, t0: &SparseVoxelTensor) -> Result<DenseBevMap> {
    if state.config.variant != Variant::Pillar {
        return Err(Error::Usage("forward_baseline_pillar needs a pillar-variant state".into()));
    }
    forward(state, t0)
}

pub fn forward_taped(
    state: &BackboneState,
    t0: &SparseVoxelTensor,
) -> Result<(ForwardTrace, GradTape<BackboneRecord>)> {
    let (trace, rec) = run(state, t0)?;
    Ok((trace, GradTape::record("backbone", rec)))
}

fn add_into(acc: &mut SparseVoxelTensor, g: &SparseVoxelTensor) {
    for (a, b) in acc.features_mut().iter_mut().zip(g.features()) {
        *a += b;
    }
}

fn blocks_backward(
    blocks: &mut [GradTape<ResidualRecord>],
    grads: &mut [[ConvKernel; 2]],
    mut g: DenseBevMap,
) -> Result<DenseBevMap> {
    for (n, bt) in blocks.iter_mut().enumerate().rev() {
        let bg = bt.backward(&g)?;
        grads[n] = [bg.k1, bg.k2];
        g = bg.input;
    }
    Ok(g)
}

impl GradTape<BackboneRecord> {
    /// Gradients of `sum(upstream * output)` with respect to every parameter,
    /// returned as a state of the same shape.
    pub fn backward(&mut self, upstream: &DenseBevMap) -> Result<BackboneState> {
        {
            let rec = self.peek()?;
            if (upstream.extents(), upstream.channels()) != rec.output_shape {
                return Err(Error::Shape("backbone backward: upstream shape mismatch".into()));
            }
        }
        let mut rec = self.take()?;
        let fusion = rec.grads.config.fusion;
        let variant = rec.grads.config.variant;
        let mut gx: Vec<SparseVoxelTensor> = rec.voxels.iter().map(SparseVoxelTensor::zeros_like).collect();
        let mut g = upstream.clone();

        for s in (0..STAGES).rev() {
            let tape = &mut rec.stages[s];
            let bev = &mut rec.grads.bev[s];
            let after = fusion == FusionOrder::AfterBlocks && s > 0;
            let g_out = g;
            let g_in = blocks_backward(&mut tape.blocks, &mut bev.blocks, g_out.clone())?;
            let g_reduce = if after { g_out } else { g_in.clone() };

            let g_reduce = match tape.stem.as_mut() {
                Some((conv, relu)) => {
                    let ga = map_like(&g_in, relu.backward(g_in.values())?)?;
                    let cg = conv.backward(&ga)?;
                    rec.grads.stem = Some(cg.kernel);
                    cg.input
                }
                None => g_reduce,
            };
            if let Some(rt) = tape.reduce.as_mut() {
                let rg = rt.backward(&g_reduce)?;
                if let (Some(kg), Some(kind)) = (rg.kernel, rec.grads.reductions[s].as_mut()) {
                    if let Some(k) = kind.kernel_mut() {
                        *k = kg;
                    }
                }
                if variant == Variant::Mdrnet {
                    add_into(&mut gx[s], &rg.input);
                }
            }
            g = match tape.down.as_mut() {
                Some((conv, relu)) => {
                    let gd = map_like(&g_in, relu.backward(g_in.values())?)?;
                    let cg = conv.backward(&gd)?;
                    bev.down = Some(cg.kernel);
                    cg.input
                }
                None => g_in,
            };
        }

        for l in (0..rec.voxel.len()).rev() {
            let vt = &mut rec.voxel[l];
            let g_next = &gx[l + 1];
            let gd = g_next.with_features(g_next.channels(), vt.relu2.backward(g_next.features())?)?;
            let dg = vt.down.backward(&gd)?;
            let ga = dg.input.with_features(dg.input.channels(), vt.relu1.backward(dg.input.features())?)?;
            let sg = vt.subm.backward(&ga)?;
            rec.grads.voxel[l].down = dg.kernel;
            rec.grads.voxel[l].subm = sg.kernel;
            add_into(&mut gx[l], &sg.input);
        }
        if let Some((conv, relu)) = rec.lift.as_mut() {
            let g0 = &gx[0];
            let gh = g0.with_features(g0.channels(), relu.backward(g0.features())?)?;
            rec.grads.lift = Some(conv.backward(&gh)?.kernel);
        }
        Ok(rec.grads)
    }
}
