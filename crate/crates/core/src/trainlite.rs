//! Toy BEV heatmap regression used to show that gradients reach every part of
//! the backbone, including the SDR estimator.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{self, BackboneConfig, BackboneState, ForwardTrace};
use crate::error::{Error, Result};
use crate::ingest::{synth_scene, voxelize, SynthObject, VoxelizeConfig};
use crate::sparseconv::{conv2d_taped, ConvKernel, Padding};
use crate::voxgrid::{DenseBevMap, GridGeometry, SparseVoxelTensor};

pub const TARGET_SIGMA_CELLS: f64 = 1.0;
pub const OBJECTS_PER_SCENE: usize = 3;
pub const HEAD_FILE: &str = "head.ckb";

#[derive(Debug, Clone)]
pub struct ToyTask {
    pub input: SparseVoxelTensor,
    /// One channel, values in `[0, 1]`, at the backbone's stage-4 resolution.
    pub target: DenseBevMap,
    pub objects: Vec<SynthObject>,
}

/// Gaussian bumps (sigma in output cells) at the objects' BEV centers, combined
/// by maximum. `geometry` is the output grid in world units.
pub fn center_heatmap(objects: &[SynthObject], geometry: &GridGeometry, sigma: f64) -> DenseBevMap {
    let (w, h) = (geometry.nx(), geometry.ny());
    let mut m = DenseBevMap::zeros(w, h, 1);
    for o in objects {
        let u = (o.center[0] - geometry.origin[0]) / geometry.voxel_size[0] - 0.5;
        let v = (o.center[1] - geometry.origin[1]) / geometry.voxel_size[1] - 0.5;
        for i in 0..w {
            for j in 0..h {
                let d2 = (i as f64 - u).powi(2) + (j as f64 - v).powi(2);
                let p = m.pixel_mut(i, j);
                p[0] = p[0].max((-d2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    m
}

impl ToyTask {
    pub fn from_scene(
        seed: u64,
        voxel_cfg: &VoxelizeConfig,
        backbone_cfg: &BackboneConfig,
    ) -> Result<ToyTask> {
        if voxel_cfg.geometry.extents != backbone_cfg.input_extents {
            return Err(Error::Config(format!(
                "voxel grid {:?} differs from backbone input {:?}",
                voxel_cfg.geometry.extents, backbone_cfg.input_extents
            )));
        }
        let scene = synth_scene(seed, OBJECTS_PER_SCENE, voxel_cfg)?;
        let input = voxelize(&scene.cloud, voxel_cfg)?;
        let s = backbone_cfg.downsample_stride;
        let mut out_geom = voxel_cfg.geometry;
        for _ in 1..backbone::STAGES {
            out_geom = out_geom.downsampled(s)?;
        }
        let target = center_heatmap(&scene.objects, &out_geom, TARGET_SIGMA_CELLS);
        debug_assert_eq!(target.extents(), backbone_cfg.bev_extents(backbone::STAGES));
        Ok(ToyTask {
            input,
            target,
            objects: scene.objects,
        })
    }
}

/// `n` tasks from consecutive scene seeds starting at `seed`.
pub fn synth_tasks(n: usize, seed: u64, voxel_cfg: &VoxelizeConfig, backbone_cfg: &BackboneConfig) -> Result<Vec<ToyTask>> {
    (0..n as u64)
        .map(|k| ToyTask::from_scene(seed.wrapping_add(k), voxel_cfg, backbone_cfg))
        .collect()
}

/// Backbone followed by a 1x1 conv head to one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub backbone: BackboneState,
    pub head: ConvKernel,
}

impl ToyModel {
    pub fn build(cfg: &BackboneConfig, seed: u64) -> Result<Self> {
        let backbone = BackboneState::build(cfg, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(u64::MAX);
        let head = ConvKernel::init_uniform(&[1, 1], cfg.bev_channels(backbone::STAGES), 1, &mut rng)?;
        Ok(ToyModel { backbone, head })
    }

    pub fn forward(&self, input: &SparseVoxelTensor) -> Result<DenseBevMap> {
        self.forward_trace(input).map(|(p, _)| p)
    }

    pub fn forward_trace(&self, input: &SparseVoxelTensor) -> Result<(DenseBevMap, ForwardTrace)> {
        let trace = backbone::forward_trace(&self.backbone, input)?;
        let pred = crate::sparseconv::conv2d(trace.output(), &self.head, 1, Padding::Same)?;
        Ok((pred, trace))
    }

    pub fn named_params(&self) -> Vec<(String, &ConvKernel)> {
        let mut v = self.backbone.named_params();
        v.push(("head".to_string(), &self.head));
        v
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut ConvKernel)> {
        let mut v = self.backbone.named_params_mut();
        v.push(("head".to_string(), &mut self.head));
        v
    }

    pub fn zeros_like(&self) -> Self {
        ToyModel {
            backbone: self.backbone.zeros_like(),
            head: self.head.zeros_like(),
        }
    }

    fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.backbone.axpy(alpha, &other.backbone)?;
        self.head.axpy(alpha, &other.head)
    }

    /// Writes the backbone directory plus `head.ckb`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        backbone::save(dir, &self.backbone)?;
        let path = dir.join(HEAD_FILE);
        std::fs::write(&path, self.head.to_blob()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let backbone = backbone::load(dir)?;
        let path = dir.join(HEAD_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut cur = std::io::Cursor::new(bytes.as_slice());
        let head = ConvKernel::read_blob(&mut cur)?;
        let cin = backbone.config().bev_channels(backbone::STAGES);
        if head.spatial() != [1, 1]
            || [head.in_channels(), head.out_channels()] != [cin, 1]
            || (cur.position() as usize) != bytes.len()
        {
            return Err(Error::Format(format!("{}: not a matching 1x1 head", path.display())));
        }
        Ok(ToyModel { backbone, head })
    }

    /// Loss and parameter gradients for one task.
    pub fn loss_and_grad(&self, task: &ToyTask) -> Result<(f64, ToyModel)> {
        let (trace, mut tape) = backbone::forward_taped(&self.backbone, &task.input)?;
        let (pred, mut head_tape) = conv2d_taped(trace.output(), &self.head, 1, Padding::Same)?;
        let loss = loss_mse(&pred, &task.target)?;
        let g_pred = loss_mse_grad(&pred, &task.target)?;
        let hg = head_tape.backward(&g_pred)?;
        let backbone = tape.backward(&hg.input)?;
        Ok((loss, ToyModel { backbone, head: hg.kernel }))
    }
}

/// Mean squared error over all cells and channels.
pub fn loss_mse(pred: &DenseBevMap, target: &DenseBevMap) -> Result<f64> {
    pred.check_same_shape(target, "loss_mse")?;
    let n = pred.values().len().max(1) as f64;
    Ok(pred
        .values()
        .iter()
        .zip(target.values())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

pub fn loss_mse_grad(pred: &DenseBevMap, target: &DenseBevMap) -> Result<DenseBevMap> {
    pred.check_same_shape(target, "loss_mse")?;
    let n = pred.values().len().max(1) as f64;
    let g = pred.values().iter().zip(target.values()).map(|(p, t)| 2.0 * (p - t) / n).collect();
    DenseBevMap::from_values(pred.width(), pred.height(), pred.channels(), g)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Drives the per-step task order.
    pub seed: u64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            learning_rate: 1e-2,
            momentum: 0.9,
            steps: 200,
            seed: 0,
        }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config(format!("learning_rate {} must be finite and >= 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        Ok(())
    }
}

/// Mean loss over `tasks` and the mean gradient. Per-task passes run in
/// parallel; results are summed in task order.
pub fn batch_loss_and_grad(model: &ToyModel, tasks: &[&ToyTask]) -> Result<(f64, ToyModel)> {
    let per_task: Vec<(f64, ToyModel)> = tasks
        .par_iter()
        .map(|t| model.loss_and_grad(t))
        .collect::<Result<_>>()?;
    let scale = 1.0 / tasks.len() as f64;
    let mut grad = model.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &per_task {
        loss += l * scale;
        grad.axpy(scale, g)?;
    }
    Ok((loss, grad))
}

fn first_non_finite(grad: &ToyModel) -> Option<String> {
    grad.named_params().into_iter().find(|(_, k)| !k.is_finite()).map(|(n, _)| n)
}

/// SGD with momentum: `v = mu * v + g; p -= lr * v`. Returns the trained model
/// and `steps + 1` losses: the initial loss, then the loss after each update.
pub fn train(model: &ToyModel, tasks: &[ToyTask], cfg: &SgdConfig) -> Result<(ToyModel, Vec<f64>)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("training needs at least one task".into()));
    }
    let mut model = model.clone();
    let mut velocity = model.zeros_like();
    let mut order: Vec<&ToyTask> = tasks.iter().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        order.shuffle(&mut rng);
        let (loss, grad) = batch_loss_and_grad(&model, &order)?;
        if let Some(param) = first_non_finite(&grad) {
            return Err(Error::NonFiniteGradient { param, step });
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        curve.push(loss);
        log::debug!("step {step}: loss {loss:.6e}");
        if step == cfg.steps {
            break;
        }
        let mut next = velocity.clone();
        for ((_, v), (_, g)) in next.named_params_mut().into_iter().zip(grad.named_params()) {
            v.weights_mut().iter_mut().for_each(|x| *x *= cfg.momentum);
            v.bias_mut().iter_mut().for_each(|x| *x *= cfg.momentum);
            v.axpy(1.0, g)?;
        }
        velocity = next;
        model.axpy(-cfg.learning_rate, &velocity)?;
    }
    Ok((model, curve))
}

pub fn curve_to_csv(curve: &[f64]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"]).map_err(|e| Error::Format(e.to_string()))?;
    for (step, loss) in curve.iter().enumerate() {
        w.serialize((step, loss)).map_err(|e| Error::Format(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_curve_csv(text: &str) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize::<(usize, f64)>()
        .enumerate()
        .map(|(n, rec)| {
            let (step, loss) = rec.map_err(|e| Error::Format(e.to_string()))?;
            if step != n {
                return Err(Error::Format(format!("curve row {n} has step {step}")));
            }
            Ok(loss)
        })
        .collect()
}

pub fn write_curve_csv(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, curve_to_csv(curve)?).map_err(|e| Error::io(path, e))
}

/// Backbone configuration sized for the toy preset grid.
pub fn toy_backbone_config() -> BackboneConfig {
    BackboneConfig {
        input_extents: VoxelizeConfig::toy().geometry.extents,
        stage_channels: [8, 16, 32, 32],
        ..BackboneConfig::default()
    }
}
