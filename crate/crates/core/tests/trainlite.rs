mod common;

use mdrnet_core::backbone::BackboneConfig;
use mdrnet_core::gradcheck::{rel_error, FD_STEPS};
use mdrnet_core::ingest::VoxelizeConfig;
use mdrnet_core::trainlite::{batch_loss_and_grad, loss_mse, synth_tasks, toy_backbone_config, train, SgdConfig, ToyModel, ToyTask};
use mdrnet_core::DenseBevMap;
use rand::Rng;

fn setup(cfg: &BackboneConfig, seed: u64) -> (ToyModel, Vec<ToyTask>) {
    let tasks = synth_tasks(1, seed, &VoxelizeConfig::toy(), cfg).unwrap();
    (ToyModel::build(cfg, seed).unwrap(), tasks)
}

fn tiny() -> BackboneConfig {
    BackboneConfig { stage_channels: [2, 4, 4, 4], ..toy_backbone_config() }
}

fn loss_at(model: &ToyModel, tasks: &[ToyTask]) -> f64 {
    let refs: Vec<&ToyTask> = tasks.iter().collect();
    batch_loss_and_grad(model, &refs).unwrap().0
}

#[test]
fn one_sgd_step_moves_by_lr_times_fd_gradient() {
    let (model, tasks) = setup(&tiny(), 21);
    let lr = 1e-2;
    let (after, _) = train(&model, &tasks, &SgdConfig { learning_rate: lr, momentum: 0.0, steps: 1, seed: 0 }).unwrap();
    for (name, idx) in [("head", 0), ("reduce1", 5), ("bev4.block2.conv2", 3), ("voxel1.subm", 40)] {
        let p = model.backbone.param(name).unwrap_or(&model.head).weights()[idx];
        let p1 = after.backbone.param(name).unwrap_or(&after.head).weights()[idx];
        let stepped = (p - p1) / lr;
        let best = FD_STEPS
            .iter()
            .map(|&h| {
                let shifted = |d: f64| {
                    let mut m = model.clone();
                    let k = if name == "head" { &mut m.head } else { m.backbone.param_mut(name).unwrap() };
                    k.weights_mut()[idx] += d;
                    loss_at(&m, &tasks)
                };
                rel_error(stepped, (shifted(h) - shifted(-h)) / (2.0 * h))
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-5, "{name}[{idx}]: rel error {best:e}");
    }
}

#[test]
fn sdr_estimator_receives_gradient() {
    let (model, tasks) = setup(&toy_backbone_config(), 22);
    let (_, g) = model.loss_and_grad(&tasks[0]).unwrap();
    let k = g.backbone.param("reduce1").unwrap();
    let max = k.weights().iter().chain(k.bias()).fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max > 0.0);
}

#[test]
fn disabling_msr_changes_the_trajectory() {
    let cfg = SgdConfig { steps: 10, ..Default::default() };
    let full = toy_backbone_config();
    let off = BackboneConfig { msr_stages: vec![], ..full.clone() };
    let (m_full, tasks) = setup(&full, 23);
    let (m_off, _) = setup(&off, 23);
    let (_, a) = train(&m_full, &tasks, &cfg).unwrap();
    let (_, b) = train(&m_off, &tasks, &cfg).unwrap();
    assert_ne!(a, b);
}

#[test]
fn mse_matches_direct_sum() {
    let mut r = common::rng(24);
    let v = |r: &mut rand_chacha::ChaCha8Rng| (0..5 * 3 * 2).map(|_| r.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    let (p, t) = (v(&mut r), v(&mut r));
    let mut direct = 0.0;
    for n in 0..p.len() {
        direct += (p[n] - t[n]) * (p[n] - t[n]);
    }
    direct /= p.len() as f64;
    let got = loss_mse(
        &DenseBevMap::from_values(5, 3, 2, p).unwrap(),
        &DenseBevMap::from_values(5, 3, 2, t).unwrap(),
    )
    .unwrap();
    assert!((got - direct).abs() < 1e-12);
}

#[test]
fn multi_scene_training_is_deterministic() {
    let cfg = tiny();
    let tasks = synth_tasks(3, 25, &VoxelizeConfig::toy(), &cfg).unwrap();
    let model = ToyModel::build(&cfg, 25).unwrap();
    let sgd = SgdConfig { steps: 5, seed: 25, ..Default::default() };
    let (a, ca) = train(&model, &tasks, &sgd).unwrap();
    let (b, cb) = train(&model, &tasks, &sgd).unwrap();
    assert_eq!(ca, cb);
    assert_eq!(a, b);
}
