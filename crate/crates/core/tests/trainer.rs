mod common;

use common::{metrics_without_time, tiny_config, tiny_dataset};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vpd::model::Model;
use vpd::trainer::{
    batch_gradients, loss_sequential, loss_vpd, sample_rays, train, Mode, Phase, TrainConfig,
    TrainOptions, TrainState, CHECKPOINT_DIR, METRICS_FILE,
};
use vpd::vpt::Split;
use vpd::ErrorKind;
use vpd_diff::{Adam, AdamConfig, Graph, Tensor};

#[test]
fn small_step_decreases_batch_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let trajs = data.load_split(Split::Train).unwrap();
    let cfg = tiny_config();
    let mut failures = 0;
    for rep in 0..10 {
        let mut model = Model::init(cfg.clone(), rep).unwrap();
        let (before, grads) = batch_gradients(&model.params, &cfg, &trajs, rep as usize).unwrap();
        let mut adam = Adam::new(&model.params, AdamConfig::default());
        adam.step(&mut model.params, &grads, 1e-6).unwrap();
        let (after, _) = batch_gradients(&model.params, &cfg, &trajs, rep as usize).unwrap();
        if after >= before {
            failures += 1;
        }
    }
    assert!(failures <= 1, "{failures} of 10 steps failed to decrease the loss");
}

#[test]
fn resume_continues_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let mut cfg = tiny_config();
    cfg.train.steps = 4;
    cfg.train.checkpoint_every = 2;

    let straight = dir.path().join("straight");
    let full = train(&cfg, &data, &straight, &TrainOptions::default()).unwrap();

    let split = dir.path().join("split");
    let first = TrainOptions {
        resume: false,
        stop_at: Some(2),
    };
    assert_eq!(train(&cfg, &data, &split, &first).unwrap().step, 2);
    let resume = TrainOptions {
        resume: true,
        stop_at: None,
    };
    let resumed = train(&cfg, &data, &split, &resume).unwrap();

    assert_eq!(resumed.step, 4);
    assert_eq!(resumed.model.params, full.model.params);
    assert_eq!(resumed.adam, full.adam);
    assert_eq!(
        metrics_without_time(&split.join(METRICS_FILE)),
        metrics_without_time(&straight.join(METRICS_FILE))
    );
    let loaded = TrainState::load(&straight.join(CHECKPOINT_DIR)).unwrap();
    assert_eq!(loaded.model.params, full.model.params);
    assert_eq!(loaded.step, 4);
}

#[test]
fn fixed_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let mut cfg = tiny_config();
    cfg.train.steps = 3;
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        train(&cfg, &data, &out, &TrainOptions::default()).unwrap();
        logs.push(metrics_without_time(&out.join(METRICS_FILE)));
    }
    assert_eq!(logs[0].len(), 3);
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn metrics_lines_have_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let mut cfg = tiny_config();
    cfg.train.steps = 2;
    cfg.train.eval_every = 2;
    cfg.train.eval_trajectories = 1;
    let out = dir.path().join("run");
    train(&cfg, &data, &out, &TrainOptions::default()).unwrap();
    let text = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let lines: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(lines[0].len(), 4);
    assert_eq!(lines[1].len(), 5);
    assert_eq!(lines[1][0], "2");
    let lr: f64 = lines[0][3].parse().unwrap();
    assert_eq!(lr, cfg.train.lr);
    assert!(lines[1][4].parse::<f64>().unwrap().is_finite());
}

#[test]
fn non_finite_loss_aborts_and_keeps_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let mut cfg = tiny_config();
    cfg.train.steps = 5;
    cfg.train.lr = 1e30;
    cfg.train.clip_norm = 0.0;
    let out = dir.path().join("run");
    let err = train(&cfg, &data, &out, &TrainOptions::default()).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Numeric, "{err}");
    let state = TrainState::load(&out.join(CHECKPOINT_DIR)).unwrap();
    assert!(state.step >= 1 && state.step < 5);
    let lines = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    assert_eq!(lines.lines().count(), state.step);
}

#[test]
fn rays_reach_every_camera() {
    let dir = tempfile::tempdir().unwrap();
    let spec = vpd::synth::DatasetSpec {
        trajectories: 1,
        heldout: 0,
        views: 5,
        steps: 3,
        width: 8,
        height: 8,
        ..Default::default()
    };
    let data = vpd::synth::generate_dataset(&spec, dir.path()).unwrap();
    let traj = data.load_split(Split::Train).unwrap().remove(0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let picks = sample_rays(&traj, 10_000, &mut rng);
    let mut seen = [0usize; 5];
    for (c, p) in &picks {
        assert!(*p < 64);
        seen[*c] += 1;
    }
    assert!(seen.iter().all(|&n| n > 1000), "{seen:?}");
    assert!(picks.windows(2).all(|w| w[0] <= w[1]));
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    assert_eq!(c.lr_at(Phase::EndToEnd, 99_999), 3e-4);
    assert!((c.lr_at(Phase::EndToEnd, 100_000) - 1e-4).abs() < 1e-15);
    assert!((c.lr_at(Phase::EndToEnd, 350_000) - 3e-4 / 9.0).abs() < 1e-15);
    assert_eq!(c.rollout_steps, 6);
    assert_eq!(c.rays_per_step, 256);
    assert_eq!(c.batch_size, 16);
    assert_eq!(c.sequential_lr, 1e-4);
    assert_eq!(c.sequential_samples, 1 << 14);
    assert_eq!(TrainConfig::desk().batch_size, 2);
}

/// Renderer emitting 0.5 everywhere: zero color head, background logit 0.
fn gray_model() -> Model {
    let cfg = tiny_config();
    let mut m = Model::init(cfg, 0).unwrap();
    for tier in ["coarse", "fine"] {
        for part in ["w", "b"] {
            let name = format!("renderer.{tier}.rgb.{part}");
            let shape = m.params.get(&name).unwrap().shape().to_vec();
            m.params.insert(name, Tensor::zeros(&shape));
        }
    }
    m.params.insert("renderer.background", Tensor::zeros(&[3]));
    m
}

#[test]
fn gray_against_white_costs_a_quarter() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let mut traj = data.load_split(Split::Train).unwrap().remove(0);
    let mut m = gray_model();
    m.config.train.coarse_weight = 0.0;
    // White targets keep the original depth, so encoding is unchanged.
    for f in traj.frames.iter_mut().flatten() {
        f.rgb.iter_mut().for_each(|x| *x = 1.0);
    }
    let mut g = Graph::new();
    let loss = loss_vpd(&mut g, &m.params, &m.config, &traj, 0, 7).unwrap();
    assert!((g.value(loss.total).item() - 0.25).abs() < 1e-6);

    m.config.train.coarse_weight = 1.0;
    let mut g = Graph::new();
    let loss = loss_vpd(&mut g, &m.params, &m.config, &traj, 0, 7).unwrap();
    assert!((g.value(loss.total).item() - 0.5).abs() < 1e-6);

    for f in traj.frames.iter_mut().flatten() {
        f.rgb.iter_mut().for_each(|x| *x = 0.5);
    }
    let mut g = Graph::new();
    let loss = loss_vpd(&mut g, &m.params, &m.config, &traj, 0, 7).unwrap();
    assert!(g.value(loss.total).item() < 1e-12);
}

#[test]
fn short_window_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let traj = data.load_split(Split::Train).unwrap().remove(0);
    let m = gray_model();
    let mut g = Graph::new();
    let start = traj.len() - m.config.train.rollout_steps - 1;
    assert!(loss_vpd(&mut g, &m.params, &m.config, &traj, start, 0).is_err());
    assert!(loss_vpd(&mut g, &m.params, &m.config, &traj, start - 1, 0).is_ok());
}

#[test]
fn sequential_loss_vanishes_for_identical_clouds() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(dir.path());
    let mut traj = data.load_split(Split::Train).unwrap().remove(0);
    // A frozen scene, encoded without subsampling, and an identity simulator.
    let first = traj.frames[0].clone();
    for (t, views) in traj.frames.iter_mut().enumerate() {
        *views = first.clone();
        views.iter_mut().for_each(|f| f.timestep = t);
    }
    let mut m = gray_model();
    m.config.encoder.particle_budget = 1 << 12;
    m.config.train.noise_sigma = 0.0;
    vpd::dynamics::zero_decoders(&mut m.params, &m.config.dynamics).unwrap();
    let mut g = Graph::new();
    let loss = loss_sequential(&mut g, &m.params, &m.config, &traj, 0, 1).unwrap();
    assert_eq!(g.value(loss.total).item(), 0.0);
    let grads = g.backward(loss.total).unwrap().params();
    assert!(grads.iter().all(|(k, _)| k.starts_with("dynamics.")));
}

#[test]
fn sequential_training_freezes_encoder_and_renderer() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_dataset(&dir.path().join("data"));
    let mut cfg = tiny_config();
    cfg.train.mode = Mode::Sequential;
    cfg.train.pretrain_steps = 2;
    cfg.train.steps = 2;
    let out = dir.path().join("run");
    let pre = train(
        &cfg,
        &data,
        &out,
        &TrainOptions {
            resume: false,
            stop_at: Some(2),
        },
    )
    .unwrap();
    let init = Model::init(cfg.clone(), cfg.train.seed).unwrap();
    let changed = |a: &Model, b: &Model, prefix: &str| {
        a.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .any(|(k, v)| b.params.get(k).unwrap() != v)
    };
    assert!(changed(&pre.model, &init, "encoder."));
    assert!(changed(&pre.model, &init, "renderer."));
    assert!(!changed(&pre.model, &init, "dynamics."));

    let resume = TrainOptions {
        resume: true,
        stop_at: None,
    };
    let done = train(&cfg, &data, &out, &resume).unwrap();
    assert_eq!(done.step, 4);
    assert!(!changed(&done.model, &pre.model, "encoder."));
    assert!(!changed(&done.model, &pre.model, "renderer."));
    assert!(changed(&done.model, &pre.model, "dynamics."));

    // Starting the dynamics phase from a saved autoencoder.
    let mut from_ckpt = cfg.clone();
    from_ckpt.train.pretrain_steps = 0;
    from_ckpt.train.steps = 1;
    assert_eq!(
        train(&from_ckpt, &data, &dir.path().join("x"), &TrainOptions::default())
            .unwrap_err()
            .kind(),
        ErrorKind::Argument
    );
    from_ckpt.train.pretrained = Some(out.join(CHECKPOINT_DIR));
    let s = train(&from_ckpt, &data, &dir.path().join("y"), &TrainOptions::default()).unwrap();
    assert!(!changed(&s.model, &done.model, "encoder."));
}
