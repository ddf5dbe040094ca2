//! Optimization of encoder, dynamics and renderer, either end to end through
//! rendered rollouts or sequentially (autoencoder first, then dynamics
//! against frozen features).

mod loss;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vpd_diff::checkpoint::{load_store, save_store};
use vpd_diff::{Adam, AdamConfig, Gradients, Graph, ParameterStore};

pub use loss::{
    loss_autoencoder, loss_sequential, loss_vpd, ray_targets, sample_rays, workspace_samples, Loss,
};

use crate::config::RunConfig;
use crate::error::{Error, IoContext, Result};
use crate::model::{self, CheckpointHeader, Model};
use crate::scenekit::psnr;
use crate::seed;
use crate::vpt::{Dataset, Split, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    EndToEnd,
    Sequential,
}

/// Omitted keys take their [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    /// Predicted timesteps per training window.
    pub rollout_steps: usize,
    /// Rays rendered per predicted timestep.
    pub rays_per_step: usize,
    pub batch_size: usize,
    /// Cameras fed to the encoder (the first `views` of each trajectory).
    pub views: usize,
    pub lr: f64,
    pub lr_decay: f64,
    /// Updates after which the learning rate is divided by the next decay.
    pub milestones: Vec<usize>,
    /// Updates in end-to-end mode, or dynamics updates in sequential mode.
    pub steps: usize,
    /// Std of the Gaussian noise added to input positions during training.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Global gradient norm limit; 0 disables clipping.
    pub clip_norm: f64,
    /// Held-out PSNR every this many updates; 0 disables.
    pub eval_every: usize,
    pub eval_trajectories: usize,
    pub checkpoint_every: usize,
    pub coarse_weight: f64,
    pub depth_weight: f64,
    /// Autoencoder updates before dynamics training, sequential mode only.
    pub pretrain_steps: usize,
    pub sequential_lr: f64,
    /// Successive divisors applied at the milestones in sequential mode.
    pub sequential_decays: Vec<f64>,
    /// Workspace locations compared per step by the sequential loss.
    pub sequential_samples: usize,
    /// Checkpoint holding an already pretrained encoder and renderer, used
    /// in sequential mode when `pretrain_steps` is 0.
    pub pretrained: Option<PathBuf>,
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::EndToEnd,
            rollout_steps: 6,
            rays_per_step: 256,
            batch_size: 16,
            views: 1,
            lr: 3e-4,
            lr_decay: 3.0,
            milestones: vec![100_000, 300_000],
            steps: 400_000,
            noise_sigma: 1e-5,
            seed: 0,
            clip_norm: 1.0,
            eval_every: 1000,
            eval_trajectories: 4,
            checkpoint_every: 1000,
            coarse_weight: 1.0,
            depth_weight: 1.0,
            pretrain_steps: 100_000,
            sequential_lr: 1e-4,
            sequential_decays: vec![10.0, 3.0],
            sequential_samples: 1 << 14,
            pretrained: None,
            data: None,
        }
    }
}

impl TrainConfig {
    /// Settings sized for a single CPU core.
    pub fn desk() -> Self {
        Self {
            rollout_steps: 4,
            rays_per_step: 64,
            batch_size: 2,
            views: 2,
            lr: 1e-3,
            milestones: vec![6_000, 9_000],
            steps: 10_000,
            noise_sigma: 1e-4,
            eval_every: 500,
            eval_trajectories: 4,
            checkpoint_every: 250,
            pretrain_steps: 4_000,
            sequential_lr: 3e-4,
            sequential_samples: 1024,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.rollout_steps == 0 {
            return bad("rollout_steps must be at least 1");
        }
        if self.rays_per_step == 0 || self.batch_size == 0 || self.views == 0 {
            return bad("rays_per_step, batch_size and views must be positive");
        }
        if !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return bad("milestones must be strictly ascending");
        }
        if !(self.lr > 0.0 && self.sequential_lr > 0.0) || self.lr_decay <= 0.0 {
            return bad("learning rates and decay must be positive");
        }
        if self.sequential_decays.iter().any(|d| *d <= 0.0) {
            return bad("sequential decays must be positive");
        }
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be non-negative");
        }
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive");
        }
        if self.mode == Mode::Sequential && self.sequential_samples == 0 {
            return bad("sequential_samples must be positive");
        }
        Ok(())
    }

    /// Learning rate for update `step` counted from the start of its phase.
    pub fn lr_at(&self, phase: Phase, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        match phase {
            Phase::EndToEnd => self.lr / self.lr_decay.powi(passed as i32),
            Phase::Pretrain | Phase::Dynamics => {
                let div: f64 = self.sequential_decays.iter().take(passed).product();
                self.sequential_lr / div
            }
        }
    }

    /// Total updates over all phases.
    pub fn total_steps(&self) -> usize {
        match self.mode {
            Mode::EndToEnd => self.steps,
            Mode::Sequential => self.pretrain_steps + self.steps,
        }
    }

    /// Phase of global update `step` and the step index within that phase.
    pub fn phase_of(&self, step: usize) -> (Phase, usize) {
        match self.mode {
            Mode::EndToEnd => (Phase::EndToEnd, step),
            Mode::Sequential if step < self.pretrain_steps => (Phase::Pretrain, step),
            Mode::Sequential => (Phase::Dynamics, step - self.pretrain_steps),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    EndToEnd,
    Pretrain,
    Dynamics,
}

impl Phase {
    /// Timesteps one training example spans.
    pub fn window(self, cfg: &TrainConfig) -> usize {
        match self {
            Phase::Pretrain => 1,
            _ => cfg.rollout_steps + 2,
        }
    }
}

/// Picks a (trajectory, start) pair uniformly among all windows of `len`
/// timesteps.
pub fn sample_window(trajs: &[Trajectory], len: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let counts: Vec<usize> = trajs.iter().map(|t| (t.len() + 1).saturating_sub(len)).collect();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(Error::data(format!("no trajectory has {len} timesteps")));
    }
    let mut k = rng.random_range(0..total);
    for (i, &c) in counts.iter().enumerate() {
        if k < c {
            return Ok((i, k));
        }
        k -= c;
    }
    unreachable!("window index within total")
}

/// Loss on one example of `phase`.
pub fn example_loss(
    g: &mut Graph<f32>,
    params: &ParameterStore<f32>,
    cfg: &RunConfig,
    phase: Phase,
    traj: &Trajectory,
    start: usize,
    seed: u64,
) -> Result<Loss> {
    match phase {
        Phase::EndToEnd => loss_vpd(g, params, cfg, traj, start, seed),
        Phase::Pretrain => loss_autoencoder(g, params, cfg, traj, start, seed),
        Phase::Dynamics => loss_sequential(g, params, cfg, traj, start, seed),
    }
}

/// Mean loss and gradients over the batch of update `step`. Examples and
/// their sampling noise depend only on the seed and `step`.
pub fn batch_gradients(
    params: &ParameterStore<f32>,
    cfg: &RunConfig,
    trajs: &[Trajectory],
    step: usize,
) -> Result<(f64, Gradients<f32>)> {
    let (phase, _) = cfg.train.phase_of(step);
    let b = cfg.train.batch_size;
    let mut grads = Gradients::new();
    let mut total = 0.0;
    for i in 0..b as u64 {
        let s = seed::derive_all(cfg.train.seed, &[step as u64, i]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(s, 0));
        let (ti, start) = sample_window(trajs, phase.window(&cfg.train), &mut rng)?;
        let mut g = Graph::new();
        let loss = example_loss(&mut g, params, cfg, phase, &trajs[ti], start, seed::derive(s, 1))?;
        total += g.value(loss.total).item() as f64;
        grads.accumulate(&g.backward(loss.total)?.params())?;
    }
    grads.scale(1.0 / b as f32);
    Ok((total / b as f64, grads))
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Completed updates.
    pub step: usize,
    pub model: Model,
    pub adam: Adam<f32>,
    /// Exponential moving average of the training loss.
    pub loss_ema: Option<f64>,
    pub last_eval_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    format: String,
    version: u32,
    step: usize,
    adam_t: u64,
    #[serde(default)]
    loss_ema: Option<f64>,
    #[serde(default)]
    last_eval_psnr: Option<f64>,
}

pub const OPTIMIZER_FILE: &str = "optimizer.vpdc";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const METRICS_FILE: &str = "metrics.csv";

impl TrainState {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let seed = cfg.train.seed;
        let model = Model::init(cfg, seed)?;
        let adam = Adam::new(&model.params, AdamConfig::default());
        Ok(Self {
            step: 0,
            model,
            adam,
            loss_ema: None,
            last_eval_psnr: None,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir)?;
        let mut opt = ParameterStore::new();
        for (tag, store) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (k, t) in store.iter() {
                opt.insert(format!("{tag}.{k}"), t.clone());
            }
        }
        let path = dir.join(OPTIMIZER_FILE);
        save_store(&path, &opt).at(&path)?;
        let header = CheckpointHeader::current();
        let state = StateFile {
            format: header.format,
            version: header.version,
            step: self.step,
            adam_t: self.adam.t,
            loss_ema: self.loss_ema,
            last_eval_psnr: self.last_eval_psnr,
        };
        let path = dir.join(model::STATE_FILE);
        std::fs::write(&path, toml::to_string(&state).expect("state serializes")).at(&path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let model = Model::load(dir)?;
        let path = dir.join(model::STATE_FILE);
        let text = std::fs::read_to_string(&path).at(&path)?;
        let state: StateFile =
            toml::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let path = dir.join(OPTIMIZER_FILE);
        let opt = load_store(&path).at(&path)?;
        let mut adam = Adam::new(&ParameterStore::new(), AdamConfig::default());
        for (name, t) in opt.iter() {
            match name.split_once('.') {
                Some(("m", rest)) => adam.m.insert(rest, t.clone()),
                Some(("v", rest)) => adam.v.insert(rest, t.clone()),
                _ => return Err(Error::data(format!("unexpected optimizer entry `{name}`"))),
            }
        }
        adam.t = state.adam_t;
        Ok(Self {
            step: state.step,
            model,
            adam,
            loss_ema: state.loss_ema,
            last_eval_psnr: state.last_eval_psnr,
        })
    }

    /// Writes into `dir` via a sibling temporary so a failed write never
    /// clobbers the previous checkpoint.
    pub fn save_atomic(&self, dir: &Path) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        let old = dir.with_extension("old");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp).at(&tmp)?;
        }
        self.save(&tmp)?;
        if dir.exists() {
            if old.exists() {
                std::fs::remove_dir_all(&old).at(&old)?;
            }
            std::fs::rename(dir, &old).at(dir)?;
        }
        std::fs::rename(&tmp, dir).at(&tmp)?;
        if old.exists() {
            std::fs::remove_dir_all(&old).at(&old)?;
        }
        Ok(())
    }
}

/// One-step PSNR averaged over the first `cfg.train.eval_trajectories`
/// trajectories: encode two frames, predict the third, render camera 0.
pub fn eval_psnr(model: &Model, trajs: &[Trajectory]) -> Result<f64> {
    let n = model.config.train.eval_trajectories.min(trajs.len());
    if n == 0 {
        return Err(Error::data("no trajectories to evaluate"));
    }
    let mut total = 0.0;
    for traj in &trajs[..n] {
        let p1 = model.encode(traj, 0)?;
        let p2 = model.encode(traj, 1)?;
        let pred = model.rollout(&p1, &p2, 1, 0)?;
        let img = model.render(&pred[0], &traj.cameras[0])?;
        total += psnr(&img.rgb, &traj.frames[2][0].rgb)?;
    }
    Ok(total / n as f64)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop after this many total updates instead of the configured count.
    pub stop_at: Option<usize>,
}

/// Formats one metrics record: `step,wall_ms,loss,lr[,eval_psnr]`.
pub fn metrics_line(step: usize, wall_ms: u128, loss: f64, lr: f64, eval: Option<f64>) -> String {
    match eval {
        Some(p) => format!("{step},{wall_ms},{loss:e},{lr:e},{p:.4}"),
        None => format!("{step},{wall_ms},{loss:e},{lr:e}"),
    }
}

/// Keeps metrics records up to and including `step`.
fn truncate_metrics(path: &Path, step: usize) -> Result<()> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(path, kept).at(path)
}

fn train_split(data: &Dataset) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let train = data.load_split(Split::Train)?;
    if train.is_empty() {
        return Err(Error::data("dataset has no training trajectories"));
    }
    let heldout = data.load_split(Split::Heldout)?;
    Ok((train, heldout))
}

/// Initial state for a fresh run; sequential runs without pretraining start
/// from the pretrained checkpoint's encoder and renderer.
fn fresh_state(cfg: &RunConfig) -> Result<TrainState> {
    let mut state = TrainState::new(cfg.clone())?;
    if cfg.train.mode == Mode::Sequential && cfg.train.pretrain_steps == 0 {
        let dir = cfg.train.pretrained.as_ref().ok_or_else(|| {
            Error::Config("sequential mode without pretraining needs a `pretrained` checkpoint".into())
        })?;
        let pre = Model::load(dir)?;
        for prefix in [crate::encoder::PREFIX, crate::renderer::PREFIX] {
            state.model.params.merge_prefix(&pre.params, prefix);
        }
        state.model.check_params()?;
    }
    Ok(state)
}

/// Runs training into `out`: checkpoints in `out/checkpoint`, metrics in
/// `out/metrics.csv`. A non-finite loss stops the run with an error and
/// leaves the last good checkpoint in place.
pub fn train(cfg: &RunConfig, data: &Dataset, out: &Path, opts: &TrainOptions) -> Result<TrainState> {
    cfg.validate()?;
    std::fs::create_dir_all(out).at(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    let metrics_path = out.join(METRICS_FILE);
    let mut state = if opts.resume {
        let state = TrainState::load(&ckpt)?;
        let mut saved = state.model.config.clone();
        saved.train.steps = cfg.train.steps;
        if &saved != cfg {
            return Err(Error::Config(
                "resume config differs from the checkpoint's (only `steps` may change)".into(),
            ));
        }
        truncate_metrics(&metrics_path, state.step)?;
        state
    } else {
        std::fs::write(&metrics_path, "").at(&metrics_path)?;
        fresh_state(cfg)?
    };
    state.model.config = cfg.clone();
    let (train_set, heldout) = train_split(data)?;
    let eval_set = if heldout.is_empty() { &train_set } else { &heldout };
    let end = opts.stop_at.unwrap_or(usize::MAX).min(cfg.train.total_steps());
    let mut metrics = OpenOptions::new()
        .append(true)
        .create(true)
        .open(&metrics_path)
        .at(&metrics_path)?;
    let t0 = Instant::now();
    while state.step < end {
        let (phase, local) = cfg.train.phase_of(state.step);
        let lr = cfg.train.lr_at(phase, local);
        let (loss, mut grads) = batch_gradients(&state.model.params, cfg, &train_set, state.step)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}", state.step + 1)));
        }
        if cfg.train.clip_norm > 0.0 {
            grads.clip_global_norm(cfg.train.clip_norm as f32);
        }
        state.adam.step(&mut state.model.params, &grads, lr)?;
        state.step += 1;
        state.loss_ema = Some(match state.loss_ema {
            Some(e) => 0.98 * e + 0.02 * loss,
            None => loss,
        });
        let eval = if cfg.train.eval_every > 0 && state.step % cfg.train.eval_every == 0 {
            let p = eval_psnr(&state.model, eval_set)?;
            state.last_eval_psnr = Some(p);
            Some(p)
        } else {
            None
        };
        let line = metrics_line(state.step, t0.elapsed().as_millis(), loss, lr, eval);
        writeln!(metrics, "{line}").at(&metrics_path)?;
        log::info!("{line}");
        if state.step % cfg.train.checkpoint_every == 0 || state.step == end {
            metrics.flush().at(&metrics_path)?;
            state.save_atomic(&ckpt)?;
        }
    }
    Ok(state)
}
