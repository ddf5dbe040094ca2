//! `vpd`: generate synthetic RGB-D datasets, train, roll out, edit and
//! evaluate particle dynamics models.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpd::config::RunConfig;
use vpd::geometry::{CameraModel, RigidTransform};
use vpd::model::Model;
use vpd::scenekit::{self, EditScript};
use vpd::synth::{generate_dataset, DatasetSpec};
use vpd::trainer::{self, TrainOptions};
use vpd::vpt::{Dataset, Split, Trajectory};
use vpd::{Error, ErrorKind, Result};

#[derive(Parser)]
#[command(name = "vpd", version, about = "Particle dynamics learned from RGB-D video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic multi-view RGB-D dataset.
    Generate {
        /// Scene family: spheres or blocks.
        #[arg(long, default_value = "spheres")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
        /// Training trajectories.
        #[arg(long, default_value_t = 16)]
        trajectories: usize,
        /// Held-out trajectories.
        #[arg(long, default_value_t = 4)]
        heldout: usize,
        #[arg(long, default_value_t = 2)]
        views: usize,
        /// Frames per trajectory.
        #[arg(long, default_value_t = 40)]
        steps: usize,
        /// Square image resolution in pixels.
        #[arg(long, default_value_t = 48)]
        res: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; writes `checkpoint/` and `metrics.csv` under `--out`.
    Train {
        /// Preset name (mujoco, deformable, kubric, desk) or TOML file.
        /// Defaults to desk, or to the saved config when resuming.
        #[arg(long)]
        config: Option<String>,
        /// Dataset root; defaults to `train.data` from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from `--out/checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Override the configured number of updates.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Roll a trajectory forward and render the predictions.
    Rollout {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Trajectory name; the first held-out one by default.
        #[arg(long)]
        trajectory: Option<String>,
        #[arg(long, default_value_t = 8)]
        horizon: usize,
        /// Camera index, or 12 comma-separated numbers giving a
        /// world-from-camera 3x4 pose (intrinsics of camera 0).
        #[arg(long, default_value = "0")]
        camera: String,
        /// TOML edit script applied to both conditioning clouds.
        #[arg(long)]
        edits: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score rollouts on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        horizon: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out rollout PSNR as a function of the particle budget.
    BenchParticles {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        horizon: usize,
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        budgets: Vec<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Argument => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate {
            preset,
            out,
            trajectories,
            heldout,
            views,
            steps,
            res,
            seed,
        } => {
            let spec = DatasetSpec {
                trajectories,
                heldout,
                views,
                steps,
                width: res,
                height: res,
                seed,
                ..DatasetSpec::preset(&preset)?
            };
            let data = generate_dataset(&spec, &out)?;
            println!(
                "wrote {} training and {} held-out trajectories ({views} views, {steps} frames, {res}x{res}) to {}",
                data.names(Split::Train).len(),
                data.names(Split::Heldout).len(),
                out.display()
            );
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            steps,
        } => {
            let mut cfg = match (config, resume) {
                (Some(c), _) => RunConfig::load(&c)?,
                (None, true) => Model::load(&out.join(trainer::CHECKPOINT_DIR))?.config,
                (None, false) => RunConfig::preset("desk")?,
            };
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let root = data
                .or_else(|| cfg.train.data.clone())
                .ok_or_else(|| Error::invalid("no dataset given (--data or train.data)"))?;
            let dataset = Dataset::open(&root)?;
            let opts = TrainOptions {
                resume,
                stop_at: None,
            };
            let state = trainer::train(&cfg, &dataset, &out, &opts)?;
            println!(
                "trained {} updates; checkpoint in {}",
                state.step,
                out.join(trainer::CHECKPOINT_DIR).display()
            );
            Ok(())
        }
        Command::Rollout {
            checkpoint,
            data,
            trajectory,
            horizon,
            camera,
            edits,
            out,
        } => {
            let model = Model::load(&checkpoint)?;
            let dataset = Dataset::open(&data)?;
            let traj = pick_trajectory(&dataset, trajectory.as_deref())?;
            let cam = parse_camera(&camera, &traj)?;
            let script = match edits {
                Some(p) => Some(EditScript::from_toml(&read(&p)?)?),
                None => None,
            };
            let preds = scenekit::rollout_trajectory(&model, &traj, horizon, script.as_ref())?;
            let mut frames = Vec::with_capacity(preds.len());
            for (k, p) in preds.iter().enumerate() {
                let img = model.render(p, &cam)?;
                scenekit::save_frame(&out, &format!("step_{:03}", k + 1), &img)?;
                frames.push(img);
            }
            let row: Vec<&[f32]> = frames.iter().map(|f| f.rgb.as_slice()).collect();
            scenekit::save_strip(&out.join("strip.png"), &[row], cam.width, cam.height)?;
            println!("wrote {} predicted frames of {} to {}", preds.len(), traj.name, out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            data,
            horizon,
            out,
        } => {
            let model = Model::load(&checkpoint)?;
            let trajs = heldout(&Dataset::open(&data)?)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let mut strip_rows: Vec<Vec<f32>> = Vec::new();
            let report = scenekit::evaluate_with_frames(&model, &trajs, horizon, |ti, _, imgs| {
                if ti == 0 {
                    strip_rows.push(imgs[0].rgb.clone());
                }
                Ok(())
            })?;
            let csv = report.to_csv();
            write(&out.join("report.csv"), &csv)?;
            let t = &trajs[0];
            let truth: Vec<&[f32]> = (0..horizon).map(|k| t.frames[k + 2][0].rgb.as_slice()).collect();
            let pred: Vec<&[f32]> = strip_rows.iter().map(|r| r.as_slice()).collect();
            let (w, h) = t.resolution();
            scenekit::save_strip(&out.join(format!("{}_strip.png", t.name)), &[truth, pred], w, h)?;
            print!("{csv}");
            Ok(())
        }
        Command::BenchParticles {
            checkpoint,
            data,
            horizon,
            budgets,
        } => {
            let model = Model::load(&checkpoint)?;
            let trajs = heldout(&Dataset::open(&data)?)?;
            let rows = scenekit::particle_scaling_benchmark(&model, &trajs, horizon, &budgets)?;
            print!("{}", scenekit::benchmark_csv(&rows));
            Ok(())
        }
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn heldout(data: &Dataset) -> Result<Vec<Trajectory>> {
    let trajs = data.load_split(Split::Heldout)?;
    if trajs.is_empty() {
        return Err(Error::data("dataset has no held-out trajectories"));
    }
    Ok(trajs)
}

fn pick_trajectory(data: &Dataset, name: Option<&str>) -> Result<Trajectory> {
    match name {
        Some(n) => data.load(n),
        None => heldout(data).map(|mut t| t.swap_remove(0)),
    }
}

fn parse_camera(arg: &str, traj: &Trajectory) -> Result<CameraModel> {
    if let Ok(id) = arg.trim().parse::<usize>() {
        return traj.cameras.get(id).cloned().ok_or_else(|| {
            Error::invalid(format!("camera {id} out of range ({} cameras)", traj.cameras.len()))
        });
    }
    let vals: Vec<f64> = arg
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::invalid(format!("bad camera '{arg}': {e}")))?;
    let pose: [f64; 12] = vals
        .try_into()
        .map_err(|v: Vec<f64>| Error::invalid(format!("camera pose needs 12 numbers, got {}", v.len())))?;
    let mut cam = traj.cameras[0].clone();
    cam.world_from_camera = RigidTransform::from_3x4(&pose);
    cam.validate()?;
    Ok(cam)
}
