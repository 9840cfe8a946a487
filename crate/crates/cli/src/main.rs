use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use motionkit::io::{self, Character, CharacterPair};
use motionkit::metrics::{self, EvalOptions};
use motionkit::render::{self, RenderSettings};
use motionkit::scene;
use motionkit::semantics::MockEmbedder;
use motionkit::synth::{self, Proportions, Style};
use motionkit::train::{self, CharacterClips, Checkpoint, ConfigOverrides, OptimizeConfig, PairContext, Stage, TrainConfig};
use motionkit::vlm::{VlmClient, DEFAULT_TIMEOUT, ENDPOINT_ENV};
use motionkit::{Exec, Motion};

#[derive(Parser, Debug)]
#[command(name = "motionkit", version, about = "Skeletal motion retargeting with semantic and penetration losses")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Training config (TOML or JSON); any subset of the training fields.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file, or directory for `render`.
    #[arg(long, global = true, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Vision-language service used for image-text matching.
    #[arg(long, global = true, env = ENDPOINT_ENV, value_name = "URL")]
    vlm_endpoint: Option<String>,
    /// Number of camera views (1 to 3).
    #[arg(long, global = true)]
    views: Option<usize>,
    /// Single-worker execution; fixed seeds give identical results.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a retargeting network on unpaired clips of several characters.
    Pretrain {
        /// Character files; every motion must name one of them.
        #[arg(long = "character", required = true, value_name = "FILE")]
        characters: Vec<PathBuf>,
        #[arg(long = "motion", required = true, value_name = "FILE")]
        motions: Vec<PathBuf>,
        /// JSON-lines training log.
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
    },
    /// Fine-tune a checkpoint for one character pair on source clips.
    Finetune {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        pair: PathBuf,
        #[arg(long = "motion", required = true, value_name = "FILE")]
        motions: Vec<PathBuf>,
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
    },
    /// Retarget one source clip to the pair's target.
    Retarget {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        source: PathBuf,
        #[arg(long, value_name = "FILE")]
        pair: PathBuf,
    },
    /// Refine a target motion directly by gradient descent.
    Optimize {
        #[arg(long, value_name = "FILE")]
        source: PathBuf,
        #[arg(long, value_name = "FILE")]
        pair: PathBuf,
        /// Starting target motion; defaults to copied rotations.
        #[arg(long, value_name = "FILE")]
        initial: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        iterations: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
    },
    /// Score retargeted clips and write a JSON report.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        pair: PathBuf,
        #[arg(long = "source", required = true, value_name = "FILE")]
        sources: Vec<PathBuf>,
        /// Target-side reference clips, one per source. Defaults to copied rotations.
        #[arg(long = "ground-truth", value_name = "FILE")]
        ground_truth: Vec<PathBuf>,
        #[arg(long, default_value_t = 4)]
        frame_stride: usize,
    },
    /// Write silhouettes of every frame as PNG files, one per view.
    Render {
        #[arg(long, value_name = "FILE")]
        motion: PathBuf,
        #[arg(long, value_name = "FILE")]
        character: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Generate a synthetic humanoid character, optionally with sample clips.
    MakeCharacter {
        #[arg(long, default_value_t = 16)]
        joints: usize,
        /// Multiplies every length.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Multiplies the torso radius after scaling.
        #[arg(long, default_value_t = 1.0)]
        torso_scale: f64,
        #[arg(long)]
        name: Option<String>,
        /// Also writes one clip per motion style into this directory.
        #[arg(long, value_name = "DIR")]
        motions: Option<PathBuf>,
        #[arg(long, default_value_t = 128)]
        frames: usize,
    },
}

/// Bad input detected by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some()
            || e.downcast_ref::<motionkit::Error>().is_some_and(|e| e.is_validation())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    value.as_deref().ok_or_else(|| usage(format!("missing required flag {flag}")))
}

fn load_checkpoint(path: &Option<PathBuf>) -> Result<Checkpoint> {
    let path = required(path, "--checkpoint")?;
    Checkpoint::load(path).with_context(|| format!("--checkpoint {}", path.display()))
}

fn load_pair(path: &Path) -> Result<CharacterPair> {
    io::load_pair(path).with_context(|| format!("--pair {}", path.display()))
}

fn load_motion(path: &Path, flag: &str) -> Result<io::MotionRecord> {
    io::load_motion(path).with_context(|| format!("{flag} {}", path.display()))
}

fn load_source_clips(paths: &[PathBuf], pair: &CharacterPair, flag: &str) -> Result<Vec<Motion>> {
    paths
        .iter()
        .map(|p| {
            let rec = load_motion(p, flag)?;
            if rec.motion.joints() != pair.source.skeleton.num_joints() {
                return Err(usage(format!(
                    "{flag} {}: {} joints, source `{}` has {}",
                    p.display(),
                    rec.motion.joints(),
                    pair.source.name,
                    pair.source.skeleton.num_joints()
                )));
            }
            Ok(rec.motion)
        })
        .collect()
}

fn train_config(common: &Common, stage: Stage) -> Result<TrainConfig> {
    let overrides = match &common.config {
        Some(p) => ConfigOverrides::load(p).with_context(|| format!("--config {}", p.display()))?,
        None => ConfigOverrides::default(),
    };
    let mut cfg = overrides.resolve(stage)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(v) = common.views {
        cfg.views = v;
    }
    cfg.deterministic |= common.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn exec(common: &Common) -> Exec {
    if common.deterministic {
        Exec::Sequential
    } else {
        Exec::Parallel
    }
}

fn views(common: &Common) -> Result<usize> {
    let v = common.views.unwrap_or(3);
    scene::views_for(v)?;
    Ok(v)
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match &cli.command {
        Command::Pretrain { characters, motions, log } => {
            let out = required(&common.out, "--out")?;
            let cfg = train_config(common, Stage::Pretrain)?;
            let chars: Vec<Character> = characters
                .iter()
                .map(|p| io::load_character(p).with_context(|| format!("--character {}", p.display())))
                .collect::<Result<_>>()?;
            let mut data: Vec<CharacterClips> = chars
                .iter()
                .map(|c| CharacterClips {
                    skeleton: c.skeleton.clone(),
                    clips: Vec::new(),
                })
                .collect();
            for p in motions {
                let rec = load_motion(p, "--motion")?;
                let i = chars.iter().position(|c| c.name == rec.character).ok_or_else(|| {
                    usage(format!("--motion {}: no --character named `{}`", p.display(), rec.character))
                })?;
                data[i].clips.push(rec.motion);
            }
            let run = train::pretrain(&data, &cfg, log.as_deref())?;
            run.checkpoint.save(out)?;
            info!("wrote {} after {} steps", out.display(), run.checkpoint.steps);
        }
        Command::Finetune { checkpoint, pair, motions, log } => {
            let out = required(&common.out, "--out")?;
            let ck = load_checkpoint(checkpoint)?;
            let pair = load_pair(pair)?;
            let clips = load_source_clips(motions, &pair, "--motion")?;
            let cfg = train_config(common, Stage::Finetune)?;
            let ctx = PairContext::new(pair, cfg.exec())?;
            let run = train::finetune(&ck, &ctx, &clips, &cfg, &MockEmbedder, log.as_deref())?;
            run.checkpoint.save(out)?;
            info!("wrote {} after {} steps", out.display(), run.checkpoint.steps);
        }
        Command::Retarget { checkpoint, source, pair } => {
            let out = required(&common.out, "--out")?;
            let ck = load_checkpoint(checkpoint)?;
            let pair = load_pair(pair)?;
            let clip = load_source_clips(std::slice::from_ref(source), &pair, "--source")?.remove(0);
            let motion = train::retarget(&ck, &clip, &pair)?;
            io::save_motion(&pair.target.name, &motion, out)?;
            info!("wrote {} ({} frames)", out.display(), motion.frames());
        }
        Command::Optimize {
            source,
            pair,
            initial,
            iterations,
            lr,
        } => {
            let out = required(&common.out, "--out")?;
            let pair = load_pair(pair)?;
            let src = load_source_clips(std::slice::from_ref(source), &pair, "--source")?.remove(0);
            let start = match initial {
                Some(p) => load_motion(p, "--initial")?.motion,
                None => train::copy_rotations(&src, &pair.source.skeleton, &pair.target.skeleton)?,
            };
            if start.frames() != src.frames() {
                return Err(usage("--initial must have as many frames as --source"));
            }
            let cfg = OptimizeConfig {
                iterations: *iterations,
                lr: *lr,
                views: views(common)?,
                deterministic: common.deterministic,
                ..OptimizeConfig::default()
            };
            let exec = exec(common);
            let ctx = PairContext::new(pair, exec)?;
            let view_set = scene::views_for(cfg.views)?;
            let frames = scene::sampled_frames(src.frames(), cfg.sem_frame_stride);
            let refs = scene::embed_motion(&ctx.pair.source, &src, &frames, &view_set, &MockEmbedder, exec)?;
            let run = train::direct_optimize(&start, &ctx.pair.target, &ctx.body, &refs, &cfg, &MockEmbedder)?;
            io::save_motion(&ctx.pair.target.name, &run.motion, out)?;
            info!(
                "loss {:.6} -> {:.6} (iteration {}); wrote {}",
                run.history[0],
                run.best_loss,
                run.best_iteration,
                out.display()
            );
        }
        Command::Evaluate {
            checkpoint,
            pair,
            sources,
            ground_truth,
            frame_stride,
        } => {
            let out = required(&common.out, "--out")?;
            let ck = load_checkpoint(checkpoint)?;
            let pair = load_pair(pair)?;
            let clips = load_source_clips(sources, &pair, "--source")?;
            if !ground_truth.is_empty() && ground_truth.len() != clips.len() {
                return Err(usage(format!(
                    "{} --ground-truth files for {} --source files",
                    ground_truth.len(),
                    clips.len()
                )));
            }
            let gt: Vec<Motion> = if ground_truth.is_empty() {
                clips
                    .iter()
                    .map(|m| train::copy_rotations(m, &pair.source.skeleton, &pair.target.skeleton))
                    .collect::<motionkit::Result<_>>()?
            } else {
                ground_truth
                    .iter()
                    .map(|p| load_motion(p, "--ground-truth").map(|r| r.motion))
                    .collect::<Result<_>>()?
            };
            if *frame_stride == 0 {
                return Err(usage("--frame-stride must be positive"));
            }
            let opts = EvalOptions {
                sem_frame_stride: *frame_stride,
                views: views(common)?,
                deterministic: common.deterministic,
            };
            let outputs: Vec<Motion> = clips
                .iter()
                .map(|m| train::retarget(&ck, m, &pair))
                .collect::<motionkit::Result<_>>()?;
            let itm = common
                .vlm_endpoint
                .as_deref()
                .filter(|e| !e.trim().is_empty())
                .map(|e| VlmClient::http(e, DEFAULT_TIMEOUT));
            let ctx = PairContext::new(pair, exec(common))?;
            let report = metrics::evaluate(&ctx, &clips, &outputs, &gt, &MockEmbedder, itm.as_ref(), &opts)?;
            report.save(out)?;
            info!(
                "mse {:.5} (local {:.5}), pen {:.2}%, fid {:.4}, scl {:.4}, itm {}",
                report.mse_global,
                report.mse_local,
                report.pen_percent,
                report.fid,
                report.scl,
                report.itm.map_or(report.itm_status.clone(), |v| format!("{v:.4}"))
            );
        }
        Command::Render { motion, character, stride } => {
            let out = required(&common.out, "--out")?;
            let character = io::load_character(character).with_context(|| format!("--character {}", character.display()))?;
            let rec = load_motion(motion, "--motion")?;
            if rec.motion.joints() != character.skeleton.num_joints() {
                return Err(usage(format!(
                    "--motion has {} joints, --character `{}` has {}",
                    rec.motion.joints(),
                    character.name,
                    character.skeleton.num_joints()
                )));
            }
            if *stride == 0 {
                return Err(usage("--stride must be positive"));
            }
            let view_set = scene::views_for(views(common)?)?;
            let frames = scene::sampled_frames(rec.motion.frames(), *stride);
            let rendered = scene::render_motion(&character, &rec.motion, &frames, &view_set, &RenderSettings::default(), exec(common))?;
            std::fs::create_dir_all(out).with_context(|| format!("--out {}", out.display()))?;
            for (f, frame) in frames.iter().zip(&rendered) {
                for (view, image) in frame.views.iter().zip(&frame.images) {
                    render::write_png(image, &out.join(format!("frame_{f:05}_{}.png", view.name())))?;
                }
            }
            info!("wrote {} images to {}", frames.len() * view_set.len(), out.display());
        }
        Command::MakeCharacter {
            joints,
            scale,
            torso_scale,
            name,
            motions,
            frames,
        } => {
            let out = required(&common.out, "--out")?;
            if !(*scale > 0.0 && *torso_scale > 0.0) {
                return Err(usage("--scale and --torso-scale must be positive"));
            }
            let seed = common.seed.unwrap_or(0);
            let mut p = Proportions::sample(seed).scaled(*scale);
            p.torso_radius *= torso_scale;
            let name = name.clone().unwrap_or_else(|| format!("synthetic_{seed}"));
            let character = synth::make_character(&name, *joints, &p)?;
            let clips = match motions {
                Some(_) => Style::ALL
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| synth::make_motion(&character.skeleton, &p, s, *frames, 30.0, seed * 31 + i as u64))
                    .collect::<motionkit::Result<Vec<_>>>()?,
                None => Vec::new(),
            };
            io::save_character(&character, out)?;
            if let Some(dir) = motions {
                std::fs::create_dir_all(dir).with_context(|| format!("--motions {}", dir.display()))?;
                for (style, m) in Style::ALL.iter().zip(&clips) {
                    let tag = format!("{style:?}").to_lowercase();
                    io::save_motion(&name, m, &dir.join(format!("{name}_{tag}.json")))?;
                }
            }
            info!("wrote {} ({} joints, height {:.3})", out.display(), joints, character.skeleton.height());
        }
    }
    Ok(())
}
