//! Two-stage training, inference-time retargeting and direct joint-angle
//! optimization.
//!
//! Batch losses are summed over frames (and joints, channels, vertices) and
//! averaged over the items of a batch.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::io::{self, Character, CharacterPair};
use crate::losses::{self, AdvConvention, FinetuneParts, LossWeights, PenRamp};
use crate::mesh;
use crate::net::{self, Discriminator, ModelConfig, RetargetModel, SkeletonBatch};
use crate::optim::Adam;
use crate::parallel::Exec;
use crate::scene::{self, BodyField, CharacterGeometry};
use crate::semantics::{DifferentiableEmbedder, SemanticBackend};
use crate::skeleton::{self, Motion, Skeleton};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Frames per training clip, randomly cropped.
    pub window: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub pen_ramp: PenRamp,
    /// Every k-th frame of a window is rendered for the semantic loss.
    pub sem_frame_stride: usize,
    pub views: usize,
    pub adv_convention: AdvConvention,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Forces single-worker execution.
    pub deterministic: bool,
}

impl TrainConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            lr: 3e-4,
            epochs: 80,
            batch_size: 16,
            window: 32,
            seed: 0,
            weights: LossWeights::default(),
            pen_ramp: PenRamp::default(),
            sem_frame_stride: 4,
            views: 3,
            adv_convention: AdvConvention::default(),
            max_steps: None,
            deterministic: false,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            lr: 1e-4,
            epochs: 25,
            batch_size: 4,
            ..Self::pretrain()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Pretrain => Self::pretrain(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.window == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and window must be positive".into()));
        }
        if self.sem_frame_stride == 0 {
            return Err(Error::InvalidConfig("sem_frame_stride must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::InvalidConfig("max_steps must be positive".into()));
        }
        scene::views_for(self.views)?;
        self.weights.validate()
    }

    pub fn exec(&self) -> Exec {
        if self.deterministic {
            Exec::Sequential
        } else {
            Exec::Parallel
        }
    }
}

/// Config file contents: any subset of [`TrainConfig`] fields. Missing fields
/// take the defaults of the stage being run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigOverrides {
    pub stage: Option<Stage>,
    pub lr: Option<f64>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub window: Option<usize>,
    pub seed: Option<u64>,
    pub weights: Option<LossWeights>,
    pub pen_ramp: Option<PenRamp>,
    pub sem_frame_stride: Option<usize>,
    pub views: Option<usize>,
    pub adv_convention: Option<AdvConvention>,
    pub max_steps: Option<usize>,
    pub deterministic: Option<bool>,
}

impl ConfigOverrides {
    pub fn load(path: &Path) -> Result<Self> {
        io::load_config(path)
    }

    pub fn resolve(&self, stage: Stage) -> Result<TrainConfig> {
        if let Some(s) = self.stage {
            if s != stage {
                return Err(Error::InvalidConfig(format!("config is for stage {s:?}, running {stage:?}")));
            }
        }
        let mut c = TrainConfig::for_stage(stage);
        macro_rules! set {
            ($($f:ident),*) => { $(if let Some(v) = self.$f.clone() { c.$f = v; })* };
        }
        set!(lr, epochs, batch_size, window, seed, weights, pen_ramp, sem_frame_stride, views, adv_convention, deterministic);
        if self.max_steps.is_some() {
            c.max_steps = self.max_steps;
        }
        c.validate()?;
        Ok(c)
    }
}

/// One record of the JSON-lines training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub losses: BTreeMap<String, f64>,
    pub lambda_effective: BTreeMap<String, f64>,
    pub wall_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub stage: Stage,
    pub steps: u64,
    pub model: RetargetModel,
    pub discriminator: Option<Discriminator>,
    pub config: TrainConfig,
    #[serde(default)]
    pub source: Option<String>,
    #[serde(default)]
    pub target: Option<String>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck: Checkpoint = io::read_json(path)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::schema(
                path.display().to_string(),
                format!("checkpoint format {} is not supported (expected {CHECKPOINT_VERSION})", ck.format_version),
            ));
        }
        ck.model.params.check_layout(&RetargetModel::new(ck.model.config.clone())?.params)?;
        Ok(ck)
    }
}

/// Unpaired motions of one character.
#[derive(Clone, Debug)]
pub struct CharacterClips {
    pub skeleton: Skeleton,
    pub clips: Vec<Motion>,
}

#[derive(Clone, Debug)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    /// Per optimizer step, unweighted per-item losses.
    pub steps: Vec<BTreeMap<String, f64>>,
}

#[derive(Clone, Copy, Debug)]
struct WindowRef {
    owner: usize,
    clip: usize,
    start: usize,
}

/// Random crops covering each clip about once per epoch. Starts are
/// multiples of `align`.
fn epoch_windows(clips: &[(usize, &Motion)], window: usize, align: usize, rng: &mut ChaCha8Rng) -> Vec<WindowRef> {
    let mut out = Vec::new();
    for (i, &(owner, m)) in clips.iter().enumerate() {
        let count = (m.frames() / window).max(1);
        for _ in 0..count {
            let start = align * rng.random_range(0..=(m.frames() - window) / align);
            out.push(WindowRef { owner, clip: i, start });
        }
    }
    out.shuffle(rng);
    out
}

fn crop(clips: &[(usize, &Motion)], w: &WindowRef, window: usize) -> Motion {
    clips[w.clip].1.window(w.start, window)
}

fn shortest_clip(clips: &[(usize, &Motion)]) -> usize {
    clips.iter().map(|(_, m)| m.frames()).min().unwrap_or(0)
}

/// Features and positions of a batch of motions on the tape.
struct Posed {
    q: Var,
    positions: Var,
}

fn pose_op(g: &mut Graph, rot: Var, root: Var, batch: &SkeletonBatch) -> Result<Posed> {
    let (positions, _) = skeleton::fk_from_rot6d(g, rot, root, &batch.fk)?;
    let inv: Vec<f64> = batch.heights.iter().map(|h| 1.0 / h).collect();
    let scaled = net::scale_items_op(g, positions, &inv)?;
    let q = g.concat_last(&[rot, scaled]);
    Ok(Posed { q, positions })
}

fn check_finite(values: &BTreeMap<String, f64>, epoch: usize, step: usize) -> Result<()> {
    if values.values().all(|v| v.is_finite()) {
        return Ok(());
    }
    Err(Error::DivergenceDetected(format!("epoch {epoch}, step {step}: losses {values:?}")))
}

struct JsonLines(Option<std::io::BufWriter<std::fs::File>>, std::path::PathBuf);

impl JsonLines {
    fn open(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self(None, Default::default())),
            Some(p) => {
                let f = std::fs::File::create(p).map_err(|e| Error::io(p, e))?;
                Ok(Self(Some(std::io::BufWriter::new(f)), p.to_path_buf()))
            }
        }
    }

    fn write(&mut self, record: &EpochLog) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let line = serde_json::to_string(record).map_err(|e| Error::schema("training log", e.to_string()))?;
            writeln!(w, "{line}").and_then(|_| w.flush()).map_err(|e| Error::io(&self.1, e))?;
        }
        Ok(())
    }
}

fn mean_losses(acc: &BTreeMap<String, f64>, n: usize) -> BTreeMap<String, f64> {
    acc.iter().map(|(k, v)| (k.clone(), v / n.max(1) as f64)).collect()
}

/// Stage 1: reconstruction, cycle, adversarial and joint-relationship losses
/// on unpaired motions of two or more characters. Generator and
/// discriminator alternate once per batch.
pub fn pretrain(data: &[CharacterClips], cfg: &TrainConfig, log: Option<&Path>) -> Result<PretrainRun> {
    cfg.validate()?;
    let with_clips: Vec<usize> = (0..data.len()).filter(|&i| !data[i].clips.is_empty()).collect();
    if with_clips.len() < 2 {
        return Err(Error::DataEmpty(format!(
            "pretraining needs motions of at least 2 characters, got {}",
            with_clips.len()
        )));
    }
    for c in &data[1..] {
        if !c.skeleton.same_topology(&data[0].skeleton) {
            return Err(Error::PairMismatch("all training characters must share one joint hierarchy".into()));
        }
    }
    let clips: Vec<(usize, &Motion)> = data
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.clips.iter().map(move |m| (i, m)))
        .collect();
    for (i, m) in &clips {
        if m.joints() != data[*i].skeleton.num_joints() {
            return Err(Error::ShapeMismatch(format!(
                "a clip of character {i} has {} joints, its skeleton {}",
                m.joints(),
                data[*i].skeleton.num_joints()
            )));
        }
    }
    let window = cfg.window.min(shortest_clip(&clips));
    let exec = cfg.exec();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = RetargetModel::new(ModelConfig {
        seed: cfg.seed,
        ..ModelConfig::default()
    })?;
    let mut disc = Discriminator::new(cfg.seed);
    let mut opt_g = Adam::new(cfg.lr);
    let mut opt_d = Adam::new(cfg.lr);
    let w = cfg.weights;
    let lambda: BTreeMap<String, f64> = [("rec", w.rec), ("cyc", w.cyc), ("adv", w.adv), ("jdm", w.jdm)]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    let mut logger = JsonLines::open(log)?;
    let started = Instant::now();
    let mut epochs = Vec::new();
    let mut step_log = Vec::new();
    let mut steps = 0usize;
    for epoch in 1..=cfg.epochs {
        let windows = epoch_windows(&clips, window, 1, &mut rng);
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        let mut epoch_steps = 0;
        for chunk in windows.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let motions: Vec<Motion> = chunk.iter().map(|wr| crop(&clips, wr, window)).collect();
            let targets: Vec<usize> = chunk
                .iter()
                .map(|wr| {
                    let others: Vec<usize> = with_clips.iter().copied().filter(|&c| c != wr.owner).collect();
                    others[rng.random_range(0..others.len())]
                })
                .collect();
            let src_skels: Vec<&Skeleton> = chunk.iter().map(|wr| &data[wr.owner].skeleton).collect();
            let tgt_skels: Vec<&Skeleton> = targets.iter().map(|&t| &data[t].skeleton).collect();
            let values = pretrain_step(
                &mut model,
                &mut disc,
                &mut opt_g,
                &mut opt_d,
                &motions,
                &SkeletonBatch::new(&src_skels)?,
                &SkeletonBatch::new(&tgt_skels)?,
                cfg,
                exec,
            )
            .map_err(|e| match e {
                Error::DivergenceDetected(msg) => {
                    Error::DivergenceDetected(format!("epoch {epoch}, step {}: {msg}", steps + 1))
                }
                other => other,
            })?;
            check_finite(&values, epoch, steps + 1)?;
            for (k, v) in &values {
                *acc.entry(k.clone()).or_default() += v;
            }
            step_log.push(values);
            steps += 1;
            epoch_steps += 1;
        }
        let record = EpochLog {
            epoch,
            steps: epoch_steps,
            losses: mean_losses(&acc, epoch_steps),
            lambda_effective: lambda.clone(),
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!("pretrain epoch {epoch}: {:?}", record.losses);
        logger.write(&record)?;
        epochs.push(record);
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    Ok(PretrainRun {
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_VERSION,
            stage: Stage::Pretrain,
            steps: steps as u64,
            model,
            discriminator: Some(disc),
            config: cfg.clone(),
            source: None,
            target: None,
        },
        epochs,
        steps: step_log,
    })
}

#[allow(clippy::too_many_arguments)]
fn pretrain_step(
    model: &mut RetargetModel,
    disc: &mut Discriminator,
    opt_g: &mut Adam,
    opt_d: &mut Adam,
    motions: &[Motion],
    src: &SkeletonBatch,
    tgt: &SkeletonBatch,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<BTreeMap<String, f64>> {
    let b = motions.len() as f64;
    let refs: Vec<&Motion> = motions.iter().collect();
    let w = cfg.weights;

    // generator
    let mut g = Graph::with_exec(exec);
    let p = model.params.bind(&mut g, true);
    let dp = disc.params.bind(&mut g, false);
    let (rot, root) = net::motion_tensors(&mut g, &refs)?;
    let a = pose_op(&mut g, rot, root, src)?;
    let z = model.encode_op(&mut g, &p, a.q, src)?;
    let (rot_aa, root_aa) = model.decode_op(&mut g, &p, z, src)?;
    let aa = pose_op(&mut g, rot_aa, root_aa, src)?;
    let rec = losses::rec_loss_op(&mut g, aa.q, a.q)?;
    let (rot_ab, root_ab) = model.decode_op(&mut g, &p, z, tgt)?;
    let ab = pose_op(&mut g, rot_ab, root_ab, tgt)?;
    let z_ab = model.encode_op(&mut g, &p, ab.q, tgt)?;
    let (rot_aba, root_aba) = model.decode_op(&mut g, &p, z_ab, src)?;
    let aba = pose_op(&mut g, rot_aba, root_aba, src)?;
    let cyc = losses::cyc_loss_op(&mut g, aba.q, a.q)?;
    let jdm = losses::jdm_loss_op(&mut g, a.positions, ab.positions)?;
    let probs = disc.forward(&mut g, &dp, ab.q, tgt)?;
    let adv = losses::adv_loss_generator_op(&mut g, probs, cfg.adv_convention);
    let total = g.weighted_sum(&[(rec, w.rec / b), (cyc, w.cyc / b), (adv, w.adv / b), (jdm, w.jdm / b)]);
    let mut values = BTreeMap::new();
    values.insert("rec".to_string(), g.scalar(rec) / b);
    values.insert("cyc".to_string(), g.scalar(cyc) / b);
    values.insert("adv".to_string(), g.scalar(adv) / b);
    values.insert("jdm".to_string(), g.scalar(jdm) / b);
    values.insert("total".to_string(), g.scalar(total));
    if !g.scalar(total).is_finite() {
        return Err(Error::DivergenceDetected(format!("generator losses {values:?}")));
    }
    let real_q = g.value(a.q).clone();
    let fake_q = g.value(ab.q).clone();
    let grads = g.backward(total);
    let gp: Vec<Option<Tensor>> = p.iter().map(|&v| grads.get(v).cloned()).collect();
    opt_g.step(model.params.tensors_mut(), &gp)?;

    // discriminator
    let mut g = Graph::with_exec(exec);
    let dp = disc.params.bind(&mut g, true);
    let real = g.constant(real_q);
    let fake = g.constant(fake_q);
    let pr = disc.forward(&mut g, &dp, real, src)?;
    let pf = disc.forward(&mut g, &dp, fake, tgt)?;
    let ld = losses::adv_loss_discriminator_op(&mut g, pr, pf);
    let ld = g.scale(ld, 1.0 / b);
    let disc_loss = g.scalar(ld);
    values.insert("disc".to_string(), disc_loss);
    if !disc_loss.is_finite() {
        return Err(Error::DivergenceDetected(format!("discriminator loss {disc_loss}")));
    }
    let grads = g.backward(ld);
    let gd: Vec<Option<Tensor>> = dp.iter().map(|&v| grads.get(v).cloned()).collect();
    opt_d.step(disc.params.tensors_mut(), &gd)?;
    Ok(values)
}

/// Precomputed data for fine-tuning and evaluating one pair.
#[derive(Clone, Debug)]
pub struct PairContext {
    pub pair: CharacterPair,
    pub target_geometry: CharacterGeometry,
    pub body: BodyField,
}

impl PairContext {
    pub fn new(pair: CharacterPair, exec: Exec) -> Result<Self> {
        let body = BodyField::build(&pair.target, exec)?;
        Ok(Self::with_body(pair, body))
    }

    pub fn with_body(pair: CharacterPair, body: BodyField) -> Self {
        Self {
            target_geometry: CharacterGeometry::new(&pair.target),
            pair,
            body,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub epochs: Vec<EpochLog>,
    pub steps: Vec<BTreeMap<String, f64>>,
}

/// Stage 2: per-pair fine-tuning on source clips with the semantic and
/// penetration losses. λ_p follows the ramp schedule.
pub fn finetune(
    checkpoint: &Checkpoint,
    ctx: &PairContext,
    clips: &[Motion],
    cfg: &TrainConfig,
    backend: &dyn SemanticBackend,
    log: Option<&Path>,
) -> Result<FinetuneRun> {
    cfg.validate()?;
    let embedder = backend
        .as_differentiable()
        .ok_or_else(|| Error::BackendNotDifferentiable(backend.backend_id()))?;
    if clips.is_empty() {
        return Err(Error::DataEmpty("fine-tuning needs at least one source clip".into()));
    }
    let (src, tgt) = (&ctx.pair.source, &ctx.pair.target);
    if !src.skeleton.same_topology(&tgt.skeleton) {
        return Err(Error::PairMismatch("source and target skeletons differ in topology".into()));
    }
    for m in clips {
        if m.joints() != src.skeleton.num_joints() {
            return Err(Error::PairMismatch(format!(
                "clip has {} joints, source `{}` has {}",
                m.joints(),
                src.name,
                src.skeleton.num_joints()
            )));
        }
    }
    let exec = cfg.exec();
    let views = scene::views_for(cfg.views)?;
    let indexed: Vec<(usize, &Motion)> = clips.iter().map(|m| (0, m)).collect();
    let window = cfg.window.min(shortest_clip(&indexed));
    let sampled = scene::sampled_frames(window, cfg.sem_frame_stride);

    // windows start on multiples of the stride, so only frames 0, k, 2k, …
    // of each source clip are ever compared
    let stride = cfg.sem_frame_stride;
    let with_sem = cfg.weights.sem > 0.0;
    let source_embeddings: Vec<Tensor> = if with_sem {
        clips
            .iter()
            .map(|m| scene::embed_motion(src, m, &scene::sampled_frames(m.frames(), stride), &views, backend, exec))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };

    let mut model = checkpoint.model.clone();
    let mut opt = Adam::new(cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xf1e7_0e5e);
    let src_batch_full = SkeletonBatch::repeat(&src.skeleton, cfg.batch_size)?;
    let tgt_batch_full = SkeletonBatch::repeat(&tgt.skeleton, cfg.batch_size)?;
    let mut logger = JsonLines::open(log)?;
    let started = Instant::now();
    let mut epochs = Vec::new();
    let mut step_log = Vec::new();
    let mut steps = 0usize;
    for epoch in 1..=cfg.epochs {
        let lambda_p = cfg.weights.pen * cfg.pen_ramp.factor(epoch);
        let lambda_s = cfg.weights.sem;
        let windows = epoch_windows(&indexed, window, cfg.sem_frame_stride, &mut rng);
        let mut acc: BTreeMap<String, f64> = BTreeMap::new();
        let mut epoch_steps = 0;
        for chunk in windows.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let motions: Vec<Motion> = chunk.iter().map(|wr| crop(&indexed, wr, window)).collect();
            let reference = if with_sem {
                let k = source_embeddings[0].shape()[1];
                let mut rows = Vec::new();
                for wr in chunk {
                    let e = &source_embeddings[wr.clip];
                    for &f in &sampled {
                        let row = (wr.start + f) / stride;
                        rows.extend_from_slice(&e.data()[row * k..(row + 1) * k]);
                    }
                }
                Tensor::new([chunk.len() * sampled.len(), k], rows)
            } else {
                Tensor::zeros([0, 0])
            };
            let (sb, tb) = if chunk.len() == cfg.batch_size {
                (src_batch_full.clone(), tgt_batch_full.clone())
            } else {
                (
                    SkeletonBatch::repeat(&src.skeleton, chunk.len())?,
                    SkeletonBatch::repeat(&tgt.skeleton, chunk.len())?,
                )
            };
            let values = finetune_step(
                &mut model,
                &mut opt,
                &motions,
                &sb,
                &tb,
                ctx,
                &sampled,
                &views,
                &reference,
                embedder,
                lambda_s,
                lambda_p,
                exec,
            )?;
            check_finite(&values, epoch, steps + 1)?;
            for (k, v) in &values {
                *acc.entry(k.clone()).or_default() += v;
            }
            step_log.push(values);
            steps += 1;
            epoch_steps += 1;
        }
        let record = EpochLog {
            epoch,
            steps: epoch_steps,
            losses: mean_losses(&acc, epoch_steps),
            lambda_effective: [("sem".to_string(), lambda_s), ("pen".to_string(), lambda_p)].into_iter().collect(),
            wall_time: started.elapsed().as_secs_f64(),
        };
        log::info!("finetune epoch {epoch}: {:?}", record.losses);
        logger.write(&record)?;
        epochs.push(record);
        if cfg.max_steps.is_some_and(|m| steps >= m) {
            break;
        }
    }
    Ok(FinetuneRun {
        checkpoint: Checkpoint {
            format_version: CHECKPOINT_VERSION,
            stage: Stage::Finetune,
            steps: checkpoint.steps + steps as u64,
            model,
            discriminator: checkpoint.discriminator.clone(),
            config: cfg.clone(),
            source: Some(src.name.clone()),
            target: Some(tgt.name.clone()),
        },
        epochs,
        steps: step_log,
    })
}

/// Target-side semantic and penetration losses for posed rotations on the
/// tape. Returns `(sem, pen)`, both summed over the batch.
#[allow(clippy::too_many_arguments)]
fn target_losses_op(
    g: &mut Graph,
    rot: Var,
    root: Var,
    tgt: &SkeletonBatch,
    ctx: &PairContext,
    sampled: &[usize],
    views: &[crate::render::View],
    reference: &Tensor,
    embedder: &dyn DifferentiableEmbedder,
    with_sem: bool,
) -> Result<(Var, Var)> {
    let (_, transforms) = skeleton::fk_from_rot6d(g, rot, root, &tgt.fk)?;
    let verts = mesh::lbs_op(g, transforms, &ctx.target_geometry.mesh)?;
    let vs = g.value(verts).shape().to_vec();
    let ts = g.value(transforms).shape().to_vec();
    let (b, t, nv) = (vs[0], vs[1], vs[2]);
    let flat_v = g.reshape(verts, &[b * t, nv, 3]);
    let flat_t = g.reshape(transforms, &[b * t, ts[2], 12]);
    let pen = ctx.body.pen_loss_op(g, flat_v, flat_t)?;
    let sem = if with_sem {
        let picked = g.gather(verts, 1, sampled);
        let picked = g.reshape(picked, &[b * sampled.len(), nv, 3]);
        let e = scene::embed_vertices_op(g, picked, &ctx.target_geometry, views, embedder)?;
        let r = g.constant(reference.clone());
        losses::sem_loss_op(g, e, r)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    Ok((sem, pen))
}

#[allow(clippy::too_many_arguments)]
fn finetune_step(
    model: &mut RetargetModel,
    opt: &mut Adam,
    motions: &[Motion],
    src: &SkeletonBatch,
    tgt: &SkeletonBatch,
    ctx: &PairContext,
    sampled: &[usize],
    views: &[crate::render::View],
    reference: &Tensor,
    embedder: &dyn DifferentiableEmbedder,
    lambda_s: f64,
    lambda_p: f64,
    exec: Exec,
) -> Result<BTreeMap<String, f64>> {
    let b = motions.len() as f64;
    let refs: Vec<&Motion> = motions.iter().collect();
    let mut g = Graph::with_exec(exec);
    let p = model.params.bind(&mut g, true);
    let (rot, root) = net::motion_tensors(&mut g, &refs)?;
    let q = net::motion_features_op(&mut g, rot, root, src)?;
    let (rot_b, root_b, _) = model.retarget_op(&mut g, &p, q, src, tgt)?;
    let (sem, pen) = target_losses_op(
        &mut g,
        rot_b,
        root_b,
        tgt,
        ctx,
        sampled,
        views,
        reference,
        embedder,
        lambda_s > 0.0,
    )?;
    let total = g.weighted_sum(&[(sem, lambda_s / b), (pen, lambda_p / b)]);
    let mut values = BTreeMap::new();
    values.insert("sem".to_string(), g.scalar(sem) / b);
    values.insert("pen".to_string(), g.scalar(pen) / b);
    values.insert("total".to_string(), g.scalar(total));
    if !g.scalar(total).is_finite() {
        return Err(Error::DivergenceDetected(format!("fine-tuning losses {values:?}")));
    }
    let grads = g.backward(total);
    let gp: Vec<Option<Tensor>> = p.iter().map(|&v| grads.get(v).cloned()).collect();
    opt.step(model.params.tensors_mut(), &gp)?;
    Ok(values)
}

/// Retargets a source clip with a trained checkpoint.
pub fn retarget(checkpoint: &Checkpoint, motion: &Motion, pair: &CharacterPair) -> Result<Motion> {
    if motion.joints() != pair.source.skeleton.num_joints() {
        return Err(Error::PairMismatch(format!(
            "motion has {} joints, source `{}` has {}",
            motion.joints(),
            pair.source.name,
            pair.source.skeleton.num_joints()
        )));
    }
    checkpoint
        .model
        .retarget(motion, &pair.source.skeleton, &pair.target.skeleton)
}

/// Baseline that copies joint rotations and scales the root trajectory by the
/// height ratio.
pub fn copy_rotations(motion: &Motion, source: &Skeleton, target: &Skeleton) -> Result<Motion> {
    if !source.same_topology(target) || motion.joints() != source.num_joints() {
        return Err(Error::PairMismatch("copying rotations needs matching hierarchies".into()));
    }
    let s = target.height() / source.height();
    Motion::new(motion.rot6d.clone(), motion.root_pos.map(|v| v * s), motion.fps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub sem_frame_stride: usize,
    pub views: usize,
    pub deterministic: bool,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            iterations: 200,
            lr: 0.01,
            weights: LossWeights::default(),
            sem_frame_stride: 4,
            views: 3,
            deterministic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeRun {
    pub motion: Motion,
    /// Loss and components at the input, before any update.
    pub initial: FinetuneParts,
    pub best: FinetuneParts,
    pub best_loss: f64,
    pub best_iteration: usize,
    /// Objective at every evaluated iterate (index 0 is the input).
    pub history: Vec<f64>,
}

/// Gradient descent on rot6d and root positions minimizing
/// `λ_s L_sem + λ_p L_pen`; returns the best iterate. `references` holds the
/// embeddings `[F, K]` of frames `0, k, 2k, …`.
pub fn direct_optimize(
    initial: &Motion,
    target: &Character,
    body: &BodyField,
    references: &Tensor,
    cfg: &OptimizeConfig,
    backend: &dyn SemanticBackend,
) -> Result<OptimizeRun> {
    let embedder = backend
        .as_differentiable()
        .ok_or_else(|| Error::BackendNotDifferentiable(backend.backend_id()))?;
    if !(cfg.lr > 0.0) || cfg.sem_frame_stride == 0 {
        return Err(Error::InvalidConfig("optimizer lr and frame stride must be positive".into()));
    }
    if initial.joints() != target.skeleton.num_joints() {
        return Err(Error::PairMismatch(format!(
            "motion has {} joints, target `{}` has {}",
            initial.joints(),
            target.name,
            target.skeleton.num_joints()
        )));
    }
    let views = scene::views_for(cfg.views)?;
    let sampled = scene::sampled_frames(initial.frames(), cfg.sem_frame_stride);
    if references.shape().len() != 2 || references.shape()[0] != sampled.len() {
        return Err(Error::ShapeMismatch(format!(
            "references must be [{}, K], got {:?}",
            sampled.len(),
            references.shape()
        )));
    }
    let exec = if cfg.deterministic { Exec::Sequential } else { Exec::Parallel };
    let ctx = PairContext::with_body(
        CharacterPair {
            source: target.clone(),
            target: target.clone(),
            checkpoint_id: None,
        },
        body.clone(),
    );
    let batch = SkeletonBatch::repeat(&target.skeleton, 1)?;
    let (t, n) = (initial.frames(), initial.joints());
    let mut params = vec![
        initial.rot6d.clone().reshaped([1, t, n, 6]),
        initial.root_pos.clone().reshaped([1, t, 3]),
    ];
    let mut opt = Adam::new(cfg.lr);
    let (ls, lp) = (cfg.weights.sem, cfg.weights.pen);
    let mut history = Vec::with_capacity(cfg.iterations + 1);
    let mut best: Option<(f64, FinetuneParts, usize, Vec<Tensor>)> = None;
    let mut initial_parts = FinetuneParts::default();
    for it in 0..=cfg.iterations {
        let mut g = Graph::with_exec(exec);
        let rot = g.param(params[0].clone());
        let root = g.param(params[1].clone());
        let (sem, pen) =
            target_losses_op(&mut g, rot, root, &batch, &ctx, &sampled, &views, references, embedder, ls > 0.0)?;
        let total = g.weighted_sum(&[(sem, ls), (pen, lp)]);
        let parts = FinetuneParts {
            sem: g.scalar(sem),
            pen: g.scalar(pen),
        };
        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected(format!("direct optimization iteration {it}: {parts:?}")));
        }
        if it == 0 {
            initial_parts = parts;
        }
        history.push(loss);
        if best.as_ref().is_none_or(|b| loss < b.0) {
            best = Some((loss, parts, it, params.clone()));
        }
        if it == cfg.iterations {
            break;
        }
        let grads = g.backward(total);
        let gp = vec![grads.get(rot).cloned(), grads.get(root).cloned()];
        opt.step(&mut params, &gp)?;
    }
    let (best_loss, best_parts, best_iteration, best_params) = best.unwrap();
    let motion = Motion::new(
        best_params[0].clone().reshaped([t, n, 6]),
        best_params[1].clone().reshaped([t, 3]),
        initial.fps,
    )?;
    Ok(OptimizeRun {
        motion,
        initial: initial_parts,
        best: best_parts,
        best_loss,
        best_iteration,
        history,
    })
}
