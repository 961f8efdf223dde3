//! Two-stage training: stage 1 on `L1 + SSIM`, stage 2 on the hybrid
//! objective against the multi-critic.
//!
//! Every random draw comes from a ChaCha stream addressed by
//! `(seed, stage, step, stream)`, so a run resumed from a checkpoint replays
//! exactly the draws of an uninterrupted run.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad, Var};
use crate::checkpoint::Checkpoint;
use crate::critic::{critic_loss, CriticConfig, MultiCritic};
use crate::data::{random_crop_pair, to_model_range, PairedSample};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::glassnet::{Generator, GeneratorConfig};
use crate::innorm::InMode;
use crate::losses::{
    adversarial_gen_loss, hybrid_loss, hybrid_loss_no_adv, l1_loss, neg_ssim_loss, perceptual_loss, stage1_loss_weighted, HybridParts,
    LossReport, LossWeights,
};
use crate::nn::Param;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

/// Critic scores beyond this magnitude are flagged in the history.
pub const SCORE_WARN: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub stage1_epochs: u64,
    pub stage2_epochs: u64,
    pub batch_size: usize,
    pub critic_steps: usize,
    pub seed: u64,
    /// Steps between checkpoints written by the CLI; 0 disables.
    pub checkpoint_every: u64,
    /// Replaces `epochs × steps_per_epoch` as the stage length when set.
    pub max_steps: Option<u64>,
    /// Training crop `(height, width)`.
    pub crop: (usize, usize),
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            stage1_epochs: 60,
            stage2_epochs: 60,
            batch_size: 1,
            critic_steps: 5,
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
            crop: (192, 128),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_epochs == 0 || self.stage2_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.critic_steps == 0 {
            return Err(Error::Config("critic_steps must be at least 1".into()));
        }
        if self.crop.0 == 0 || self.crop.1 == 0 || self.crop.0 % 8 != 0 || self.crop.1 % 8 != 0 {
            return Err(Error::Config(format!("crop {}x{} must be positive multiples of 8", self.crop.0, self.crop.1)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_samples: usize) -> u64 {
        n_samples.div_ceil(self.batch_size) as u64
    }

    pub fn stage_steps(&self, stage: u8, n_samples: usize) -> u64 {
        let epochs = if stage == 1 { self.stage1_epochs } else { self.stage2_epochs };
        self.max_steps.unwrap_or(epochs * self.steps_per_epoch(n_samples))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum ExtractorKind {
    /// Seeded random three-layer network.
    #[default]
    Desk,
    Identity,
    /// Pretrained 19-layer VGG stack from `extractor_weights`.
    Pretrained,
}

impl ExtractorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExtractorKind::Desk => "desk",
            ExtractorKind::Identity => "identity",
            ExtractorKind::Pretrained => "pretrained",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(ExtractorKind::Desk),
            "identity" => Some(ExtractorKind::Identity),
            "pretrained" => Some(ExtractorKind::Pretrained),
            _ => None,
        }
    }
}

/// Everything that determines a training run besides the data.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub critic: CriticConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub schedule: TrainSchedule,
    /// `false` trains stage 2 without critics (`hybrid_loss_no_adv`).
    pub adversarial: bool,
    pub extractor: ExtractorKind,
    pub extractor_seed: u64,
    /// Weights file for [`ExtractorKind::Pretrained`]; resolved by the caller.
    pub extractor_weights: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let schedule = TrainSchedule::default();
        TrainConfig {
            generator: GeneratorConfig::full(),
            critic: CriticConfig { min_input_hw: schedule.crop, ..CriticConfig::default() },
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            schedule,
            adversarial: true,
            extractor: ExtractorKind::Desk,
            extractor_seed: 0,
            extractor_weights: String::new(),
        }
    }
}

impl TrainConfig {
    /// Reduced generator and critics for CPU-scale runs, with a learning
    /// rate of 5e-4 so a few hundred steps make visible progress.
    pub fn desk() -> Self {
        TrainConfig {
            generator: GeneratorConfig::desk(),
            critic: CriticConfig { min_input_hw: TrainSchedule::default().crop, ..CriticConfig::desk() },
            adam: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.critic.validate()?;
        self.loss.validate()?;
        self.adam.validate()?;
        self.schedule.validate()?;
        let m = self.generator.size_multiple();
        let (h, w) = self.schedule.crop;
        if h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!("crop {h}x{w} must be a multiple of {m}")));
        }
        Ok(())
    }

    /// Flat `key = value` view of every field.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self.generator.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let c = &self.critic;
        let depths: Vec<String> = c.depths.iter().map(|d| d.to_string()).collect();
        let s = &self.schedule;
        let rows: [(&str, String); 23] = [
            ("critic_depths", depths.join(",")),
            ("critic_base_channels", c.base_channels.to_string()),
            ("gp_lambda", format!("{:?}", c.gp_lambda)),
            ("critic_norm_mode", c.norm_mode.as_str().into()),
            ("w_l1", format!("{:?}", self.loss.w_l1)),
            ("w_ssim", format!("{:?}", self.loss.w_ssim)),
            ("w_vgg", format!("{:?}", self.loss.w_vgg)),
            ("w_adv", format!("{:?}", self.loss.w_adv)),
            ("lr", format!("{:?}", self.adam.lr)),
            ("beta1", format!("{:?}", self.adam.beta1)),
            ("beta2", format!("{:?}", self.adam.beta2)),
            ("eps", format!("{:?}", self.adam.eps)),
            ("stage1_epochs", s.stage1_epochs.to_string()),
            ("stage2_epochs", s.stage2_epochs.to_string()),
            ("batch_size", s.batch_size.to_string()),
            ("critic_steps", s.critic_steps.to_string()),
            ("seed", s.seed.to_string()),
            ("checkpoint_every", s.checkpoint_every.to_string()),
            ("max_steps", s.max_steps.unwrap_or(0).to_string()),
            ("crop_height", s.crop.0.to_string()),
            ("crop_width", s.crop.1.to_string()),
            ("adversarial", self.adversarial.to_string()),
            ("extractor", self.extractor.as_str().into()),
        ];
        out.extend(rows.into_iter().map(|(k, v)| (k.to_string(), v)));
        out.push(("extractor_seed".into(), self.extractor_seed.to_string()));
        out.push(("extractor_weights".into(), self.extractor_weights.clone()));
        out
    }

    /// Starts from `base` and applies `pairs`; unknown keys are rejected.
    pub fn from_pairs<'a>(base: &TrainConfig, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = base.clone();
        let mut gen_pairs: Vec<(String, String)> = cfg.generator.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        for (k, v) in pairs {
            let bad = || Error::Config(format!("{k}: cannot parse {v:?}"));
            let uint = || v.parse::<u64>().map_err(|_| bad());
            let real = || v.parse::<f64>().map_err(|_| bad());
            if let Some(slot) = gen_pairs.iter_mut().find(|(gk, _)| gk == k) {
                slot.1 = v.into();
                continue;
            }
            match k {
                "critic_depths" => {
                    cfg.critic.depths = v.split(',').map(|d| d.trim().parse::<usize>().map_err(|_| bad())).collect::<Result<_>>()?
                }
                "critic_base_channels" => cfg.critic.base_channels = uint()? as usize,
                "gp_lambda" => cfg.critic.gp_lambda = real()?,
                "critic_norm_mode" => cfg.critic.norm_mode = InMode::parse(v).ok_or_else(bad)?,
                "w_l1" => cfg.loss.w_l1 = real()?,
                "w_ssim" => cfg.loss.w_ssim = real()?,
                "w_vgg" => cfg.loss.w_vgg = real()?,
                "w_adv" => cfg.loss.w_adv = real()?,
                "lr" => cfg.adam.lr = real()?,
                "beta1" => cfg.adam.beta1 = real()?,
                "beta2" => cfg.adam.beta2 = real()?,
                "eps" => cfg.adam.eps = real()?,
                "stage1_epochs" => cfg.schedule.stage1_epochs = uint()?,
                "stage2_epochs" => cfg.schedule.stage2_epochs = uint()?,
                "batch_size" => cfg.schedule.batch_size = uint()? as usize,
                "critic_steps" => cfg.schedule.critic_steps = uint()? as usize,
                "seed" => cfg.schedule.seed = uint()?,
                "checkpoint_every" => cfg.schedule.checkpoint_every = uint()?,
                "max_steps" => cfg.schedule.max_steps = Some(uint()?).filter(|&n| n > 0),
                "crop_height" => cfg.schedule.crop.0 = uint()? as usize,
                "crop_width" => cfg.schedule.crop.1 = uint()? as usize,
                "adversarial" => cfg.adversarial = v.parse().map_err(|_| bad())?,
                "extractor" => cfg.extractor = ExtractorKind::parse(v).ok_or_else(bad)?,
                "extractor_seed" => cfg.extractor_seed = uint()?,
                "extractor_weights" => cfg.extractor_weights = v.into(),
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        cfg.generator = GeneratorConfig::from_pairs(gen_pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        cfg.critic.min_input_hw = cfg.schedule.crop;
        cfg.validate()?;
        Ok(cfg)
    }
}

impl TrainConfig {
    /// The configuration snapshot stored under `config.*` metadata.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let pairs = ckpt.meta.iter().filter_map(|(k, v)| Some((k.strip_prefix("config.")?, v.as_str())));
        TrainConfig::from_pairs(&TrainConfig::default(), pairs)
    }
}

/// One optimizer step (stage 1) or one critic/generator cycle (stage 2).
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: u64,
    pub step: u64,
    pub generator: LossReport,
    /// One report per critic update of the cycle.
    pub critic: Vec<LossReport>,
    pub warnings: Vec<String>,
}

/// Streams within one `(stage, step)`.
const STREAM_CROP: u64 = 0;
const STREAM_GP: u64 = 1;

fn step_rng(seed: u64, stage: u8, step: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stage as u64) << 56) | stream);
    rng.set_word_pos((step as u128) << 40);
    rng
}

fn all_finite(ts: &[Tensor<f32>]) -> bool {
    ts.iter().all(Tensor::all_finite)
}

/// Generator, critics, both optimizers and the schedule position.
pub struct Session {
    pub config: TrainConfig,
    pub generator: Generator<f32>,
    pub critics: MultiCritic<f32>,
    pub adam_g: Adam<f32>,
    pub adam_d: Adam<f32>,
    /// Current stage, 1 or 2.
    pub stage: u8,
    /// Completed steps within the current stage.
    pub step: u64,
    data: Vec<PairedSample>,
    fx: FeatureExtractor<f32>,
}

impl core::fmt::Debug for Session {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Session").field("stage", &self.stage).field("step", &self.step).field("samples", &self.data.len()).finish()
    }
}

impl Session {
    /// Fresh weights from the schedule seed; samples are used in id order.
    pub fn new(config: TrainConfig, mut data: Vec<PairedSample>, fx: FeatureExtractor<f32>) -> Result<Self> {
        let mut config = config;
        config.critic.min_input_hw = config.schedule.crop;
        config.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let (h, w) = config.schedule.crop;
        if let Some(p) = data.iter().find(|p| p.source.height < h || p.source.width < w) {
            return Err(Error::InvalidInput(format!(
                "sample {} is {}x{}, smaller than the {h}x{w} crop",
                p.id, p.source.height, p.source.width
            )));
        }
        data.sort_by(|a, b| a.id.cmp(&b.id));
        let seed = config.schedule.seed;
        let generator = Generator::build(&config.generator, seed)?;
        let critics = MultiCritic::build(&config.critic, seed ^ 0x5eed_c417_1c00_0001)?;
        Ok(Session {
            adam_g: Adam::new(config.adam),
            adam_d: Adam::new(config.adam),
            config,
            generator,
            critics,
            stage: 1,
            step: 0,
            data,
            fx,
        })
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, data: Vec<PairedSample>, fx: FeatureExtractor<f32>) -> Result<Self> {
        let config = TrainConfig::from_checkpoint(ckpt)?;
        let mut s = Session::new(config, data, fx)?;
        ckpt.load_params("generator", &s.generator.params())?;
        ckpt.load_params("critic", &s.critics.params())?;
        s.adam_g = Adam::import(s.config.adam, "adam_g", ckpt)?;
        s.adam_d = Adam::import(s.config.adam, "adam_d", ckpt)?;
        s.stage = ckpt.meta_parse("stage")?;
        s.step = ckpt.meta_parse("step")?;
        if !(1..=2).contains(&s.stage) {
            return Err(Error::Checkpoint(format!("stage must be 1 or 2, found {}", s.stage)));
        }
        Ok(s)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, v) in self.config.to_pairs() {
            c.meta.insert(format!("config.{k}"), v);
        }
        c.meta.insert("stage".into(), self.stage.to_string());
        c.meta.insert("step".into(), self.step.to_string());
        c.meta.insert("epoch".into(), self.epoch().to_string());
        c.insert_params("generator", &self.generator.params());
        c.insert_params("critic", &self.critics.params());
        self.adam_g.export("adam_g", &mut c);
        self.adam_d.export("adam_d", &mut c);
        c
    }

    pub fn samples(&self) -> &[PairedSample] {
        &self.data
    }

    pub fn epoch(&self) -> u64 {
        self.step / self.config.schedule.steps_per_epoch(self.data.len())
    }

    /// Scheduled length of the current stage.
    pub fn stage_steps(&self) -> u64 {
        self.config.schedule.stage_steps(self.stage, self.data.len())
    }

    pub fn remaining(&self) -> u64 {
        self.stage_steps().saturating_sub(self.step)
    }

    /// Switches to stage 2 with a fresh generator optimizer.
    pub fn begin_stage2(&mut self) {
        if self.stage == 1 {
            self.stage = 2;
            self.step = 0;
            self.adam_g = Adam::new(self.config.adam);
        }
    }

    /// `(source, target)` batches for the current step, cropped with `rng`.
    fn batch(&self, rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let sched = &self.config.schedule;
        let spe = sched.steps_per_epoch(self.data.len());
        let start = (self.step % spe) as usize * sched.batch_size;
        let end = (start + sched.batch_size).min(self.data.len());
        let (mut src, mut tgt) = (Vec::new(), Vec::new());
        for p in &self.data[start..end] {
            let c = random_crop_pair(p, sched.crop.0, sched.crop.1, rng)?;
            src.push(to_model_range::<f32>(&c.source));
            tgt.push(to_model_range::<f32>(&c.target));
        }
        Ok((Tensor::stack(&src)?, Tensor::stack(&tgt)?))
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        step_rng(self.config.schedule.seed, self.stage, self.step, stream)
    }

    fn gradients(&self, loss: &Var<f32>, params: &[&Param<f32>], what: &str) -> Result<Vec<Tensor<f32>>> {
        let vars: Vec<Var<f32>> = params.iter().map(|p| p.var()).collect();
        let refs: Vec<&Var<f32>> = vars.iter().collect();
        let grads: Vec<Tensor<f32>> = grad(loss, &refs, false)?.into_iter().map(|g| g.value().clone()).collect();
        if !loss.item().is_finite() || !all_finite(&grads) {
            return Err(Error::NonFinite { what: what.into(), step: self.step });
        }
        Ok(grads)
    }

    /// One stage-1 step. On a non-finite loss or gradient nothing is updated
    /// and [`Error::NonFinite`] is returned; the session then serves as the
    /// diagnostic checkpoint.
    pub fn stage1_step(&mut self) -> Result<StepRecord> {
        if self.stage != 1 {
            return Err(Error::InvalidInput("stage-1 step requested during stage 2".into()));
        }
        let (src, tgt) = self.current_batch()?;
        let out = self.generator.forward(&Var::constant(src))?;
        let (loss, report) = stage1_loss_weighted(&self.config.loss, &out.final_image, &Var::constant(tgt))?;
        let params = self.generator.params();
        let grads = self.gradients(&loss, &params, "stage-1 loss")?;
        self.adam_g.step(&params, &grads)?;
        let rec = StepRecord { stage: 1, epoch: self.epoch(), step: self.step, generator: report, critic: Vec::new(), warnings: Vec::new() };
        self.step += 1;
        Ok(rec)
    }

    /// Source and target batches of the current step.
    pub fn current_batch(&self) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.batch(&mut self.rng(STREAM_CROP))
    }

    /// Critic update `k` of the current cycle against fresh generator
    /// output. Only critic weights change.
    pub fn critic_update(&mut self, k: usize, src: &Tensor<f32>, tgt: &Tensor<f32>) -> Result<LossReport> {
        let fake = self.generator.render(src)?;
        let mut rng = self.rng(STREAM_GP + k as u64);
        let (loss, report) = critic_loss(&self.critics, tgt, &fake, &mut rng)?;
        let params = self.critics.params();
        let grads = self.gradients(&loss, &params, "critic loss")?;
        self.adam_d.step(&params, &grads)?;
        Ok(report)
    }

    /// Generator update on the hybrid objective. Only generator weights change.
    pub fn generator_update(&mut self, src: &Tensor<f32>, tgt: &Tensor<f32>) -> Result<LossReport> {
        let out = self.generator.forward(&Var::constant(src.clone()))?;
        let fake = &out.final_image;
        let gt = Var::constant(tgt.clone());
        let mut parts = HybridParts {
            l1: Some(l1_loss(fake, &gt)?),
            ssim: Some(neg_ssim_loss(fake, &gt)?),
            vgg: Some(perceptual_loss(&self.fx, fake, &gt)?),
            adv: None,
        };
        let (loss, report) = if self.config.adversarial {
            parts.adv = Some(adversarial_gen_loss(&self.critics, fake)?);
            hybrid_loss(&self.config.loss, &parts)?
        } else {
            hybrid_loss_no_adv(&self.config.loss, &parts)?
        };
        let params = self.generator.params();
        let grads = self.gradients(&loss, &params, "generator hybrid loss")?;
        self.adam_g.step(&params, &grads)?;
        Ok(report)
    }

    /// One stage-2 cycle: `critic_steps` critic updates (skipped when not
    /// adversarial), then one generator update. A non-finite value aborts
    /// the cycle; critic updates already applied in it are kept.
    pub fn stage2_step(&mut self) -> Result<StepRecord> {
        if self.stage != 2 {
            return Err(Error::InvalidInput("stage-2 step requested during stage 1".into()));
        }
        let (src, tgt) = self.current_batch()?;
        let mut critic_reports = Vec::new();
        let mut warnings = Vec::new();
        if self.config.adversarial {
            for k in 0..self.config.schedule.critic_steps {
                let report = self.critic_update(k, &src, &tgt)?;
                for term in ["d_real", "d_fake"] {
                    let v = report.term(term).unwrap_or(0.0);
                    if v.abs() > SCORE_WARN {
                        warnings.push(format!("critic step {k}: {term} = {v:e} exceeds {SCORE_WARN:e}"));
                    }
                }
                critic_reports.push(report);
            }
        }
        let report = self.generator_update(&src, &tgt)?;
        let rec = StepRecord { stage: 2, epoch: self.epoch(), step: self.step, generator: report, critic: critic_reports, warnings };
        self.step += 1;
        Ok(rec)
    }

    pub fn step_once(&mut self) -> Result<StepRecord> {
        if self.stage == 1 {
            self.stage1_step()
        } else {
            self.stage2_step()
        }
    }

    /// Runs up to `n` steps of the current stage, stopping at the stage end.
    pub fn run(&mut self, n: u64) -> Result<Vec<StepRecord>> {
        let n = n.min(self.remaining());
        (0..n).map(|_| self.step_once()).collect()
    }
}

/// Rebuilds the generator stored in a checkpoint.
pub fn generator_from_checkpoint(ckpt: &Checkpoint) -> Result<Generator<f32>> {
    let config = TrainConfig::from_checkpoint(ckpt)?;
    let g = Generator::build(&config.generator, config.schedule.seed)?;
    ckpt.load_params("generator", &g.params())?;
    Ok(g)
}

/// Result of a whole-stage run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<StepRecord>,
}

/// Runs stage 1 to the end of its schedule.
pub fn train_stage1(session: &mut Session) -> Result<TrainOutcome> {
    if session.stage != 1 {
        return Err(Error::InvalidInput("session is past stage 1".into()));
    }
    let history = session.run(session.remaining())?;
    Ok(TrainOutcome { checkpoint: session.checkpoint(), history })
}

/// Switches to stage 2 if needed and runs it to the end of its schedule.
pub fn train_stage2(session: &mut Session) -> Result<TrainOutcome> {
    session.begin_stage2();
    let history = session.run(session.remaining())?;
    Ok(TrainOutcome { checkpoint: session.checkpoint(), history })
}

/// Per-term means over a history, keyed `generator.<term>` and `critic.<term>`.
pub fn summarize(history: &[StepRecord]) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut add = |k: String, v: f64| {
        let e = sums.entry(k).or_insert((0.0, 0));
        e.0 += v;
        e.1 += 1;
    };
    for r in history {
        add("generator.total".into(), r.generator.total);
        for (k, v) in &r.generator.per_term {
            add(format!("generator.{k}"), *v);
        }
        for c in &r.critic {
            add("critic.total".into(), c.total);
            for (k, v) in &c.per_term {
                add(format!("critic.{k}"), *v);
            }
        }
    }
    sums.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
