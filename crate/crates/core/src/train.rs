//! Losses and the two-stage training loop.
//!
//! Stage 1 trains the codec alone on `λ1·video + λ2·message`. Stage 2 adds
//! the discriminator: every step first updates the discriminator on real
//! versus watermarked clips, then updates the codec with the adversarial
//! term `λ3·dis`. The noise layer is frozen throughout; gradients flow
//! through it but its parameters are never bound as trainable.
//!
//! Every random choice of step `k` comes from a generator seeded by
//! `(seed, k)`, so a run resumed at step `k` replays exactly.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{self, AttackKind, AttackSpec};
use crate::disc::Discriminator;
use crate::eval::{bit_accuracy, psnr};
use crate::inn::InnCodec;
use crate::media::{unpack_message, ClipDataset, Message, VideoTensor};
use crate::noise::NoiseLayer;
use crate::nn::{Binding, ParamStore};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageWeights {
    pub video: f64,
    pub message: f64,
    pub dis: f64,
}

impl StageWeights {
    pub const STAGE1: Self = Self {
        video: 1.0,
        message: 10.0,
        dis: 0.0,
    };
    pub const STAGE2: Self = Self {
        video: 1.0,
        message: 2.0,
        dis: 1e-4,
    };

    pub fn total(&self, video: f64, message: f64, dis: f64) -> f64 {
        self.video * video + self.message * message + self.dis * dis
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBundle {
    pub video: f64,
    pub message: f64,
    pub dis: f64,
    pub total: f64,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + Float::ln_1p(Float::exp(-x.abs()))
}

/// Loss terms for one clip. `disc_logit` is the discriminator's output on
/// the watermarked clip; without it the adversarial term is zero.
pub fn compute_losses<T: Real>(
    cover: &VideoTensor<T>,
    watermarked: &VideoTensor<T>,
    message_in: &Tensor<T>,
    message_out: &Tensor<T>,
    disc_logit: Option<f64>,
    weights: StageWeights,
) -> Result<LossBundle> {
    let finite = cover.is_finite()
        && watermarked.is_finite()
        && message_in.is_finite()
        && message_out.is_finite()
        && disc_logit.is_none_or(f64::is_finite);
    if !finite {
        return Err(Error::NonFinite {
            stage: "loss inputs",
            block: None,
        });
    }
    let video = cover.mse(watermarked)?.as_f64();
    let message = message_in.mse(message_out)?.as_f64();
    // BCE against the "real" label: log(1 + exp(-x)).
    let dis = disc_logit.map_or(0.0, |x| softplus(-x));
    Ok(LossBundle {
        video,
        message,
        dis,
        total: weights.total(video, message, dis),
    })
}

/// Distortion applied between embedding and extraction during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainDistortion {
    Identity,
    FrameAverage,
    FrameDrop,
    FrameSwap,
    Gaussian,
    CodecProxy,
}

impl TrainDistortion {
    pub const ALL: [Self; 6] = [
        Self::Identity,
        Self::FrameAverage,
        Self::FrameDrop,
        Self::FrameSwap,
        Self::Gaussian,
        Self::CodecProxy,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::FrameAverage => "frame_average",
            Self::FrameDrop => "frame_drop",
            Self::FrameSwap => "frame_swap",
            Self::Gaussian => "gaussian",
            Self::CodecProxy => "codec_proxy",
        }
    }

    /// The matching attack, or `None` for the codec proxy.
    pub fn attack(&self, seed: u64) -> Option<AttackSpec> {
        let kind = match self {
            Self::Identity => AttackKind::Identity,
            Self::FrameAverage => AttackKind::FrameAverage { window: 3 },
            Self::FrameDrop => AttackKind::FrameDrop { p: 0.5 },
            Self::FrameSwap => AttackKind::FrameSwap { p: 0.5 },
            Self::Gaussian => AttackKind::Gaussian { std: 0.04 },
            Self::CodecProxy => return None,
        };
        Some(AttackSpec { kind, seed })
    }
}

impl fmt::Display for TrainDistortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainDistortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s.trim())
            .ok_or_else(|| Error::config(alloc::format!("unknown training distortion `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedule {
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1: StageWeights,
    pub stage2: StageWeights,
    pub adam: AdamConfig,
    /// Stage-2 rate multiplier applied every `decay_every_epochs`.
    pub decay_factor: f64,
    pub decay_every_epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    /// Global L2 bound on the codec gradient before the Adam update; 0
    /// disables clipping.
    pub grad_clip: f64,
    /// Checkpoint interval in steps; 0 emits only at stage boundaries.
    pub checkpoint_every: usize,
    pub distortions: Vec<TrainDistortion>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::with_total(1000)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn number(&self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TrainSchedule {
    /// `total` steps split 60/40 between the stages.
    pub fn with_total(total: usize) -> Self {
        let stage1_steps = total * 3 / 5;
        Self {
            stage1_steps,
            stage2_steps: total - stage1_steps,
            stage1: StageWeights::STAGE1,
            stage2: StageWeights::STAGE2,
            adam: AdamConfig::default(),
            decay_factor: 0.5,
            decay_every_epochs: 20,
            steps_per_epoch: 100,
            batch_size: 4,
            grad_clip: 0.0,
            checkpoint_every: 0,
            distortions: TrainDistortion::ALL.to_vec(),
            seed: 0,
        }
    }

    pub fn total_steps(&self) -> usize {
        self.stage1_steps + self.stage2_steps
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1.dis != 0.0 {
            return Err(Error::config("the adversarial weight must be zero in stage 1"));
        }
        if self.batch_size == 0 || self.steps_per_epoch == 0 || self.decay_every_epochs == 0 {
            return Err(Error::config("batch size, steps per epoch and decay interval must be positive"));
        }
        if self.distortions.is_empty() {
            return Err(Error::config("at least one training distortion is required"));
        }
        if self.grad_clip.is_nan() || self.grad_clip < 0.0 {
            return Err(Error::config("gradient clip must be non-negative"));
        }
        if !(self.adam.learning_rate > 0.0 && self.decay_factor > 0.0) {
            return Err(Error::config("learning rate and decay factor must be positive"));
        }
        Ok(())
    }

    pub fn stage_of(&self, step: usize) -> Stage {
        if step < self.stage1_steps {
            Stage::One
        } else {
            Stage::Two
        }
    }

    pub fn weights(&self, stage: Stage) -> StageWeights {
        match stage {
            Stage::One => self.stage1,
            Stage::Two => self.stage2,
        }
    }

    /// Multiplier on the base learning rate at `step`.
    pub fn rate_scale(&self, step: usize) -> f64 {
        if step < self.stage1_steps {
            return 1.0;
        }
        let epoch = (step - self.stage1_steps) / self.steps_per_epoch;
        Float::powi(self.decay_factor, (epoch / self.decay_every_epochs) as i32)
    }

    pub fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(step as u64);
        rng
    }
}

/// Inputs of one training step.
#[derive(Clone, Debug)]
pub struct Batch<T = f32> {
    pub covers: Vec<VideoTensor<T>>,
    pub messages: Vec<Message>,
    pub distortion: TrainDistortion,
    pub attack_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub stage: u8,
    pub losses: LossBundle,
    /// Discriminator loss of the stage-2 discriminator update.
    pub disc_loss: Option<f64>,
    /// Bit accuracy (%) of extraction from the undistorted watermarked clips.
    pub acc: f64,
    pub psnr: f64,
    pub distortion: TrainDistortion,
    pub rate_scale: f64,
    /// Global L2 norm of the codec gradient before clipping.
    pub grad_norm: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str =
        "step,stage,video_loss,message_loss,dis_loss,total_loss,disc_loss,acc,psnr,distortion,rate_scale,grad_norm";

    pub fn csv_line(&self) -> String {
        let l = &self.losses;
        alloc::format!(
            "{},{},{:.8e},{:.8e},{:.8e},{:.8e},{},{:.4},{:.4},{},{},{:.6e}",
            self.step,
            self.stage,
            l.video,
            l.message,
            l.dis,
            l.total,
            self.disc_loss.map_or(String::new(), |d| alloc::format!("{d:.8e}")),
            self.acc,
            self.psnr,
            self.distortion,
            self.rate_scale,
            self.grad_norm
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointReason {
    Interval,
    StageBoundary,
    Finished,
}

impl CheckpointReason {
    pub fn name(&self) -> &'static str {
        match self {
            CheckpointReason::Interval => "interval",
            CheckpointReason::StageBoundary => "stage_boundary",
            CheckpointReason::Finished => "finished",
        }
    }
}

/// Losses, pre-clip gradient norm, watermarked clips and clean-channel
/// encodings of one step.
type StepOutput<T> = (LossBundle, f64, Vec<VideoTensor<T>>, Vec<Tensor<T>>);

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    /// Parameters and optimizer state after `step` steps.
    Checkpoint { step: usize, reason: CheckpointReason },
}

#[derive(Clone, Debug)]
pub struct Trainer<T = f32> {
    codec: InnCodec<T>,
    noise: NoiseLayer<T>,
    disc: Discriminator<T>,
    schedule: TrainSchedule,
    codec_opt: Adam<T>,
    disc_opt: Adam<T>,
    step: usize,
}

struct Forward {
    codec: Binding,
    video: Var,
    message: Var,
    dis: Option<Var>,
    total: Var,
    watermarked: Vec<Var>,
    recovered: Vec<Var>,
}

impl<T: Real> Trainer<T> {
    pub fn new(codec: InnCodec<T>, noise: NoiseLayer<T>, disc: Discriminator<T>, schedule: TrainSchedule) -> Result<Self> {
        schedule.validate()?;
        if !noise.is_frozen() {
            return Err(Error::config("the noise layer must be pretrained and frozen before training"));
        }
        if disc.clip() != codec.config().clip {
            return Err(Error::config("discriminator and codec clip shapes differ"));
        }
        let codec_opt = Adam::new(schedule.adam, codec.params());
        let disc_opt = Adam::new(schedule.adam, disc.params());
        Ok(Self {
            codec,
            noise,
            disc,
            schedule,
            codec_opt,
            disc_opt,
            step: 0,
        })
    }

    pub fn codec(&self) -> &InnCodec<T> {
        &self.codec
    }

    pub fn noise(&self) -> &NoiseLayer<T> {
        &self.noise
    }

    pub fn disc(&self) -> &Discriminator<T> {
        &self.disc
    }

    pub fn schedule(&self) -> &TrainSchedule {
        &self.schedule
    }

    /// Number of completed steps.
    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn codec_optimizer(&self) -> &Adam<T> {
        &self.codec_opt
    }

    pub fn disc_optimizer(&self) -> &Adam<T> {
        &self.disc_opt
    }

    pub fn into_parts(self) -> (InnCodec<T>, NoiseLayer<T>, Discriminator<T>) {
        (self.codec, self.noise, self.disc)
    }

    /// Continues from a saved state. The codec and discriminator passed to
    /// [`Trainer::new`] must already hold the saved parameters.
    pub fn resume(&mut self, step: usize, codec_opt: Adam<T>, disc_opt: Adam<T>) -> Result<()> {
        let (cm, _) = codec_opt.moments();
        let (dm, _) = disc_opt.moments();
        let fits = |m: &[Tensor<T>], store: &ParamStore<T>| {
            m.len() == store.len() && m.iter().zip(store.tensors()).all(|(a, b)| a.shape() == b.shape())
        };
        if !fits(cm, self.codec.params()) || !fits(dm, self.disc.params()) {
            return Err(Error::config("optimizer state does not match the networks"));
        }
        if step > self.schedule.total_steps() {
            return Err(Error::config(alloc::format!(
                "resume step {step} is past the end of the schedule"
            )));
        }
        self.step = step;
        self.codec_opt = codec_opt;
        self.disc_opt = disc_opt;
        Ok(())
    }

    /// The batch used at `step`; a pure function of the schedule seed.
    pub fn sample_batch(&self, data: &ClipDataset<T>, step: usize) -> Result<Batch<T>> {
        let mut rng = self.schedule.step_rng(step);
        let template = self.codec.template();
        let mut covers = Vec::with_capacity(self.schedule.batch_size);
        let mut messages = Vec::with_capacity(self.schedule.batch_size);
        for _ in 0..self.schedule.batch_size {
            covers.push(data.sample(&mut rng)?);
            messages.push(Message::random(template, &mut rng));
        }
        let d = &self.schedule.distortions;
        let distortion = d[rng.random_range(0..d.len())];
        Ok(Batch {
            covers,
            messages,
            distortion,
            attack_seed: rng.random(),
        })
    }

    fn distort_on(&self, tape: &mut Tape<T>, nb: &Binding, x: Var, batch: &Batch<T>, i: usize) -> Result<Var> {
        let seed = batch.attack_seed.wrapping_add(i as u64);
        match batch.distortion.attack(seed) {
            Some(spec) => attack::apply_on(tape, x, &spec),
            None => self.noise.distort_on(tape, nb, x),
        }
    }

    fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>, weights: StageWeights, trainable: bool) -> Result<Forward> {
        let cb = tape.bind(self.codec.params(), trainable);
        let nb = tape.bind(self.noise.params(), false);
        let db = (weights.dis != 0.0).then(|| tape.bind(self.disc.params(), false));
        let mut video = Vec::new();
        let mut message = Vec::new();
        let mut dis = Vec::new();
        let mut watermarked = Vec::new();
        let mut recovered = Vec::new();
        for (i, (cover, msg)) in batch.covers.iter().zip(&batch.messages).enumerate() {
            let c = tape.constant(cover.tensor().clone());
            let m = tape.constant(msg.encoding().cast());
            let (s, _) = self.codec.embed_on(tape, &cb, c, m)?;
            let attacked = self.distort_on(tape, &nb, s, batch, i)?;
            let out = self.codec.extract_on(tape, &cb, attacked)?;
            video.push(tape.mse(s, c));
            message.push(tape.mse(out, m));
            if let Some(db) = &db {
                let logit = self.disc.logit_on(tape, db, s)?;
                dis.push(tape.bce_logits(logit, 1.0));
            }
            watermarked.push(s);
            recovered.push(out);
        }
        let inv = 1.0 / batch.covers.len() as f64;
        let mean = |tape: &mut Tape<T>, xs: &[Var]| {
            let sum = xs[1..].iter().fold(xs[0], |acc, &x| tape.add(acc, x));
            tape.scale(sum, inv)
        };
        let video = mean(tape, &video);
        let message = mean(tape, &message);
        let dis = (!dis.is_empty()).then(|| mean(tape, &dis));
        let a = tape.scale(video, weights.video);
        let b = tape.scale(message, weights.message);
        let mut total = tape.add(a, b);
        if let Some(d) = dis {
            let d = tape.scale(d, weights.dis);
            total = tape.add(total, d);
        }
        Ok(Forward {
            codec: cb,
            video,
            message,
            dis,
            total,
            watermarked,
            recovered,
        })
    }

    fn bundle(tape: &Tape<T>, f: &Forward) -> LossBundle {
        let v = |x: Var| tape.value(x).item().as_f64();
        LossBundle {
            video: v(f.video),
            message: v(f.message),
            dis: f.dis.map_or(0.0, v),
            total: v(f.total),
        }
    }

    /// Batch loss with the current parameters, without updating anything.
    pub fn evaluate_batch(&self, batch: &Batch<T>, weights: StageWeights) -> Result<LossBundle> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, weights, false)?;
        Ok(Self::bundle(&tape, &f))
    }

    /// One codec update on `batch`. Returns the losses before the update.
    pub fn codec_step(&mut self, batch: &Batch<T>, weights: StageWeights, rate_scale: f64) -> Result<LossBundle> {
        self.codec_step_inner(batch, weights, rate_scale).map(|(l, ..)| l)
    }

    /// Also returns the watermarked clips and their clean-channel
    /// encodings, both from the pre-update parameters.
    fn codec_step_inner(
        &mut self,
        batch: &Batch<T>,
        weights: StageWeights,
        rate_scale: f64,
    ) -> Result<StepOutput<T>> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, batch, weights, true)?;
        let losses = Self::bundle(&tape, &f);
        if !losses.total.is_finite() {
            return Err(Error::NonFinite {
                stage: "training loss",
                block: None,
            });
        }
        let mut grads = tape.backward(f.total).for_binding(&f.codec, self.codec.params());
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite {
                stage: "training gradients",
                block: None,
            });
        }
        let grad_norm = clip_global_norm(&mut grads, self.schedule.grad_clip);
        let marked = f
            .watermarked
            .iter()
            .map(|&s| VideoTensor::new(tape.value(s).clone()))
            .collect::<Result<Vec<_>>>()?;
        let clean = if batch.distortion == TrainDistortion::Identity {
            f.recovered.iter().map(|&r| tape.value(r).clone()).collect()
        } else {
            marked
                .iter()
                .map(|m| self.codec.extract_encoding(m))
                .collect::<Result<Vec<_>>>()?
        };
        self.codec_opt.step(self.codec.params_mut(), &grads, rate_scale);
        Ok((losses, grad_norm, marked, clean))
    }

    /// One discriminator update on real versus watermarked clips.
    fn disc_step(&mut self, batch: &Batch<T>, rate_scale: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let db = tape.bind(self.disc.params(), true);
        let mut terms = Vec::new();
        for (cover, msg) in batch.covers.iter().zip(&batch.messages) {
            let wm = self.codec.embed(cover, msg)?.watermarked;
            let real = tape.constant(cover.tensor().clone());
            let fake = tape.constant(wm.into_tensor());
            let lr = self.disc.logit_on(&mut tape, &db, real)?;
            let lf = self.disc.logit_on(&mut tape, &db, fake)?;
            terms.push(tape.bce_logits(lr, 1.0));
            terms.push(tape.bce_logits(lf, 0.0));
        }
        let sum = terms[1..].iter().fold(terms[0], |acc, &x| tape.add(acc, x));
        let loss = tape.scale(sum, 1.0 / batch.covers.len() as f64);
        let value = tape.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: "discriminator loss",
                block: None,
            });
        }
        let grads = tape.backward(loss).for_binding(&db, self.disc.params());
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite {
                stage: "discriminator gradients",
                block: None,
            });
        }
        self.disc_opt.step(self.disc.params_mut(), &grads, rate_scale);
        Ok(value)
    }

    /// Runs the next step of the schedule. On error nothing has been
    /// updated by the failing step, so the current state is the last good
    /// one.
    pub fn train_step(&mut self, data: &ClipDataset<T>) -> Result<StepRecord> {
        let step = self.step;
        if step >= self.schedule.total_steps() {
            return Err(Error::config("the schedule is already complete"));
        }
        let stage = self.schedule.stage_of(step);
        let weights = self.schedule.weights(stage);
        let rate = self.schedule.rate_scale(step);
        let batch = self.sample_batch(data, step)?;
        let disc_loss = match stage {
            Stage::Two => Some(self.disc_step(&batch, rate)?),
            Stage::One => None,
        };
        let (losses, grad_norm, marked, clean) = self.codec_step_inner(&batch, weights, rate)?;
        let (mut acc, mut quality) = (0.0, 0.0);
        for (i, (cover, msg)) in batch.covers.iter().zip(&batch.messages).enumerate() {
            let bits = unpack_message(&clean[i], msg.template())?;
            acc += bit_accuracy(&bits, msg.bits())?;
            quality += psnr(&marked[i], cover)?;
        }
        let n = batch.covers.len() as f64;
        self.step += 1;
        Ok(StepRecord {
            step,
            stage: stage.number(),
            losses,
            disc_loss,
            acc: acc / n,
            psnr: quality / n,
            distortion: batch.distortion,
            rate_scale: rate,
            grad_norm,
        })
    }

    /// Runs the remaining steps, reporting every step and checkpoint to
    /// `hook`. A hook error stops the run.
    pub fn run(
        &mut self,
        data: &ClipDataset<T>,
        mut hook: impl FnMut(TrainEvent<'_>, &Self) -> Result<()>,
    ) -> Result<Vec<StepRecord>> {
        let mut log = Vec::new();
        while self.step < self.schedule.total_steps() {
            let record = self.train_step(data)?;
            hook(TrainEvent::Step(&record), self)?;
            log.push(record);
            let done = self.step;
            let reason = if done == self.schedule.total_steps() {
                Some(CheckpointReason::Finished)
            } else if done == self.schedule.stage1_steps {
                Some(CheckpointReason::StageBoundary)
            } else if self.schedule.checkpoint_every > 0 && done.is_multiple_of(self.schedule.checkpoint_every) {
                Some(CheckpointReason::Interval)
            } else {
                None
            };
            if let Some(reason) = reason {
                hook(TrainEvent::Checkpoint { step: done, reason }, self)?;
            }
        }
        Ok(log)
    }
}

impl fmt::Display for LossBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "video={:.6} message={:.6} dis={:.6} total={:.6}",
            self.video, self.message, self.dis, self.total
        )
    }
}

/// Rescales `grads` so their joint L2 norm is at most `bound` (0 = off).
/// Returns the norm before rescaling.
pub fn clip_global_norm<T: Real>(grads: &mut [Tensor<T>], bound: f64) -> f64 {
    let norm = Float::sqrt(grads.iter().map(|g| g.sum_sq().as_f64()).sum::<f64>());
    if bound > 0.0 && norm > bound {
        let k = T::of(bound / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
    }
    norm
}

pub fn distortion_list(spec: &str) -> Result<Vec<TrainDistortion>> {
    spec.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<Vec<_>>>()
        .and_then(|v| {
            if v.is_empty() {
                Err(Error::config("empty distortion list"))
            } else {
                Ok(v)
            }
        })
}

pub fn distortion_names(list: &[TrainDistortion]) -> String {
    list.iter().map(|d| d.name().to_string()).collect::<Vec<_>>().join(",")
}
