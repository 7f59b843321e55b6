//! Plain-text run configuration: one `key = value` pair per line, `#`
//! comments, lists comma-separated. Every field has a default, so an empty
//! file is a valid configuration; [`RunConfig::render`] writes every key
//! back out, making a run reproducible from the rendered file.

use std::path::{Path, PathBuf};

use dinvmark_core::attack::AttackSpec;
use dinvmark_core::disc::DiscConfig;
use dinvmark_core::inn::InnConfig;
use dinvmark_core::media::{ClipShape, CropPolicy, MessageTemplate};
use dinvmark_core::noise::{NoiseConfig, PretrainConfig};
use dinvmark_core::optim::AdamConfig;
use dinvmark_core::train::{distortion_list, distortion_names, StageWeights, TrainDistortion, TrainSchedule};

use crate::codec::CodecClient;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: Vec<PathBuf>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub crop: CropPolicy,
    pub bits: usize,
    pub blocks: usize,
    pub hidden: usize,
    pub noise_blocks: usize,
    pub noise_hidden: usize,
    pub disc_width: usize,
    pub disc_units: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage1_weights: [f64; 3],
    pub stage2_weights: [f64; 3],
    pub learning_rate: f64,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub decay_every_epochs: usize,
    pub decay_factor: f64,
    pub grad_clip: f64,
    pub checkpoint_every: usize,
    pub distortions: Vec<TrainDistortion>,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_learning_rate: f64,
    pub qps: Vec<u32>,
    pub attacks: Vec<AttackSpec>,
    pub encoder_path: Option<PathBuf>,
    pub scratch_dir: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let schedule = TrainSchedule::default();
        let full = ClipShape::full();
        Self {
            data: Vec::new(),
            frames: full.frames,
            height: full.height,
            width: full.width,
            crop: CropPolicy::Random,
            bits: 96,
            blocks: InnConfig::DEFAULT_BLOCKS,
            hidden: InnConfig::DEFAULT_HIDDEN,
            noise_blocks: NoiseConfig::default().blocks,
            noise_hidden: NoiseConfig::default().hidden,
            disc_width: DiscConfig::default().width,
            disc_units: DiscConfig::default().units,
            stage1_steps: schedule.stage1_steps,
            stage2_steps: schedule.stage2_steps,
            stage1_weights: weights_array(StageWeights::STAGE1),
            stage2_weights: weights_array(StageWeights::STAGE2),
            learning_rate: schedule.adam.learning_rate,
            batch_size: schedule.batch_size,
            steps_per_epoch: schedule.steps_per_epoch,
            decay_every_epochs: schedule.decay_every_epochs,
            decay_factor: schedule.decay_factor,
            grad_clip: schedule.grad_clip,
            checkpoint_every: schedule.checkpoint_every,
            distortions: schedule.distortions,
            pretrain_steps: PretrainConfig::default().steps,
            pretrain_batch: PretrainConfig::default().batch_size,
            pretrain_learning_rate: PretrainConfig::default().adam.learning_rate,
            qps: vec![22, 32],
            attacks: default_attacks(),
            encoder_path: None,
            scratch_dir: None,
            seed: 0,
            out_dir: PathBuf::from("out"),
        }
    }
}

fn weights_array(w: StageWeights) -> [f64; 3] {
    [w.video, w.message, w.dis]
}

/// Identity plus the standard attack battery.
pub fn default_attacks() -> Vec<AttackSpec> {
    ["identity", "frame_average:n=3", "frame_drop:p=0.5", "frame_swap:p=0.5", "gaussian:std=0.04", "h264:crf=22", "hevc:qp=22"]
        .iter()
        .map(|s| s.parse().expect("built-in attack spec"))
        .collect()
}

fn list<T>(v: &str, parse: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse).collect()
}

fn join<T: ToString>(items: &[T], sep: &str) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

/// Splits `attack` lists on `;` because attack specs contain commas.
pub fn parse_attacks(v: &str) -> Result<Vec<AttackSpec>> {
    v.split(';')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e: dinvmark_core::Error| Error::Config(format!("attack `{s}`: {e}"))))
        .collect()
}

impl RunConfig {
    pub const KEYS: [&'static str; 34] = [
        "data",
        "frames",
        "height",
        "width",
        "crop",
        "bits",
        "blocks",
        "hidden",
        "noise_blocks",
        "noise_hidden",
        "disc_width",
        "disc_units",
        "stage1_steps",
        "stage2_steps",
        "stage1_weights",
        "stage2_weights",
        "learning_rate",
        "batch_size",
        "steps_per_epoch",
        "decay_every_epochs",
        "decay_factor",
        "grad_clip",
        "checkpoint_every",
        "distortions",
        "pretrain_steps",
        "pretrain_batch",
        "pretrain_learning_rate",
        "qps",
        "attacks",
        "encoder_path",
        "scratch_dir",
        "seed",
        "out_dir",
        "total_steps",
    ];

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            c.set(k.trim(), v.trim())?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies `key=value`.
    pub fn apply(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{assignment}`: expected key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
            v.parse().map_err(|_| Error::Config(format!("{key}: `{v}` is not a valid number")))
        }
        let weights = |v: &str| -> Result<[f64; 3]> {
            let w = list(v, |s| num::<f64>(key, s))?;
            w.try_into()
                .map_err(|_| Error::Config(format!("{key}: expected three weights (video, message, dis)")))
        };
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "data" => self.data = list(v, |s| Ok(PathBuf::from(s)))?,
            "frames" => self.frames = num(key, v)?,
            "height" => self.height = num(key, v)?,
            "width" => self.width = num(key, v)?,
            "crop" => {
                self.crop = match v {
                    "random" => CropPolicy::Random,
                    "center" => CropPolicy::Center,
                    _ => return Err(Error::Config(format!("crop: `{v}` is neither random nor center"))),
                }
            }
            "bits" => self.bits = num(key, v)?,
            "blocks" => self.blocks = num(key, v)?,
            "hidden" => self.hidden = num(key, v)?,
            "noise_blocks" => self.noise_blocks = num(key, v)?,
            "noise_hidden" => self.noise_hidden = num(key, v)?,
            "disc_width" => self.disc_width = num(key, v)?,
            "disc_units" => self.disc_units = num(key, v)?,
            "stage1_steps" => self.stage1_steps = num(key, v)?,
            "stage2_steps" => self.stage2_steps = num(key, v)?,
            "total_steps" => {
                let s = TrainSchedule::with_total(num(key, v)?);
                self.stage1_steps = s.stage1_steps;
                self.stage2_steps = s.stage2_steps;
            }
            "stage1_weights" => self.stage1_weights = weights(v)?,
            "stage2_weights" => self.stage2_weights = weights(v)?,
            "learning_rate" => self.learning_rate = num(key, v)?,
            "batch_size" => self.batch_size = num(key, v)?,
            "steps_per_epoch" => self.steps_per_epoch = num(key, v)?,
            "decay_every_epochs" => self.decay_every_epochs = num(key, v)?,
            "decay_factor" => self.decay_factor = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "distortions" => self.distortions = distortion_list(v).map_err(|e| Error::Config(e.to_string()))?,
            "pretrain_steps" => self.pretrain_steps = num(key, v)?,
            "pretrain_batch" => self.pretrain_batch = num(key, v)?,
            "pretrain_learning_rate" => self.pretrain_learning_rate = num(key, v)?,
            "qps" => self.qps = list(v, |s| num(key, s))?,
            "attacks" => self.attacks = parse_attacks(v)?,
            "encoder_path" => self.encoder_path = path(v),
            "scratch_dir" => self.scratch_dir = path(v),
            "seed" => self.seed = num(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key, in a fixed order; `parse(render())` reproduces `self`.
    pub fn render(&self) -> String {
        let crop = match self.crop {
            CropPolicy::Random => "random",
            CropPolicy::Center => "center",
        };
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("data", join(&self.data.iter().map(|p| p.display()).collect::<Vec<_>>(), ",")),
            ("frames", self.frames.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("crop", crop.into()),
            ("bits", self.bits.to_string()),
            ("blocks", self.blocks.to_string()),
            ("hidden", self.hidden.to_string()),
            ("noise_blocks", self.noise_blocks.to_string()),
            ("noise_hidden", self.noise_hidden.to_string()),
            ("disc_width", self.disc_width.to_string()),
            ("disc_units", self.disc_units.to_string()),
            ("stage1_steps", self.stage1_steps.to_string()),
            ("stage2_steps", self.stage2_steps.to_string()),
            ("stage1_weights", join(&self.stage1_weights, ",")),
            ("stage2_weights", join(&self.stage2_weights, ",")),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("decay_every_epochs", self.decay_every_epochs.to_string()),
            ("decay_factor", self.decay_factor.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("distortions", distortion_names(&self.distortions)),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain_learning_rate", self.pretrain_learning_rate.to_string()),
            ("qps", join(&self.qps, ",")),
            ("attacks", join(&self.attacks, ";")),
            ("encoder_path", opt(&self.encoder_path)),
            ("scratch_dir", opt(&self.scratch_dir)),
            ("seed", self.seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        pairs.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn clip_shape(&self) -> ClipShape {
        ClipShape::new(self.frames, self.height, self.width)
    }

    pub fn template(&self) -> Result<MessageTemplate> {
        MessageTemplate::for_bits(self.bits).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn inn_config(&self) -> Result<InnConfig> {
        let c = InnConfig::new(self.clip_shape(), self.template()?)
            .with_blocks(self.blocks)
            .with_hidden(self.hidden);
        c.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            blocks: self.noise_blocks,
            hidden: self.noise_hidden,
        }
    }

    pub fn disc_config(&self) -> DiscConfig {
        DiscConfig {
            width: self.disc_width,
            units: self.disc_units,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }

    pub fn schedule(&self) -> Result<TrainSchedule> {
        let w = |a: [f64; 3]| StageWeights {
            video: a[0],
            message: a[1],
            dis: a[2],
        };
        let s = TrainSchedule {
            stage1_steps: self.stage1_steps,
            stage2_steps: self.stage2_steps,
            stage1: w(self.stage1_weights),
            stage2: w(self.stage2_weights),
            adam: self.adam(),
            decay_factor: self.decay_factor,
            decay_every_epochs: self.decay_every_epochs,
            steps_per_epoch: self.steps_per_epoch,
            batch_size: self.batch_size,
            grad_clip: self.grad_clip,
            checkpoint_every: self.checkpoint_every,
            distortions: self.distortions.clone(),
            seed: self.seed,
        };
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain_steps,
            batch_size: self.pretrain_batch,
            adam: AdamConfig {
                learning_rate: self.pretrain_learning_rate,
                ..AdamConfig::default()
            },
            seed: self.seed,
        }
    }

    pub fn codec_client(&self) -> CodecClient {
        CodecClient::new(self.encoder_path.as_deref(), self.scratch_dir.as_deref())
    }
}
