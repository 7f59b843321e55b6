//! The `dinvmark` command line.
//!
//! Every subcommand prints one `name key=value ...` summary line on
//! standard output and reports errors on standard error. Exit statuses:
//! 0 success, 2 usage error or unknown subcommand, 3 invalid
//! configuration, 4 missing checkpoint, 1 anything else.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dinvmark_core::attack::AttackSpec;
use dinvmark_core::disc::Discriminator;
use dinvmark_core::eval::{psnr, reference, run_robustness_suite, ModelAccounting, ReportMeta};
use dinvmark_core::inn::{InitMode, InnCodec};
use dinvmark_core::media::{format_bits, pack_message, parse_bits, ClipDataset, Message, MessageTemplate, VideoTensor};
use dinvmark_core::noise::NoiseLayer;
use dinvmark_core::synth::synthetic_clip;
use dinvmark_core::train::{StepRecord, TrainEvent, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint, TrainState};
use crate::codec::VideoCodec;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io;
use crate::report;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;

/// Name of the record `embed` writes next to the watermarked frames.
pub const SIDECAR: &str = "watermark.txt";

#[derive(Debug, Parser)]
#[command(name = "dinvmark", version, about = "Blind video watermarking with an invertible network")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file (key = value lines).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cut fixed-shape clips from frame directories or raw planar files.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Source clips; defaults to the configured `data`.
        #[arg(long = "in", value_name = "PATH")]
        inputs: Vec<PathBuf>,
        /// Generate this many synthetic clips instead of reading sources.
        #[arg(long, value_name = "N")]
        synthetic: Option<usize>,
        /// Output directory for `clip_NNNN/` frame directories.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Fit the codec-imitating noise layer to a real encoder and freeze it.
    PretrainNoise {
        #[command(flatten)]
        common: Common,
        /// Training clips; defaults to the configured `data`.
        #[arg(long, value_name = "PATH")]
        data: Vec<PathBuf>,
        /// Output checkpoint.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Skip fitting and write a frozen identity layer.
        #[arg(long)]
        untrained: bool,
    },
    /// Train the watermark codec through the frozen noise layer.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training clips; defaults to the configured `data`.
        #[arg(long, value_name = "PATH")]
        data: Vec<PathBuf>,
        /// Frozen noise-layer checkpoint.
        #[arg(long, value_name = "FILE")]
        noise: PathBuf,
        /// Output directory for metrics, checkpoints and the final model.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Training checkpoint to continue from.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Embed a payload into one clip.
    Embed {
        #[command(flatten)]
        common: Common,
        /// Model or training checkpoint.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Cover clip (frame directory or raw planar file).
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Output frame directory; receives the sidecar record too.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Payload as a 0/1 string; random from `--message-seed` otherwise.
        #[arg(long, value_name = "BITS")]
        bits: Option<String>,
        /// Seed of the random payload.
        #[arg(long, value_name = "SEED", default_value_t = 0)]
        message_seed: u64,
    },
    /// Recover the payload from a clip without the cover.
    Extract {
        #[command(flatten)]
        common: Common,
        /// Model or training checkpoint.
        #[arg(long, value_name = "FILE")]
        ckpt: PathBuf,
        /// Watermarked, possibly attacked clip.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Sidecar record to compare against; defaults to the one in `--in`.
        #[arg(long, value_name = "FILE")]
        sidecar: Option<PathBuf>,
    },
    /// Apply one attack to a clip.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Attack, e.g. `gaussian:std=0.04,seed=7` or `hevc:qp=22`.
        #[arg(long, value_name = "SPEC")]
        spec: String,
        /// Input clip.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        /// Output frame directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the robustness suite and write `report.csv`.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Model checkpoints; several give a payload sweep.
        #[arg(long, value_name = "FILE", required = true)]
        ckpt: Vec<PathBuf>,
        /// Evaluation clips; defaults to the configured `data`.
        #[arg(long, value_name = "PATH")]
        data: Vec<PathBuf>,
        /// Attacks; defaults to the configured `attacks`. Repeatable.
        #[arg(long, value_name = "SPEC")]
        attack: Vec<String>,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Render plots and difference images from a report.
    Report {
        #[command(flatten)]
        common: Common,
        /// `report.csv` written by `evaluate`.
        #[arg(long = "in", value_name = "FILE")]
        input: PathBuf,
        /// Output directory.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Model used for difference images (needs `--clip`).
        #[arg(long, value_name = "FILE", requires = "clip")]
        ckpt: Option<PathBuf>,
        /// Cover clips for difference images. Repeatable.
        #[arg(long, value_name = "PATH", requires = "ckpt")]
        clip: Vec<PathBuf>,
        /// Amplification of difference images.
        #[arg(long, value_name = "GAIN", default_value_t = report::DIFF_GAIN)]
        gain: f64,
    },
}

/// Parses `args` (including the program name), runs the command and
/// returns the exit status.
pub fn run<I, A>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { err.write_all(text.as_bytes()) } else { out.write_all(text.as_bytes()) };
            return code;
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingCheckpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_FAILURE,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for s in &common.set {
        c.apply(s)?;
    }
    Ok(c)
}

fn say(out: &mut dyn Write, line: String) -> Result<()> {
    writeln!(out, "{line}").map_err(|e| Error::write("<stdout>", e))
}

/// Sources named on the command line, else the configured ones. A
/// directory without frames of its own stands for its sub-directories.
fn sources(cli: &[PathBuf], config: &RunConfig) -> Result<Vec<PathBuf>> {
    let given = if cli.is_empty() { &config.data } else { cli };
    if given.is_empty() {
        return Err(Error::Config("no input data: pass --data or set `data`".into()));
    }
    let mut out = Vec::new();
    for p in given {
        if p.is_dir() && io::frame_files(p)?.is_empty() {
            let mut subs: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::read(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|s| s.is_dir() || s.extension().is_some_and(|x| x != io::HEADER_EXTENSION))
                .collect();
            subs.sort();
            out.extend(subs);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn load_clips(paths: &[PathBuf], config: &RunConfig, shape: dinvmark_core::media::ClipShape) -> Result<Vec<VideoTensor<f32>>> {
    paths
        .iter()
        .enumerate()
        .map(|(i, p)| io::load_clip(p, shape, config.crop, config.seed.wrapping_add(i as u64)))
        .collect()
}

fn dispatch(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Ingest { common, inputs, synthetic, out: dir } => {
            let config = load_config(&common)?;
            let shape = config.clip_shape();
            let dir = dir.unwrap_or_else(|| config.out_dir.join("clips"));
            let clips = match synthetic {
                Some(n) => (0..n as u64)
                    .map(|i| synthetic_clip(shape, config.seed.wrapping_mul(1_000_003).wrapping_add(i)))
                    .collect(),
                None => load_clips(&sources(&inputs, &config)?, &config, shape)?,
            };
            for (i, clip) in clips.iter().enumerate() {
                io::write_frames(clip, &dir.join(format!("clip_{i:04}")))?;
            }
            say(
                out,
                format!(
                    "ingest clips={} shape=3x{}x{}x{} out={}",
                    clips.len(),
                    shape.frames,
                    shape.height,
                    shape.width,
                    dir.display()
                ),
            )
        }
        Command::PretrainNoise { common, data, out: file, untrained } => {
            let config = load_config(&common)?;
            let file = file.unwrap_or_else(|| config.out_dir.join("noise.ckpt"));
            let mut noise = NoiseLayer::<f32>::new(config.noise_config(), true, config.seed)?;
            let (first, last) = if untrained {
                noise.freeze();
                (f64::NAN, f64::NAN)
            } else {
                let clips = load_clips(&sources(&data, &config)?, &config, config.clip_shape())?;
                if config.qps.is_empty() {
                    return Err(Error::Config("`qps` is empty".into()));
                }
                let client = config.codec_client();
                let mut pairs = Vec::new();
                for clip in &clips {
                    for &qp in &config.qps {
                        pairs.push((clip.clone(), client.compress(clip, VideoCodec::Hevc, qp)?));
                    }
                }
                let losses = noise.pretrain(&pairs, &config.pretrain_config(), |_, _| {})?;
                (losses.first().copied().unwrap_or(f64::NAN), losses.last().copied().unwrap_or(f64::NAN))
            };
            checkpoint::noise_checkpoint(&noise).save(&file)?;
            say(
                out,
                format!(
                    "pretrain-noise steps={} loss_first={first:.6} loss_last={last:.6} checksum={} out={}",
                    if untrained { 0 } else { config.pretrain_steps },
                    hex::encode(&noise.checksum()[..8]),
                    file.display()
                ),
            )
        }
        Command::Train { common, data, noise, out: dir, resume } => {
            let config = load_config(&common)?;
            train(&config, &data, &noise, dir, resume.as_deref(), out)
        }
        Command::Embed { common, ckpt, input, out: dir, bits, message_seed } => {
            load_config(&common)?;
            let ck = Checkpoint::load(&ckpt)?;
            let codec = checkpoint::codec_from(&ck)?;
            let shape = codec.config().clip;
            let cover = io::load_clip(&input, shape, dinvmark_core::media::CropPolicy::Center, 0)?;
            let template = codec.template();
            let message = match bits {
                Some(b) => pack_message(&parse_bits(&b)?, template)?,
                None => Message::random(template, &mut ChaCha8Rng::seed_from_u64(message_seed)),
            };
            let marked = codec.embed(&cover, &message)?.watermarked;
            io::write_frames(&marked, &dir)?;
            let sidecar = dir.join(SIDECAR);
            fs::write(&sidecar, render_sidecar(message.bits(), template, &ck.id())).map_err(|e| Error::write(&sidecar, e))?;
            say(
                out,
                format!(
                    "embed bits={} psnr={:.4} checkpoint={} out={}",
                    format_bits(message.bits()),
                    psnr(&marked, &cover)?,
                    ck.id(),
                    dir.display()
                ),
            )
        }
        Command::Extract { common, ckpt, input, sidecar } => {
            load_config(&common)?;
            let ck = Checkpoint::load(&ckpt)?;
            let codec = checkpoint::codec_from(&ck)?;
            let clip = io::load_clip(&input, codec.config().clip, dinvmark_core::media::CropPolicy::Center, 0)?;
            let bits = codec.extract(&clip)?;
            let mut line = format!("extract bits={}", format_bits(bits.bits()));
            let sidecar = sidecar.or_else(|| Some(input.join(SIDECAR)).filter(|p| p.is_file()));
            if let Some(p) = sidecar {
                let record = read_sidecar(&p)?;
                let acc = dinvmark_core::eval::bit_accuracy(bits.bits(), &record.bits)?;
                line.push_str(&format!(" acc={acc:.4} checkpoint_match={}", record.checkpoint == ck.id()));
            }
            say(out, line)
        }
        Command::Attack { common, spec, input, out: dir } => {
            let config = load_config(&common)?;
            let spec: AttackSpec = spec.parse().map_err(|e: dinvmark_core::Error| Error::Config(format!("--spec: {e}")))?;
            let clip = io::load_source(&input)?;
            let attacked = config.codec_client().apply(&spec, &clip)?;
            io::write_frames(&attacked, &dir)?;
            say(
                out,
                format!("attack spec={spec} psnr={:.4} out={}", psnr(&attacked, &clip)?, dir.display()),
            )
        }
        Command::Evaluate { common, ckpt, data, attack, out: dir } => {
            let config = load_config(&common)?;
            evaluate(&config, &ckpt, &data, &attack, dir, out)
        }
        Command::Report { common, input, out: dir, ckpt, clip, gain } => {
            let config = load_config(&common)?;
            let rows = report::read_csv(&input)?;
            let plots = report::write_plots(&rows, &dir)?;
            let mut diffs = 0;
            if let Some(ckpt) = ckpt {
                let ck = Checkpoint::load(&ckpt)?;
                let codec = checkpoint::codec_from(&ck)?;
                for (i, path) in clip.iter().enumerate() {
                    let cover = io::load_clip(path, codec.config().clip, dinvmark_core::media::CropPolicy::Center, 0)?;
                    let msg = dinvmark_core::eval::suite_message(&codec, config.seed, i);
                    let marked = codec.embed(&cover, &msg)?.watermarked;
                    report::write_diffs(&dir, &format!("clip_{i:04}"), &cover, &marked, gain)?;
                    diffs += 1;
                }
            }
            say(
                out,
                format!("report rows={} plots={} diffs={diffs} out={}", rows.len(), plots.len(), dir.display()),
            )
        }
    }
}

fn train(config: &RunConfig, data: &[PathBuf], noise_path: &Path, dir: Option<PathBuf>, resume: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let schedule = config.schedule()?;
    let inn = config.inn_config()?;
    let dir = dir.unwrap_or_else(|| config.out_dir.join("train"));
    let noise = checkpoint::noise_from(&Checkpoint::load(noise_path)?)?;
    if !noise.is_frozen() {
        return Err(Error::Config(format!("{} holds an unfrozen noise layer", noise_path.display())));
    }
    let frozen_before = noise.checksum();
    let restored = match resume {
        Some(p) => Some(checkpoint::train_from(&Checkpoint::load(p)?, config.adam())?),
        None => None,
    };
    let sources = sources(data, config)?
        .iter()
        .map(|p| io::load_source(p))
        .collect::<Result<Vec<_>>>()?;
    let dataset = ClipDataset::new(sources, inn.clip, config.crop)?;

    let mut trainer = match restored {
        Some(r) => {
            if r.codec.config() != &inn {
                return Err(Error::Config("resume checkpoint does not match the configured codec".into()));
            }
            let mut t = Trainer::new(r.codec, noise, r.disc, schedule)?;
            t.resume(r.step, r.codec_opt, r.disc_opt)?;
            t
        }
        None => {
            let codec = InnCodec::new(inn, InitMode::Identity, config.seed)?;
            let disc = Discriminator::new(config.disc_config(), inn.clip, config.seed.wrapping_add(1))?;
            Trainer::new(codec, noise, disc, schedule)?
        }
    };

    io::create_dir(&dir)?;
    let cfg_path = dir.join("config.txt");
    fs::write(&cfg_path, config.render()).map_err(|e| Error::write(&cfg_path, e))?;
    let metrics = dir.join("metrics.csv");
    let mut log = keep_metrics_before(&metrics, trainer.step_index())?;
    let ckpt_dir = dir.join("checkpoints");
    let mut last: Option<StepRecord> = None;
    let mut hook_error = None;
    let result = trainer.run(&dataset, |event, t| {
        let r: Result<()> = match event {
            TrainEvent::Step(rec) => {
                log.push_str(&rec.csv_line());
                log.push('\n');
                last = Some(rec.clone());
                Ok(())
            }
            TrainEvent::Checkpoint { step, .. } => checkpoint::train_checkpoint(&TrainState {
                step,
                codec: t.codec(),
                disc: t.disc(),
                codec_opt: t.codec_optimizer(),
                disc_opt: t.disc_optimizer(),
                noise_checksum: t.noise().checksum(),
            })
            .save(&ckpt_dir.join(format!("step_{step:06}.ckpt")))
            .and_then(|_| fs::write(&metrics, &log).map_err(|e| Error::write(&metrics, e))),
        };
        r.map_err(|e| {
            let msg = e.to_string();
            hook_error = Some(e);
            dinvmark_core::Error::Unsupported(msg)
        })
    });
    fs::write(&metrics, &log).map_err(|e| Error::write(&metrics, e))?;
    if let Some(e) = hook_error {
        return Err(e);
    }
    result?;
    if trainer.noise().checksum() != frozen_before {
        return Err(Error::Config("noise layer changed during training".into()));
    }
    let model = dir.join("model.ckpt");
    checkpoint::codec_checkpoint(trainer.codec()).save(&model)?;
    let (acc, quality) = last.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.acc, r.psnr));
    say(
        out,
        format!(
            "train steps={} acc={acc:.4} psnr={quality:.4} noise_frozen=true model={}",
            trainer.step_index(),
            model.display()
        ),
    )
}

/// Existing metric rows with `step < keep`, header included, so a resumed
/// run appends to the log it continues.
fn keep_metrics_before(path: &Path, keep: usize) -> Result<String> {
    let mut log = format!("{}\n", StepRecord::CSV_HEADER);
    if keep == 0 || !path.exists() {
        return Ok(log);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    for line in text.lines().skip(1) {
        let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
        if step.is_some_and(|s| s < keep) {
            log.push_str(line);
            log.push('\n');
        }
    }
    Ok(log)
}

fn evaluate(config: &RunConfig, ckpts: &[PathBuf], data: &[PathBuf], attack: &[String], dir: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let dir = dir.unwrap_or_else(|| config.out_dir.join("eval"));
    let attacks = if attack.is_empty() {
        config.attacks.clone()
    } else {
        attack
            .iter()
            .map(|s| s.parse().map_err(|e: dinvmark_core::Error| Error::Config(format!("--attack {s}: {e}"))))
            .collect::<Result<Vec<_>>>()?
    };
    let checkpoints = ckpts.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let codecs = checkpoints.iter().map(checkpoint::codec_from).collect::<Result<Vec<_>>>()?;
    let shape = codecs[0].config().clip;
    if codecs.iter().any(|c| c.config().clip != shape) {
        return Err(Error::Config("all checkpoints must share one clip shape".into()));
    }
    let paths = sources(data, config)?;
    let clips = load_clips(&paths, config, shape)?;
    let meta = ReportMeta {
        checkpoint_id: checkpoints.iter().map(Checkpoint::id).collect::<Vec<_>>().join("+"),
        dataset_id: dataset_id(&clips),
        seed: config.seed,
    };
    let client = config.codec_client();
    let refs: Vec<&InnCodec<f32>> = codecs.iter().collect();
    let suite = run_robustness_suite(&refs, &clips, &attacks, meta, |s, v| client.channel(s, v))?;
    report::write_report(&suite, &dir)?;
    let accounting = dir.join("accounting.txt");
    let mut text = String::new();
    for (ck, codec) in checkpoints.iter().zip(&codecs) {
        let m = ModelAccounting::of(codec);
        text.push_str(&format!(
            "checkpoint={} bits={} params={} analytic_params={} gflops={:.4}\n",
            ck.id(),
            codec.template().bit_count(),
            m.params,
            codec.config().analytic_param_count(),
            m.flops as f64 / 1e9
        ));
    }
    text.push_str(&format!(
        "published_reference_params_m={} published_reference_gflops={}\n",
        reference::PARAMS_M,
        reference::GFLOPS
    ));
    fs::write(&accounting, text).map_err(|e| Error::write(&accounting, e))?;
    let skipped = suite.rows.iter().filter(|r| r.skipped.is_some()).count();
    say(
        out,
        format!(
            "evaluate rows={} skipped={skipped} clips={} out={}",
            suite.rows.len(),
            clips.len(),
            dir.join("report.csv").display()
        ),
    )
}

/// Content hash of the evaluation clips.
fn dataset_id(clips: &[VideoTensor<f32>]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for c in clips {
        h.update(c.to_pixels());
    }
    hex::encode(&h.finalize()[..8])
}

/// Contents of the `embed` sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct SidecarRecord {
    pub bits: Vec<bool>,
    pub template: MessageTemplate,
    pub checkpoint: String,
}

pub fn render_sidecar(bits: &[bool], template: MessageTemplate, checkpoint: &str) -> String {
    format!(
        "bits={}\ntemplate={}\ntemplate_bits={}\ntemplate_side={}\ncheckpoint={checkpoint}\n",
        format_bits(bits),
        if template.is_square() { "square" } else { "irregular" },
        template.bit_count(),
        template.side()
    )
}

pub fn read_sidecar(path: &Path) -> Result<SidecarRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    let bad = |what: &str| Error::BadHeader {
        path: path.to_path_buf(),
        reason: what.to_string(),
    };
    let get = |k: &str| {
        text.lines()
            .find_map(|l| l.strip_prefix(k).and_then(|r| r.strip_prefix('=')))
            .map(str::trim)
            .ok_or_else(|| bad(&format!("missing {k}")))
    };
    let bits = parse_bits(get("bits")?).map_err(|e| bad(&e.to_string()))?;
    let n: usize = get("template_bits")?.parse().map_err(|_| bad("template_bits"))?;
    let side: usize = get("template_side")?.parse().map_err(|_| bad("template_side"))?;
    let template = match get("template")? {
        "square" => MessageTemplate::square(side),
        _ => MessageTemplate::irregular(n, side),
    }
    .map_err(|e| bad(&e.to_string()))?;
    Ok(SidecarRecord {
        bits,
        template,
        checkpoint: get("checkpoint")?.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let t = MessageTemplate::for_bits(96).unwrap();
        let bits: Vec<bool> = (0..96).map(|i| i % 3 == 0).collect();
        let p = dir.path().join(SIDECAR);
        fs::write(&p, render_sidecar(&bits, t, "abc")).unwrap();
        let r = read_sidecar(&p).unwrap();
        assert_eq!(r, SidecarRecord { bits, template: t, checkpoint: "abc".into() });
    }

    #[test]
    fn exit_codes_follow_the_error_class() {
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_CONFIG);
        assert_eq!(exit_code(&Error::MissingCheckpoint("m".into())), EXIT_CHECKPOINT);
        assert_eq!(exit_code(&Error::Report("x".into())), EXIT_FAILURE);
    }

    #[test]
    fn resumed_metrics_keep_only_earlier_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        fs::write(&p, format!("{}\n0,1,a\n1,1,b\n2,1,c\n", StepRecord::CSV_HEADER)).unwrap();
        let kept = keep_metrics_before(&p, 2).unwrap();
        assert_eq!(kept.lines().count(), 3);
        assert!(kept.ends_with("1,1,b\n"));
        assert_eq!(keep_metrics_before(&p, 0).unwrap().lines().count(), 1);
    }
}
