use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::CommandFactory;
use dinvmark::cli::{self, Cli, EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_OK, EXIT_USAGE, SIDECAR};

struct Outcome {
    code: i32,
    stdout: String,
    stderr: String,
}

fn dinvmark(args: &[&str]) -> Outcome {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("dinvmark").chain(args.iter().copied());
    let code = cli::run(argv, &mut out, &mut err);
    Outcome {
        code,
        stdout: String::from_utf8(out).unwrap(),
        stderr: String::from_utf8(err).unwrap(),
    }
}

fn ok(args: &[&str]) -> String {
    let o = dinvmark(args);
    assert_eq!(o.code, EXIT_OK, "{args:?} failed: {}", o.stderr);
    o.stdout
}

/// Value of `key=` in a summary line.
fn field<'a>(line: &'a str, key: &str) -> &'a str {
    line.split_whitespace()
        .find_map(|w| w.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no `{key}` in `{line}`"))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A run configuration for 2×8×8 clips and a 4-bit payload.
fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.conf");
    fs::write(
        &path,
        "# tiny desk run\n\
         frames = 2\nheight = 8\nwidth = 8\nbits = 4\nblocks = 2\nhidden = 8\n\
         noise_blocks = 1\nnoise_hidden = 2\ndisc_width = 2\ndisc_units = 1\n\
         stage1_steps = 120\nstage2_steps = 20\nbatch_size = 2\nlearning_rate = 0.005\n\
         grad_clip = 1\nsteps_per_epoch = 10\ncheckpoint_every = 70\ndistortions = identity\n\
         encoder_path = /nonexistent/ffmpeg\nseed = 3\n",
    )
    .unwrap();
    path
}

struct Trained {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    clips: PathBuf,
    noise: PathBuf,
    run: PathBuf,
    summary: String,
}

fn trained() -> Trained {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let config = tiny_config(&root);
    let clips = root.join("clips");
    ok(&["ingest", "--config", p(&config), "--synthetic", "3", "--out", p(&clips)]);
    let noise = root.join("noise.ckpt");
    ok(&["pretrain-noise", "--config", p(&config), "--untrained", "--out", p(&noise)]);
    let run = root.join("run");
    let summary = ok(&[
        "train", "--config", p(&config), "--data", p(&clips), "--noise", p(&noise), "--out", p(&run),
    ]);
    Trained {
        _tmp: tmp,
        root,
        config,
        clips,
        noise,
        run,
        summary,
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let status = Process::new(env!("CARGO_BIN_EXE_dinvmark")).arg("frobnicate").stderr(std::process::Stdio::null()).status().unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
    assert_eq!(dinvmark(&["frobnicate"]).code, EXIT_USAGE);
    assert_eq!(dinvmark(&["embed"]).code, EXIT_USAGE);
}

#[test]
fn help_exits_cleanly() {
    let o = dinvmark(&["--help"]);
    assert_eq!(o.code, EXIT_OK);
    assert!(o.stdout.contains("pretrain-noise"));
}

#[test]
fn every_subcommand_and_flag_is_documented() {
    let cmd = Cli::command();
    let subs: Vec<_> = cmd.get_subcommands().collect();
    let names: Vec<_> = subs.iter().map(|s| s.get_name()).collect();
    assert_eq!(
        names,
        ["ingest", "pretrain-noise", "train", "embed", "extract", "attack", "evaluate", "report"]
    );
    for sub in subs {
        assert!(sub.get_about().is_some(), "{} has no description", sub.get_name());
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            assert!(arg.get_help().is_some(), "{} --{id} has no help", sub.get_name());
        }
    }
}

#[test]
fn bad_configuration_exits_with_the_config_status() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("c");
    for args in [
        vec!["ingest", "--synthetic", "1", "--set", "bits=abc", "--out", p(&out)],
        vec!["ingest", "--synthetic", "1", "--set", "no_such_key=1", "--out", p(&out)],
        vec!["ingest", "--synthetic", "1", "--set", "frames", "--out", p(&out)],
    ] {
        let o = dinvmark(&args);
        assert_eq!(o.code, EXIT_CONFIG, "{args:?}: {}", o.stderr);
        assert!(o.stderr.starts_with("error:"));
    }
    let o = dinvmark(&["attack", "--spec", "shake:hard=1", "--in", p(&out), "--out", p(&out)]);
    assert_eq!(o.code, EXIT_CONFIG);
    let missing = tmp.path().join("absent.conf");
    assert_ne!(dinvmark(&["ingest", "--config", p(&missing), "--synthetic", "1"]).code, EXIT_OK);
}

#[test]
fn missing_checkpoint_exits_with_the_checkpoint_status() {
    let tmp = tempfile::tempdir().unwrap();
    let clips = tmp.path().join("clips");
    let cfg = tiny_config(tmp.path());
    ok(&["ingest", "--config", p(&cfg), "--synthetic", "1", "--out", p(&clips)]);
    let clip = clips.join("clip_0000");
    let absent = tmp.path().join("absent.ckpt");
    for args in [
        vec!["extract", "--ckpt", p(&absent), "--in", p(&clip)],
        vec!["embed", "--ckpt", p(&absent), "--in", p(&clip), "--out", p(tmp.path())],
        vec!["evaluate", "--ckpt", p(&absent), "--data", p(&clip)],
    ] {
        let o = dinvmark(&args);
        assert_eq!(o.code, EXIT_CHECKPOINT, "{args:?}: {}", o.stderr);
    }
    let run = tmp.path().join("run");
    let o = dinvmark(&["train", "--config", p(&cfg), "--data", p(&clips), "--noise", p(&absent), "--out", p(&run)]);
    assert_eq!(o.code, EXIT_CHECKPOINT);
}

#[test]
fn ingest_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let a = tmp.path().join("a");
    let line = ok(&["ingest", "--config", p(&cfg), "--synthetic", "2", "--out", p(&a)]);
    assert_eq!(field(&line, "clips"), "2");
    assert_eq!(field(&line, "shape"), "3x2x8x8");
    let first = fs::read(a.join("clip_0001").join("frame_0001.png")).unwrap();
    ok(&["ingest", "--config", p(&cfg), "--synthetic", "2", "--out", p(&a)]);
    assert_eq!(fs::read(a.join("clip_0001").join("frame_0001.png")).unwrap(), first);

    // Re-ingesting real frame directories reproduces them exactly.
    let b = tmp.path().join("b");
    ok(&["ingest", "--config", p(&cfg), "--set", "crop=center", "--in", p(&a), "--out", p(&b)]);
    for clip in ["clip_0000", "clip_0001"] {
        for t in 0..2 {
            let name = format!("frame_{t:04}.png");
            assert_eq!(fs::read(a.join(clip).join(&name)).unwrap(), fs::read(b.join(clip).join(&name)).unwrap());
        }
    }
}

#[test]
fn attacks_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let clips = tmp.path().join("clips");
    ok(&["ingest", "--config", p(&cfg), "--synthetic", "1", "--out", p(&clips)]);
    let clip = clips.join("clip_0000");
    for spec in ["gaussian:std=0.04,seed=7", "frame_swap:p=0.5,seed=2", "frame_average:n=3"] {
        let (x, y) = (tmp.path().join("x"), tmp.path().join("y"));
        let line = ok(&["attack", "--spec", spec, "--in", p(&clip), "--out", p(&x)]);
        assert!(line.starts_with("attack spec="));
        ok(&["attack", "--spec", spec, "--in", p(&clip), "--out", p(&y)]);
        for t in 0..2 {
            let name = format!("frame_{t:04}.png");
            assert_eq!(fs::read(x.join(&name)).unwrap(), fs::read(y.join(&name)).unwrap(), "{spec}");
        }
    }
    let id = ok(&["attack", "--spec", "identity", "--in", p(&clip), "--out", p(&tmp.path().join("z"))]);
    assert_eq!(field(&id, "psnr"), "inf");
}

#[test]
fn codec_attack_without_encoder_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let clips = tmp.path().join("clips");
    ok(&["ingest", "--config", p(&cfg), "--synthetic", "1", "--out", p(&clips)]);
    let o = dinvmark(&[
        "attack", "--config", p(&cfg), "--spec", "hevc:qp=22", "--in", p(&clips.join("clip_0000")), "--out",
        p(&tmp.path().join("h")),
    ]);
    assert_eq!(o.code, 1);
    assert!(o.stderr.contains("encoder"), "{}", o.stderr);
}

#[test]
fn train_embed_extract_evaluate_report() {
    let t = trained();
    assert_eq!(field(&t.summary, "steps"), "140");
    assert_eq!(field(&t.summary, "noise_frozen"), "true");
    let metrics = fs::read_to_string(t.run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 141);
    for step in [70, 120, 140] {
        assert!(t.run.join("checkpoints").join(format!("step_{step:06}.ckpt")).is_file(), "step {step}");
    }
    let model = t.run.join("model.ckpt");
    let clip = t.clips.join("clip_0001");

    let marked = t.root.join("marked");
    let line = ok(&["embed", "--ckpt", p(&model), "--in", p(&clip), "--out", p(&marked), "--bits", "1011"]);
    assert_eq!(field(&line, "bits"), "1011");
    assert!(marked.join(SIDECAR).is_file());
    let quality: f64 = field(&line, "psnr").parse().unwrap();
    assert!(quality > 20.0, "{line}");

    let line = ok(&["extract", "--ckpt", p(&model), "--in", p(&marked)]);
    assert_eq!(field(&line, "bits"), "1011", "{line}");
    assert_eq!(field(&line, "acc"), "100.0000");
    assert_eq!(field(&line, "checkpoint_match"), "true");
    let step70 = t.run.join("checkpoints").join("step_000070.ckpt");
    let line = ok(&["extract", "--ckpt", p(&step70), "--in", p(&marked)]);
    assert_eq!(field(&line, "checkpoint_match"), "false");

    let eval = t.root.join("eval");
    let line = ok(&[
        "evaluate", "--config", p(&t.config), "--ckpt", p(&model), "--data", p(&t.clips), "--out", p(&eval),
    ]);
    assert_eq!(field(&line, "rows"), "7");
    assert_eq!(field(&line, "skipped"), "2");
    assert_eq!(field(&line, "clips"), "3");
    let csv = fs::read_to_string(eval.join("report.csv")).unwrap();
    assert!(csv.starts_with("attack,payload,clips,acc,psnr,flicker,skipped"));
    assert!(csv.lines().any(|l| l.starts_with("hevc:qp=22") && l.ends_with("attack unavailable")));
    let accounting = fs::read_to_string(eval.join("accounting.txt")).unwrap();
    let params = field(accounting.lines().next().unwrap(), "params");
    assert_eq!(params, field(accounting.lines().next().unwrap(), "analytic_params"));
    assert!(accounting.contains("published_reference_params_m="));

    let rep = t.root.join("rep");
    let line = ok(&[
        "report", "--config", p(&t.config), "--in", p(&eval.join("report.csv")), "--out", p(&rep), "--ckpt",
        p(&model), "--clip", p(&clip),
    ]);
    assert_eq!(field(&line, "plots"), "3");
    assert_eq!(field(&line, "diffs"), "1");
    for plot in ["acc_vs_quality.svg", "acc_vs_payload.svg", "psnr_vs_payload.svg"] {
        let svg = fs::read_to_string(rep.join("plots").join(plot)).unwrap();
        assert!(svg.contains("<svg"), "{plot}");
    }
    assert!(rep.join("diffs").join("clip_0000").join("frame_0000.png").is_file());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let t = trained();
    let resumed = t.root.join("resumed");
    fs::create_dir_all(&resumed).unwrap();
    // Seed the resumed run with the first 70 rows of the reference log.
    let full = fs::read_to_string(t.run.join("metrics.csv")).unwrap();
    let head: String = full.lines().take(71).map(|l| format!("{l}\n")).collect();
    fs::write(resumed.join("metrics.csv"), head).unwrap();
    let ckpt = t.run.join("checkpoints").join("step_000070.ckpt");
    let line = ok(&[
        "train", "--config", p(&t.config), "--data", p(&t.clips), "--noise", p(&t.noise), "--out", p(&resumed),
        "--resume", p(&ckpt),
    ]);
    assert_eq!(field(&line, "steps"), "140");
    assert_eq!(fs::read_to_string(resumed.join("metrics.csv")).unwrap(), full);
    assert_eq!(
        fs::read(resumed.join("model.ckpt")).unwrap(),
        fs::read(t.run.join("model.ckpt")).unwrap()
    );
}

#[test]
fn training_refuses_an_unfrozen_or_mismatched_state() {
    let t = trained();
    let ckpt = t.run.join("checkpoints").join("step_000070.ckpt");
    let o = dinvmark(&[
        "train", "--config", p(&t.config), "--set", "hidden=4", "--data", p(&t.clips), "--noise", p(&t.noise),
        "--out", p(&t.root.join("bad")), "--resume", p(&ckpt),
    ]);
    assert_eq!(o.code, EXIT_CONFIG, "{}", o.stderr);
}
