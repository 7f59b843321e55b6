//! External video-codec client.
//!
//! A clip is written as lossless PNG frames into a fresh scratch
//! directory, encoded by an ffmpeg-compatible binary, decoded back to PNG
//! frames and re-ingested. Encoder flags are fixed: 4:4:4 sampling, no
//! B-frames and a keyframe interval of one clip, so decoded frames come back
//! in input order. H.264 uses constant rate factor, HEVC constant QP.

use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::process::Command;

use dinvmark_core::attack::{AttackKind, AttackSpec};
use dinvmark_core::media::VideoTensor;
use thiserror::Error;

use crate::io;

pub const DEFAULT_ENCODER: &str = "ffmpeg";
pub const SCRATCH_ENV: &str = "DINVMARK_SCRATCH";

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("video encoder `{0}` not found")]
    EncoderMissing(PathBuf),
    #[error("video encoder failed ({status}): {stderr}")]
    EncoderFailed { status: String, stderr: String },
    #[error("decoded {found} frames, expected {expected}")]
    FrameCountMismatch { expected: usize, found: usize },
    #[error("decoded clip: {0}")]
    Decode(String),
    #[error("scratch directory {path}: {source}")]
    Scratch {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VideoCodec {
    H264,
    Hevc,
}

/// Where the encoder lives and where temporary files go.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodecClient {
    pub encoder: PathBuf,
    pub scratch: PathBuf,
}

impl Default for CodecClient {
    fn default() -> Self {
        Self::new(None, None)
    }
}

/// Scratch directory: the environment override, then `configured`, then
/// the system temporary directory.
pub fn scratch_dir(configured: Option<&Path>) -> PathBuf {
    match std::env::var_os(SCRATCH_ENV).filter(|v| !v.is_empty()) {
        Some(v) => PathBuf::from(v),
        None => configured.map(Path::to_path_buf).unwrap_or_else(std::env::temp_dir),
    }
}

impl CodecClient {
    pub fn new(encoder: Option<&Path>, scratch: Option<&Path>) -> Self {
        Self {
            encoder: encoder.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(DEFAULT_ENCODER)),
            scratch: scratch_dir(scratch),
        }
    }

    /// Whether the encoder binary can be started at all.
    pub fn available(&self) -> bool {
        Command::new(&self.encoder)
            .arg("-version")
            .output()
            .is_ok_and(|o| o.status.success())
    }

    fn run(&self, args: &[String]) -> Result<(), CodecError> {
        let out = Command::new(&self.encoder).args(args).output().map_err(|e| match e.kind() {
            ErrorKind::NotFound | ErrorKind::PermissionDenied => CodecError::EncoderMissing(self.encoder.clone()),
            _ => CodecError::EncoderFailed {
                status: "spawn".into(),
                stderr: e.to_string(),
            },
        })?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: Vec<&str> = stderr.lines().rev().take(4).collect();
            return Err(CodecError::EncoderFailed {
                status: out.status.to_string(),
                stderr: tail.into_iter().rev().collect::<Vec<_>>().join(" | "),
            });
        }
        Ok(())
    }

    /// Encoder arguments for one compression pass.
    pub fn encode_args(codec: VideoCodec, quality: u32, frames: usize, input: &Path, output: &Path) -> Vec<String> {
        let mut a: Vec<String> = ["-hide_banner", "-loglevel", "error", "-y", "-framerate", "25", "-i"]
            .map(String::from)
            .to_vec();
        a.push(input.join("frame_%04d.png").display().to_string());
        let keyint = frames.max(1).to_string();
        match codec {
            VideoCodec::H264 => a.extend(
                [
                    "-c:v", "libx264", "-preset", "medium", "-crf", &quality.to_string(), "-bf", "0", "-g", &keyint,
                    "-pix_fmt", "yuv444p",
                ]
                .map(String::from),
            ),
            VideoCodec::Hevc => a.extend(
                [
                    "-c:v",
                    "libx265",
                    "-preset",
                    "medium",
                    "-x265-params",
                    &format!("qp={quality}:bframes=0:keyint={keyint}:log-level=error"),
                    "-pix_fmt",
                    "yuv444p",
                ]
                .map(String::from),
            ),
        }
        a.push(output.display().to_string());
        a
    }

    pub fn decode_args(input: &Path, output: &Path) -> Vec<String> {
        let mut a: Vec<String> = ["-hide_banner", "-loglevel", "error", "-y", "-i"].map(String::from).to_vec();
        a.push(input.display().to_string());
        a.extend(["-start_number", "0", "-pix_fmt", "rgb24"].map(String::from));
        a.push(output.join("frame_%04d.png").display().to_string());
        a
    }

    /// Compresses and decompresses a clip; the output has the input shape.
    pub fn compress(&self, video: &VideoTensor<f32>, codec: VideoCodec, quality: u32) -> Result<VideoTensor<f32>, CodecError> {
        let scratch_err = |source| CodecError::Scratch {
            path: self.scratch.clone(),
            source,
        };
        std::fs::create_dir_all(&self.scratch).map_err(scratch_err)?;
        let work = tempfile::Builder::new()
            .prefix("dinvmark-codec-")
            .tempdir_in(&self.scratch)
            .map_err(scratch_err)?;
        let (src, dst) = (work.path().join("in"), work.path().join("out"));
        std::fs::create_dir_all(&dst).map_err(scratch_err)?;
        io::write_frames(video, &src).map_err(|e| CodecError::Decode(e.to_string()))?;
        let stream = work.path().join("clip.mkv");
        let frames = video.shape().frames;
        self.run(&Self::encode_args(codec, quality, frames, &src, &stream))?;
        self.run(&Self::decode_args(&stream, &dst))?;
        let found = io::frame_files(&dst).map_err(|e| CodecError::Decode(e.to_string()))?.len();
        if found != frames {
            return Err(CodecError::FrameCountMismatch { expected: frames, found });
        }
        let back = io::load_source(&dst).map_err(|e| CodecError::Decode(e.to_string()))?;
        if back.shape() != video.shape() {
            return Err(CodecError::Decode(format!(
                "decoded {:?}, expected {:?}",
                back.shape(),
                video.shape()
            )));
        }
        Ok(back)
    }

    /// Runs any attack: pure ones in process, codec ones through the
    /// encoder.
    pub fn apply(&self, spec: &AttackSpec, video: &VideoTensor<f32>) -> crate::Result<VideoTensor<f32>> {
        match spec.kind {
            AttackKind::H264 { crf } => Ok(self.compress(video, VideoCodec::H264, crf)?),
            AttackKind::Hevc { qp } => Ok(self.compress(video, VideoCodec::Hevc, qp)?),
            _ => Ok(spec.apply(video)?),
        }
    }

    /// Channel for the robustness suite: codec attacks become skipped rows
    /// when the encoder is missing.
    pub fn channel(&self, spec: &AttackSpec, video: &VideoTensor<f32>) -> dinvmark_core::Result<Option<VideoTensor<f32>>> {
        match self.apply(spec, video) {
            Ok(v) => Ok(Some(v)),
            Err(crate::Error::Codec(CodecError::EncoderMissing(_))) => Ok(None),
            Err(crate::Error::Core(e)) => Err(e),
            Err(e) => Err(dinvmark_core::Error::Unsupported(e.to_string())),
        }
    }
}
