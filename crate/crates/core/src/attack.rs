//! Distortions applied to watermarked clips.
//!
//! Temporal attacks are expressed as frame-mixing matrices so the same
//! definition drives both the plain functions and their differentiable
//! counterparts on the tape. Codec attacks need an external encoder and are
//! only described here; the `dinvmark` crate runs them.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::media::VideoTensor;
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Output frame `t` is `sum(w * input[s])` over `(s, w)` in row `t`.
pub type FrameMix = Vec<Vec<(usize, f64)>>;

/// Highest QP/CRF accepted by both x264 and x265.
pub const MAX_QUALITY: u32 = 51;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AttackKind {
    Identity,
    FrameAverage { window: usize },
    FrameDrop { p: f64 },
    FrameSwap { p: f64 },
    Gaussian { std: f64 },
    H264 { crf: u32 },
    Hevc { qp: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackSpec {
    pub kind: AttackKind,
    pub seed: u64,
}

impl AttackSpec {
    pub fn new(kind: AttackKind, seed: u64) -> Result<Self> {
        let spec = Self { kind, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn identity() -> Self {
        Self {
            kind: AttackKind::Identity,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(msg));
        match self.kind {
            AttackKind::FrameAverage { window } if window == 0 || window % 2 == 0 => {
                bad(alloc::format!("frame_average window must be odd and positive, got {window}"))
            }
            AttackKind::FrameDrop { p } | AttackKind::FrameSwap { p } if !(0.0..=1.0).contains(&p) => {
                bad(alloc::format!("probability must lie in [0, 1], got {p}"))
            }
            AttackKind::Gaussian { std } if !(std >= 0.0 && std.is_finite()) => {
                bad(alloc::format!("gaussian std must be finite and non-negative, got {std}"))
            }
            AttackKind::H264 { crf: q } | AttackKind::Hevc { qp: q } if q > MAX_QUALITY => {
                bad(alloc::format!("quality {q} exceeds {MAX_QUALITY}"))
            }
            _ => Ok(()),
        }
    }

    pub fn is_codec(&self) -> bool {
        matches!(self.kind, AttackKind::H264 { .. } | AttackKind::Hevc { .. })
    }

    /// Applies a pure attack. Codec kinds return [`Error::Unsupported`].
    pub fn apply<T: Real>(&self, video: &VideoTensor<T>) -> Result<VideoTensor<T>> {
        self.validate()?;
        match self.kind {
            AttackKind::Identity => Ok(video.clone()),
            AttackKind::FrameAverage { window } => frame_average(video, window),
            AttackKind::FrameDrop { p } => frame_drop(video, p, self.seed),
            AttackKind::FrameSwap { p } => frame_swap(video, p, self.seed),
            AttackKind::Gaussian { std } => gaussian_noise(video, std, self.seed),
            AttackKind::H264 { .. } | AttackKind::Hevc { .. } => Err(Error::Unsupported(alloc::format!(
                "{self} needs an external encoder"
            ))),
        }
    }
}

impl fmt::Display for AttackSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seeded = |f: &mut fmt::Formatter<'_>| {
            if self.seed != 0 {
                write!(f, ",seed={}", self.seed)
            } else {
                Ok(())
            }
        };
        match self.kind {
            AttackKind::Identity => f.write_str("identity"),
            AttackKind::FrameAverage { window } => write!(f, "frame_average:n={window}"),
            AttackKind::FrameDrop { p } => {
                write!(f, "frame_drop:p={p}")?;
                seeded(f)
            }
            AttackKind::FrameSwap { p } => {
                write!(f, "frame_swap:p={p}")?;
                seeded(f)
            }
            AttackKind::Gaussian { std } => {
                write!(f, "gaussian:std={std}")?;
                seeded(f)
            }
            AttackKind::H264 { crf } => write!(f, "h264:crf={crf}"),
            AttackKind::Hevc { qp } => write!(f, "hevc:qp={qp}"),
        }
    }
}

/// Parses `kind[:key=value,...]`, e.g. `hevc:qp=22` or
/// `gaussian:std=0.04,seed=7`.
impl FromStr for AttackSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = s.split_once(':').unwrap_or((s, ""));
        let mut params: Vec<(&str, &str)> = Vec::new();
        for item in rest.split(',').map(str::trim).filter(|x| !x.is_empty()) {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| Error::invalid(alloc::format!("expected key=value in attack spec, got `{item}`")))?;
            params.push((k.trim(), v.trim()));
        }
        let lookup = |key: &str| params.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
        fn value<V: FromStr>(name: &str, key: &str, v: Option<&str>) -> Result<V> {
            let v = v.ok_or_else(|| Error::invalid(alloc::format!("attack `{name}` needs `{key}=`")))?;
            v.parse()
                .map_err(|_| Error::invalid(alloc::format!("bad value `{v}` for `{key}`")))
        }
        let req = |key: &'static str| (key, lookup(key));
        let seed = match lookup("seed") {
            Some(_) => value::<u64>(name, "seed", lookup("seed"))?,
            None => 0,
        };
        let (kind, key) = match name {
            "identity" | "none" => (AttackKind::Identity, None),
            "frame_average" | "favg" => {
                let (k, v) = req("n");
                (AttackKind::FrameAverage { window: value(name, k, v)? }, Some(k))
            }
            "frame_drop" | "drop" => {
                let (k, v) = req("p");
                (AttackKind::FrameDrop { p: value(name, k, v)? }, Some(k))
            }
            "frame_swap" | "swap" => {
                let (k, v) = req("p");
                (AttackKind::FrameSwap { p: value(name, k, v)? }, Some(k))
            }
            "gaussian" | "noise" => {
                let (k, v) = req("std");
                (AttackKind::Gaussian { std: value(name, k, v)? }, Some(k))
            }
            "h264" => {
                let (k, v) = req("crf");
                (AttackKind::H264 { crf: value(name, k, v)? }, Some(k))
            }
            "hevc" | "h265" => {
                let (k, v) = req("qp");
                (AttackKind::Hevc { qp: value(name, k, v)? }, Some(k))
            }
            other => return Err(Error::invalid(alloc::format!("unknown attack `{other}`"))),
        };
        let used = [Some("seed"), key];
        if let Some((k, _)) = params.iter().find(|(k, _)| !used.contains(&Some(*k))) {
            return Err(Error::invalid(alloc::format!("unknown key `{k}` for attack `{name}`")));
        }
        AttackSpec::new(kind, seed)
    }
}

fn reflect(i: isize, len: usize) -> usize {
    let last = len as isize - 1;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i > last {
        i = 2 * last - i;
    }
    i.clamp(0, last) as usize
}

pub fn frame_average_mix(frames: usize, window: usize) -> Result<FrameMix> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::invalid(alloc::format!(
            "frame_average window must be odd and positive, got {window}"
        )));
    }
    if window > 2 * frames - 1 {
        return Err(Error::invalid(alloc::format!(
            "window {window} is too long for {frames} frames"
        )));
    }
    let half = (window / 2) as isize;
    let w = 1.0 / window as f64;
    Ok((0..frames as isize)
        .map(|t| (t - half..=t + half).map(|s| (reflect(s, frames), w)).collect())
        .collect())
}

/// Source frame index for every output frame.
pub fn frame_drop_order(frames: usize, p: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kept = 0;
    let mut order = Vec::with_capacity(frames);
    for t in 0..frames {
        if t > 0 && rng.random::<f64>() >= p {
            kept = t;
        }
        order.push(kept);
    }
    order
}

pub fn frame_swap_order(frames: usize, p: f64, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..frames).collect();
    for pair in order.chunks_exact_mut(2) {
        if rng.random::<f64>() < p {
            pair.swap(0, 1);
        }
    }
    order
}

fn check_probability(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::invalid(alloc::format!("probability must lie in [0, 1], got {p}")))
    }
}

pub fn permutation_mix(order: &[usize]) -> FrameMix {
    order.iter().map(|&s| alloc::vec![(s, 1.0)]).collect()
}

fn reorder<T: Real>(video: &VideoTensor<T>, order: &[usize]) -> Result<VideoTensor<T>> {
    let s = video.shape();
    let plane = s.height * s.width;
    let src = video.data();
    let mut out = Vec::with_capacity(src.len());
    for c in 0..video.channels() {
        for &f in order {
            out.extend_from_slice(&src[(c * s.frames + f) * plane..][..plane]);
        }
    }
    VideoTensor::new(Tensor::from_vec(video.tensor().shape(), out)?)
}

/// Mean over a window of `window` frames centred on each frame, with
/// reflect padding at the clip ends.
pub fn frame_average<T: Real>(video: &VideoTensor<T>, window: usize) -> Result<VideoTensor<T>> {
    let s = video.shape();
    let mix = frame_average_mix(s.frames, window)?;
    if window == 1 {
        return Ok(video.clone());
    }
    let plane = s.height * s.width;
    let src = video.data();
    let inv = T::of(window as f64);
    let mut out = Vec::with_capacity(src.len());
    for c in 0..video.channels() {
        for row in &mix {
            let mut acc = alloc::vec![T::zero(); plane];
            for &(f, _) in row {
                for (a, &v) in acc.iter_mut().zip(&src[(c * s.frames + f) * plane..][..plane]) {
                    *a += v;
                }
            }
            out.extend(acc.into_iter().map(|a| a / inv));
        }
    }
    VideoTensor::new(Tensor::from_vec(video.tensor().shape(), out)?)
}

/// Each frame after the first is dropped with probability `p` and replaced
/// by the nearest earlier retained frame.
pub fn frame_drop<T: Real>(video: &VideoTensor<T>, p: f64, seed: u64) -> Result<VideoTensor<T>> {
    check_probability(p)?;
    reorder(video, &frame_drop_order(video.shape().frames, p, seed))
}

/// Each pair `(2k, 2k + 1)` is swapped with probability `p`.
pub fn frame_swap<T: Real>(video: &VideoTensor<T>, p: f64, seed: u64) -> Result<VideoTensor<T>> {
    check_probability(p)?;
    reorder(video, &frame_swap_order(video.shape().frames, p, seed))
}

pub fn gaussian_sample<T: Real>(shape: &[usize], std: f64, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::of(std * rng.sample::<f64, _>(StandardNormal)))
}

/// Adds i.i.d. zero-mean noise of standard deviation `std` and clamps to
/// `[-1, 1]`.
pub fn gaussian_noise<T: Real>(video: &VideoTensor<T>, std: f64, seed: u64) -> Result<VideoTensor<T>> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(alloc::format!(
            "gaussian std must be finite and non-negative, got {std}"
        )));
    }
    if std == 0.0 {
        return Ok(video.clone());
    }
    let noise = gaussian_sample::<T>(video.tensor().shape(), std, seed);
    let (lo, hi) = (-T::one(), T::one());
    VideoTensor::new(video.zip_map(&noise, |v, n| (v + n).max(lo).min(hi))?)
}

/// Differentiable version of a pure attack on the tape.
pub fn apply_on<T: Real>(tape: &mut Tape<T>, video: Var, spec: &AttackSpec) -> Result<Var> {
    spec.validate()?;
    let frames = tape.shape(video)[1];
    Ok(match spec.kind {
        AttackKind::Identity => video,
        AttackKind::FrameAverage { window } => tape.frame_mix(video, frame_average_mix(frames, window)?),
        AttackKind::FrameDrop { p } => tape.frame_mix(video, permutation_mix(&frame_drop_order(frames, p, spec.seed))),
        AttackKind::FrameSwap { p } => tape.frame_mix(video, permutation_mix(&frame_swap_order(frames, p, spec.seed))),
        AttackKind::Gaussian { std } => {
            let noise = tape.constant(gaussian_sample(tape.shape(video), std, spec.seed));
            let noisy = tape.add(video, noise);
            tape.clamp(noisy, -1.0, 1.0)
        }
        AttackKind::H264 { .. } | AttackKind::Hevc { .. } => {
            return Err(Error::Unsupported(alloc::format!("{spec} is not differentiable")))
        }
    })
}

impl AttackKind {
    pub fn name(&self) -> String {
        match self {
            AttackKind::Identity => "identity",
            AttackKind::FrameAverage { .. } => "frame_average",
            AttackKind::FrameDrop { .. } => "frame_drop",
            AttackKind::FrameSwap { .. } => "frame_swap",
            AttackKind::Gaussian { .. } => "gaussian",
            AttackKind::H264 { .. } => "h264",
            AttackKind::Hevc { .. } => "hevc",
        }
        .to_string()
    }
}
