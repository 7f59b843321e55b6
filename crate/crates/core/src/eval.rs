//! Quality and robustness metrics, and the attack sweep that produces
//! report rows.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::AttackSpec;
use crate::inn::InnCodec;
use crate::media::{Message, VideoTensor};
use crate::{Error, Real, Result, Tensor};

/// Peak-to-peak range of normalised pixels.
pub const PSNR_PEAK: f64 = 2.0;

/// PSNR in dB; identical inputs give `f64::INFINITY`.
pub fn psnr<T: Real>(a: &VideoTensor<T>, b: &VideoTensor<T>) -> Result<f64> {
    psnr_tensors(a.tensor(), b.tensor())
}

pub fn psnr_tensors<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_shape("psnr", b.shape())?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    let mse = sum / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * Float::log10(PSNR_PEAK * PSNR_PEAK / mse))
}

/// Percentage of matching bits.
pub fn bit_accuracy(extracted: &[bool], original: &[bool]) -> Result<f64> {
    if extracted.len() != original.len() {
        return Err(Error::invalid(alloc::format!(
            "bit sequences differ in length: {} vs {}",
            extracted.len(),
            original.len()
        )));
    }
    if original.is_empty() {
        return Err(Error::invalid("bit sequences are empty"));
    }
    let hits = extracted.iter().zip(original).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / original.len() as f64)
}

/// Mean squared difference between the frame-to-frame changes of the two
/// clips. Zero when the watermark residual is constant in time.
pub fn flicker_score<T: Real>(watermarked: &VideoTensor<T>, cover: &VideoTensor<T>) -> Result<f64> {
    watermarked.tensor().expect_shape("flicker score", cover.tensor().shape())?;
    let s = cover.shape();
    if s.frames < 2 {
        return Err(Error::invalid("flicker score needs at least two frames"));
    }
    let plane = s.height * s.width;
    let (w, c) = (watermarked.data(), cover.data());
    let mut sum = 0.0;
    let mut n = 0usize;
    for ch in 0..cover.channels() {
        for t in 1..s.frames {
            let cur = (ch * s.frames + t) * plane;
            let prev = cur - plane;
            for i in 0..plane {
                let dw = w[cur + i].as_f64() - w[prev + i].as_f64();
                let dc = c[cur + i].as_f64() - c[prev + i].as_f64();
                sum += (dw - dc) * (dw - dc);
                n += 1;
            }
        }
    }
    Ok(sum / n as f64)
}

/// `clamp(gain * |a - b|, 0, 1)` per element, for difference images.
pub fn amplified_difference<T: Real>(a: &VideoTensor<T>, b: &VideoTensor<T>, gain: f64) -> Result<Tensor<f64>> {
    a.tensor().expect_shape("difference image", b.tensor().shape())?;
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (gain * (x.as_f64() - y.as_f64()).abs()).clamp(0.0, 1.0))
        .collect();
    Tensor::from_vec(a.tensor().shape(), data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportMeta {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub attack: String,
    pub payload: usize,
    pub clips: usize,
    /// `None` when the attack could not be run.
    pub acc: Option<f64>,
    pub psnr: Option<f64>,
    pub flicker: Option<f64>,
    pub skipped: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub meta: ReportMeta,
    pub rows: Vec<ReportRow>,
}

impl RobustnessReport {
    pub fn row(&self, attack: &str, payload: usize) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.attack == attack && r.payload == payload)
    }
}

/// Applies a pure attack; codec attacks are reported as unavailable.
pub fn pure_channel<T: Real>(spec: &AttackSpec, video: &VideoTensor<T>) -> Result<Option<VideoTensor<T>>> {
    if spec.is_codec() {
        return Ok(None);
    }
    spec.apply(video).map(Some)
}

/// Message used for clip `index` at a given payload; a pure function of
/// the suite seed.
pub fn suite_message<T: Real>(codec: &InnCodec<T>, seed: u64, index: usize) -> Message {
    let t = codec.template();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((index as u64) << 20) ^ ((t.bit_count() as u64) << 40));
    Message::random(t, &mut rng)
}

/// Embeds a seeded message in every clip with every codec, runs each
/// attack through `channel`, and extracts. ACC is averaged over clips;
/// PSNR and flicker describe the watermarked clip before the attack.
/// `channel` returns `Ok(None)` for attacks it cannot run, which marks the
/// row as skipped. Stochastic attacks use `spec.seed + clip index`.
pub fn run_robustness_suite<T: Real>(
    codecs: &[&InnCodec<T>],
    clips: &[VideoTensor<T>],
    attacks: &[AttackSpec],
    meta: ReportMeta,
    mut channel: impl FnMut(&AttackSpec, &VideoTensor<T>) -> Result<Option<VideoTensor<T>>>,
) -> Result<RobustnessReport> {
    let mut rows = Vec::new();
    if attacks.is_empty() {
        return Ok(RobustnessReport { meta, rows });
    }
    if clips.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for codec in codecs {
        let payload = codec.template().bit_count();
        let mut marked = Vec::with_capacity(clips.len());
        let (mut psnr_sum, mut flicker_sum) = (0.0, 0.0);
        for (i, clip) in clips.iter().enumerate() {
            let msg = suite_message(codec, meta.seed, i);
            let wm = codec.embed(clip, &msg)?.watermarked;
            psnr_sum += psnr(&wm, clip)?;
            flicker_sum += flicker_score(&wm, clip)?;
            marked.push((msg, wm));
        }
        let n = clips.len() as f64;
        for spec in attacks {
            let mut acc_sum = 0.0;
            let mut skipped = None;
            for (i, (msg, wm)) in marked.iter().enumerate() {
                let mut s = *spec;
                s.seed = spec.seed.wrapping_add(i as u64);
                match channel(&s, wm)? {
                    Some(attacked) => {
                        let bits = codec.extract(&attacked)?;
                        acc_sum += bit_accuracy(bits.bits(), msg.bits())?;
                    }
                    None => {
                        skipped = Some("attack unavailable".to_string());
                        break;
                    }
                }
            }
            let done = skipped.is_none();
            rows.push(ReportRow {
                attack: spec.to_string(),
                payload,
                clips: clips.len(),
                acc: done.then_some(acc_sum / n),
                psnr: done.then_some(psnr_sum / n),
                flicker: done.then_some(flicker_sum / n),
                skipped,
            });
        }
    }
    Ok(RobustnessReport { meta, rows })
}

/// Parameter and FLOP totals of the embed + extract networks.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelAccounting {
    pub params: usize,
    pub flops: u64,
}

impl ModelAccounting {
    pub fn of<T: Real>(codec: &InnCodec<T>) -> Self {
        Self {
            params: codec.param_count(),
            flops: codec.flops(),
        }
    }
}

/// Published reference figures, shown next to measured values in reports
/// and never compared against them.
pub mod reference {
    /// Encoder plus decoder parameters, in millions.
    pub const PARAMS_M: f64 = 1.38;
    /// Encoder plus decoder GFLOPs at 3×8×128×128.
    pub const GFLOPS: f64 = 54.0;
    /// PSNR (dB) of 96-bit watermarked clips.
    pub const PSNR_96_BITS: f64 = 37.50;

    /// ACC (%) with 96-bit payloads under the standard attack battery,
    /// per dataset: frame average N=3, frame drop p=0.5, frame swap p=0.5,
    /// gaussian std=0.04, H.264 CRF=22, HEVC QP=22.
    pub const ATTACK_ATTACKS: [&str; 6] = [
        "frame_average:n=3",
        "frame_drop:p=0.5",
        "frame_swap:p=0.5",
        "gaussian:std=0.04",
        "h264:crf=22",
        "hevc:qp=22",
    ];
    pub const ATTACK_ACC: [(&str, [f64; 6]); 3] = [
        ("Kinetics-600", [100.0, 100.0, 100.0, 100.0, 98.66, 99.94]),
        ("UCF-101", [100.0, 100.0, 100.0, 100.0, 98.45, 99.98]),
        ("REDS", [100.0, 100.0, 100.0, 100.0, 97.54, 100.0]),
    ];

    /// HEVC ACC (%) by QP (rows 22, 27, 32) and payload bits (columns).
    pub const QP_SWEEP_QPS: [u32; 3] = [22, 27, 32];
    pub const QP_SWEEP_PAYLOADS: [usize; 6] = [96, 112, 128, 64, 256, 1024];
    pub const QP_SWEEP_ACC: [[f64; 6]; 3] = [
        [99.98, 99.99, 99.90, 99.10, 95.63, 94.06],
        [99.74, 99.85, 99.37, 97.84, 94.09, 93.32],
        [90.44, 91.04, 92.48, 91.92, 89.47, 68.65],
    ];

    /// `(PSNR dB, ACC %)` at HEVC QP=32 as the message weight varies.
    pub const PSNR_VS_ACC: [(f64, f64); 7] = [
        (38.87, 81.83),
        (38.40, 83.78),
        (37.86, 86.28),
        (37.50, 90.44),
        (37.20, 91.05),
        (36.71, 92.50),
        (36.20, 94.21),
    ];
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inn::{InitMode, InnConfig};
    use crate::media::{ClipShape, MessageTemplate};
    use proptest::prelude::*;

    fn clip(v: f64) -> VideoTensor<f64> {
        VideoTensor::from_fn(ClipShape::new(4, 4, 4), |_| v)
    }

    #[test]
    fn psnr_reference_points() {
        assert_eq!(psnr(&clip(0.3), &clip(0.3)).unwrap(), f64::INFINITY);
        // MSE = 0.25 * peak^2 = 1.0
        let p = psnr(&clip(0.0), &clip(1.0)).unwrap();
        assert!((p - 6.0206).abs() < 1e-4);
        let other = VideoTensor::<f64>::zeros(ClipShape::new(4, 4, 2));
        assert!(psnr(&clip(0.0), &other).is_err());
    }

    #[test]
    fn bit_accuracy_extremes() {
        let a = [true, false, true, true];
        let not: Vec<bool> = a.iter().map(|b| !b).collect();
        assert_eq!(bit_accuracy(&a, &a).unwrap(), 100.0);
        assert_eq!(bit_accuracy(&not, &a).unwrap(), 0.0);
        assert!(bit_accuracy(&a[..3], &a).is_err());
    }

    #[test]
    fn flicker_of_alternating_residual() {
        let eps = 0.01;
        let cover = VideoTensor::<f64>::from_fn(ClipShape::new(6, 2, 2), |i| (i % 7) as f64 * 0.05);
        let frame = 4;
        let wm = VideoTensor::from_fn(ClipShape::new(6, 2, 2), |i| {
            let t = (i / frame) % 6;
            cover.data()[i] + if t % 2 == 0 { eps } else { -eps }
        });
        assert!((flicker_score(&wm, &cover).unwrap() - 4.0 * eps * eps).abs() < 1e-12);
        let shifted = VideoTensor::from_fn(ClipShape::new(6, 2, 2), |i| cover.data()[i] + 0.2);
        assert!(flicker_score(&shifted, &cover).unwrap() < 1e-24);
        let single = VideoTensor::<f64>::zeros(ClipShape::new(1, 2, 2));
        assert!(flicker_score(&single, &single).is_err());
    }

    #[test]
    fn amplification_by_ten() {
        let d = amplified_difference(&clip(0.05), &clip(0.0), 10.0).unwrap();
        assert!(d.data().iter().all(|&x| (x - 0.5).abs() < 1e-12));
        let same = amplified_difference(&clip(0.4), &clip(0.4), 10.0).unwrap();
        assert!(same.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_attack_list_gives_an_empty_report() {
        let cfg = InnConfig::new(ClipShape::new(2, 8, 8), MessageTemplate::square(4).unwrap()).with_blocks(1).with_hidden(2);
        let codec = InnCodec::<f32>::new(cfg, InitMode::Identity, 0).unwrap();
        let meta = ReportMeta {
            checkpoint_id: "abc".into(),
            dataset_id: "none".into(),
            seed: 3,
        };
        let r = run_robustness_suite(&[&codec], &[], &[], meta.clone(), pure_channel).unwrap();
        assert!(r.rows.is_empty());
        assert_eq!(r.meta, meta);
    }

    #[test]
    fn unavailable_attacks_are_skipped() {
        let cfg = InnConfig::new(ClipShape::new(2, 8, 8), MessageTemplate::square(4).unwrap()).with_blocks(1).with_hidden(2);
        let codec = InnCodec::<f32>::new(cfg, InitMode::Random { gain: 0.3 }, 0).unwrap();
        let clips = [VideoTensor::<f32>::from_fn(cfg.clip, |i| (i % 13) as f32 / 13.0 - 0.5)];
        let attacks: Vec<AttackSpec> = ["identity", "hevc:qp=22", "frame_swap:p=1"].iter().map(|s| s.parse().unwrap()).collect();
        let meta = ReportMeta {
            checkpoint_id: "x".into(),
            dataset_id: "y".into(),
            seed: 1,
        };
        let r = run_robustness_suite(&[&codec], &clips, &attacks, meta.clone(), pure_channel).unwrap();
        assert_eq!(r.rows.len(), 3);
        assert!(r.rows[1].skipped.is_some() && r.rows[1].acc.is_none());
        let acc = r.rows[0].acc.unwrap();
        assert!((0.0..=100.0).contains(&acc));
        assert_eq!(r, run_robustness_suite(&[&codec], &clips, &attacks, meta, pure_channel).unwrap());
    }

    proptest! {
        #[test]
        fn psnr_symmetric_and_translation_invariant(seed in any::<u64>(), k in -0.5f64..0.5) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = ClipShape::new(2, 4, 4);
            let a = VideoTensor::<f64>::from_fn(s, |_| rng.random_range(-0.5..0.5));
            let b = VideoTensor::<f64>::from_fn(s, |_| rng.random_range(-0.5..0.5));
            let shift = |v: &VideoTensor<f64>| VideoTensor::new(v.map(|x| x + k)).unwrap();
            let p = psnr(&a, &b).unwrap();
            prop_assert!((p - psnr(&b, &a).unwrap()).abs() <= 1e-9);
            prop_assert!((p - psnr(&shift(&a), &shift(&b)).unwrap()).abs() <= 1e-9);
        }

        #[test]
        fn bit_accuracy_permutation_invariant(bits in proptest::collection::vec(any::<(bool, bool)>(), 1..64), rot in 0usize..64) {
            let (a, b): (Vec<bool>, Vec<bool>) = bits.iter().copied().unzip();
            prop_assert_eq!(bit_accuracy(&a, &a).unwrap(), 100.0);
            let r = rot % a.len();
            let mut pa = a.clone();
            let mut pb = b.clone();
            pa.rotate_left(r);
            pb.rotate_left(r);
            prop_assert_eq!(bit_accuracy(&a, &b).unwrap(), bit_accuracy(&pa, &pb).unwrap());
        }
    }
}
