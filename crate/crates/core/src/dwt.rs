//! Single-level orthonormal 2D Haar transform, applied per frame and per
//! channel.
//!
//! For each 2×2 block with top row `a b` and bottom row `c d`:
//!
//! ```text
//! ll = (a + b + c + d) / 2      lh = (a - b + c - d) / 2
//! hl = (a + b - c - d) / 2      hh = (a - b - c + d) / 2
//! ```
//!
//! The map is orthonormal, so the inverse is its transpose and energy is
//! preserved exactly.

use crate::kernels::{self, Dims};
use crate::media::VideoTensor;
use crate::{Error, Real, Result, Tensor};

/// Low band plus the three high bands (LH, HL, HH), each `[C, L, H/2, W/2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletPair<T = f32> {
    pub ll: Tensor<T>,
    pub highs: [Tensor<T>; 3],
}

impl<T: Real> WaveletPair<T> {
    /// Bands stacked on the channel axis: `[4C, L, H/2, W/2]`.
    pub fn packed(&self) -> Tensor<T> {
        let mut data = self.ll.data().to_vec();
        for h in &self.highs {
            data.extend_from_slice(h.data());
        }
        let s = self.ll.shape();
        Tensor::from_vec(&[4 * s[0], s[1], s[2], s[3]], data).expect("band sizes")
    }

    pub fn from_packed(packed: &Tensor<T>) -> Result<Self> {
        let s = packed.shape();
        if s.len() != 4 || !s[0].is_multiple_of(4) {
            return Err(Error::invalid(alloc::format!(
                "packed bands must be [4C, L, H, W], got {s:?}"
            )));
        }
        let band_shape = [s[0] / 4, s[1], s[2], s[3]];
        let n = packed.len() / 4;
        let band = |k: usize| {
            Tensor::from_vec(&band_shape, packed.data()[k * n..(k + 1) * n].to_vec())
                .expect("band size")
        };
        Ok(Self {
            ll: band(0),
            highs: [band(1), band(2), band(3)],
        })
    }

    pub fn energy(&self) -> T {
        self.ll.sum_sq() + self.highs.iter().map(Tensor::sum_sq).sum::<T>()
    }
}

pub fn dwt<T: Real>(video: &VideoTensor<T>) -> Result<WaveletPair<T>> {
    let d = Dims::of(video.tensor().shape());
    if !d.h.is_multiple_of(2) || !d.w.is_multiple_of(2) {
        return Err(Error::invalid(alloc::format!(
            "the Haar transform needs even spatial dims, got {}x{}",
            d.h,
            d.w
        )));
    }
    let mut out = Tensor::zeros(&[4 * d.c, d.t, d.h / 2, d.w / 2]);
    kernels::haar_forward(d, video.data(), out.data_mut());
    WaveletPair::from_packed(&out)
}

pub fn idwt<T: Real>(pair: &WaveletPair<T>) -> Result<VideoTensor<T>> {
    let s = pair.ll.shape();
    if s.len() != 4 {
        return Err(Error::invalid("the low band must be [C, L, H, W]"));
    }
    for h in &pair.highs {
        h.expect_shape("idwt", s)?;
    }
    let d = Dims {
        c: s[0],
        t: s[1],
        h: 2 * s[2],
        w: 2 * s[3],
    };
    let mut out = Tensor::zeros(&[d.c, d.t, d.h, d.w]);
    kernels::haar_inverse(d, pair.packed().data(), out.data_mut());
    VideoTensor::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media::ClipShape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_clip(shape: ClipShape, seed: u64) -> VideoTensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VideoTensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_frame_has_only_low_band() {
        let v = VideoTensor::<f32>::from_fn(ClipShape::new(2, 4, 6), |_| 0.3);
        let p = dwt(&v).unwrap();
        assert!(p.ll.data().iter().all(|&x| (x - 0.6).abs() < 1e-7));
        assert!(p.highs.iter().all(|h| h.data().iter().all(|&x| x == 0.0)));
        let back = idwt(&p).unwrap();
        assert!(back.max_abs_diff(&v) < 1e-7);
    }

    #[test]
    fn single_impulse_spreads_evenly() {
        let t = Tensor::<f64>::from_vec(&[1, 1, 2, 2], alloc::vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = dwt(&VideoTensor::new(t).unwrap()).unwrap();
        assert_eq!(p.ll.data(), &[0.5]);
        for h in &p.highs {
            assert_eq!(h.data(), &[0.5]);
        }
    }

    #[test]
    fn band_order_matches_the_haar_formulas() {
        // a=1, b=2, c=3, d=4
        let t = Tensor::<f64>::from_vec(&[1, 1, 2, 2], alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = dwt(&VideoTensor::new(t).unwrap()).unwrap();
        assert_eq!(p.ll.data(), &[5.0]);
        assert_eq!(p.highs[0].data(), &[-1.0]);
        assert_eq!(p.highs[1].data(), &[-2.0]);
        assert_eq!(p.highs[2].data(), &[0.0]);
    }

    #[test]
    fn odd_sizes_and_mismatched_bands_are_rejected() {
        let v = VideoTensor::<f32>::zeros(ClipShape::new(1, 3, 4));
        assert!(matches!(dwt(&v), Err(Error::InvalidInput(_))));
        let mut p = dwt(&VideoTensor::<f32>::zeros(ClipShape::new(1, 4, 4))).unwrap();
        p.highs[1] = Tensor::zeros(&[3, 1, 2, 1]);
        assert!(matches!(idwt(&p), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn round_trips_and_energy() {
        for (i, shape) in [ClipShape::new(8, 32, 32), ClipShape::new(3, 6, 10), ClipShape::new(1, 2, 2)]
            .into_iter()
            .enumerate()
        {
            let v = random_clip(shape, i as u64);
            let p = dwt(&v).unwrap();
            assert!(idwt(&p).unwrap().max_abs_diff(&v) <= 1e-6);
            let p2 = dwt(&idwt(&p).unwrap()).unwrap();
            assert!(p2.packed().max_abs_diff(&p.packed()) <= 1e-6);
            let (e0, e1) = (v.sum_sq() as f64, p.energy() as f64);
            assert!((e0 - e1).abs() / e0 <= 1e-5);
        }
    }

    #[test]
    fn linearity() {
        let shape = ClipShape::new(2, 8, 8);
        let (x, y) = (random_clip(shape, 1), random_clip(shape, 2));
        let (a, b) = (0.7f32, -1.3f32);
        let mix = VideoTensor::new(x.zip_map(&y, |p, q| a * p + b * q).unwrap()).unwrap();
        let lhs = dwt(&mix).unwrap().packed();
        let (px, py) = (dwt(&x).unwrap().packed(), dwt(&y).unwrap().packed());
        let rhs = px.zip_map(&py, |p, q| a * p + b * q).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }
}
