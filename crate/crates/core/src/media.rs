//! Clips, pixel normalisation, message templates and cropping.

use alloc::vec::Vec;
use core::ops::Deref;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Real, Result, Tensor};

/// Spatio-temporal clip dimensions (channels are always 3).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ClipShape {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipShape {
    pub const CHANNELS: usize = 3;

    pub const fn new(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
        }
    }

    /// Training shape used at full scale.
    pub const fn full() -> Self {
        Self::new(8, 128, 128)
    }

    /// Desk-scale shape used by the smoke runs.
    pub const fn desk() -> Self {
        Self::new(8, 32, 32)
    }

    pub fn dims(&self) -> [usize; 4] {
        [Self::CHANNELS, self.frames, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        Self::CHANNELS * self.frames * self.height * self.width
    }
}

/// A clip `[3, L, H, W]` with finite values, nominally in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor<T = f32>(Tensor<T>);

impl<T: Real> VideoTensor<T> {
    pub fn new(tensor: Tensor<T>) -> Result<Self> {
        let s = tensor.shape();
        if s.len() != 4 || s.contains(&0) {
            return Err(Error::invalid(alloc::format!(
                "a clip must be [C, L, H, W] with non-zero dims, got {s:?}"
            )));
        }
        if !tensor.is_finite() {
            return Err(Error::NonFinite {
                stage: "clip",
                block: None,
            });
        }
        Ok(Self(tensor))
    }

    pub fn zeros(shape: ClipShape) -> Self {
        Self(Tensor::zeros(&shape.dims()))
    }

    pub fn from_fn(shape: ClipShape, f: impl FnMut(usize) -> T) -> Self {
        Self(Tensor::from_fn(&shape.dims(), f))
    }

    /// From 8-bit samples laid out `[3, L, H, W]`.
    pub fn from_pixels(shape: ClipShape, pixels: &[u8]) -> Result<Self> {
        if pixels.len() != shape.numel() {
            return Err(Error::invalid(alloc::format!(
                "expected {} samples, got {}",
                shape.numel(),
                pixels.len()
            )));
        }
        Ok(Self(Tensor::from_fn(&shape.dims(), |i| normalize(pixels[i]))))
    }

    /// 8-bit samples `[3, L, H, W]`, rounded and clamped.
    pub fn to_pixels(&self) -> Vec<u8> {
        self.0.data().iter().map(|&v| denormalize(v)).collect()
    }

    pub fn shape(&self) -> ClipShape {
        let s = self.0.shape();
        ClipShape::new(s[1], s[2], s[3])
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.0
    }

    pub fn cast<U: Real>(&self) -> VideoTensor<U> {
        VideoTensor(self.0.cast())
    }

    /// Frame `t` as a `[3, H, W]` slice copy.
    pub fn frame(&self, t: usize) -> Vec<T> {
        let [c, l, h, w] = [self.0.shape()[0], self.0.shape()[1], self.0.shape()[2], self.0.shape()[3]];
        let plane = h * w;
        let mut out = Vec::with_capacity(c * plane);
        for ch in 0..c {
            out.extend_from_slice(&self.0.data()[(ch * l + t) * plane..][..plane]);
        }
        out
    }
}

impl<T> Deref for VideoTensor<T> {
    type Target = Tensor<T>;

    fn deref(&self) -> &Tensor<T> {
        &self.0
    }
}

/// `p ∈ [0, 255] -> 2p/255 - 1`.
#[inline]
pub fn normalize<T: Real>(p: u8) -> T {
    T::of(2.0 * p as f64 / 255.0 - 1.0)
}

#[inline]
pub fn denormalize<T: Real>(v: T) -> u8 {
    let p = (v.as_f64() + 1.0) * 127.5;
    if p.is_nan() {
        return 0;
    }
    libm_round(p).clamp(0.0, 255.0) as u8
}

#[inline]
fn libm_round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplateKind {
    Square,
    Irregular,
}

/// Layout of a payload on the `side × side` message map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct MessageTemplate {
    bit_count: usize,
    side: usize,
    kind: TemplateKind,
}

/// Side of the template used for payloads that are not perfect squares.
pub const IRREGULAR_SIDE: usize = 16;

impl MessageTemplate {
    pub fn square(side: usize) -> Result<Self> {
        if side == 0 {
            return Err(Error::invalid("template side must be positive"));
        }
        Ok(Self {
            bit_count: side * side,
            side,
            kind: TemplateKind::Square,
        })
    }

    pub fn irregular(bit_count: usize, side: usize) -> Result<Self> {
        if bit_count == 0 || side == 0 {
            return Err(Error::invalid("bit count and side must be positive"));
        }
        if side * side < bit_count {
            return Err(Error::invalid(alloc::format!(
                "a {side}x{side} template cannot carry {bit_count} bits"
            )));
        }
        if side * side == bit_count {
            return Self::square(side);
        }
        Ok(Self {
            bit_count,
            side,
            kind: TemplateKind::Irregular,
        })
    }

    /// Square template when `bits` is a perfect square; otherwise an
    /// irregular one on a 16×16 map (or the smallest square map above 256).
    pub fn for_bits(bits: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::invalid("payload must carry at least one bit"));
        }
        let root = (1..=bits).find(|s| s * s >= bits).unwrap_or(bits);
        if root * root == bits {
            Self::square(root)
        } else if bits <= IRREGULAR_SIDE * IRREGULAR_SIDE {
            Self::irregular(bits, IRREGULAR_SIDE)
        } else {
            Self::irregular(bits, root)
        }
    }

    pub fn bit_count(&self) -> usize {
        self.bit_count
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn kind(&self) -> TemplateKind {
        self.kind
    }

    pub fn is_square(&self) -> bool {
        self.kind == TemplateKind::Square
    }

    /// Shape of a packed encoding: `[1, S, S]` for square templates,
    /// `[bit_count]` for irregular ones.
    pub fn encoding_shape(&self) -> Vec<usize> {
        match self.kind {
            TemplateKind::Square => alloc::vec![1, self.side, self.side],
            TemplateKind::Irregular => alloc::vec![self.bit_count],
        }
    }
}

/// Payload bits together with their ±1 encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Message {
    bits: Vec<bool>,
    template: MessageTemplate,
    encoding: Tensor<f32>,
}

impl Message {
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn template(&self) -> MessageTemplate {
        self.template
    }

    pub fn encoding(&self) -> &Tensor<f32> {
        &self.encoding
    }

    pub fn random<R: Rng>(template: MessageTemplate, rng: &mut R) -> Self {
        let bits: Vec<bool> = (0..template.bit_count()).map(|_| rng.random()).collect();
        pack_message(&bits, template).expect("length matches template")
    }
}

/// +1 for a set bit, −1 otherwise, laid out row-major.
pub fn pack_message(bits: &[bool], template: MessageTemplate) -> Result<Message> {
    if bits.len() != template.bit_count() {
        return Err(Error::invalid(alloc::format!(
            "payload has {} bits, template expects {}",
            bits.len(),
            template.bit_count()
        )));
    }
    let data = bits.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
    let encoding = Tensor::from_vec(&template.encoding_shape(), data)?;
    Ok(Message {
        bits: bits.to_vec(),
        template,
        encoding,
    })
}

/// Bit `k` is set iff entry `k` is strictly positive.
pub fn unpack_message<T: Real>(encoding: &Tensor<T>, template: MessageTemplate) -> Result<Vec<bool>> {
    encoding.expect_shape("unpack_message", &template.encoding_shape())?;
    Ok(encoding.data().iter().map(|&v| v > T::zero()).collect())
}

/// Parses a string of `0`/`1` characters.
pub fn parse_bits(s: &str) -> Result<Vec<bool>> {
    s.trim()
        .chars()
        .map(|c| match c {
            '0' => Ok(false),
            '1' => Ok(true),
            other => Err(Error::invalid(alloc::format!("invalid bit character {other:?}"))),
        })
        .collect()
}

pub fn format_bits(bits: &[bool]) -> alloc::string::String {
    bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// Where a crop window is placed inside a longer or larger source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum CropPolicy {
    /// Uniformly random spatial offset and temporal window.
    #[default]
    Random,
    /// Centered window (first frames, centered spatially).
    Center,
}

/// Cuts a `shape` window from `source`; the window is a pure function of
/// `(policy, seed)`.
pub fn crop_clip<T: Real>(
    source: &VideoTensor<T>,
    shape: ClipShape,
    policy: CropPolicy,
    seed: u64,
) -> Result<VideoTensor<T>> {
    let src = source.shape();
    if src.frames < shape.frames {
        return Err(Error::invalid(alloc::format!(
            "source has {} frames, need {}",
            src.frames,
            shape.frames
        )));
    }
    if src.height < shape.height || src.width < shape.width {
        return Err(Error::invalid(alloc::format!(
            "source is {}x{}, smaller than the {}x{} crop",
            src.height,
            src.width,
            shape.height,
            shape.width
        )));
    }
    let (t0, y0, x0) = match policy {
        CropPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (
                rng.random_range(0..=src.frames - shape.frames),
                rng.random_range(0..=src.height - shape.height),
                rng.random_range(0..=src.width - shape.width),
            )
        }
        CropPolicy::Center => (
            0,
            (src.height - shape.height) / 2,
            (src.width - shape.width) / 2,
        ),
    };
    let c = source.channels();
    let data = source.data();
    let mut out = Vec::with_capacity(c * shape.frames * shape.height * shape.width);
    for ch in 0..c {
        for t in 0..shape.frames {
            for y in 0..shape.height {
                let row = ((ch * src.frames + t0 + t) * src.height + y0 + y) * src.width + x0;
                out.extend_from_slice(&data[row..row + shape.width]);
            }
        }
    }
    VideoTensor::new(Tensor::from_vec(
        &[c, shape.frames, shape.height, shape.width],
        out,
    )?)
}

/// Decoded source clips plus the crop applied when sampling from them.
#[derive(Clone, Debug)]
pub struct ClipDataset<T = f32> {
    sources: Vec<VideoTensor<T>>,
    shape: ClipShape,
    policy: CropPolicy,
}

impl<T: Real> ClipDataset<T> {
    pub fn new(sources: Vec<VideoTensor<T>>, shape: ClipShape, policy: CropPolicy) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for s in &sources {
            let d = s.shape();
            if s.channels() != ClipShape::CHANNELS
                || d.frames < shape.frames
                || d.height < shape.height
                || d.width < shape.width
            {
                return Err(Error::invalid(alloc::format!(
                    "source {:?} cannot yield {shape:?} clips",
                    s.tensor().shape()
                )));
            }
        }
        Ok(Self {
            sources,
            shape,
            policy,
        })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn shape(&self) -> ClipShape {
        self.shape
    }

    pub fn sources(&self) -> &[VideoTensor<T>] {
        &self.sources
    }

    /// Clip cut from source `index` with a crop seeded by `seed`.
    pub fn clip(&self, index: usize, seed: u64) -> Result<VideoTensor<T>> {
        crop_clip(&self.sources[index], self.shape, self.policy, seed)
    }

    /// Random source, random crop.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Result<VideoTensor<T>> {
        let i = rng.random_range(0..self.sources.len());
        let seed = rng.random();
        self.clip(i, seed)
    }
}
