//! The invertible watermark codec.
//!
//! A stack of coupling blocks acts on a video branch `x_c` (`[3, L, H, W]`)
//! and a message branch `x_m` (`[1, 1, S, S]`). Block `i` maps
//!
//! ```text
//! x_c' = x_c + U_i(x_m)
//! x_m' = x_m ⊙ exp(D1_i(x_c')) + D2_i(x_c')
//! ```
//!
//! and is undone exactly by
//!
//! ```text
//! x_m = (x_m' - D2_i(x_c')) ⊙ exp(-D1_i(x_c'))
//! x_c = x_c' - U_i(x_m)
//! ```
//!
//! Embedding runs the blocks forward and yields the watermarked clip and
//! the residual `r`. Extraction is blind: it runs the blocks backward from
//! the (possibly distorted) clip with an all-zero message branch in place
//! of `r`.
//!
//! With `f = H / S`, `U_i` applies two 3×3 convolutions on the `S×S`
//! message grid producing `3·f²` channels, rearranges them into a `3×H×W`
//! residual (pixel shuffle) and repeats it over all frames. `D1_i`/`D2_i`
//! average the clip over time, fold each `f×f` cell into channels and apply
//! two 3×3 convolutions on the `S×S` grid. `D1_i` is squashed to
//! `±scale_bound` with `tanh` so the coupling scale stays finite in both
//! directions.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::media::{pack_message, unpack_message, ClipShape, Message, MessageTemplate, VideoTensor};
use crate::nn::{Binding, Init, Linear, ParamStore, Subnet};
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InnConfig {
    pub blocks: usize,
    pub hidden: usize,
    pub clip: ClipShape,
    pub template: MessageTemplate,
    /// `D1` outputs lie in `[-scale_bound, scale_bound]`.
    pub scale_bound: f64,
}

impl InnConfig {
    pub const DEFAULT_BLOCKS: usize = 16;
    pub const DEFAULT_HIDDEN: usize = 32;

    pub fn new(clip: ClipShape, template: MessageTemplate) -> Self {
        Self {
            blocks: Self::DEFAULT_BLOCKS,
            hidden: Self::DEFAULT_HIDDEN,
            clip,
            template,
            scale_bound: 2.0,
        }
    }

    pub fn with_blocks(mut self, blocks: usize) -> Self {
        self.blocks = blocks;
        self
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.template.side();
        let c = self.clip;
        if self.blocks == 0 || self.hidden == 0 {
            return Err(Error::config("block count and hidden width must be positive"));
        }
        if c.frames == 0 || !c.height.is_multiple_of(s) || !c.width.is_multiple_of(s) {
            return Err(Error::config(alloc::format!(
                "template side {s} must divide the {}x{} frame",
                c.height,
                c.width
            )));
        }
        if c.height != c.width {
            return Err(Error::config("frames must be square"));
        }
        if !self.scale_bound.is_finite() || self.scale_bound <= 0.0 {
            return Err(Error::config("scale bound must be positive"));
        }
        Ok(())
    }

    /// Parameter count implied by the configuration alone: per block one
    /// `1→h→3f²` and two `3f²→h→1` subnets of 3×3 convolutions, plus the
    /// template maps for irregular payloads.
    pub fn analytic_param_count(&self) -> usize {
        let (f, _) = self.factors();
        let (h, folded) = (self.hidden, 3 * f * f);
        let conv = |cin: usize, cout: usize| cout * cin * 9 + cout;
        let subnet = |cin: usize, cout: usize| conv(cin, h) + conv(h, cout);
        let per_block = subnet(1, folded) + 2 * subnet(folded, 1);
        let maps = if self.template.is_square() {
            0
        } else {
            let (k, s2) = (self.template.bit_count(), self.template.side().pow(2));
            2 * (k * s2) + k + s2
        };
        self.blocks * per_block + maps
    }

    fn factors(&self) -> (usize, usize) {
        let s = self.template.side();
        (self.clip.height / s, self.clip.width / s)
    }
}

/// How a fresh codec is initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitMode {
    /// Output layers of every subnet are zero: the codec starts as the
    /// identity on the cover.
    Identity,
    /// Every layer random, output layers scaled by `gain`.
    Random { gain: f64 },
}

/// One coupling block: `U` (message → clip residual), `D1` (log-scale) and
/// `D2` (shift).
#[derive(Clone, Debug)]
pub struct InnBlock {
    pub up: Subnet,
    pub scale: Subnet,
    pub shift: Subnet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbedResult<T = f32> {
    pub watermarked: VideoTensor<T>,
    /// Message-branch output `[1, 1, S, S]`, discarded by blind extraction.
    pub residual: Tensor<T>,
}

/// Parameters shared by embedding and extraction.
#[derive(Clone, Debug)]
pub struct InnCodec<T = f32> {
    config: InnConfig,
    store: ParamStore<T>,
    blocks: Vec<InnBlock>,
    to_template: Option<Linear>,
    from_template: Option<Linear>,
}

impl<T: Real> InnCodec<T> {
    pub fn new(config: InnConfig, init: InitMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let last = match init {
            InitMode::Identity => Init::Zero,
            InitMode::Random { gain } => Init::Scaled(gain),
        };
        let h = config.hidden;
        let (f, _) = config.factors();
        let folded = 3 * f * f;
        let blocks = (0..config.blocks)
            .map(|i| InnBlock {
                up: Subnet::new(&mut store, &alloc::format!("inb{i}.up"), 1, h, folded, last, &mut rng),
                scale: Subnet::new(&mut store, &alloc::format!("inb{i}.scale"), folded, h, 1, last, &mut rng),
                shift: Subnet::new(&mut store, &alloc::format!("inb{i}.shift"), folded, h, 1, last, &mut rng),
            })
            .collect();
        let (to_template, from_template) = if config.template.is_square() {
            (None, None)
        } else {
            let (k, s2) = (config.template.bit_count(), config.template.side().pow(2));
            (
                Some(Linear::new(&mut store, "template.in", k, s2, Init::FanIn, &mut rng)),
                Some(Linear::new(&mut store, "template.out", s2, k, Init::FanIn, &mut rng)),
            )
        };
        Ok(Self {
            config,
            store,
            blocks,
            to_template,
            from_template,
        })
    }

    pub fn config(&self) -> &InnConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn blocks(&self) -> &[InnBlock] {
        &self.blocks
    }

    pub fn template(&self) -> MessageTemplate {
        self.config.template
    }

    /// Scalar parameter count; embedding and extraction share all of them.
    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Floating-point operations (2 per multiply-accumulate) of one embed
    /// plus one extract, counting convolutions and linear maps.
    pub fn flops(&self) -> u64 {
        let s = self.config.template.side();
        let per_block: u64 = self
            .blocks
            .iter()
            .map(|b| {
                b.up.macs(1, s, s) + b.scale.macs(1, s, s) + b.shift.macs(1, s, s)
            })
            .sum();
        let maps: u64 = self
            .to_template
            .iter()
            .chain(self.from_template.iter())
            .map(|l| (l.inputs * l.outputs) as u64)
            .sum();
        2 * (2 * per_block + maps)
    }

    fn message_shape(&self) -> [usize; 4] {
        let s = self.config.template.side();
        [1, 1, s, s]
    }

    fn check_clip(&self, shape: &[usize]) -> Result<()> {
        let want = self.config.clip.dims();
        if shape != want {
            return Err(Error::shape("inn codec clip", &want, shape));
        }
        Ok(())
    }

    fn check_message(&self, shape: &[usize]) -> Result<()> {
        let want = self.message_shape();
        if shape != want {
            return Err(Error::shape("inn codec message branch", &want, shape));
        }
        Ok(())
    }

    fn up(&self, block: &InnBlock, tape: &mut Tape<T>, b: &Binding, xm: Var) -> Var {
        let (f, _) = self.config.factors();
        let u = block.up.apply(tape, b, xm);
        let u = tape.depth_to_space(u, f);
        tape.broadcast_frames(u, self.config.clip.frames)
    }

    fn scale_shift(&self, block: &InnBlock, tape: &mut Tape<T>, b: &Binding, xc: Var) -> (Var, Var) {
        let (f, _) = self.config.factors();
        let mean = tape.mean_frames(xc);
        let folded = tape.space_to_depth(mean, f);
        let raw = block.scale.apply(tape, b, folded);
        let t = tape.tanh(raw);
        let log_scale = tape.scale(t, self.config.scale_bound);
        let shift = block.shift.apply(tape, b, folded);
        (log_scale, shift)
    }

    fn finite(&self, tape: &Tape<T>, vars: &[Var], stage: &'static str, block: usize) -> Result<()> {
        if vars.iter().all(|&v| tape.value(v).is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                stage,
                block: Some(block),
            })
        }
    }

    pub fn forward_block_on(
        &self,
        i: usize,
        tape: &mut Tape<T>,
        b: &Binding,
        xc: Var,
        xm: Var,
    ) -> Result<(Var, Var)> {
        let block = self
            .blocks
            .get(i)
            .ok_or_else(|| Error::invalid(alloc::format!("no block {i}")))?;
        let u = self.up(block, tape, b, xm);
        let xc2 = tape.add(xc, u);
        let (log_scale, shift) = self.scale_shift(block, tape, b, xc2);
        let e = tape.exp(log_scale);
        let scaled = tape.mul(xm, e);
        let xm2 = tape.add(scaled, shift);
        self.finite(tape, &[xc2, xm2], "inn forward", i)?;
        Ok((xc2, xm2))
    }

    pub fn backward_block_on(
        &self,
        i: usize,
        tape: &mut Tape<T>,
        b: &Binding,
        x: Var,
        z: Var,
    ) -> Result<(Var, Var)> {
        let block = self
            .blocks
            .get(i)
            .ok_or_else(|| Error::invalid(alloc::format!("no block {i}")))?;
        let (log_scale, shift) = self.scale_shift(block, tape, b, x);
        let neg = tape.scale(log_scale, -1.0);
        let e = tape.exp(neg);
        let centered = tape.sub(z, shift);
        let z2 = tape.mul(centered, e);
        let u = self.up(block, tape, b, z2);
        let x2 = tape.sub(x, u);
        self.finite(tape, &[x2, z2], "inn backward", i)?;
        Ok((x2, z2))
    }

    /// Maps a packed message encoding to the `[1, 1, S, S]` message branch.
    pub fn message_in_on(&self, tape: &mut Tape<T>, b: &Binding, encoding: Var) -> Result<Var> {
        let want = self.config.template.encoding_shape();
        if tape.shape(encoding) != want.as_slice() {
            return Err(Error::shape("message encoding", &want, tape.shape(encoding)));
        }
        let flat = match &self.to_template {
            Some(map) => map.apply(tape, b, encoding),
            None => encoding,
        };
        Ok(tape.reshape(flat, &self.message_shape()))
    }

    /// Maps the recovered message branch back to the encoding shape.
    pub fn message_out_on(&self, tape: &mut Tape<T>, b: &Binding, z: Var) -> Var {
        let want = self.config.template.encoding_shape();
        match &self.from_template {
            Some(map) => map.apply(tape, b, z),
            None => tape.reshape(z, &want),
        }
    }

    /// Forward pass over all blocks; returns `(watermarked, residual)`.
    pub fn embed_on(&self, tape: &mut Tape<T>, b: &Binding, cover: Var, encoding: Var) -> Result<(Var, Var)> {
        self.check_clip(tape.shape(cover))?;
        let mut xm = self.message_in_on(tape, b, encoding)?;
        let mut xc = cover;
        for i in 0..self.blocks.len() {
            (xc, xm) = self.forward_block_on(i, tape, b, xc, xm)?;
        }
        Ok((xc, xm))
    }

    /// Blind extraction: backward pass from an all-zero message branch.
    /// Returns the real-valued encoding estimate.
    pub fn extract_on(&self, tape: &mut Tape<T>, b: &Binding, video: Var) -> Result<Var> {
        self.check_clip(tape.shape(video))?;
        let z = tape.constant(Tensor::zeros(&self.message_shape()));
        let (_, z) = self.invert_on(tape, b, video, z)?;
        Ok(self.message_out_on(tape, b, z))
    }

    /// Backward pass over all blocks from `(video, message branch)`.
    pub fn invert_on(&self, tape: &mut Tape<T>, b: &Binding, video: Var, residual: Var) -> Result<(Var, Var)> {
        self.check_clip(tape.shape(video))?;
        self.check_message(tape.shape(residual))?;
        let (mut x, mut z) = (video, residual);
        for i in (0..self.blocks.len()).rev() {
            (x, z) = self.backward_block_on(i, tape, b, x, z)?;
        }
        Ok((x, z))
    }

    pub fn embed(&self, cover: &VideoTensor<T>, message: &Message) -> Result<EmbedResult<T>> {
        if message.template() != self.config.template {
            return Err(Error::config(alloc::format!(
                "message template {:?} does not match the codec's {:?}",
                message.template(),
                self.config.template
            )));
        }
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let c = tape.constant(cover.tensor().clone());
        let m = tape.constant(message.encoding().cast());
        let (s, r) = self.embed_on(&mut tape, &b, c, m)?;
        Ok(EmbedResult {
            watermarked: VideoTensor::new(tape.value(s).clone())?,
            residual: tape.value(r).clone(),
        })
    }

    /// Real-valued encoding recovered from `video` (before thresholding).
    pub fn extract_encoding(&self, video: &VideoTensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let v = tape.constant(video.tensor().clone());
        let e = self.extract_on(&mut tape, &b, v)?;
        Ok(tape.value(e).clone())
    }

    pub fn extract(&self, video: &VideoTensor<T>) -> Result<Message> {
        let e = self.extract_encoding(video)?;
        let bits = unpack_message(&e, self.config.template)?;
        pack_message(&bits, self.config.template)
    }

    /// Message branch entering block 0 for `message` (`[1, 1, S, S]`).
    pub fn message_branch(&self, message: &Message) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let m = tape.constant(message.encoding().cast());
        let xm = self.message_in_on(&mut tape, &b, m)?;
        Ok(tape.value(xm).clone())
    }

    /// Non-blind inverse: runs all blocks backward from `(watermarked,
    /// residual)` and returns `(cover, message branch)`.
    pub fn invert(&self, watermarked: &VideoTensor<T>, residual: &Tensor<T>) -> Result<(VideoTensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let s = tape.constant(watermarked.tensor().clone());
        let r = tape.constant(residual.clone());
        let (c, m) = self.invert_on(&mut tape, &b, s, r)?;
        Ok((VideoTensor::new(tape.value(c).clone())?, tape.value(m).clone()))
    }

    pub fn block_forward(&self, i: usize, xc: &Tensor<T>, xm: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_clip(xc.shape())?;
        self.check_message(xm.shape())?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let (c, m) = (tape.constant(xc.clone()), tape.constant(xm.clone()));
        let (c, m) = self.forward_block_on(i, &mut tape, &b, c, m)?;
        Ok((tape.value(c).clone(), tape.value(m).clone()))
    }

    pub fn block_backward(&self, i: usize, x: &Tensor<T>, z: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_clip(x.shape())?;
        self.check_message(z.shape())?;
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let (c, m) = (tape.constant(x.clone()), tape.constant(z.clone()));
        let (c, m) = self.backward_block_on(i, &mut tape, &b, c, m)?;
        Ok((tape.value(c).clone(), tape.value(m).clone()))
    }

    pub fn cast<U: Real>(&self) -> InnCodec<U> {
        InnCodec {
            config: self.config,
            store: self.store.cast(),
            blocks: self.blocks.clone(),
            to_template: self.to_template.clone(),
            from_template: self.from_template.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small() -> InnConfig {
        InnConfig::new(ClipShape::new(2, 8, 8), MessageTemplate::square(4).unwrap())
            .with_blocks(3)
            .with_hidden(4)
    }

    fn random_inputs(c: &InnConfig, seed: u64) -> (Tensor<f32>, Tensor<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = c.template.side();
        (
            Tensor::from_fn(&c.clip.dims(), |_| rng.random_range(-1.0..1.0)),
            Tensor::from_fn(&[1, 1, s, s], |_| rng.random_range(-1.0..1.0)),
        )
    }

    #[test]
    fn parameter_count_matches_the_configuration() {
        let desk = InnConfig::new(ClipShape::new(8, 32, 32), MessageTemplate::square(8).unwrap()).with_hidden(16);
        let irregular = InnConfig::new(ClipShape::new(2, 32, 32), MessageTemplate::for_bits(96).unwrap()).with_blocks(2);
        for cfg in [small(), desk, irregular] {
            let codec = InnCodec::<f32>::new(cfg, InitMode::Identity, 0).unwrap();
            assert_eq!(codec.param_count(), cfg.analytic_param_count());
        }
    }

    /// Sets every parameter of a subnet's output layer to zero and its bias
    /// to `bias`.
    fn force_output(codec: &mut InnCodec<f32>, net: &Subnet, bias: f32) {
        let (w, b) = (net.second.weight, net.second.bias);
        codec.params_mut().get_mut(w).data_mut().fill(0.0);
        codec.params_mut().get_mut(b).data_mut().fill(bias);
    }

    #[test]
    fn zero_subnets_make_blocks_the_identity() {
        let codec = InnCodec::<f32>::new(small(), InitMode::Identity, 0).unwrap();
        let (xc, xm) = random_inputs(codec.config(), 1);
        let (c, m) = codec.block_forward(0, &xc, &xm).unwrap();
        assert_eq!((c, m), (xc.clone(), xm.clone()));
        let (c, m) = codec.block_backward(2, &xc, &xm).unwrap();
        assert_eq!((c, m), (xc, xm));
    }

    #[test]
    fn log_two_scale_doubles_the_message_branch() {
        let mut codec = InnCodec::<f32>::new(small(), InitMode::Random { gain: 1.0 }, 0).unwrap();
        let blk = codec.blocks()[1].clone();
        force_output(&mut codec, &blk.up, 0.0);
        force_output(&mut codec, &blk.shift, 0.0);
        // 2·tanh(raw) = ln 2
        force_output(&mut codec, &blk.scale, libm_atanh(core::f64::consts::LN_2 / 2.0) as f32);
        let (xc, xm) = random_inputs(codec.config(), 2);
        let (c, m) = codec.block_forward(1, &xc, &xm).unwrap();
        assert_eq!(c, xc);
        let doubled = xm.map(|v| 2.0 * v);
        assert!(m.max_abs_diff(&doubled) < 1e-6);
        let (c2, back) = codec.block_backward(1, &c, &doubled).unwrap();
        assert_eq!(c2, xc);
        assert!(back.max_abs_diff(&xm) < 1e-6);
    }

    fn libm_atanh(x: f64) -> f64 {
        0.5 * ((1.0 + x) / (1.0 - x)).ln()
    }

    #[test]
    fn block_backward_inverts_block_forward() {
        let codec = InnCodec::<f32>::new(small(), InitMode::Random { gain: 1.0 }, 9).unwrap();
        let (xc, xm) = random_inputs(codec.config(), 3);
        for i in 0..3 {
            let (c, m) = codec.block_forward(i, &xc, &xm).unwrap();
            let (c2, m2) = codec.block_backward(i, &c, &m).unwrap();
            assert!(c2.max_abs_diff(&xc) < 1e-4);
            assert!(m2.max_abs_diff(&xm) < 1e-4);
        }
    }

    #[test]
    fn untrained_codec_leaves_the_cover_untouched() {
        let codec = InnCodec::<f32>::new(small(), InitMode::Identity, 4).unwrap();
        let (xc, _) = random_inputs(codec.config(), 4);
        let cover = VideoTensor::new(xc).unwrap();
        let msg = Message::random(codec.template(), &mut ChaCha8Rng::seed_from_u64(1));
        let out = codec.embed(&cover, &msg).unwrap();
        assert_eq!(out.watermarked, cover);
    }

    #[test]
    fn shared_parameters_drive_both_directions() {
        let mut codec = InnCodec::<f32>::new(small(), InitMode::Random { gain: 0.5 }, 5).unwrap();
        let (xc, _) = random_inputs(codec.config(), 5);
        let cover = VideoTensor::new(xc).unwrap();
        let msg = Message::random(codec.template(), &mut ChaCha8Rng::seed_from_u64(2));
        let before = codec.embed(&cover, &msg).unwrap();
        let ext_before = codec.extract_encoding(&before.watermarked).unwrap();
        let w = codec.blocks()[0].shift.second.bias;
        codec.params_mut().get_mut(w).data_mut()[0] += 0.25;
        let after = codec.embed(&cover, &msg).unwrap();
        let ext_after = codec.extract_encoding(&before.watermarked).unwrap();
        assert!(after.watermarked.max_abs_diff(&before.watermarked) > 1e-3);
        assert!(ext_after.max_abs_diff(&ext_before) > 0.0);
    }

    #[test]
    fn irregular_templates_use_linear_maps() {
        let cfg = InnConfig::new(ClipShape::new(2, 16, 16), MessageTemplate::for_bits(96).unwrap())
            .with_blocks(2)
            .with_hidden(4);
        let codec = InnCodec::<f32>::new(cfg, InitMode::Random { gain: 0.5 }, 6).unwrap();
        let msg = Message::random(codec.template(), &mut ChaCha8Rng::seed_from_u64(3));
        let cover = VideoTensor::<f32>::zeros(cfg.clip);
        let out = codec.embed(&cover, &msg).unwrap();
        assert_eq!(out.residual.shape(), &[1, 1, 16, 16]);
        let (c, m) = codec.invert(&out.watermarked, &out.residual).unwrap();
        assert!(c.max_abs_diff(&cover) < 1e-4);
        assert!(m.max_abs_diff(&codec.message_branch(&msg).unwrap()) < 1e-4);
        assert_eq!(codec.extract(&out.watermarked).unwrap().bits().len(), 96);
        assert_eq!(codec.param_count(), small_count(&cfg));
    }

    fn small_count(c: &InnConfig) -> usize {
        let h = c.hidden;
        let sub = |cin: usize, cout: usize| cin * h * 9 + h + h * cout * 9 + cout;
        let k = c.template.bit_count();
        let s2 = c.template.side().pow(2);
        c.blocks * (sub(1, 3) + 2 * sub(3, 1)) + (k * s2 + s2) + (s2 * k + k)
    }

    #[test]
    fn bad_shapes_and_templates_are_rejected() {
        let codec = InnCodec::<f32>::new(small(), InitMode::Identity, 0).unwrap();
        let wrong = VideoTensor::<f32>::zeros(ClipShape::new(3, 8, 8));
        assert!(matches!(codec.extract(&wrong), Err(Error::ShapeMismatch { .. })));
        let other = pack_message(&[true; 9], MessageTemplate::square(3).unwrap()).unwrap();
        let cover = VideoTensor::<f32>::zeros(small().clip);
        assert!(matches!(codec.embed(&cover, &other), Err(Error::Config(_))));
        let bad = InnConfig::new(ClipShape::new(2, 10, 10), MessageTemplate::square(4).unwrap());
        assert!(InnCodec::<f32>::new(bad, InitMode::Identity, 0).is_err());
    }

    #[test]
    fn overflow_is_reported_with_the_block_index() {
        let mut codec = InnCodec::<f32>::new(small(), InitMode::Identity, 0).unwrap();
        let blk = codec.blocks()[1].clone();
        force_output(&mut codec, &blk.shift, f32::INFINITY);
        let (xc, xm) = random_inputs(codec.config(), 1);
        let err = codec.block_forward(1, &xc, &xm).unwrap_err();
        assert_eq!(err, Error::NonFinite { stage: "inn forward", block: Some(1) });
    }
}
