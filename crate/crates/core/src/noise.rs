//! Differentiable codec proxy: invertible blocks on Haar wavelet bands.
//!
//! Each block updates the low band additively from features of the three
//! high bands, then rescales and shifts the high bands from the new low
//! band:
//!
//! ```text
//! l' = l + η(concat(F(h0), F(h1), F(h2)))
//! h'(j) = h(j) ⊙ exp(2·σ(H(l')) − 1) + G(l')
//! ```
//!
//! `distort` runs DWT → blocks → IDWT; `restore` runs the blocks in
//! reverse. The layer is pretrained against real encoder output and then
//! frozen for watermark training.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::media::VideoTensor;
use crate::nn::{Binding, Conv, Init, ParamStore, Subnet};
use crate::optim::{Adam, AdamConfig};
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NoiseConfig {
    pub blocks: usize,
    pub hidden: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            blocks: 8,
            hidden: 16,
        }
    }
}

/// One wavelet-domain coupling block.
#[derive(Clone, Debug)]
pub struct DwtInb {
    /// `F`: per-high-band feature extractor, shared across the three bands.
    pub features: Subnet,
    /// `η`: 3×3 convolution from the 9 concatenated channels to the low band.
    pub fuse: Conv,
    /// `H`: low band → pre-sigmoid log-scale for all high bands.
    pub scale: Subnet,
    /// `G`: low band → shift for all high bands.
    pub shift: Subnet,
}

#[derive(Clone, Debug)]
pub struct NoiseLayer<T = f32> {
    config: NoiseConfig,
    store: ParamStore<T>,
    blocks: Vec<DwtInb>,
    frozen: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 2,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

const CHANNELS: usize = 3;

impl<T: Real> NoiseLayer<T> {
    /// Zero-initialised output layers when `identity` is set (the untrained
    /// layer is then the identity), otherwise fully random.
    pub fn new(config: NoiseConfig, identity: bool, seed: u64) -> Result<Self> {
        if config.blocks == 0 || config.hidden == 0 {
            return Err(Error::config("noise layer needs at least one block and a hidden width"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let last = if identity { Init::Zero } else { Init::Scaled(0.5) };
        let (c, h) = (CHANNELS, config.hidden);
        let blocks = (0..config.blocks)
            .map(|i| {
                let name = |part: &str| alloc::format!("dwtinb{i}.{part}");
                DwtInb {
                    features: Subnet::new(&mut store, &name("features"), c, h, c, Init::FanIn, &mut rng),
                    fuse: Conv::new(&mut store, &name("fuse"), 3 * c, c, [1, 3, 3], last, &mut rng),
                    scale: Subnet::new(&mut store, &name("scale"), c, h, 3 * c, last, &mut rng),
                    shift: Subnet::new(&mut store, &name("shift"), c, h, 3 * c, last, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            store,
            blocks,
            frozen: false,
        })
    }

    pub fn config(&self) -> &NoiseConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    /// Mutable parameters; refused once the layer is frozen.
    pub fn params_mut(&mut self) -> Result<&mut ParamStore<T>> {
        if self.frozen {
            return Err(Error::config("noise layer is frozen"));
        }
        Ok(&mut self.store)
    }

    pub fn blocks(&self) -> &[DwtInb] {
        &self.blocks
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn checksum(&self) -> [u8; 32] {
        self.store.checksum()
    }

    fn check(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[0] != CHANNELS {
            return Err(Error::invalid(alloc::format!(
                "the codec proxy expects [3, L, H, W], got {shape:?}"
            )));
        }
        if !shape[2].is_multiple_of(2) || !shape[3].is_multiple_of(2) {
            return Err(Error::invalid(alloc::format!(
                "the codec proxy needs even spatial dims, got {}x{}",
                shape[2],
                shape[3]
            )));
        }
        Ok(())
    }

    fn finite(tape: &Tape<T>, vars: &[Var], stage: &'static str, block: usize) -> Result<()> {
        if vars.iter().all(|&v| tape.value(v).is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                stage,
                block: Some(block),
            })
        }
    }

    fn low_update(blk: &DwtInb, tape: &mut Tape<T>, b: &Binding, highs: Var) -> Var {
        let feats: Vec<Var> = (0..3)
            .map(|j| {
                let band = tape.slice(highs, j * CHANNELS, CHANNELS);
                blk.features.apply(tape, b, band)
            })
            .collect();
        let cat = tape.concat(&feats);
        blk.fuse.apply(tape, b, cat)
    }

    /// `2·σ(H(l)) − 1`, in `(−1, 1)`.
    fn log_scale(blk: &DwtInb, tape: &mut Tape<T>, b: &Binding, low: Var) -> Var {
        let raw = blk.scale.apply(tape, b, low);
        let s = tape.sigmoid(raw);
        let s = tape.scale(s, 2.0);
        tape.offset(s, -1.0)
    }

    /// Forward block on `(low [3,…], highs [9,…])`.
    pub fn block_forward_on(
        &self,
        i: usize,
        tape: &mut Tape<T>,
        b: &Binding,
        low: Var,
        highs: Var,
    ) -> Result<(Var, Var)> {
        let blk = self
            .blocks
            .get(i)
            .ok_or_else(|| Error::invalid(alloc::format!("no block {i}")))?;
        let d = Self::low_update(blk, tape, b, highs);
        let low2 = tape.add(low, d);
        let ls = Self::log_scale(blk, tape, b, low2);
        let e = tape.exp(ls);
        let scaled = tape.mul(highs, e);
        let shift = blk.shift.apply(tape, b, low2);
        let highs2 = tape.add(scaled, shift);
        Self::finite(tape, &[low2, highs2], "codec proxy forward", i)?;
        Ok((low2, highs2))
    }

    pub fn block_backward_on(
        &self,
        i: usize,
        tape: &mut Tape<T>,
        b: &Binding,
        low: Var,
        highs: Var,
    ) -> Result<(Var, Var)> {
        let blk = self
            .blocks
            .get(i)
            .ok_or_else(|| Error::invalid(alloc::format!("no block {i}")))?;
        let ls = Self::log_scale(blk, tape, b, low);
        let neg = tape.scale(ls, -1.0);
        let e = tape.exp(neg);
        let shift = blk.shift.apply(tape, b, low);
        let centered = tape.sub(highs, shift);
        let highs0 = tape.mul(centered, e);
        let d = Self::low_update(blk, tape, b, highs0);
        let low0 = tape.sub(low, d);
        Self::finite(tape, &[low0, highs0], "codec proxy backward", i)?;
        Ok((low0, highs0))
    }

    fn run_on(&self, tape: &mut Tape<T>, b: &Binding, video: Var, forward: bool) -> Result<Var> {
        self.check(tape.shape(video))?;
        let bands = tape.haar(video);
        let mut low = tape.slice(bands, 0, CHANNELS);
        let mut highs = tape.slice(bands, CHANNELS, 3 * CHANNELS);
        if forward {
            for i in 0..self.blocks.len() {
                (low, highs) = self.block_forward_on(i, tape, b, low, highs)?;
            }
        } else {
            for i in (0..self.blocks.len()).rev() {
                (low, highs) = self.block_backward_on(i, tape, b, low, highs)?;
            }
        }
        let bands = tape.concat(&[low, highs]);
        Ok(tape.haar_inverse(bands))
    }

    /// Simulated compression on the tape.
    pub fn distort_on(&self, tape: &mut Tape<T>, b: &Binding, video: Var) -> Result<Var> {
        self.run_on(tape, b, video, true)
    }

    /// Inverse of [`NoiseLayer::distort_on`].
    pub fn restore_on(&self, tape: &mut Tape<T>, b: &Binding, video: Var) -> Result<Var> {
        self.run_on(tape, b, video, false)
    }

    fn run(&self, video: &VideoTensor<T>, forward: bool) -> Result<VideoTensor<T>> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let v = tape.constant(video.tensor().clone());
        let out = self.run_on(&mut tape, &b, v, forward)?;
        VideoTensor::new(tape.value(out).clone())
    }

    pub fn distort(&self, video: &VideoTensor<T>) -> Result<VideoTensor<T>> {
        self.run(video, true)
    }

    pub fn restore(&self, compressed: &VideoTensor<T>) -> Result<VideoTensor<T>> {
        self.run(compressed, false)
    }

    /// `MSE(distort(v), y) + MSE(restore(y), v)` on the tape.
    pub fn loss_on(&self, tape: &mut Tape<T>, b: &Binding, origin: Var, compressed: Var) -> Result<Var> {
        let fwd = self.distort_on(tape, b, origin)?;
        let back = self.restore_on(tape, b, compressed)?;
        let a = tape.mse(fwd, compressed);
        let c = tape.mse(back, origin);
        Ok(tape.add(a, c))
    }

    pub fn loss(&self, origin: &VideoTensor<T>, compressed: &VideoTensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let o = tape.constant(origin.tensor().clone());
        let c = tape.constant(compressed.tensor().clone());
        let l = self.loss_on(&mut tape, &b, o, c)?;
        Ok(tape.value(l).item().as_f64())
    }

    /// Fits the layer to `(origin, compressed)` pairs and freezes it.
    /// `log` receives `(step, loss)` for every step; the returned vector
    /// holds the same losses.
    pub fn pretrain(
        &mut self,
        pairs: &[(VideoTensor<T>, VideoTensor<T>)],
        config: &PretrainConfig,
        mut log: impl FnMut(usize, f64),
    ) -> Result<Vec<f64>> {
        if self.frozen {
            return Err(Error::config("noise layer is already frozen"));
        }
        if pairs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        for (o, c) in pairs {
            o.tensor().expect_shape("pretraining pair", c.tensor().shape())?;
            self.check(o.tensor().shape())?;
        }
        let mut opt = Adam::new(config.adam, &self.store);
        let mut losses = Vec::with_capacity(config.steps);
        let batch = config.batch_size.max(1);
        for step in 0..config.steps {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let mut tape = Tape::new();
            let b = tape.bind(&self.store, true);
            let mut total: Option<Var> = None;
            for _ in 0..batch {
                let (o, c) = &pairs[rng.random_range(0..pairs.len())];
                let o = tape.constant(o.tensor().clone());
                let c = tape.constant(c.tensor().clone());
                let l = self.loss_on(&mut tape, &b, o, c)?;
                total = Some(match total {
                    Some(t) => tape.add(t, l),
                    None => l,
                });
            }
            let total = tape.scale(total.expect("batch is non-empty"), 1.0 / batch as f64);
            let value = tape.value(total).item().as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    stage: "noise pretraining",
                    block: None,
                });
            }
            log(step, value);
            losses.push(value);
            let grads = tape.backward(total).for_binding(&b, &self.store);
            opt.step(&mut self.store, &grads, 1.0);
        }
        self.freeze();
        Ok(losses)
    }

    pub fn cast<U: Real>(&self) -> NoiseLayer<U> {
        NoiseLayer {
            config: self.config,
            store: self.store.cast(),
            blocks: self.blocks.clone(),
            frozen: self.frozen,
        }
    }
}
