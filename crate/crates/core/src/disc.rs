//! Multiscale 3D video discriminator.
//!
//! Four branches see the clip at different space-time scales: as is,
//! spatially halved, temporally halved and spatially quartered. Each branch
//! is a short stack of residual 3D-convolution units with 2× spatial
//! average pooling between units, followed by global average pooling. The
//! pooled features are concatenated and a linear layer produces one logit.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::media::{ClipShape, VideoTensor};
use crate::nn::{Binding, Conv, Init, Linear, ParamStore, LEAKY_SLOPE};
use crate::tape::{Tape, Var};
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DiscConfig {
    pub width: usize,
    pub units: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self { width: 32, units: 3 }
    }
}

/// `(temporal, spatial)` downscaling of each branch input.
pub const SCALES: [(usize, usize); 4] = [(1, 1), (1, 2), (2, 1), (1, 4)];

const KERNEL: [usize; 3] = [3, 3, 3];

#[derive(Clone, Debug)]
pub struct ResUnit {
    pub first: Conv,
    pub second: Conv,
    /// 1×1×1 projection when the channel count changes.
    pub skip: Option<Conv>,
    /// Spatial 2× pooling applied after this unit.
    pub pool_after: bool,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub scale: (usize, usize),
    pub units: Vec<ResUnit>,
}

#[derive(Clone, Debug)]
pub struct Discriminator<T = f32> {
    config: DiscConfig,
    clip: ClipShape,
    store: ParamStore<T>,
    branches: Vec<Branch>,
    head: Linear,
}

/// Parameter count implied by a configuration, independent of any built
/// network.
pub fn analytic_param_count(config: &DiscConfig) -> usize {
    let w = config.width;
    let k: usize = KERNEL.iter().product();
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k + cout;
    let first = conv(3, w, k) + conv(w, w, k) + conv(3, w, 1);
    let rest = (config.units - 1) * 2 * conv(w, w, k);
    SCALES.len() * (first + rest) + 4 * w + 1
}

impl<T: Real> Discriminator<T> {
    pub fn new(config: DiscConfig, clip: ClipShape, seed: u64) -> Result<Self> {
        if config.width == 0 || config.units == 0 {
            return Err(Error::config("discriminator width and depth must be positive"));
        }
        for &(ft, fs) in &SCALES {
            if !clip.frames.is_multiple_of(ft) || !clip.height.is_multiple_of(fs) || !clip.width.is_multiple_of(fs) {
                return Err(Error::config(alloc::format!(
                    "clip {}x{}x{} cannot be downscaled by ({ft}, {fs})",
                    clip.frames,
                    clip.height,
                    clip.width
                )));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let w = config.width;
        let branches = SCALES
            .iter()
            .enumerate()
            .map(|(bi, &(ft, fs))| {
                let (mut h, mut wd) = (clip.height / fs, clip.width / fs);
                let units = (0..config.units)
                    .map(|ui| {
                        let cin = if ui == 0 { 3 } else { w };
                        let name = |part: &str| alloc::format!("disc.b{bi}.u{ui}.{part}");
                        let first = Conv::new(&mut store, &name("0"), cin, w, KERNEL, Init::FanIn, &mut rng);
                        let second = Conv::new(&mut store, &name("1"), w, w, KERNEL, Init::Scaled(0.5), &mut rng);
                        let skip = (cin != w).then(|| Conv::new(&mut store, &name("skip"), cin, w, [1, 1, 1], Init::FanIn, &mut rng));
                        let pool_after = ui + 1 < config.units && h % 2 == 0 && wd % 2 == 0 && h >= 4 && wd >= 4;
                        if pool_after {
                            h /= 2;
                            wd /= 2;
                        }
                        ResUnit {
                            first,
                            second,
                            skip,
                            pool_after,
                        }
                    })
                    .collect();
                Branch { scale: (ft, fs), units }
            })
            .collect();
        let head = Linear::new(&mut store, "disc.head", SCALES.len() * w, 1, Init::FanIn, &mut rng);
        Ok(Self {
            config,
            clip,
            store,
            branches,
            head,
        })
    }

    pub fn config(&self) -> &DiscConfig {
        &self.config
    }

    pub fn clip(&self) -> ClipShape {
        self.clip
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    fn unit_on(u: &ResUnit, tape: &mut Tape<T>, b: &Binding, x: Var) -> Var {
        let h = u.first.apply(tape, b, x);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        let h = u.second.apply(tape, b, h);
        let s = match &u.skip {
            Some(p) => p.apply(tape, b, x),
            None => x,
        };
        let y = tape.add(s, h);
        let y = tape.leaky_relu(y, LEAKY_SLOPE);
        if u.pool_after {
            tape.avg_pool(y, 1, 2)
        } else {
            y
        }
    }

    /// Logit of shape `[1]`.
    pub fn logit_on(&self, tape: &mut Tape<T>, b: &Binding, video: Var) -> Result<Var> {
        let want = self.clip.dims();
        if tape.shape(video) != want {
            return Err(Error::shape("discriminator input", &want, tape.shape(video)));
        }
        let feats: Vec<Var> = self
            .branches
            .iter()
            .map(|br| {
                let (ft, fs) = br.scale;
                let mut x = if ft == 1 && fs == 1 {
                    video
                } else {
                    tape.avg_pool(video, ft, fs)
                };
                for u in &br.units {
                    x = Self::unit_on(u, tape, b, x);
                }
                tape.global_avg_pool(x)
            })
            .collect();
        let cat = tape.concat(&feats);
        let logit = self.head.apply(tape, b, cat);
        if !tape.value(logit).is_finite() {
            return Err(Error::NonFinite {
                stage: "discriminator",
                block: None,
            });
        }
        Ok(logit)
    }

    pub fn discriminate(&self, video: &VideoTensor<T>) -> Result<f64> {
        let mut tape = Tape::new();
        let b = tape.bind(&self.store, false);
        let v = tape.constant(video.tensor().clone());
        let l = self.logit_on(&mut tape, &b, v)?;
        Ok(tape.value(l).item().as_f64())
    }

    pub fn cast<U: Real>(&self) -> Discriminator<U> {
        Discriminator {
            config: self.config,
            clip: self.clip,
            store: self.store.cast(),
            branches: self.branches.clone(),
            head: self.head.clone(),
        }
    }
}
