//! Parameter storage and the layer building blocks shared by the codec,
//! the codec proxy and the discriminator.

use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Index;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::tape::{Tape, Var};
use crate::{Error, Real, Result, Tensor};

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the little-endian f32 image of every
    /// value.
    pub fn checksum(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update((name.len() as u32).to_le_bytes());
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Overwrites values from `(name, tensor)` pairs, requiring the same
    /// names and shapes in the same order.
    pub fn load<'a, U: Real>(
        &mut self,
        entries: impl IntoIterator<Item = (&'a str, &'a Tensor<U>)>,
    ) -> Result<()> {
        let mut n = 0;
        for (i, (name, value)) in entries.into_iter().enumerate() {
            let Some(slot) = self.tensors.get_mut(i) else {
                return Err(Error::config(alloc::format!("unexpected parameter {name}")));
            };
            if self.names[i] != name {
                return Err(Error::config(alloc::format!(
                    "parameter {i}: expected {}, found {name}",
                    self.names[i]
                )));
            }
            if slot.shape() != value.shape() {
                return Err(Error::shape("load", slot.shape(), value.shape()));
            }
            *slot = value.cast();
            n += 1;
        }
        if n != self.tensors.len() {
            return Err(Error::config(alloc::format!(
                "expected {} parameters, found {n}",
                self.tensors.len()
            )));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// The tape leaves of one [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub(crate) fn new(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// How a layer's tensors are initialised.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform in `±1/sqrt(fan_in)` for weight and bias.
    FanIn,
    /// Uniform in `±gain/sqrt(fan_in)`.
    Scaled(f64),
    Zero,
}

fn init_tensor<T: Real, R: Rng>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor<T> {
    let bound = match init {
        Init::Zero => return Tensor::zeros(shape),
        Init::FanIn => 1.0 / num_traits::Float::sqrt(fan_in as f64),
        Init::Scaled(g) => g / num_traits::Float::sqrt(fan_in as f64),
    };
    Tensor::from_fn(shape, |_| T::of(rng.random_range(-bound..bound)))
}

/// Stride-1 "same" convolution. `kernel` is `[kt, kh, kw]`; `kt == 1`
/// stores a 4-D weight and acts per frame.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub kernel: [usize; 3],
}

impl Conv {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: [usize; 3],
        init: Init,
        rng: &mut R,
    ) -> Self {
        let [kt, kh, kw] = kernel;
        let fan_in = cin * kt * kh * kw;
        let wshape: Vec<usize> = if kt == 1 {
            [cout, cin, kh, kw].to_vec()
        } else {
            [cout, cin, kt, kh, kw].to_vec()
        };
        let w = init_tensor(&wshape, fan_in, init, rng);
        let b = init_tensor(&[cout], fan_in, init, rng);
        Self {
            weight: store.add(alloc::format!("{name}.weight"), w),
            bias: store.add(alloc::format!("{name}.bias"), b),
            cin,
            cout,
            kernel,
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Var {
        tape.conv(x, b[self.weight], Some(b[self.bias]))
    }

    pub fn param_count(&self) -> usize {
        self.cout * self.cin * self.kernel.iter().product::<usize>() + self.cout
    }

    /// Multiply-accumulates for one application to a `[cin, t, h, w]` input.
    pub fn macs(&self, t: usize, h: usize, w: usize) -> u64 {
        (self.cout * self.cin * self.kernel.iter().product::<usize>() * t * h * w) as u64
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        init: Init,
        rng: &mut R,
    ) -> Self {
        let w = init_tensor(&[outputs, inputs], inputs, init, rng);
        let b = init_tensor(&[outputs], inputs, init, rng);
        Self {
            weight: store.add(alloc::format!("{name}.weight"), w),
            bias: store.add(alloc::format!("{name}.bias"), b),
            inputs,
            outputs,
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Var {
        tape.linear(x, b[self.weight], Some(b[self.bias]))
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Two 3×3 per-frame convolutions with a leaky ReLU between them.
#[derive(Clone, Debug)]
pub struct Subnet {
    pub first: Conv,
    pub second: Conv,
}

impl Subnet {
    /// `last` initialises the output layer; zero makes the subnet output 0.
    pub fn new<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        last: Init,
        rng: &mut R,
    ) -> Self {
        let k = [1, 3, 3];
        Self {
            first: Conv::new(store, &alloc::format!("{name}.0"), cin, hidden, k, Init::FanIn, rng),
            second: Conv::new(store, &alloc::format!("{name}.1"), hidden, cout, k, last, rng),
        }
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, b: &Binding, x: Var) -> Var {
        let h = self.first.apply(tape, b, x);
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.second.apply(tape, b, h)
    }

    pub fn param_count(&self) -> usize {
        self.first.param_count() + self.second.param_count()
    }

    pub fn macs(&self, t: usize, h: usize, w: usize) -> u64 {
        self.first.macs(t, h, w) + self.second.macs(t, h, w)
    }
}
