//! Layer and model definitions: plain, inner-ensemble (IEN), maxout and
//! dropout layers, the IEN initializer, weight fusion, parameter counting
//! and the binary checkpoint codec.

mod checkpoint;
mod fuse;
mod model;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use fuse::{fuse_external, fuse_ien};
pub use model::{Graph, Layer, Mode, Model, Phase, WeightedLayer};

use alloc::format;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Linear,
    Relu,
}

impl ActivationKind {
    /// Second-moment gain β²: 1 for linear, 1/2 for ReLU.
    pub fn gain(self) -> f64 {
        match self {
            ActivationKind::Linear => 1.0,
            ActivationKind::Relu => 0.5,
        }
    }

    pub fn apply(self, y: f64) -> f64 {
        match self {
            ActivationKind::Linear => y,
            ActivationKind::Relu => {
                if y > 0.0 {
                    y
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Linear => "linear",
            ActivationKind::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ActivationKind::Linear),
            "relu" => Ok(ActivationKind::Relu),
            other => Err(Error::arg(format!("unknown activation kind '{other}'"))),
        }
    }
}

/// How the `m` weight replicas of a layer are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Wrapper {
    Plain,
    /// Mean of the replica responses.
    Ien(usize),
    /// Elementwise max of the replica responses.
    Maxout(usize),
}

impl Wrapper {
    pub fn m(self) -> usize {
        match self {
            Wrapper::Plain => 1,
            Wrapper::Ien(m) | Wrapper::Maxout(m) => m,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Wrapper::Plain => "plain",
            Wrapper::Ien(_) => "ien",
            Wrapper::Maxout(_) => "maxout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvShape {
    pub c_in: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Dense,
    Conv(ConvShape),
}

/// A weighted layer. For convolutions `fan_in = c_in·kh·kw` and
/// `fan_out = c_out`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub fan_in: usize,
    pub fan_out: usize,
    pub wrapper: Wrapper,
    pub activation: ActivationKind,
    pub bias: bool,
}

impl LayerSpec {
    pub fn dense(fan_in: usize, fan_out: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            fan_in,
            fan_out,
            wrapper: Wrapper::Plain,
            activation: ActivationKind::Linear,
            bias: false,
        }
    }

    pub fn conv(
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self {
            kind: LayerKind::Conv(ConvShape {
                c_in,
                kh,
                kw,
                stride,
                pad,
            }),
            fan_in: c_in * kh * kw,
            fan_out: c_out,
            wrapper: Wrapper::Plain,
            activation: ActivationKind::Linear,
            bias: false,
        }
    }

    pub fn ien(mut self, m: usize) -> Self {
        self.wrapper = Wrapper::Ien(m);
        self
    }

    pub fn maxout(mut self, m: usize) -> Self {
        self.wrapper = Wrapper::Maxout(m);
        self
    }

    pub fn wrapped(mut self, wrapper: Wrapper) -> Self {
        self.wrapper = wrapper;
        self
    }

    pub fn relu(mut self) -> Self {
        self.activation = ActivationKind::Relu;
        self
    }

    pub fn activation(mut self, activation: ActivationKind) -> Self {
        self.activation = activation;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    pub fn m(&self) -> usize {
        self.wrapper.m()
    }

    /// Shape of one replica's weight tensor.
    pub fn weight_shape(&self) -> alloc::vec::Vec<usize> {
        match self.kind {
            LayerKind::Dense => alloc::vec![self.fan_out, self.fan_in],
            LayerKind::Conv(c) => alloc::vec![self.fan_out, c.c_in, c.kh, c.kw],
        }
    }

    /// Parameters held by one replica.
    pub fn replica_params(&self) -> usize {
        self.fan_in * self.fan_out + if self.bias { self.fan_out } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fan_in == 0 || self.fan_out == 0 {
            return Err(Error::arg("layer extents must be positive"));
        }
        if self.m() == 0 {
            return Err(Error::arg("ensemble count m must be at least 1"));
        }
        if let LayerKind::Conv(c) = self.kind {
            if c.stride == 0 || c.kh == 0 || c.kw == 0 || c.c_in * c.kh * c.kw != self.fan_in {
                return Err(Error::arg("inconsistent convolution geometry"));
            }
        }
        Ok(())
    }

    /// The initializer for this layer's replicas.
    pub fn init_spec(&self) -> InitSpec {
        InitSpec::new(self.m(), self.activation.gain(), self.fan_in)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DropoutMode {
    /// Unscaled Bernoulli mask at train time.
    Paper,
    /// Mask scaled by `1/p` at train time.
    Inverted,
}

/// `p` is the probability that a unit is kept (`δ = 1`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSpec {
    pub p: f64,
    pub mode: DropoutMode,
}

impl DropoutSpec {
    pub fn new(p: f64, mode: DropoutMode) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::arg(format!(
                "dropout keep probability {p} outside (0, 1]"
            )));
        }
        Ok(Self { p, mode })
    }

    pub fn train_scale(&self) -> f64 {
        match self.mode {
            DropoutMode::Paper => 1.0,
            DropoutMode::Inverted => 1.0 / self.p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerDef {
    Weighted(LayerSpec),
    Dropout(DropoutSpec),
}

/// Zero-mean Gaussian with variance `m / (β² n)`, which keeps
/// `β² n Var[w] / m = 1` for the averaged response.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitSpec {
    pub variance: f64,
}

impl InitSpec {
    pub fn new(m: usize, gain: f64, fan_in: usize) -> Self {
        Self {
            variance: m as f64 / (gain * fan_in as f64),
        }
    }

    pub fn std(&self) -> f64 {
        crate::math::sqrt(self.variance)
    }
}
