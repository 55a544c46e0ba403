use alloc::vec;
use alloc::vec::Vec;

use super::{ActivationKind, DropoutSpec, LayerDef, LayerKind, LayerSpec, Wrapper};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Every replica that exists while training.
    Train,
    /// What remains for inference once IEN layers are averaged.
    Fused,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedLayer {
    pub spec: LayerSpec,
    /// One tensor per replica, all of `spec.weight_shape()`.
    pub weights: Vec<Tensor>,
    /// One `fan_out` vector per replica when `spec.bias`, else empty.
    pub biases: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Weighted(WeightedLayer),
    Dropout(DropoutSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
}

/// Handles produced when a model is laid out on a tape.
#[derive(Debug, Clone)]
pub struct Graph {
    pub output: Var,
    /// Parameter leaves in [`Model::params`] order.
    pub params: Vec<Var>,
}

impl WeightedLayer {
    fn zeroed(spec: LayerSpec) -> Self {
        let shape = spec.weight_shape();
        let m = spec.m();
        Self {
            spec,
            weights: (0..m).map(|_| Tensor::zeros(&shape)).collect(),
            biases: if spec.bias {
                (0..m).map(|_| Tensor::zeros(&[spec.fan_out])).collect()
            } else {
                Vec::new()
            },
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        self.spec.validate()?;
        let shape = self.spec.weight_shape();
        let m = self.spec.m();
        if self.weights.len() != m || self.weights.iter().any(|w| w.shape() != shape.as_slice()) {
            return Err(Error::arg("replica weights do not match the layer spec"));
        }
        let want_biases = if self.spec.bias { m } else { 0 };
        if self.biases.len() != want_biases
            || self.biases.iter().any(|b| b.shape() != [self.spec.fan_out])
        {
            return Err(Error::arg("replica biases do not match the layer spec"));
        }
        Ok(())
    }
}

impl Model {
    /// A model with zero-filled weights; call [`Model::init_weights`] next.
    pub fn new(defs: &[LayerDef]) -> Result<Self> {
        let mut layers = Vec::with_capacity(defs.len());
        for (i, def) in defs.iter().enumerate() {
            layers.push(match *def {
                LayerDef::Weighted(spec) => {
                    spec.validate().map_err(|e| e.in_layer(i))?;
                    Layer::Weighted(WeightedLayer::zeroed(spec))
                }
                LayerDef::Dropout(d) => {
                    Layer::Dropout(DropoutSpec::new(d.p, d.mode).map_err(|e| e.in_layer(i))?)
                }
            });
        }
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            if let Layer::Weighted(w) = layer {
                w.check().map_err(|e| e.in_layer(i))?;
            }
        }
        Ok(Self { layers })
    }

    pub fn initialized(defs: &[LayerDef], rng: &SeededRng) -> Result<Self> {
        let mut model = Self::new(defs)?;
        model.init_weights(rng);
        Ok(model)
    }

    /// Draws every replica i.i.d. from `N(0, m / (β² n))`, each on its own
    /// `(layer, replica)` sub-stream. Biases start at zero.
    pub fn init_weights(&mut self, rng: &SeededRng) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if let Layer::Weighted(w) = layer {
                let std = w.spec.init_spec().std();
                for (r, weight) in w.weights.iter_mut().enumerate() {
                    let mut stream = rng.split_path(&[i as u64, r as u64]);
                    stream.fill_normal(weight.data_mut(), std);
                }
                for b in &mut w.biases {
                    b.data_mut().fill(0.0);
                }
            }
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn defs(&self) -> Vec<LayerDef> {
        self.layers
            .iter()
            .map(|l| match l {
                Layer::Weighted(w) => LayerDef::Weighted(w.spec),
                Layer::Dropout(d) => LayerDef::Dropout(*d),
            })
            .collect()
    }

    pub fn weighted(&self) -> impl Iterator<Item = &WeightedLayer> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Weighted(w) => Some(w),
            Layer::Dropout(_) => None,
        })
    }

    /// All parameter tensors: per layer, replica weights then replica biases.
    pub fn params(&self) -> Vec<&Tensor> {
        self.weighted()
            .flat_map(|w| w.weights.iter().chain(&w.biases))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Weighted(w) => Some(w),
                Layer::Dropout(_) => None,
            })
            .flat_map(|w| w.weights.iter_mut().chain(w.biases.iter_mut()))
            .collect()
    }

    /// Output arity of the final weighted layer.
    pub fn outputs(&self) -> Option<usize> {
        self.weighted().last().map(|w| w.spec.fan_out)
    }

    pub fn count_params(&self, phase: Phase) -> usize {
        self.weighted()
            .map(|w| {
                let replicas = match (phase, w.spec.wrapper) {
                    (Phase::Fused, Wrapper::Ien(_)) => 1,
                    _ => w.spec.m(),
                };
                replicas * w.spec.replica_params()
            })
            .sum()
    }

    /// Lays the model out on `tape` with its parameters as fresh leaves.
    pub fn build(&self, tape: &mut Tape, input: Var, mode: Mode, rng: &SeededRng) -> Result<Graph> {
        let mut params = Vec::new();
        let mut x = input;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Weighted(w) => {
                    weighted_forward(tape, w, x, &mut params).map_err(|e| e.in_layer(i))?
                }
                Layer::Dropout(d) => match mode {
                    Mode::Eval => x,
                    Mode::Train => {
                        let shape = tape.value(x).shape().to_vec();
                        let mut stream = rng.split(i as u64);
                        let mut mask = Tensor::zeros(&shape);
                        for v in mask.data_mut() {
                            *v = if stream.bernoulli(d.p) { 1.0 } else { 0.0 };
                        }
                        tape.apply_mask(x, mask, d.train_scale())
                            .map_err(|e| e.in_layer(i))?
                    }
                },
            };
        }
        Ok(Graph { output: x, params })
    }

    /// Forward pass for a batch. `rng` only drives dropout masks in train mode.
    pub fn forward(&self, x: &Tensor, mode: Mode, rng: &SeededRng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        let graph = self.build(&mut tape, input, mode, rng)?;
        Ok(tape.value(graph.output).clone())
    }
}

fn weighted_forward(
    tape: &mut Tape,
    layer: &WeightedLayer,
    x: Var,
    params: &mut Vec<Var>,
) -> Result<Var> {
    let spec = &layer.spec;
    let weights: Vec<Var> = layer.weights.iter().map(|w| tape.leaf(w.clone())).collect();
    let biases: Vec<Var> = layer.biases.iter().map(|b| tape.leaf(b.clone())).collect();
    params.extend(&weights);
    params.extend(&biases);

    let x = match spec.kind {
        LayerKind::Dense => {
            let shape = tape.value(x).shape().to_vec();
            if shape.len() > 2 {
                let rest: usize = shape[1..].iter().product();
                tape.reshape(x, &[shape[0], rest])?
            } else {
                x
            }
        }
        LayerKind::Conv(_) => x,
    };
    let mut responses = Vec::with_capacity(weights.len());
    for (r, &w) in weights.iter().enumerate() {
        let mut y = match spec.kind {
            LayerKind::Dense => {
                let wt = tape.transpose(w)?;
                tape.matmul(x, wt)?
            }
            LayerKind::Conv(c) => tape.conv2d(x, w, c.stride, c.pad)?,
        };
        if let Some(&b) = biases.get(r) {
            y = tape.add_bias(y, b)?;
        }
        responses.push(y);
    }
    let y = match spec.wrapper {
        Wrapper::Plain => responses[0],
        Wrapper::Ien(_) => tape.mean_stack(&responses)?,
        Wrapper::Maxout(_) => tape.max_stack(&responses)?,
    };
    Ok(match spec.activation {
        ActivationKind::Linear => y,
        ActivationKind::Relu => tape.relu(y),
    })
}

/// Replica-averaged copy of `layer` as a plain layer.
pub(crate) fn averaged(layer: &WeightedLayer) -> Result<WeightedLayer> {
    let spec = LayerSpec {
        wrapper: Wrapper::Plain,
        ..layer.spec
    };
    Ok(WeightedLayer {
        spec,
        weights: vec![mean_of(&layer.weights.iter().collect::<Vec<_>>())?],
        biases: if spec.bias {
            vec![mean_of(&layer.biases.iter().collect::<Vec<_>>())?]
        } else {
            Vec::new()
        },
    })
}

pub(crate) fn mean_of(ts: &[&Tensor]) -> Result<Tensor> {
    let first = ts.first().ok_or_else(|| Error::arg("nothing to average"))?;
    let mut acc = (*first).clone();
    for t in &ts[1..] {
        acc.add_assign(t)?;
    }
    Ok(acc.scale(1.0 / ts.len() as f64))
}
