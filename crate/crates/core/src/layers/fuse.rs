use alloc::format;
use alloc::vec::Vec;

use super::model::{averaged, mean_of, Layer, Model, WeightedLayer};
use super::Wrapper;
use crate::error::{Error, Result};

/// Replaces every IEN layer by a plain layer holding the replica mean
/// (biases averaged likewise). Other layers are copied unchanged.
pub fn fuse_ien(model: &Model) -> Result<Model> {
    let mut saw_ien = false;
    let mut layers = Vec::with_capacity(model.layers().len());
    for (i, layer) in model.layers().iter().enumerate() {
        layers.push(match layer {
            Layer::Weighted(w) => match w.spec.wrapper {
                Wrapper::Ien(_) => {
                    saw_ien = true;
                    Layer::Weighted(averaged(w)?)
                }
                Wrapper::Maxout(m) => {
                    return Err(Error::UnsupportedFusion(format!(
                        "layer {i} is maxout({m}); averaging maxout replicas is only available through fuse_external"
                    )))
                }
                Wrapper::Plain => layer.clone(),
            },
            Layer::Dropout(_) => layer.clone(),
        });
    }
    if !saw_ien {
        return Err(Error::arg("model has no IEN layer to fuse"));
    }
    Model::from_layers(layers)
}

/// Naive weight averaging of independently trained models with identical
/// architecture: every parameter becomes the mean of its counterparts.
pub fn fuse_external(models: &[Model]) -> Result<Model> {
    if models.len() < 2 {
        return Err(Error::arg("fuse_external needs at least two models"));
    }
    let defs = models[0].defs();
    if models.iter().any(|m| m.defs() != defs) {
        return Err(Error::arg("fuse_external needs identical architectures"));
    }
    let mut layers = Vec::with_capacity(defs.len());
    for (i, layer) in models[0].layers().iter().enumerate() {
        layers.push(match layer {
            Layer::Dropout(d) => Layer::Dropout(*d),
            Layer::Weighted(w) => {
                let peers: Vec<&WeightedLayer> = models
                    .iter()
                    .map(|m| match &m.layers()[i] {
                        Layer::Weighted(pw) => pw,
                        Layer::Dropout(_) => unreachable!("architectures already compared"),
                    })
                    .collect();
                let weights = (0..w.weights.len())
                    .map(|r| mean_of(&peers.iter().map(|p| &p.weights[r]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?;
                let biases = (0..w.biases.len())
                    .map(|r| mean_of(&peers.iter().map(|p| &p.biases[r]).collect::<Vec<_>>()))
                    .collect::<Result<Vec<_>>>()?;
                Layer::Weighted(WeightedLayer {
                    spec: w.spec,
                    weights,
                    biases,
                })
            }
        });
    }
    Model::from_layers(layers)
}
