use alloc::string::String;
use alloc::vec::Vec;

use super::data::{Dataset, SplitDataset};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::layers::{LayerDef, Mode, Model, Phase};
use crate::math;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::arg("learning rate must be finite and non-negative"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::arg("epochs and batch size must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub method: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub final_test_error: f64,
    pub params_train: usize,
    pub params_fused: usize,
}

const EVAL_BATCH: usize = 256;

/// Mini-batch SGD on softmax cross-entropy from a fresh initialization.
///
/// Streams under `SeededRng::new(cfg.seed)`: `0` initialization,
/// `[1, epoch]` shuffle order, `[2, epoch, batch]` dropout masks.
pub fn train(
    defs: &[LayerDef],
    cfg: &TrainConfig,
    data: &SplitDataset,
    method: &str,
) -> Result<(Model, RunRecord)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let root = SeededRng::new(cfg.seed);
    let mut model = Model::initialized(defs, &root.split(0))?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        root.split_path(&[1, epoch as u64]).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.train.batch(idx);
            let masks = root.split_path(&[2, epoch as u64, b as u64]);
            let mut tape = Tape::new();
            let input = tape.leaf(x);
            let graph = model.build(&mut tape, input, Mode::Train, &masks)?;
            let loss = tape.softmax_cross_entropy(graph.output, &y)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            let grads = tape.backward(loss)?;
            for (param, &v) in model.params_mut().into_iter().zip(&graph.params) {
                for (p, g) in param.data_mut().iter_mut().zip(grads.get(v).data()) {
                    *p -= cfg.learning_rate * g;
                }
            }
            loss_sum += value;
            batches += 1;
        }
        epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            test_error: evaluate(&model, &data.test)?,
        });
    }
    let record = RunRecord {
        method: method.into(),
        seed: cfg.seed,
        final_test_error: epochs.last().map_or(1.0, |e| e.test_error),
        epochs,
        params_train: model.count_params(Phase::Train),
        params_fused: model.count_params(Phase::Fused),
    };
    Ok((model, record))
}

/// Eval-mode logits for every row of `features`.
pub fn predict_logits(model: &Model, features: &Tensor) -> Result<Tensor> {
    let n = features.shape()[0];
    let width: usize = features.shape()[1..].iter().product();
    let unused = SeededRng::new(0);
    let mut out = Vec::new();
    let mut classes = 0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let mut shape = alloc::vec![end - start];
        shape.extend_from_slice(&features.shape()[1..]);
        let x = Tensor::new(&shape, features.data()[start * width..end * width].to_vec())?;
        let y = model.forward(&x, Mode::Eval, &unused)?;
        classes = y.shape()[1];
        out.extend_from_slice(y.data());
    }
    Tensor::new(&[n, classes], out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn error_rate(logits: &Tensor, labels: &[usize]) -> f64 {
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(i, &l)| argmax(logits.row(i)) != l)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Fraction of argmax mispredictions.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::arg("empty evaluation set"));
    }
    Ok(error_rate(
        &predict_logits(model, &data.features)?,
        &data.labels,
    ))
}

/// Averages softmax probabilities across models, then takes the argmax.
pub fn outer_ensemble_eval(models: &[Model], data: &Dataset) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::arg("an outer ensemble needs at least two models"));
    }
    let arity = models[0].outputs();
    if models.iter().any(|m| m.outputs() != arity) {
        return Err(Error::arg("ensemble members disagree on output arity"));
    }
    let mut avg: Option<Tensor> = None;
    for model in models {
        let logits = predict_logits(model, &data.features)?;
        let probs = softmax_rows(&logits);
        match &mut avg {
            None => avg = Some(probs),
            Some(a) => a.add_assign(&probs)?,
        }
    }
    let avg = avg
        .expect("at least two models")
        .scale(1.0 / models.len() as f64);
    Ok(error_rate(&avg, &data.labels))
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let classes = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_exact_mut(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = math::exp(*v - max);
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{fuse_ien, Layer, LayerSpec, WeightedLayer};
    use crate::train::{gen_blobs, BlobsConfig};
    use alloc::vec;

    fn small_task() -> SplitDataset {
        gen_blobs(
            &BlobsConfig {
                num_classes: 4,
                dims: 6,
                samples_per_class: 40,
                spread: 0.2,
                separation: 1.0,
            },
            &SeededRng::new(1),
        )
        .unwrap()
    }

    fn mlp(m: usize) -> Vec<LayerDef> {
        vec![
            LayerDef::Weighted(LayerSpec::dense(6, 16).ien(m).relu()),
            LayerDef::Weighted(LayerSpec::dense(16, 4)),
        ]
    }

    fn cfg(lr: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: lr,
            epochs: 3,
            batch_size: 16,
            seed: 9,
        }
    }

    #[test]
    fn zero_learning_rate_keeps_init() {
        let data = small_task();
        let (model, _) = train(&mlp(2), &cfg(0.0), &data, "ien").unwrap();
        let init = Model::initialized(&mlp(2), &SeededRng::new(9).split(0)).unwrap();
        assert_eq!(model, init);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let data = small_task();
        let (m1, r1) = train(&mlp(4), &cfg(0.2), &data, "ien").unwrap();
        let (m2, r2) = train(&mlp(4), &cfg(0.2), &data, "ien").unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1, m2);
        assert!(r1.epochs[2].train_loss < r1.epochs[0].train_loss);
        assert_eq!((r1.params_train, r1.params_fused), (4 * 96 + 64, 96 + 64));
        let fused = fuse_ien(&m1).unwrap();
        assert_eq!(
            evaluate(&fused, &data.test).unwrap(),
            evaluate(&m1, &data.test).unwrap()
        );
    }

    #[test]
    fn divergence_is_reported() {
        let data = small_task();
        let err = train(&mlp(1), &cfg(1e200), &data, "base").unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    fn constant_model(classes: usize, dims: usize) -> Model {
        Model::from_layers(vec![Layer::Weighted(WeightedLayer {
            spec: LayerSpec::dense(dims, classes),
            weights: vec![Tensor::zeros(&[classes, dims])],
            biases: Vec::new(),
        })])
        .unwrap()
    }

    #[test]
    fn evaluate_extremes() {
        let data = small_task();
        // constant logits: everything predicted as class 0
        let err = evaluate(&constant_model(4, 6), &data.test).unwrap();
        assert!((err - 0.75).abs() < 1e-12);
        // identity-like model on one-hot features is perfect
        let features =
            Tensor::new(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let onehot = Dataset::new(features.clone(), vec![0, 1, 2], 3).unwrap();
        let eye = Model::from_layers(vec![Layer::Weighted(WeightedLayer {
            spec: LayerSpec::dense(3, 3),
            weights: vec![features],
            biases: Vec::new(),
        })])
        .unwrap();
        assert_eq!(evaluate(&eye, &onehot).unwrap(), 0.0);
    }

    #[test]
    fn ensemble_of_copies_matches_single() {
        let data = small_task();
        let (model, _) = train(&mlp(1), &cfg(0.2), &data, "base").unwrap();
        let single = evaluate(&model, &data.test).unwrap();
        let ens = outer_ensemble_eval(&[model.clone(), model.clone(), model.clone()], &data.test)
            .unwrap();
        assert_eq!(single, ens);
        assert!(outer_ensemble_eval(&[model.clone()], &data.test).is_err());
        assert!(outer_ensemble_eval(&[model, constant_model(5, 6)], &data.test).is_err());
    }

    #[test]
    fn ensemble_repairs_disjoint_mistakes() {
        // two 2-class linear models on one-hot inputs, each confidently
        // wrong on a different point and mildly right elsewhere
        let features = Tensor::new(&[4, 4], {
            let mut v = vec![0.0; 16];
            for i in 0..4 {
                v[i * 4 + i] = 1.0;
            }
            v
        })
        .unwrap();
        let data = Dataset::new(features, vec![0, 1, 0, 1], 2).unwrap();
        let model = |wrong: usize| {
            let mut w = vec![0.0; 8];
            for (i, &label) in [0usize, 1, 0, 1].iter().enumerate() {
                let (good, bad) = if i == wrong { (0.0, 0.5) } else { (1.0, 0.0) };
                w[label * 4 + i] = good;
                w[(1 - label) * 4 + i] = bad;
            }
            Model::from_layers(vec![Layer::Weighted(WeightedLayer {
                spec: LayerSpec::dense(4, 2),
                weights: vec![Tensor::new(&[2, 4], w).unwrap()],
                biases: Vec::new(),
            })])
            .unwrap()
        };
        let (a, b) = (model(0), model(3));
        let ea = evaluate(&a, &data).unwrap();
        let eb = evaluate(&b, &data).unwrap();
        assert_eq!((ea, eb), (0.25, 0.25));
        let ens = outer_ensemble_eval(&[a, b], &data).unwrap();
        assert!(ens <= ea.min(eb));
    }
}
