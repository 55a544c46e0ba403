//! Finite-difference suite over every differentiable operation and a full
//! IEN + maxout + dropout model.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{finite_diff_check, Tape, Var};
use crate::error::Result;
use crate::layers::{DropoutMode, DropoutSpec, LayerDef, LayerSpec, Mode, Model};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const GRADCHECK_TOLERANCE: f64 = 1e-6;
pub const GRADCHECK_STEP: f64 = 1e-5;

pub const GRADCHECK_OPS: [&str; 10] = [
    "matmul",
    "transpose",
    "mean_stack",
    "max_stack",
    "relu",
    "apply_mask",
    "conv2d",
    "add_bias",
    "softmax_cross_entropy",
    "model",
];

#[derive(Debug, Clone, PartialEq)]
pub struct OpCheck {
    pub op: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradcheckOptions {
    pub seed: u64,
    pub trials: usize,
    /// Perturbs the analytic gradient of the named op so the suite must
    /// report it. Test hook.
    pub inject_fault: Option<String>,
}

/// Max relative error between backward and central differences for a graph
/// whose leaves are `inputs`.
pub fn check_graph<F>(inputs: &[Tensor], build: F, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_graph_scaled(inputs, &build, h, 1.0)
}

fn check_graph_scaled<F>(inputs: &[Tensor], build: &F, h: f64, fault: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[Tensor]| -> Result<(Tape, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &leaves)?;
        Ok((tape, leaves, out))
    };
    let (tape, leaves, out) = eval(inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = leaves
        .iter()
        .flat_map(|&v| grads.get(v).data().iter().map(|g| g * fault))
        .collect();
    let theta: Vec<f64> = inputs
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let unflatten = |th: &[f64]| -> Vec<Tensor> {
        let mut at = 0;
        inputs
            .iter()
            .map(|t| {
                let n = t.len();
                let part = Tensor::new(t.shape(), th[at..at + n].to_vec()).expect("same shape");
                at += n;
                part
            })
            .collect()
    };
    let f = |th: &[f64]| -> f64 {
        match eval(&unflatten(th)) {
            Ok((tape, _, out)) => tape.value(out).item().unwrap_or(f64::NAN),
            Err(_) => f64::NAN,
        }
    };
    finite_diff_check(f, &theta, &analytic, h)
}

fn away_from_zero(t: Tensor, margin: f64) -> Tensor {
    t.map(|v| {
        if v.abs() < margin {
            if v < 0.0 {
                v - margin
            } else {
                v + margin
            }
        } else {
            v
        }
    })
}

/// Builds one random instance for `op` and returns its max relative error.
fn check_instance(op: &str, rng: &mut SeededRng, fault: f64) -> Result<f64> {
    let h = GRADCHECK_STEP;
    let mut u = |shape: &[usize]| Tensor::uniform(shape, -1.0, 1.0, rng);
    match op {
        "matmul" => {
            let (a, b, c) = (u(&[3, 4]), u(&[4, 5]), u(&[3, 5]));
            check_graph_scaled(
                &[a, b],
                &|t, v| {
                    let y = t.matmul(v[0], v[1])?;
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "transpose" => {
            let (a, c) = (u(&[3, 4]), u(&[4, 3]));
            check_graph_scaled(
                &[a],
                &|t, v| {
                    let y = t.transpose(v[0])?;
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "mean_stack" => {
            let xs = vec![u(&[2, 3]), u(&[2, 3]), u(&[2, 3])];
            let c = u(&[2, 3]);
            check_graph_scaled(
                &xs,
                &|t, v| {
                    let y = t.mean_stack(v)?;
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "max_stack" => {
            // replicas separated by at least 0.05 so no tie moves under ±h
            let base = u(&[2, 3]);
            let xs: Vec<Tensor> = (0..3)
                .map(|r| {
                    let jitter = u(&[2, 3]);
                    base.zip_with(&jitter, "max", |b, j| b + 0.1 * r as f64 + 0.04 * j)
                        .unwrap()
                })
                .collect();
            let c = u(&[2, 3]);
            check_graph_scaled(
                &xs,
                &|t, v| {
                    let y = t.max_stack(v)?;
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "relu" => {
            let x = away_from_zero(u(&[4, 5]), 1e-3);
            let c = u(&[4, 5]);
            check_graph_scaled(
                &[x],
                &|t, v| {
                    let y = t.relu(v[0]);
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "apply_mask" => {
            let x = u(&[3, 4]);
            let mask = u(&[3, 4]).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let c = u(&[3, 4]);
            check_graph_scaled(
                &[x],
                &|t, v| {
                    let y = t.apply_mask(v[0], mask.clone(), 2.0)?;
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "conv2d" => {
            let (x, k, c) = (u(&[2, 4, 4]), u(&[3, 2, 2, 2]), u(&[3, 3, 3]));
            check_graph_scaled(
                &[x, k],
                &|t, v| {
                    let y = t.conv2d(v[0], v[1], 1, 0)?;
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "add_bias" => {
            let (x, b, c) = (u(&[2, 3, 2, 2]), u(&[3]), u(&[2, 3, 2, 2]));
            check_graph_scaled(
                &[x, b],
                &|t, v| {
                    let y = t.add_bias(v[0], v[1])?;
                    t.weighted_sum(y, c.clone())
                },
                h,
                fault,
            )
        }
        "softmax_cross_entropy" => {
            let z = u(&[4, 5]);
            let labels: Vec<usize> = (0..4).map(|i| (i * 3 + 1) % 5).collect();
            check_graph_scaled(
                &[z],
                &|t, v| t.softmax_cross_entropy(v[0], &labels),
                h,
                fault,
            )
        }
        "model" => check_model(rng, fault),
        other => Err(crate::error::Error::arg(alloc::format!(
            "unknown op '{other}'"
        ))),
    }
}

/// IEN conv → dropout → maxout dense → IEN dense head, softmax loss.
pub fn gradcheck_model_defs() -> Vec<LayerDef> {
    vec![
        LayerDef::Weighted(LayerSpec::conv(2, 3, 2, 2, 1, 0).ien(2).relu().with_bias()),
        LayerDef::Dropout(DropoutSpec::new(0.7, DropoutMode::Inverted).expect("valid")),
        LayerDef::Weighted(LayerSpec::dense(3 * 3 * 3, 6).maxout(3).relu()),
        LayerDef::Weighted(LayerSpec::dense(6, 4).ien(4).with_bias()),
    ]
}

/// Instances are redrawn until no relu input or maxout gap lies within
/// [`MODEL_KINK_MARGIN`] of a kink. The objective is a fixed random linear
/// functional of the logits, so between kinks it is linear in every single
/// parameter and central differences are exact up to roundoff.
fn check_model(rng: &mut SeededRng, fault: f64) -> Result<f64> {
    for attempt in 0..MODEL_DRAW_ATTEMPTS {
        let mut r = rng.split(attempt);
        let mut model = Model::initialized(&gradcheck_model_defs(), &r.split(0))?;
        for p in model.params_mut() {
            if p.rank() == 1 {
                for v in p.data_mut() {
                    *v = r.uniform(-0.5, 0.5);
                }
            }
        }
        let x = Tensor::uniform(&[3, 2, 4, 4], -1.0, 1.0, &mut r);
        let readout = Tensor::uniform(&[3, 4], -1.0, 1.0, &mut r);
        let masks = r.split(1);
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone());
        model.build(&mut tape, input, Mode::Train, &masks)?;
        if tape.kink_margin() >= MODEL_KINK_MARGIN {
            return model_readout_check(&model, &x, &readout, &masks, MODEL_STEP, fault);
        }
    }
    Err(crate::error::Error::Numeric(
        "no model instance clear of relu and maxout kinks".into(),
    ))
}

const MODEL_KINK_MARGIN: f64 = 0.05;
/// Small against the margin; a parameter moves any pre-activation by at
/// most a few steps.
const MODEL_STEP: f64 = 1e-3;
const MODEL_DRAW_ATTEMPTS: u64 = 10_000;

/// Gradient check of `Σ readout ⊙ model(x)` over every parameter, with
/// dropout masks from `masks`.
pub fn model_readout_check(
    model: &Model,
    x: &Tensor,
    readout: &Tensor,
    masks: &SeededRng,
    h: f64,
    fault: f64,
) -> Result<f64> {
    let objective = |m: &Model, tape: &mut Tape| -> Result<(Var, Vec<Var>)> {
        let input = tape.leaf(x.clone());
        let graph = m.build(tape, input, Mode::Train, masks)?;
        Ok((
            tape.weighted_sum(graph.output, readout.clone())?,
            graph.params,
        ))
    };
    let mut tape = Tape::new();
    let (out, params) = objective(model, &mut tape)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = params
        .iter()
        .flat_map(|&v| grads.get(v).data().iter().map(|g| g * fault))
        .collect();
    let theta: Vec<f64> = model
        .params()
        .iter()
        .flat_map(|t| t.data().iter().copied())
        .collect();
    let mut probe = model.clone();
    let f = |th: &[f64]| -> f64 {
        let mut at = 0;
        for p in probe.params_mut() {
            let n = p.len();
            p.data_mut().copy_from_slice(&th[at..at + n]);
            at += n;
        }
        let mut tape = Tape::new();
        objective(&probe, &mut tape)
            .map(|(o, _)| tape.value(o).data()[0])
            .unwrap_or(f64::NAN)
    };
    finite_diff_check(f, &theta, &analytic, h)
}

/// Runs `trials` random instances per op.
pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<Vec<OpCheck>> {
    let root = SeededRng::new(opts.seed);
    GRADCHECK_OPS
        .iter()
        .enumerate()
        .map(|(i, &op)| {
            let fault = if opts.inject_fault.as_deref() == Some(op) {
                1.0 + 1e-3
            } else {
                1.0
            };
            let mut worst: f64 = 0.0;
            for trial in 0..opts.trials {
                let mut rng = root.split_path(&[i as u64, trial as u64]);
                worst = worst.max(check_instance(op, &mut rng, fault)?);
            }
            Ok(OpCheck {
                op,
                instances: opts.trials,
                max_rel_error: worst,
            })
        })
        .collect()
}
