//! Closed-form variance responses of base, IEN, dropout and maxout chains,
//! and Monte Carlo estimators that check them.
//!
//! A chain starts from an input response with variance `Var[y₁]`. Each
//! listed layer feeds `x = f(y_prev)` (second-moment gain β²) through
//! weights of variance `Var[w]` and fan-in `n`, so its response variance
//! is the previous one times a per-layer factor:
//!
//! | method     | factor                      | kind        |
//! |------------|-----------------------------|-------------|
//! | base       | β² n Var[w]                 | exact       |
//! | ien(m)     | β² n Var[w] / m             | exact       |
//! | dropout(p) | β² n Var[w] · p             | exact       |
//! | maxout(m)  | β² n Var[w] · m             | upper       |
//!
//! Single-layer maxout additionally has a lower bound `n σ² c / ln m` and
//! the extreme-value approximation `n (π²/6) σ² / (2 ln m)`, where
//! `σ² = Var[w x]`.

mod mc;

pub use mc::{
    estimate_gain_mc, max_gaussian_stats, mc_chain_variance, ChainMc, GroupStats, McConfig,
    McEstimate, MAX_STATS_CHUNK,
};

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::layers::ActivationKind;
use crate::math::{self, PI};

/// Second-moment gain β² of an activation.
pub fn activation_gain(kind: ActivationKind) -> f64 {
    kind.gain()
}

/// `Π(Var + E²) − Π E²` for independent factors given as `(variance, mean)`.
pub fn product_variance(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::arg("product_variance needs at least one factor"));
    }
    if pairs.iter().any(|&(v, _)| v < 0.0) {
        return Err(Error::arg("variances must be non-negative"));
    }
    let second: f64 = pairs.iter().map(|&(v, e)| v + e * e).product();
    let mean_sq: f64 = pairs.iter().map(|&(_, e)| e * e).product();
    Ok(second - mean_sq)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ChainMethod {
    Base,
    Ien(usize),
    /// Paper-mode dropout with keep probability `p`.
    Dropout(f64),
    Maxout(usize),
}

impl ChainMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ChainMethod::Base => "base",
            ChainMethod::Ien(_) => "ien",
            ChainMethod::Dropout(_) => "dropout",
            ChainMethod::Maxout(_) => "maxout",
        }
    }

    /// `m` for ensemble methods, 1 otherwise.
    pub fn m(&self) -> usize {
        match *self {
            ChainMethod::Ien(m) | ChainMethod::Maxout(m) => m,
            _ => 1,
        }
    }

    /// Parses `base`, `ien(m)`, `maxout(m)` or `dropout(p)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "base" {
            return Ok(ChainMethod::Base);
        }
        let bad = || Error::arg(format!("unrecognized chain method {s:?}"));
        let (head, rest) = s.split_once('(').ok_or_else(bad)?;
        let arg = rest.strip_suffix(')').ok_or_else(bad)?.trim();
        let m = || arg.parse::<usize>().map_err(|_| bad());
        match head {
            "ien" => Ok(ChainMethod::Ien(m()?)),
            "maxout" => Ok(ChainMethod::Maxout(m()?)),
            "dropout" => Ok(ChainMethod::Dropout(arg.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

impl core::fmt::Display for ChainMethod {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match *self {
            ChainMethod::Base => f.write_str("base"),
            ChainMethod::Dropout(p) => write!(f, "dropout({p})"),
            other => write!(f, "{}({})", other.name(), other.m()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainLayer {
    pub fan_in: usize,
    pub weight_variance: f64,
    pub activation: ActivationKind,
    pub method: ChainMethod,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarChainSpec {
    pub input_variance: f64,
    pub layers: Vec<ChainLayer>,
}

impl VarChainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.input_variance > 0.0) {
            return Err(Error::arg("input variance must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::arg("chain has no layers"));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.fan_in == 0 || !(l.weight_variance > 0.0) {
                return Err(Error::arg("fan-in and weight variance must be positive").in_layer(i));
            }
            match l.method {
                ChainMethod::Ien(0) | ChainMethod::Maxout(0) => {
                    return Err(Error::arg("ensemble count m must be at least 1").in_layer(i))
                }
                ChainMethod::Dropout(p) if !(p > 0.0 && p <= 1.0) => {
                    return Err(
                        Error::arg(format!("keep probability {p} outside (0, 1]")).in_layer(i)
                    )
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// The same chain with every method replaced by `base`.
    pub fn as_base(&self) -> Self {
        Self {
            input_variance: self.input_variance,
            layers: self
                .layers
                .iter()
                .map(|l| ChainLayer {
                    method: ChainMethod::Base,
                    ..*l
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoundKind {
    ExactUnderAssumptions,
    Upper,
    Lower,
    Asymptotic,
}

impl BoundKind {
    pub fn name(self) -> &'static str {
        match self {
            BoundKind::ExactUnderAssumptions => "exact",
            BoundKind::Upper => "upper",
            BoundKind::Lower => "lower",
            BoundKind::Asymptotic => "asymptotic",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerPrediction {
    /// Cumulative response variance after this layer.
    pub value: f64,
    pub kind: BoundKind,
    /// Cumulative value with every dropout factor taken as ½ (the
    /// `E[δ] = ½, Var[δ] = ¼` bound); `None` until a dropout layer appears.
    pub dropout_half_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariancePrediction {
    pub per_layer: Vec<LayerPrediction>,
}

impl VariancePrediction {
    pub fn last(&self) -> &LayerPrediction {
        self.per_layer
            .last()
            .expect("validated chains are nonempty")
    }
}

/// Lower-bound constant `c` in `Var[max] ≥ c / ln m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaxoutLowerParams {
    pub c: f64,
}

impl Default for MaxoutLowerParams {
    fn default() -> Self {
        Self { c: 1.0 }
    }
}

impl MaxoutLowerParams {
    pub fn new(c: f64) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::arg("lower-bound constant c must be positive"));
        }
        Ok(Self { c })
    }

    /// Largest `c` consistent with a known `Var[max of m standard normals]`.
    pub fn calibrate(m: usize, var_max: f64) -> Result<Self> {
        if m < 2 {
            return Err(Error::arg("calibration needs m >= 2"));
        }
        Self::new(var_max * math::ln(m as f64))
    }
}

/// Which maxout result `predict_chain` reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MaxoutView {
    Upper,
    Lower(MaxoutLowerParams),
    Asymptotic,
}

impl MaxoutView {
    pub fn name(&self) -> &'static str {
        match self {
            MaxoutView::Upper => "upper",
            MaxoutView::Lower(_) => "lower",
            MaxoutView::Asymptotic => "asymptotic",
        }
    }
}

fn log_m(m: usize) -> Result<f64> {
    if m < 2 {
        return Err(Error::arg(format!(
            "log-based maxout results need m >= 2, got {m}"
        )));
    }
    Ok(math::ln(m as f64))
}

/// Per-layer cumulative variance predictions for `spec`.
pub fn predict_chain(spec: &VarChainSpec, view: MaxoutView) -> Result<VariancePrediction> {
    spec.validate()?;
    let single = spec.layers.len() == 1;
    let mut prev = spec.input_variance;
    let mut prev_half: Option<f64> = None;
    let mut kind = BoundKind::ExactUnderAssumptions;
    let mut per_layer = Vec::with_capacity(spec.layers.len());
    for (i, l) in spec.layers.iter().enumerate() {
        let n = l.fan_in as f64;
        let gain = l.activation.gain();
        let base = gain * n * l.weight_variance;
        let (factor, layer_kind) = match (l.method, view) {
            (ChainMethod::Base, _) => (base, BoundKind::ExactUnderAssumptions),
            (ChainMethod::Ien(m), _) => (base / m as f64, BoundKind::ExactUnderAssumptions),
            (ChainMethod::Dropout(p), _) => (base * p, BoundKind::ExactUnderAssumptions),
            (ChainMethod::Maxout(m), MaxoutView::Upper) => (base * m as f64, BoundKind::Upper),
            (ChainMethod::Maxout(m), MaxoutView::Lower(params)) => {
                if !single {
                    return Err(Error::Scope(
                        "maxout lower bound holds for single-layer chains only".into(),
                    )
                    .in_layer(i));
                }
                (
                    n * gain * l.weight_variance * params.c / log_m(m)?,
                    BoundKind::Lower,
                )
            }
            (ChainMethod::Maxout(m), MaxoutView::Asymptotic) => {
                if !single {
                    return Err(Error::Scope(
                        "maxout asymptotic result holds for single-layer chains only".into(),
                    )
                    .in_layer(i));
                }
                let sigma2 = gain * l.weight_variance;
                (
                    n * (PI * PI / 6.0) * sigma2 / (2.0 * log_m(m)?),
                    BoundKind::Asymptotic,
                )
            }
        };
        if kind == BoundKind::ExactUnderAssumptions {
            kind = layer_kind;
        }
        let value = prev * factor;
        let half_factor = match l.method {
            ChainMethod::Dropout(_) => Some(base * 0.5),
            _ => None,
        };
        prev_half = match (prev_half, half_factor) {
            (Some(h), _) => Some(h * half_factor.unwrap_or(factor)),
            (None, Some(hf)) => Some(prev * hf),
            (None, None) => None,
        };
        per_layer.push(LayerPrediction {
            value,
            kind,
            dropout_half_bound: prev_half,
        });
        prev = value;
    }
    Ok(VariancePrediction { per_layer })
}

/// One row of the variance-gain table for a single linear layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainRow {
    pub m: usize,
    pub ien: f64,
    pub dropout: f64,
    pub maxout_upper: f64,
    pub maxout_lower: f64,
    pub maxout_asymptotic: f64,
}

pub fn gain_curve(m_range: &[usize], sigma2: f64, c: f64) -> Result<Vec<GainRow>> {
    if m_range.is_empty() {
        return Err(Error::arg("empty m range"));
    }
    if !(sigma2 > 0.0) || !(c > 0.0) {
        return Err(Error::arg("sigma2 and c must be positive"));
    }
    m_range
        .iter()
        .map(|&m| {
            let ln_m = log_m(m)?;
            Ok(GainRow {
                m,
                ien: 1.0 / m as f64,
                dropout: 0.5,
                maxout_upper: m as f64,
                maxout_lower: c / ln_m,
                maxout_asymptotic: PI * PI * sigma2 / (12.0 * ln_m),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    fn chain(
        method: ChainMethod,
        layers: usize,
        n: usize,
        var_w: f64,
        act: ActivationKind,
    ) -> VarChainSpec {
        VarChainSpec {
            input_variance: 1.0,
            layers: vec![
                ChainLayer {
                    fan_in: n,
                    weight_variance: var_w,
                    activation: act,
                    method,
                };
                layers
            ],
        }
    }

    #[test]
    fn chain_method_strings() {
        for s in ["base", "ien(4)", "maxout(8)", "dropout(0.3)"] {
            assert_eq!(ChainMethod::parse(s).unwrap().to_string(), s);
        }
        assert!(ChainMethod::parse("ien(x)").is_err());
        assert!(ChainMethod::parse("relu").is_err());
    }

    #[test]
    fn product_variance_examples() {
        assert_eq!(product_variance(&[(1.0, 0.0), (1.0, 0.0)]).unwrap(), 1.0);
        assert_eq!(product_variance(&[(0.0, 2.0), (0.0, 3.0)]).unwrap(), 0.0);
        assert_eq!(product_variance(&[(1.0, 1.0), (2.0, 0.0)]).unwrap(), 4.0);
        assert!(product_variance(&[]).is_err());
        assert!(product_variance(&[(-1.0, 0.0)]).is_err());
    }

    #[test]
    fn ien_init_keeps_unit_variance() {
        for m in [1, 2, 4, 8] {
            let spec = chain(
                ChainMethod::Ien(m),
                3,
                100,
                m as f64 / 100.0,
                ActivationKind::Linear,
            );
            let p = predict_chain(&spec, MaxoutView::Upper).unwrap();
            for l in &p.per_layer {
                assert!((l.value - 1.0).abs() < 1e-12);
                assert_eq!(l.kind, BoundKind::ExactUnderAssumptions);
            }
        }
    }

    #[test]
    fn ien_over_base_ratio() {
        for (m, depth) in [(2usize, 2usize), (4, 2), (2, 3), (8, 1)] {
            let spec = chain(
                ChainMethod::Ien(m),
                depth,
                64,
                1.0 / 64.0,
                ActivationKind::Relu,
            );
            let ien = predict_chain(&spec, MaxoutView::Upper).unwrap();
            let base = predict_chain(&spec.as_base(), MaxoutView::Upper).unwrap();
            let ratio = ien.last().value / base.last().value;
            assert!((ratio - 1.0 / (m as f64).powi(depth as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn base_chain_with_ien_init_grows_by_m() {
        let spec = chain(
            ChainMethod::Base,
            3,
            100,
            4.0 / 100.0,
            ActivationKind::Linear,
        );
        let p = predict_chain(&spec, MaxoutView::Upper).unwrap();
        for (l, want) in p.per_layer.iter().zip([4.0, 16.0, 64.0]) {
            assert!((l.value - want).abs() < 1e-12);
        }
    }

    #[test]
    fn maxout_views() {
        let n = 256;
        let spec = chain(
            ChainMethod::Maxout(1000),
            1,
            n,
            1.0 / n as f64,
            ActivationKind::Linear,
        );
        let asym = predict_chain(&spec, MaxoutView::Asymptotic).unwrap();
        let want = (PI * PI / 6.0) / (2.0 * 1000f64.ln());
        assert!((asym.last().value - want).abs() < 1e-12);
        assert!((want - 0.11906).abs() < 1e-5);
        assert_eq!(asym.last().kind, BoundKind::Asymptotic);

        let upper = predict_chain(&spec, MaxoutView::Upper).unwrap();
        assert!((upper.last().value - 1000.0).abs() < 1e-9);
        assert_eq!(upper.last().kind, BoundKind::Upper);

        let lower = predict_chain(&spec, MaxoutView::Lower(MaxoutLowerParams::default())).unwrap();
        assert!((lower.last().value - 1.0 / 1000f64.ln()).abs() < 1e-12);

        let deep = chain(
            ChainMethod::Maxout(4),
            2,
            n,
            1.0 / n as f64,
            ActivationKind::Linear,
        );
        assert!(matches!(
            predict_chain(&deep, MaxoutView::Asymptotic),
            Err(Error::Layer { source, .. }) if matches!(*source, Error::Scope(_))
        ));
        assert!(predict_chain(&deep, MaxoutView::Upper).is_ok());
    }

    #[test]
    fn dropout_factor_and_half_bound() {
        let spec = chain(
            ChainMethod::Dropout(0.3),
            2,
            100,
            0.01,
            ActivationKind::Linear,
        );
        let p = predict_chain(&spec, MaxoutView::Upper).unwrap();
        assert!((p.per_layer[0].value - 0.3).abs() < 1e-12);
        assert!((p.per_layer[1].value - 0.09).abs() < 1e-12);
        assert!((p.per_layer[1].dropout_half_bound.unwrap() - 0.25).abs() < 1e-12);
        let base = predict_chain(&spec.as_base(), MaxoutView::Upper).unwrap();
        assert!(base.per_layer[0].dropout_half_bound.is_none());
    }

    #[test]
    fn invalid_chains() {
        let mut spec = chain(
            ChainMethod::Dropout(1.5),
            1,
            10,
            0.1,
            ActivationKind::Linear,
        );
        assert!(predict_chain(&spec, MaxoutView::Upper).is_err());
        spec.layers.clear();
        assert!(predict_chain(&spec, MaxoutView::Upper).is_err());
    }

    #[test]
    fn gain_curve_rows() {
        let rows = gain_curve(&[2, 4, 8], 1.0, 1.0).unwrap();
        assert_eq!(
            (rows[0].ien, rows[0].dropout, rows[0].maxout_upper),
            (0.5, 0.5, 2.0)
        );
        assert!(rows[1].ien < rows[1].dropout);
        assert_eq!(rows[2].ien, 0.125);
        assert!(gain_curve(&[1, 2], 1.0, 1.0).is_err());
        assert!(gain_curve(&[], 1.0, 1.0).is_err());
    }

    #[test]
    fn asymptotic_gain_at_e_squared() {
        // ln(e²) = 2, so π²σ²/(12·2) = π²/24
        let v = PI * PI / (12.0 * 2.0);
        assert!((v - 0.41123).abs() < 1e-5);
    }

    #[test]
    fn lower_calibration() {
        let exact = 1.0 - 1.0 / PI;
        let params = MaxoutLowerParams::calibrate(2, exact).unwrap();
        assert!((params.c / 2f64.ln() - exact).abs() < 1e-15);
        assert!(MaxoutLowerParams::calibrate(1, 1.0).is_err());
    }
}
