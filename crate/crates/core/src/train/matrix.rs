use alloc::boxed::Box;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::data::SplitDataset;
use super::sgd::{train, RunRecord, TrainConfig};
use crate::error::{Error, Result};
use crate::layers::{DropoutMode, DropoutSpec, LayerDef, LayerSpec, Model};
use crate::math;

/// Layer-wrapping recipe applied to an MLP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    Base,
    /// IEN on every hidden layer; the classifier head stays plain.
    Ien(usize),
    /// IEN on every layer including the head.
    IenFc(usize),
    /// Maxout on every hidden layer.
    Maxout(usize),
    /// Inverted dropout after every hidden activation.
    DropoutEverywhere(f64),
    IenDropout(usize, f64),
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Base => "base",
            Method::Ien(_) => "ien",
            Method::IenFc(_) => "ien+fc",
            Method::Maxout(_) => "maxout",
            Method::DropoutEverywhere(_) => "dropout",
            Method::IenDropout(..) => "ien+dropout",
        }
    }

    pub fn m(&self) -> usize {
        match *self {
            Method::Base | Method::DropoutEverywhere(_) => 1,
            Method::Ien(m) | Method::IenFc(m) | Method::Maxout(m) | Method::IenDropout(m, _) => m,
        }
    }

    fn keep(&self) -> Option<f64> {
        match *self {
            Method::DropoutEverywhere(p) | Method::IenDropout(_, p) => Some(p),
            _ => None,
        }
    }

    /// Stable identifier mixing the kind, `m` and the keep probability.
    pub fn id(&self) -> u64 {
        let kind = match self {
            Method::Base => 0u64,
            Method::Ien(_) => 1,
            Method::IenFc(_) => 2,
            Method::Maxout(_) => 3,
            Method::DropoutEverywhere(_) => 4,
            Method::IenDropout(..) => 5,
        };
        let p = self.keep().map_or(0, f64::to_bits);
        mix(mix(kind << 32 | self.m() as u64) ^ p)
    }

    /// Parses `base`, `ien(4)`, `ien+fc(2)`, `maxout(3)`, `dropout(0.5)`,
    /// `ien+dropout(4,0.5)`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "base" {
            return Ok(Method::Base);
        }
        let bad = || Error::arg(format!("unrecognized method {s:?}"));
        let (head, rest) = s.split_once('(').ok_or_else(bad)?;
        let args: Vec<&str> = rest
            .strip_suffix(')')
            .ok_or_else(bad)?
            .split(',')
            .map(str::trim)
            .collect();
        let m = |a: &str| a.parse::<usize>().map_err(|_| bad());
        let p = |a: &str| a.parse::<f64>().map_err(|_| bad());
        let method = match (head, args.as_slice()) {
            ("ien", [a]) => Method::Ien(m(a)?),
            ("ien+fc", [a]) => Method::IenFc(m(a)?),
            ("maxout", [a]) => Method::Maxout(m(a)?),
            ("dropout", [a]) => Method::DropoutEverywhere(p(a)?),
            ("ien+dropout", [a, b]) => Method::IenDropout(m(a)?, p(b)?),
            _ => return Err(bad()),
        };
        method.validate()?;
        Ok(method)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m() == 0 {
            return Err(Error::arg("m must be at least 1"));
        }
        if let Some(p) = self.keep() {
            DropoutSpec::new(p, DropoutMode::Inverted)?;
        }
        Ok(())
    }
}

impl core::fmt::Display for Method {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match *self {
            Method::Base => f.write_str("base"),
            Method::DropoutEverywhere(p) => write!(f, "dropout({p})"),
            Method::IenDropout(m, p) => write!(f, "ien+dropout({m},{p})"),
            other => write!(f, "{}({})", other.name(), other.m()),
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Training seed for one matrix cell.
pub fn cell_seed(global: u64, method_id: u64, seed: u64) -> u64 {
    mix(mix(global ^ mix(method_id)) ^ seed)
}

/// Dense relu MLP; the final layer emits logits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub bias: bool,
}

impl MlpConfig {
    pub fn layers(&self, method: Method) -> Result<Vec<LayerDef>> {
        method.validate()?;
        if self.input_dim == 0 || self.classes < 2 || self.hidden.contains(&0) {
            return Err(Error::arg(
                "mlp widths must be positive with at least two classes",
            ));
        }
        let mut defs = Vec::new();
        let mut fan_in = self.input_dim;
        for &width in &self.hidden {
            let mut spec = LayerSpec::dense(fan_in, width).relu();
            spec = match method {
                Method::Ien(m) | Method::IenFc(m) | Method::IenDropout(m, _) => spec.ien(m),
                Method::Maxout(m) => spec.maxout(m),
                _ => spec,
            };
            defs.push(LayerDef::Weighted(self.biased(spec)));
            if let Some(p) = method.keep() {
                defs.push(LayerDef::Dropout(DropoutSpec::new(
                    p,
                    DropoutMode::Inverted,
                )?));
            }
            fan_in = width;
        }
        let mut head = LayerSpec::dense(fan_in, self.classes);
        if let Method::IenFc(m) = method {
            head = head.ien(m);
        }
        defs.push(LayerDef::Weighted(self.biased(head)));
        Ok(defs)
    }

    fn biased(&self, spec: LayerSpec) -> LayerSpec {
        if self.bias {
            spec.with_bias()
        } else {
            spec
        }
    }
}

/// Trains one (method, seed) cell; errors carry the cell identity.
pub fn run_cell(
    global_seed: u64,
    method: Method,
    seed: u64,
    mlp: &MlpConfig,
    cfg: &TrainConfig,
    data: &SplitDataset,
) -> Result<(Model, RunRecord)> {
    let wrap = |e: Error| Error::Cell {
        method: method.to_string(),
        seed,
        source: Box::new(e),
    };
    let defs = mlp.layers(method).map_err(wrap)?;
    let cfg = TrainConfig {
        seed: cell_seed(global_seed, method.id(), seed),
        ..*cfg
    };
    let (model, mut record) = train(&defs, &cfg, data, &method.to_string()).map_err(wrap)?;
    record.seed = seed;
    Ok((model, record))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub m: usize,
    pub seeds: usize,
    pub mean_error: f64,
    /// Sample standard deviation of the final test error across seeds.
    pub std_error: f64,
    pub params_train: usize,
    pub params_fused: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SummaryTable {
    pub rows: Vec<SummaryRow>,
}

impl SummaryTable {
    pub fn row(&self, method: &str, m: usize) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.method == method && r.m == m)
    }
}

/// Groups records by method tag in first-appearance order.
pub fn summarize(records: &[(Method, RunRecord)]) -> Result<SummaryTable> {
    let mut order: Vec<Method> = Vec::new();
    for (method, _) in records {
        if !order.contains(method) {
            order.push(*method);
        }
    }
    let mut rows = Vec::with_capacity(order.len());
    for method in order {
        let cell: Vec<&RunRecord> = records
            .iter()
            .filter(|(m, _)| *m == method)
            .map(|(_, r)| r)
            .collect();
        if cell.len() < 2 {
            return Err(Error::arg(format!("{method} has fewer than two seeds")));
        }
        let errors: Vec<f64> = cell.iter().map(|r| r.final_test_error).collect();
        let (mean, var) = math::mean_var(&errors);
        rows.push(SummaryRow {
            method: method.to_string(),
            m: method.m(),
            seeds: cell.len(),
            mean_error: mean,
            std_error: math::sqrt(var),
            params_train: cell[0].params_train,
            params_fused: cell[0].params_fused,
        });
    }
    Ok(SummaryTable { rows })
}

/// Trains every (method, seed) cell sequentially and summarizes.
pub fn experiment_matrix(
    global_seed: u64,
    methods: &[Method],
    seeds: &[u64],
    mlp: &MlpConfig,
    cfg: &TrainConfig,
    data: &SplitDataset,
) -> Result<(SummaryTable, Vec<(Method, RunRecord)>)> {
    if seeds.len() < 2 {
        return Err(Error::arg("the experiment matrix needs at least two seeds"));
    }
    if methods.is_empty() {
        return Err(Error::arg("no methods given"));
    }
    let mut records = Vec::with_capacity(methods.len() * seeds.len());
    for &method in methods {
        for &seed in seeds {
            let (_, record) = run_cell(global_seed, method, seed, mlp, cfg, data)?;
            records.push((method, record));
        }
    }
    Ok((summarize(&records)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use crate::train::{gen_blobs, BlobsConfig};
    use alloc::vec;

    fn mlp() -> MlpConfig {
        MlpConfig {
            input_dim: 6,
            hidden: vec![12, 12],
            classes: 3,
            bias: true,
        }
    }

    fn small() -> (SplitDataset, TrainConfig) {
        let data = gen_blobs(
            &BlobsConfig {
                num_classes: 3,
                dims: 6,
                samples_per_class: 20,
                spread: 0.2,
                separation: 1.0,
            },
            &SeededRng::new(3),
        )
        .unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 2,
            batch_size: 8,
            seed: 0,
        };
        (data, cfg)
    }

    #[test]
    fn parse_round_trips() {
        for s in [
            "base",
            "ien(4)",
            "ien+fc(2)",
            "maxout(3)",
            "dropout(0.5)",
            "ien+dropout(4,0.5)",
        ] {
            assert_eq!(Method::parse(s).unwrap().to_string(), s);
        }
        for s in ["ien", "ien(0)", "dropout(1.5)", "maxout(2,3)", "lstm(2)"] {
            assert!(Method::parse(s).is_err(), "{s}");
        }
    }

    #[test]
    fn ids_are_distinct() {
        let methods = [
            Method::Base,
            Method::Ien(2),
            Method::Ien(4),
            Method::IenFc(4),
            Method::Maxout(4),
            Method::DropoutEverywhere(0.5),
            Method::DropoutEverywhere(0.8),
            Method::IenDropout(4, 0.5),
        ];
        for (i, a) in methods.iter().enumerate() {
            for b in &methods[i + 1..] {
                assert_ne!(a.id(), b.id());
            }
        }
    }

    #[test]
    fn layer_recipes() {
        let cfg = mlp();
        let ien = cfg.layers(Method::Ien(4)).unwrap();
        let wrappers: Vec<usize> = ien
            .iter()
            .map(|d| match d {
                LayerDef::Weighted(s) => s.m(),
                LayerDef::Dropout(_) => 0,
            })
            .collect();
        assert_eq!(wrappers, [4, 4, 1]);
        let fc = cfg.layers(Method::IenFc(2)).unwrap();
        assert!(fc
            .iter()
            .all(|d| matches!(d, LayerDef::Weighted(s) if s.m() == 2)));
        let drop = cfg.layers(Method::IenDropout(2, 0.5)).unwrap();
        assert_eq!(drop.len(), 5);
        assert!(matches!(drop[1], LayerDef::Dropout(_)));
        assert!(matches!(drop[4], LayerDef::Weighted(_)));
    }

    #[test]
    fn matrix_schema() {
        let (data, cfg) = small();
        let (table, records) = experiment_matrix(
            7,
            &[Method::Base, Method::Ien(4)],
            &[0, 1, 2, 3, 4],
            &mlp(),
            &cfg,
            &data,
        )
        .unwrap();
        assert_eq!(records.len(), 10);
        assert_eq!(table.rows.len(), 2);
        let ien = table.row("ien(4)", 4).unwrap();
        assert_eq!(ien.seeds, 5);
        assert_eq!(
            ien.params_train,
            4 * (6 * 12 + 12 + 12 * 12 + 12) + 12 * 3 + 3
        );
        assert_eq!(ien.params_fused, table.row("base", 1).unwrap().params_fused);
        for row in &table.rows {
            assert!((0.0..=1.0).contains(&row.mean_error));
            assert!(row.std_error >= 0.0);
        }
    }

    #[test]
    fn matrix_needs_two_seeds() {
        let (data, cfg) = small();
        assert!(experiment_matrix(0, &[Method::Base], &[1], &mlp(), &cfg, &data).is_err());
    }

    #[test]
    fn cell_errors_carry_identity() {
        let (data, mut cfg) = small();
        cfg.learning_rate = 1e200;
        let err = run_cell(0, Method::Maxout(2), 3, &mlp(), &cfg, &data).unwrap_err();
        match err {
            Error::Cell {
                method,
                seed,
                source,
            } => {
                assert_eq!((method.as_str(), seed), ("maxout(2)", 3));
                assert!(matches!(*source, Error::Diverged { .. }));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn dropout_everywhere_runs() {
        let (data, cfg) = small();
        let (_, record) =
            run_cell(0, Method::DropoutEverywhere(0.5), 0, &mlp(), &cfg, &data).unwrap();
        assert!((0.0..=1.0).contains(&record.final_test_error));
    }
}
