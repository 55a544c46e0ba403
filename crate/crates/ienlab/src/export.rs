//! CSV and JSON-lines serialization of results. Column order is fixed.

use ienlab_core::train::{RunRecord, SummaryTable};
use ienlab_core::variance::{GainRow, McEstimate};
use serde::Serialize;

/// Shared `method,m,predicted,empirical,std_err` prefix; Monte Carlo columns
/// are empty when no estimate was run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainCsvRow {
    pub method: &'static str,
    pub m: usize,
    pub predicted: f64,
    pub empirical: Option<f64>,
    pub std_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VarianceCsvRow {
    pub method: String,
    pub m: usize,
    pub predicted: f64,
    pub empirical: Option<f64>,
    pub std_err: Option<f64>,
    pub layer: usize,
    pub bound_kind: &'static str,
    /// `predicted` over the same chain with every method set to base.
    pub ratio_to_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryCsvRow<'a> {
    pub method: &'a str,
    pub m: usize,
    pub seeds: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub params_train: usize,
    pub params_fused: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochLine<'a> {
    pub method: &'a str,
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub test_error: f64,
    pub final_test_error: f64,
    pub params_train: usize,
    pub params_fused: usize,
}

/// Long-format gain table: one row per (curve, m). `maxout_mc` optionally
/// carries a `Var[max]` estimate per row, reported against every maxout curve.
pub fn gain_rows(rows: &[GainRow], maxout_mc: Option<&[McEstimate]>) -> Vec<GainCsvRow> {
    let mut out = Vec::with_capacity(rows.len() * 5);
    for (i, r) in rows.iter().enumerate() {
        let mc = maxout_mc.map(|e| &e[i]);
        let curves = [
            ("ien", r.ien, None),
            ("dropout", r.dropout, None),
            ("maxout_upper", r.maxout_upper, mc),
            ("maxout_lower", r.maxout_lower, mc),
            ("maxout_asymptotic", r.maxout_asymptotic, mc),
        ];
        for (method, predicted, est) in curves {
            out.push(GainCsvRow {
                method,
                m: r.m,
                predicted,
                empirical: est.map(|e| e.variance),
                std_err: est.map(|e| e.standard_error),
            });
        }
    }
    out
}

pub fn summary_rows(table: &SummaryTable) -> Vec<SummaryCsvRow<'_>> {
    table
        .rows
        .iter()
        .map(|r| SummaryCsvRow {
            method: &r.method,
            m: r.m,
            seeds: r.seeds,
            mean_error: r.mean_error,
            std_error: r.std_error,
            params_train: r.params_train,
            params_fused: r.params_fused,
        })
        .collect()
}

pub fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| csv::Error::from(e.into_error()))
}

pub fn to_json<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(rows).expect("rows serialize");
    v.push(b'\n');
    v
}

/// One JSON object per epoch.
pub fn run_jsonl(records: &[&RunRecord]) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        for e in &r.epochs {
            let line = EpochLine {
                method: &r.method,
                seed: r.seed,
                epoch: e.epoch,
                train_loss: e.train_loss,
                test_error: e.test_error,
                final_test_error: r.final_test_error,
                params_train: r.params_train,
                params_fused: r.params_fused,
            };
            serde_json::to_writer(&mut out, &line).expect("epoch line serializes");
            out.push(b'\n');
        }
    }
    out
}
