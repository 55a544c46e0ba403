//! Command-line front end. Exit codes: 0 success, 1 domain error, 2 usage.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ienlab_core::gradcheck::{run_gradcheck, GradcheckOptions, GRADCHECK_OPS};
use ienlab_core::layers::{fuse_ien, LayerKind, Mode, Model, Phase};
use ienlab_core::train::{evaluate, run_cell, Method};
use ienlab_core::variance::{
    gain_curve, max_gaussian_stats, predict_chain, ChainMethod, MaxoutLowerParams, MaxoutView,
    McConfig,
};
use ienlab_core::{SeededRng, Tensor};
use serde::Serialize;

use crate::config::{ChainConfig, ConfigError, ExperimentConfig};
use crate::export::{gain_rows, run_jsonl, summary_rows, to_csv, to_json, VarianceCsvRow};
use crate::io::{atomic_write, load_checkpoint, save_checkpoint};
use crate::parallel;

#[derive(Debug, Parser)]
#[command(name = "ienlab", version, about = "Inner ensemble network experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every differentiable op and a full model.
    Gradcheck(GradcheckArgs),
    /// Predicted and Monte Carlo response variance per layer of a chain.
    VarianceReport(VarianceArgs),
    /// Variance gain of IEN, dropout and maxout as a function of m.
    GainCurve(GainArgs),
    /// Trains one (method, seed) cell and writes its checkpoint.
    Train(TrainArgs),
    /// Averages IEN replicas of a checkpoint and reports the output change.
    Fuse(FuseArgs),
    /// Test error of a checkpoint on an experiment's dataset.
    Eval(EvalArgs),
    /// Trains every (method, seed) cell and writes the summary table.
    Matrix(MatrixArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random instances per op.
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct VarianceArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 10_000, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maxout lower-bound constant for single-layer chains.
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct GainArgs {
    /// Inclusive range `lo..hi` with `lo >= 2`.
    #[arg(long, value_parser = parse_m_range)]
    pub m: RangeInclusive<usize>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma2: f64,
    #[arg(long, default_value_t = 1.0)]
    pub c: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// When positive, fills the maxout rows with a Monte Carlo `Var[max]`.
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Defaults to the first configured method.
    #[arg(long)]
    pub method: Option<String>,
    /// Defaults to the first configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FuseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Random inputs used for the discrepancy report.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u64).range(1..))]
    pub inputs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-sample input shape, required when the first layer is a convolution.
    #[arg(long, value_delimiter = ',')]
    pub input_shape: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub config: PathBuf,
    /// Writes `eval.json` here when given.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct MatrixArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub output_dir: PathBuf,
    /// Overrides the configured global seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_m_range(s: &str) -> Result<RangeInclusive<usize>, String> {
    let (lo, hi) = s.split_once("..").ok_or("expected lo..hi")?;
    let lo: usize = lo
        .trim()
        .parse()
        .map_err(|_| format!("bad lower bound {lo:?}"))?;
    let hi: usize = hi
        .trim()
        .parse()
        .map_err(|_| format!("bad upper bound {hi:?}"))?;
    if lo < 2 {
        return Err("m must be at least 2 (ln m vanishes at m = 1)".into());
    }
    if hi < lo {
        return Err("empty range".into());
    }
    Ok(lo..=hi)
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Domain(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }
}

fn domain(e: impl std::fmt::Display) -> CliError {
    CliError::Domain(e.to_string())
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::EmptyChain { .. } => CliError::Usage(e.to_string()),
            _ => CliError::Domain(e.to_string()),
        }
    }
}

/// Runs a parsed command; the returned text goes to stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Gradcheck(a) => gradcheck(a),
        Command::VarianceReport(a) => variance_report(a),
        Command::GainCurve(a) => gain(a),
        Command::Train(a) => train(a),
        Command::Fuse(a) => fuse(a),
        Command::Eval(a) => eval(a),
        Command::Matrix(a) => matrix(a),
    }
}

fn write_out(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| domain(format!("{}: {e}", dir.display())))?;
    }
    atomic_write(path, bytes).map_err(domain)
}

fn encode<T: Serialize>(rows: &[T], format: Format) -> Result<Vec<u8>, CliError> {
    match format {
        Format::Csv => to_csv(rows).map_err(domain),
        Format::Json => Ok(to_json(rows)),
    }
}

fn gradcheck(a: GradcheckArgs) -> Result<String, CliError> {
    if let Some(op) = &a.inject_fault {
        if !GRADCHECK_OPS.contains(&op.as_str()) {
            return Err(CliError::Usage(format!("unknown op {op:?}")));
        }
    }
    let report = run_gradcheck(&GradcheckOptions {
        seed: a.seed,
        trials: a.trials as usize,
        inject_fault: a.inject_fault,
    })
    .map_err(domain)?;
    let mut out = String::new();
    for r in &report {
        let status = if r.passed() { "ok" } else { "FAIL" };
        writeln!(
            out,
            "{:<22} {:>3} instances  max rel error {:.3e}  {status}",
            r.op, r.instances, r.max_rel_error
        )
        .unwrap();
    }
    let failed: Vec<&str> = report
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.op)
        .collect();
    if failed.is_empty() {
        Ok(out)
    } else {
        print!("{out}");
        Err(CliError::Domain(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

fn variance_report(a: VarianceArgs) -> Result<String, CliError> {
    let (spec, width) = ChainConfig::load(&a.config)?;
    let base = predict_chain(&spec.as_base(), MaxoutView::Upper).map_err(domain)?;
    let single_maxout =
        spec.layers.len() == 1 && matches!(spec.layers[0].method, ChainMethod::Maxout(m) if m >= 2);
    let mut views = vec![MaxoutView::Upper];
    if single_maxout {
        views.push(MaxoutView::Lower(
            MaxoutLowerParams::new(a.c).map_err(|e| CliError::Usage(e.to_string()))?,
        ));
        views.push(MaxoutView::Asymptotic);
    }
    let mc = parallel::chain_variance(
        &parallel::pool(),
        &spec,
        McConfig::new(a.trials as usize, width),
        &SeededRng::new(a.seed),
    )
    .map_err(domain)?;
    let mut rows = Vec::new();
    for view in views {
        let pred = predict_chain(&spec, view).map_err(domain)?;
        for (i, (p, est)) in pred.per_layer.iter().zip(&mc).enumerate() {
            let layer = &spec.layers[i];
            rows.push(VarianceCsvRow {
                method: layer.method.to_string(),
                m: layer.method.m(),
                predicted: p.value,
                empirical: Some(est.variance),
                std_err: Some(est.standard_error),
                layer: i + 1,
                bound_kind: p.kind.name(),
                ratio_to_base: p.value / base.per_layer[i].value,
            });
            if let Some(half) = p.dropout_half_bound.filter(|_| view == MaxoutView::Upper) {
                rows.push(VarianceCsvRow {
                    method: layer.method.to_string(),
                    m: layer.method.m(),
                    predicted: half,
                    empirical: Some(est.variance),
                    std_err: Some(est.standard_error),
                    layer: i + 1,
                    bound_kind: "upper_half",
                    ratio_to_base: half / base.per_layer[i].value,
                });
            }
        }
    }
    write_out(&a.out, &encode(&rows, a.format)?)?;
    let last = rows
        .iter()
        .rfind(|r| r.bound_kind != "upper_half")
        .expect("nonempty");
    Ok(format!(
        "{} rows -> {}\nfinal layer: predicted {:.6}, empirical {:.6}, ratio to base {:.6}\n",
        rows.len(),
        a.out.display(),
        last.predicted,
        last.empirical.unwrap_or(f64::NAN),
        last.ratio_to_base
    ))
}

fn gain(a: GainArgs) -> Result<String, CliError> {
    if !(a.sigma2 > 0.0) || !(a.c > 0.0) {
        return Err(CliError::Usage("--sigma2 and --c must be positive".into()));
    }
    if a.trials != 0 && a.trials < 10_000 {
        return Err(CliError::Usage(
            "--trials must be 0 or at least 10000".into(),
        ));
    }
    let ms: Vec<usize> = a.m.clone().collect();
    let rows = gain_curve(&ms, a.sigma2, a.c).map_err(domain)?;
    let mc = if a.trials > 0 {
        let root = SeededRng::new(a.seed);
        let est = ms
            .iter()
            .map(|&m| max_gaussian_stats(m, a.sigma2, a.trials, &root.split(m as u64)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(domain)?;
        Some(est)
    } else {
        None
    };
    let csv_rows = gain_rows(&rows, mc.as_deref());
    write_out(&a.out, &encode(&csv_rows, a.format)?)?;
    Ok(format!(
        "{} rows for m in {}..={} -> {}\n",
        csv_rows.len(),
        a.m.start(),
        a.m.end(),
        a.out.display()
    ))
}

fn train(a: TrainArgs) -> Result<String, CliError> {
    let exp = ExperimentConfig::load(&a.config)?;
    let method = match &a.method {
        Some(m) => Method::parse(m).map_err(|e| CliError::Usage(e.to_string()))?,
        None => exp.methods[0],
    };
    let seed = a.seed.unwrap_or(exp.seeds[0]);
    let (model, record) = run_cell(
        exp.global_seed,
        method,
        seed,
        &exp.mlp,
        &exp.train,
        &exp.data,
    )
    .map_err(domain)?;
    let ckpt = a.output_dir.join("model.ienw");
    let runs = a.output_dir.join("run.jsonl");
    write_out(&ckpt, &ienlab_core::layers::encode_checkpoint(&model))?;
    write_out(&runs, &run_jsonl(&[&record]))?;
    Ok(format!(
        "{method} seed {seed}: test error {:.4}, params train {} fused {}\n",
        record.final_test_error, record.params_train, record.params_fused
    ))
}

#[derive(Serialize)]
struct FuseReport {
    max_discrepancy: f64,
    inputs: usize,
    params_unfused: usize,
    params_fused: usize,
}

fn fuse(a: FuseArgs) -> Result<String, CliError> {
    let model = load_checkpoint(&a.checkpoint).map_err(domain)?;
    let sample_shape = match (&a.input_shape, model.weighted().next().map(|w| w.spec)) {
        (Some(shape), _) => shape.clone(),
        (None, Some(spec)) if matches!(spec.kind, LayerKind::Dense) => vec![spec.fan_in],
        (None, _) => {
            return Err(CliError::Usage(
                "--input-shape is required for convolutional models".into(),
            ))
        }
    };
    let fused = fuse_ien(&model).map_err(domain)?;
    let mut shape = vec![a.inputs as usize];
    shape.extend(&sample_shape);
    let x = Tensor::randn(&shape, 1.0, &mut SeededRng::new(a.seed));
    let unused = SeededRng::new(0);
    let y0 = model.forward(&x, Mode::Eval, &unused).map_err(domain)?;
    let y1 = fused.forward(&x, Mode::Eval, &unused).map_err(domain)?;
    let report = FuseReport {
        max_discrepancy: y0.max_abs_diff(&y1).map_err(domain)?,
        inputs: a.inputs as usize,
        params_unfused: model.count_params(Phase::Train),
        params_fused: fused.count_params(Phase::Train),
    };
    std::fs::create_dir_all(&a.output_dir).map_err(domain)?;
    save_checkpoint(&fused, &a.output_dir.join("fused.ienw")).map_err(domain)?;
    let mut json = serde_json::to_vec_pretty(&report).map_err(domain)?;
    json.push(b'\n');
    write_out(&a.output_dir.join("fuse_report.json"), &json)?;
    Ok(format!(
        "max |fused - unfused| = {:.3e} over {} inputs; params {} -> {}\n",
        report.max_discrepancy, report.inputs, report.params_unfused, report.params_fused
    ))
}

#[derive(Serialize)]
struct EvalReport {
    test_error: f64,
    test_samples: usize,
}

fn eval(a: EvalArgs) -> Result<String, CliError> {
    let model: Model = load_checkpoint(&a.checkpoint).map_err(domain)?;
    let exp = ExperimentConfig::load(&a.config)?;
    let report = EvalReport {
        test_error: evaluate(&model, &exp.data.test).map_err(domain)?,
        test_samples: exp.data.test.len(),
    };
    if let Some(dir) = &a.output_dir {
        let mut json = serde_json::to_vec_pretty(&report).map_err(domain)?;
        json.push(b'\n');
        write_out(&dir.join("eval.json"), &json)?;
    }
    Ok(format!(
        "test error {} over {} samples\n",
        report.test_error, report.test_samples
    ))
}

fn matrix(a: MatrixArgs) -> Result<String, CliError> {
    let exp = ExperimentConfig::load(&a.config)?;
    if exp.seeds.len() < 2 {
        return Err(CliError::Usage(
            "the experiment matrix needs at least two seeds".into(),
        ));
    }
    let global = a.seed.unwrap_or(exp.global_seed);
    let (table, records) = parallel::experiment_matrix(
        &parallel::pool(),
        global,
        &exp.methods,
        &exp.seeds,
        &exp.mlp,
        &exp.train,
        &exp.data,
    )
    .map_err(domain)?;
    let refs: Vec<_> = records.iter().map(|(_, r)| r).collect();
    write_out(
        &a.output_dir.join("summary.csv"),
        &to_csv(&summary_rows(&table)).map_err(domain)?,
    )?;
    write_out(&a.output_dir.join("runs.jsonl"), &run_jsonl(&refs))?;
    let mut out = String::new();
    for r in &table.rows {
        writeln!(
            out,
            "{:<18} seeds {:>2}  error {:.4} ± {:.4}  params {} / {}",
            r.method, r.seeds, r.mean_error, r.std_error, r.params_train, r.params_fused
        )
        .unwrap();
    }
    Ok(out)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
