//! One pass/fail line per acceptance criterion. Exits non-zero if any fails.

use std::f64::consts::PI;
use std::process::Command;
use std::time::{Duration, Instant};

use ienlab::parallel;
use ienlab_core::gradcheck::{run_gradcheck, GradcheckOptions, GRADCHECK_TOLERANCE};
use ienlab_core::layers::{
    fuse_external, fuse_ien, ActivationKind, LayerDef, LayerSpec, Mode, Model, Phase, Wrapper,
};
use ienlab_core::train::{
    evaluate, gen_blobs, outer_ensemble_eval, run_cell, BlobsConfig, Method, MlpConfig,
    SplitDataset, TrainConfig,
};
use ienlab_core::variance::{
    max_gaussian_stats, predict_chain, ChainLayer, ChainMethod, MaxoutLowerParams, MaxoutView,
    McConfig, McEstimate, VarChainSpec,
};
use ienlab_core::{SeededRng, Tensor};

// Standard blobs task, calibrated once and frozen.
const DATA_SEED: u64 = 2024;
const GLOBAL_SEED: u64 = 1;
const SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
const COLLAPSE_SEEDS: [u64; 4] = [100, 101, 102, 103];

fn standard_data() -> SplitDataset {
    gen_blobs(&BlobsConfig::standard(), &SeededRng::new(DATA_SEED)).unwrap()
}

fn standard_mlp() -> MlpConfig {
    MlpConfig {
        input_dim: 32,
        hidden: vec![64; 4],
        classes: 10,
        bias: true,
    }
}

fn standard_train() -> TrainConfig {
    TrainConfig {
        learning_rate: 0.3,
        epochs: 30,
        batch_size: 32,
        seed: 0,
    }
}

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within_time(outcome: Outcome, elapsed: Duration, limit: Option<Duration>) -> Outcome {
    match (outcome, limit) {
        (Ok(d), Some(l)) if elapsed > l => Err(format!("{d}; exceeded {}s", l.as_secs())),
        (o, _) => o,
    }
}

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

fn mc(spec: &VarChainSpec, trials: usize, width: usize, seed: u64) -> Vec<McEstimate> {
    parallel::chain_variance(
        &parallel::pool(),
        spec,
        McConfig::new(trials, width),
        &SeededRng::new(seed),
    )
    .unwrap()
}

fn random_ien_model(rng: &mut SeededRng, depth: usize, m: usize) -> Model {
    let mut widths = vec![4 + rng.index(29)];
    for _ in 0..depth {
        widths.push(2 + rng.index(31));
    }
    let bias = rng.bernoulli(0.5);
    let defs: Vec<LayerDef> = widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let mut spec = LayerSpec::dense(w[0], w[1]).ien(m);
            if i + 1 < depth {
                spec = spec.relu();
            }
            if bias {
                spec = spec.with_bias();
            }
            LayerDef::Weighted(spec)
        })
        .collect();
    let mut model = Model::initialized(&defs, &rng.split(0)).unwrap();
    let mut brng = rng.split(1);
    for p in model.params_mut() {
        if p.rank() == 1 {
            brng.fill_normal(p.data_mut(), 0.5);
        }
    }
    model
}

fn fusion_exactness() -> Outcome {
    let mut rng = SeededRng::new(1);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let depth = 2 + i % 3;
        let m = [2, 4, 8][i / 3 % 3];
        let model = random_ien_model(&mut rng, depth, m);
        let fused = fuse_ien(&model).unwrap();
        let n = model.weighted().next().unwrap().spec.fan_in;
        let x = Tensor::randn(&[100, n], 1.0, &mut rng);
        let a = model.forward(&x, Mode::Eval, &rng).unwrap();
        let b = fused.forward(&x, Mode::Eval, &rng).unwrap();
        worst = worst.max(a.max_abs_diff(&b).unwrap());
    }
    check(
        worst <= 1e-12,
        format!("20 models x 100 inputs, max |fused - unfused| = {worst:.2e}"),
    )
}

fn variance_factor() -> Outcome {
    let (n, trials) = (256, 10_000);
    let base = mc(
        &chain(
            ChainMethod::Base,
            3,
            n,
            1.0 / n as f64,
            ActivationKind::Linear,
        ),
        trials,
        n,
        20,
    );
    let mut lines = Vec::new();
    let mut ok = true;
    for m in [2usize, 4] {
        let ien = mc(
            &chain(
                ChainMethod::Ien(m),
                3,
                n,
                1.0 / n as f64,
                ActivationKind::Linear,
            ),
            trials,
            n,
            21 + m as u64,
        );
        for depth in 1..=3 {
            let (a, b) = (&ien[depth - 1], &base[depth - 1]);
            let ratio = a.variance / b.variance;
            let se = ratio
                * ((a.standard_error / a.variance).powi(2)
                    + (b.standard_error / b.variance).powi(2))
                .sqrt();
            let target = 1.0 / (m as f64).powi(depth as i32);
            let z = (ratio - target).abs() / se;
            let rel = (ratio / target - 1.0).abs();
            ok &= z <= 3.0 && rel <= 0.05;
            lines.push(format!(
                "m={m} L-1={depth}: {ratio:.5} vs {target:.5} ({z:.1} se, {:.1}%)",
                rel * 100.0
            ));
        }
    }
    check(ok, lines.join("; "))
}

fn init_neutrality() -> Outcome {
    let n = 256;
    let mut lines = Vec::new();
    let mut ok = true;
    for m in [2usize, 4] {
        let var_w = m as f64 / (0.5 * n as f64);
        let spec = chain(ChainMethod::Ien(m), 4, n, var_w, ActivationKind::Relu);
        let pred = predict_chain(&spec, MaxoutView::Upper).unwrap();
        let est = mc(&spec, 10_000, n, 30 + m as u64);
        let vals: Vec<f64> = est.iter().map(|e| e.variance).collect();
        ok &= vals.iter().all(|v| (0.9..=1.1).contains(v));
        ok &= pred.per_layer.iter().all(|p| (p.value - 1.0).abs() < 1e-12);
        lines.push(format!(
            "m={m}: {}",
            vals.iter()
                .map(|v| format!("{v:.4}"))
                .collect::<Vec<_>>()
                .join(" ")
        ));
    }
    check(ok, lines.join("; "))
}

fn dropout_bound() -> Outcome {
    let n = 256;
    let mut lines = Vec::new();
    let mut ok = true;
    for p in [0.3, 0.5, 0.8] {
        let spec = chain(
            ChainMethod::Dropout(p),
            2,
            n,
            1.0 / n as f64,
            ActivationKind::Linear,
        );
        let base = predict_chain(&spec.as_base(), MaxoutView::Upper).unwrap();
        let est = mc(&spec, 10_000, n, 40);
        for (k, (e, b)) in est.iter().zip(&base.per_layer).enumerate() {
            let bound = b.value * p.powi(k as i32 + 1);
            ok &= e.variance <= bound + 3.0 * e.standard_error;
            if p == 0.5 {
                let rel = (e.variance / (b.value * 0.5f64.powi(k as i32 + 1)) - 1.0).abs();
                ok &= rel <= 0.05;
                lines.push(format!(
                    "p=0.5 layer {}: {:.4} vs half-factor {:.4} ({:.1}%)",
                    k + 1,
                    e.variance,
                    bound,
                    rel * 100.0
                ));
            } else {
                lines.push(format!(
                    "p={p} layer {}: {:.4} (bound {:.4}, se {:.4})",
                    k + 1,
                    e.variance,
                    bound,
                    e.standard_error
                ));
            }
        }
    }
    check(ok, lines.join("; "))
}

/// `Var[max of m standard normals]` by Simpson quadrature of the density
/// `m φ(x) Φ(x)^(m-1)`.
fn var_max_quadrature(m: usize) -> f64 {
    let (lo, hi, steps) = (-12.0f64, 12.0f64, 240_000usize);
    let dx = (hi - lo) / steps as f64;
    let mut moments = [0.0f64; 3];
    for i in 0..=steps {
        let x = lo + i as f64 * dx;
        let w = if i == 0 || i == steps {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let phi = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
        let cdf = 0.5 * libm::erfc(-x / 2f64.sqrt());
        let density = m as f64 * phi * cdf.powi(m as i32 - 1);
        for (k, acc) in moments.iter_mut().enumerate() {
            *acc += w * density * x.powi(k as i32);
        }
    }
    let [mass, mean, second] = moments.map(|v| v * dx / 3.0);
    second / mass - (mean / mass).powi(2)
}

fn maxout_bounds() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let n = 64;
    let c = MaxoutLowerParams::calibrate(2, 1.0 - 1.0 / PI).unwrap();
    let two = max_gaussian_stats(2, 1.0, 10_000_000, &SeededRng::new(50)).unwrap();
    let oracle_rel = (two.variance / (1.0 - 1.0 / PI) - 1.0).abs();
    ok &= oracle_rel <= 0.005;
    lines.push(format!(
        "Var[max of 2] mc {:.5} vs 1-1/pi ({:.2}%), c = {:.4}",
        two.variance,
        oracle_rel * 100.0,
        c.c
    ));
    for m in [2usize, 4, 8, 64] {
        let spec = chain(
            ChainMethod::Maxout(m),
            1,
            n,
            1.0 / n as f64,
            ActivationKind::Linear,
        );
        let upper = predict_chain(&spec, MaxoutView::Upper)
            .unwrap()
            .last()
            .value;
        let lower = predict_chain(&spec, MaxoutView::Lower(c))
            .unwrap()
            .last()
            .value;
        let e = &mc(&spec, 10_000, n, 51 + m as u64)[0];
        ok &= e.variance <= upper && e.variance >= lower - 3.0 * e.standard_error;
        lines.push(format!("m={m}: {lower:.4} <= {:.4} <= {upper}", e.variance));
    }
    for (m, tol) in [(1024usize, 0.15), (4096, 0.10)] {
        let e = max_gaussian_stats(m, 1.0, 100_000, &SeededRng::new(60 + m as u64)).unwrap();
        let asym = PI * PI / (12.0 * (m as f64).ln());
        let rel = (e.variance / asym - 1.0).abs();
        ok &= rel <= tol;
        lines.push(format!(
            "m={m}: {:.5} vs {asym:.5} ({:.1}%)",
            e.variance,
            rel * 100.0
        ));
    }
    let errors: Vec<f64> = [64usize, 256, 1024, 4096]
        .iter()
        .map(|&m| (var_max_quadrature(m) - PI * PI / (12.0 * (m as f64).ln())).abs())
        .collect();
    let monotone = errors.windows(2).all(|w| w[1] < w[0]);
    ok &= monotone;
    lines.push(format!(
        "|exact - asymptotic| over m=64..4096: {}",
        errors
            .iter()
            .map(|e| format!("{e:.5}"))
            .collect::<Vec<_>>()
            .join(" ")
    ));
    check(ok, lines.join("; "))
}

fn gradient_integrity() -> Outcome {
    let report = run_gradcheck(&GradcheckOptions {
        seed: 7,
        trials: 10,
        inject_fault: None,
    })
    .unwrap();
    let worst = report.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = report
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.op)
        .collect();
    check(
        failed.is_empty() && worst < GRADCHECK_TOLERANCE,
        format!(
            "{} ops x 10 instances, worst rel error {worst:.2e}; failing: {failed:?}",
            report.len()
        ),
    )
}

fn collapse(data: &SplitDataset) -> Outcome {
    let (mlp, cfg) = (standard_mlp(), standard_train());
    let pool = parallel::pool();
    let cells = parallel::train_cells(
        &pool,
        GLOBAL_SEED,
        &[Method::Base],
        &COLLAPSE_SEEDS,
        &mlp,
        &cfg,
        data,
    )
    .unwrap();
    let errors: Vec<f64> = cells.iter().map(|(_, r, _)| r.final_test_error).collect();
    let models: Vec<Model> = cells.into_iter().map(|(_, _, m)| m).collect();
    let external = evaluate(&fuse_external(&models).unwrap(), &data.test).unwrap();
    let (ien, _) = run_cell(
        GLOBAL_SEED,
        Method::Ien(4),
        COLLAPSE_SEEDS[0],
        &mlp,
        &cfg,
        data,
    )
    .unwrap();
    let delta = evaluate(&fuse_ien(&ien).unwrap(), &data.test).unwrap()
        - evaluate(&ien, &data.test).unwrap();
    check(
        errors.iter().all(|&e| e < 0.15) && external >= 0.8 && delta == 0.0,
        format!("base errors {errors:?}, external average {external:.4}, fuse_ien change {delta}"),
    )
}

struct Directions {
    means: Vec<(Method, f64)>,
    base_models: Vec<(Model, f64)>,
}

fn train_directions(data: &SplitDataset) -> Directions {
    let methods = [Method::Base, Method::Ien(2), Method::Ien(4), Method::Ien(8)];
    let cells = parallel::train_cells(
        &parallel::pool(),
        GLOBAL_SEED,
        &methods,
        &SEEDS,
        &standard_mlp(),
        &standard_train(),
        data,
    )
    .unwrap();
    let means = methods
        .iter()
        .map(|&m| {
            let errs: Vec<f64> = cells
                .iter()
                .filter(|c| c.0 == m)
                .map(|c| c.1.final_test_error)
                .collect();
            (m, errs.iter().sum::<f64>() / errs.len() as f64)
        })
        .collect();
    let base_models = cells
        .into_iter()
        .filter(|c| c.0 == Method::Base)
        .map(|(_, r, model)| (model, r.final_test_error))
        .collect();
    Directions { means, base_models }
}

fn directions(d: &Directions) -> Outcome {
    let mean = |m: Method| d.means.iter().find(|x| x.0 == m).unwrap().1;
    let (base, ien2, ien4, ien8) = (
        mean(Method::Base),
        mean(Method::Ien(2)),
        mean(Method::Ien(4)),
        mean(Method::Ien(8)),
    );
    check(
        ien4 <= base && ien2 <= ien8 + 0.01 && ien4 <= ien8 + 0.01,
        format!("mean error base {base:.4}, ien(2) {ien2:.4}, ien(4) {ien4:.4}, ien(8) {ien8:.4}"),
    )
}

fn outer_ensemble(d: &Directions, data: &SplitDataset) -> Outcome {
    let k = d.base_models.len();
    let (mut ens_sum, mut single_sum) = (0.0, 0.0);
    let mut beats_worst = true;
    for i in 0..k {
        let group: Vec<&(Model, f64)> = (0..3).map(|j| &d.base_models[(i + j) % k]).collect();
        let models: Vec<Model> = group.iter().map(|g| g.0.clone()).collect();
        let ens = outer_ensemble_eval(&models, &data.test).unwrap();
        let singles: Vec<f64> = group.iter().map(|g| g.1).collect();
        beats_worst &= ens <= singles.iter().copied().fold(0.0, f64::max);
        ens_sum += ens;
        single_sum += singles.iter().sum::<f64>() / 3.0;
    }
    let (ens, single) = (ens_sum / k as f64, single_sum / k as f64);
    check(
        ens <= single && beats_worst,
        format!("{k} rotating triples: ensemble {ens:.4} vs mean single {single:.4}; every triple <= its worst member: {beats_worst}"),
    )
}

fn gain_curve_cli() -> Outcome {
    let dir = std::env::temp_dir().join(format!("ienlab-acceptance-{}", std::process::id()));
    let out = dir.join("fig2.csv");
    let run = Command::new(env!("CARGO_BIN_EXE_ienlab"))
        .args([
            "gain-curve",
            "--m",
            "2..64",
            "--sigma2",
            "1",
            "--c",
            "1",
            "--out",
        ])
        .arg(&out)
        .output()
        .unwrap();
    if !run.status.success() {
        return Err(format!("gain-curve exited with {}", run.status));
    }
    let mut reader = csv::Reader::from_path(&out).unwrap();
    let mut worst_asym: f64 = 0.0;
    let mut exact = true;
    let mut rows = 0;
    for rec in reader.records() {
        let rec = rec.unwrap();
        let m: usize = rec[1].parse().unwrap();
        let v: f64 = rec[2].parse().unwrap();
        rows += 1;
        match &rec[0] {
            "ien" => exact &= v == 1.0 / m as f64,
            "dropout" => exact &= v == 0.5,
            "maxout_upper" => exact &= v == m as f64,
            "maxout_asymptotic" => {
                worst_asym = worst_asym.max((v - PI * PI / (12.0 * (m as f64).ln())).abs())
            }
            _ => {}
        }
    }
    let _ = std::fs::remove_dir_all(&dir);
    check(
        exact && worst_asym <= 1e-12 && rows == 63 * 5,
        format!("{rows} rows for m=2..64; ien/dropout/upper exact: {exact}; asymptotic max dev {worst_asym:.1e}"),
    )
}

fn param_accounting() -> Outcome {
    let mut rng = SeededRng::new(11);
    let mut ok = true;
    let mut checked = 0;
    for m in [2usize, 4, 8] {
        for depth in 2..=4 {
            let model = random_ien_model(&mut rng, depth, m);
            let plain_defs: Vec<LayerDef> = model
                .defs()
                .into_iter()
                .map(|d| match d {
                    LayerDef::Weighted(s) => LayerDef::Weighted(LayerSpec {
                        wrapper: Wrapper::Plain,
                        ..s
                    }),
                    other => other,
                })
                .collect();
            let plain = Model::new(&plain_defs).unwrap();
            let fused = model.count_params(Phase::Fused);
            ok &= model.count_params(Phase::Train) == m * fused;
            ok &= fused == plain.count_params(Phase::Train);
            ok &= fuse_ien(&model).unwrap().count_params(Phase::Train) == fused;
            checked += 1;
        }
    }
    let conv = Model::new(&[
        LayerDef::Weighted(LayerSpec::conv(3, 8, 3, 3, 1, 1).ien(4).relu().with_bias()),
        LayerDef::Weighted(LayerSpec::dense(8 * 8 * 8, 10).ien(4)),
    ])
    .unwrap();
    let conv_fused = 8 * 3 * 9 + 8 + 512 * 10;
    ok &= conv.count_params(Phase::Fused) == conv_fused
        && conv.count_params(Phase::Train) == 4 * conv_fused;
    check(
        ok,
        format!("{checked} dense models and a conv model: train = m x fused, fused = plain"),
    )
}

fn main() {
    let data = standard_data();
    let mut directions_cache = None;
    let criteria: Vec<(&str, Option<u64>)> = vec![
        ("fusion exactness", Some(10)),
        ("variance factor of IEN chains", Some(120)),
        ("IEN init neutrality", None),
        ("dropout bound", None),
        ("maxout bounds", None),
        ("gradient integrity", None),
        ("collapse of external weight averaging", Some(180)),
        ("direction of IEN and m", Some(600)),
        ("outer ensemble", None),
        ("gain curve output", None),
        ("parameter accounting", None),
    ];
    let mut failures = 0;
    for (i, (name, limit)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = match i {
            0 => fusion_exactness(),
            1 => variance_factor(),
            2 => init_neutrality(),
            3 => dropout_bound(),
            4 => maxout_bounds(),
            5 => gradient_integrity(),
            6 => collapse(&data),
            7 => directions(directions_cache.get_or_insert_with(|| train_directions(&data))),
            8 => outer_ensemble(
                directions_cache.get_or_insert_with(|| train_directions(&data)),
                &data,
            ),
            9 => gain_curve_cli(),
            _ => param_accounting(),
        };
        let elapsed = start.elapsed();
        let outcome = within_time(outcome, elapsed, limit.map(Duration::from_secs));
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} {:>2} {name} ({:.1}s): {detail}",
            i + 1,
            elapsed.as_secs_f64()
        );
    }
    println!(
        "acceptance: {} passed, {failures} failed",
        criteria.len() - failures
    );
    if failures > 0 {
        std::process::exit(1);
    }
}
