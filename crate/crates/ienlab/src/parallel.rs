//! Rayon drivers whose results are bit-identical to the sequential ones.
//!
//! Work items carry their own RNG streams and results are collected in
//! index order, so the thread count never changes an output.

use ienlab_core::layers::Model;
use ienlab_core::train::{
    run_cell, summarize, Method, MlpConfig, RunRecord, SplitDataset, SummaryTable, TrainConfig,
};
use ienlab_core::variance::{ChainMc, GroupStats, McConfig, McEstimate, VarChainSpec};
use ienlab_core::{Error, Result, SeededRng};
use rayon::prelude::*;

pub const THREADS_ENV: &str = "IENLAB_THREADS";

/// A pool sized by `IENLAB_THREADS` when set and positive, else rayon's default.
pub fn pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    with_threads(threads)
}

/// `0` means rayon's default.
pub fn with_threads(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

pub fn chain_variance(
    pool: &rayon::ThreadPool,
    spec: &VarChainSpec,
    cfg: McConfig,
    rng: &SeededRng,
) -> Result<Vec<McEstimate>> {
    let mc = ChainMc::new(spec, cfg)?;
    let groups: Vec<GroupStats> = pool.install(|| {
        (0..mc.groups())
            .into_par_iter()
            .map(|g| mc.run_group(g, rng))
            .collect()
    });
    Ok(mc.finish(&groups))
}

pub type Cell = (Method, RunRecord, Model);

/// Trains every (method, seed) cell, methods outermost.
pub fn train_cells(
    pool: &rayon::ThreadPool,
    global_seed: u64,
    methods: &[Method],
    seeds: &[u64],
    mlp: &MlpConfig,
    cfg: &TrainConfig,
    data: &SplitDataset,
) -> Result<Vec<Cell>> {
    let cells: Vec<(Method, u64)> = methods
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    pool.install(|| {
        cells
            .par_iter()
            .map(|&(method, seed)| {
                run_cell(global_seed, method, seed, mlp, cfg, data)
                    .map(|(model, record)| (method, record, model))
            })
            .collect()
    })
}

/// Parallel counterpart of `experiment_matrix`.
pub fn experiment_matrix(
    pool: &rayon::ThreadPool,
    global_seed: u64,
    methods: &[Method],
    seeds: &[u64],
    mlp: &MlpConfig,
    cfg: &TrainConfig,
    data: &SplitDataset,
) -> Result<(SummaryTable, Vec<(Method, RunRecord)>)> {
    if seeds.len() < 2 {
        return Err(Error::Argument(
            "the experiment matrix needs at least two seeds".into(),
        ));
    }
    let records: Vec<(Method, RunRecord)> =
        train_cells(pool, global_seed, methods, seeds, mlp, cfg, data)?
            .into_iter()
            .map(|(m, r, _)| (m, r))
            .collect();
    Ok((summarize(&records)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ienlab_core::layers::ActivationKind;
    use ienlab_core::train::{gen_blobs, BlobsConfig};
    use ienlab_core::variance::{mc_chain_variance, ChainLayer, ChainMethod};

    #[test]
    fn chain_mc_matches_sequential() {
        let spec = VarChainSpec {
            input_variance: 1.0,
            layers: vec![
                ChainLayer {
                    fan_in: 64,
                    weight_variance: 2.0 / 64.0,
                    activation: ActivationKind::Relu,
                    method: ChainMethod::Ien(2),
                },
                ChainLayer {
                    fan_in: 64,
                    weight_variance: 1.0 / 64.0,
                    activation: ActivationKind::Linear,
                    method: ChainMethod::Dropout(0.5),
                },
            ],
        };
        let cfg = McConfig::new(2000, 64);
        let rng = SeededRng::new(4);
        let seq = mc_chain_variance(&spec, cfg, &rng).unwrap();
        for threads in [1, 3] {
            assert_eq!(
                chain_variance(&with_threads(threads), &spec, cfg, &rng).unwrap(),
                seq
            );
        }
    }

    #[test]
    fn matrix_matches_sequential() {
        let data = gen_blobs(
            &BlobsConfig {
                num_classes: 3,
                dims: 4,
                samples_per_class: 15,
                spread: 0.2,
                separation: 1.0,
            },
            &SeededRng::new(8),
        )
        .unwrap();
        let mlp = MlpConfig {
            input_dim: 4,
            hidden: vec![8],
            classes: 3,
            bias: true,
        };
        let cfg = TrainConfig {
            learning_rate: 0.2,
            epochs: 2,
            batch_size: 5,
            seed: 0,
        };
        let methods = [Method::Base, Method::Ien(2), Method::DropoutEverywhere(0.8)];
        let seq = ienlab_core::train::experiment_matrix(5, &methods, &[0, 1, 2], &mlp, &cfg, &data)
            .unwrap();
        for threads in [1, 4] {
            let par = experiment_matrix(
                &with_threads(threads),
                5,
                &methods,
                &[0, 1, 2],
                &mlp,
                &cfg,
                &data,
            )
            .unwrap();
            assert_eq!(par, seq);
        }
    }
}
