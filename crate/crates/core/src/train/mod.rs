//! Desk-scale datasets, SGD training, evaluation, outer ensembles and the
//! multi-method, multi-seed experiment matrix.

mod data;
mod matrix;
mod sgd;

pub use data::{
    gen_blobs, parse_idx, BlobsConfig, Dataset, SplitDataset, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
pub use matrix::{
    cell_seed, experiment_matrix, run_cell, summarize, Method, MlpConfig, SummaryRow, SummaryTable,
};
pub use sgd::{
    argmax, evaluate, outer_ensemble_eval, predict_logits, train, EpochRecord, RunRecord,
    TrainConfig,
};
