//! Experiment orchestration: corpus and feature caching, mask pre-training,
//! the method matrix with τ selection, and a checksummed run ledger.

mod data;
mod ledger;
mod mask;
mod matrix;

pub use data::{cache_root, featurize, Variant, CACHE_ENV};
pub use ledger::{
    file_sha256, write_atomic, Artifact, CellKey, EvaluatedCell, ExperimentLedger, MaskRecord, TrainedCell, LEDGER_FILE,
};
pub use mask::{
    load_mask, mask_mse, mask_pairs, pretrain_masknet, save_mask, MaskOutcome, MaskPair, MaskTrainingConfig,
};
pub use matrix::{
    parse_metrics_tsv, report_text, reports, run_matrix, select_tau, MatrixOutcome, RunSpec, TauCandidate,
    MANIFEST_FILE, MASK_FILE, REPORT_FILE,
};
