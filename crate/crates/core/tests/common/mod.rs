use std::path::PathBuf;

use fang_core::allocate::AllocMode;
use fang_core::grouping::ReweightMode;
use fang_core::model::ModelConfig;
use fang_core::pipeline::{
    CalibSection, EvalSection, GroupingMode, Method, ModelSection, Propagation, PruneSection,
    RunConfig,
};

pub fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

/// Reference toy model config with a reduced calibration load for quick
/// end-to-end tests.
pub fn toy_run_config(sparsity: f64) -> RunConfig {
    RunConfig {
        model: ModelSection {
            checkpoint: None,
            config: ModelConfig::toy(0),
        },
        calib: CalibSection {
            corpus: corpus_path(),
            n_seqs: 4,
            seq_len: 64,
            seed: 0,
        },
        prune: PruneSection {
            sparsity,
            method: Method::FangObc,
            k_groups: 7,
            tau: 9.0,
            pca_dim: 64,
            alloc: AllocMode::Fc,
            reweight: ReweightMode::Ours,
            grouping: GroupingMode::Fang,
            shared_group: true,
            damping: 0.01,
            propagation: Propagation::Sequential,
            seed: 0,
            greedy_assign: false,
        },
        eval: EvalSection {
            corpus: None,
            window: 128,
        },
    }
}
