//! End-to-end orchestration: resolve a run configuration, capture
//! calibration data, allocate per-block sparsity, prune heads and FFN
//! neurons block by block, and emit a pruned checkpoint plus a JSON report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::allocate::{functional_complexity, sparsity_plan, taylor_allocation, AllocMode, SparsityPlan};
use crate::calib::{capture_all, load_corpus, refresh_forward, sample_calibration, BlockCapture};
use crate::error::{Error, Result};
use crate::grouping::{
    alpha_weights, assign_groups_sized, centroid_distance_matrix, kmeans, pca_reduce,
    random_grouping, score_matrix, select_shared_group, NeuronGrouping, ReweightMode,
};
use crate::model::{apply_head_mask, apply_neuron_mask, init_model, perplexity, Checkpoint, ModelConfig};
use crate::numcore::Matrix;
use crate::pruners::{
    fang_prune_ffn, flap_prune_count, hessian, obc_prune_count, obc_traditional_prune,
    prune_heads_count, FfnBackend, PruneResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "obc")]
    Obc,
    #[serde(rename = "obc-traditional")]
    ObcTraditional,
    #[serde(rename = "flap")]
    Flap,
    #[serde(rename = "fang-obc")]
    FangObc,
    #[serde(rename = "fang-flap")]
    FangFlap,
}

impl Method {
    fn backend(self) -> FfnBackend {
        match self {
            Method::Obc | Method::ObcTraditional | Method::FangObc => FfnBackend::Obc,
            Method::Flap | Method::FangFlap => FfnBackend::Flap,
        }
    }

    fn is_grouped(self) -> bool {
        matches!(self, Method::FangObc | Method::FangFlap)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "obc" => Ok(Method::Obc),
            "obc-traditional" => Ok(Method::ObcTraditional),
            "flap" => Ok(Method::Flap),
            "fang-obc" => Ok(Method::FangObc),
            "fang-flap" => Ok(Method::FangFlap),
            other => Err(Error::Parameter(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingMode {
    Fang,
    Random,
}

impl std::str::FromStr for GroupingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fang" => Ok(GroupingMode::Fang),
            "random" => Ok(GroupingMode::Random),
            other => Err(Error::Parameter(format!("unknown grouping mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Recompute calibration activations through the pruned prefix before
    /// each block.
    Sequential,
    /// Prune every block from the dense captures.
    Oneshot,
}

impl std::str::FromStr for Propagation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(Propagation::Sequential),
            "oneshot" => Ok(Propagation::Oneshot),
            other => Err(Error::Parameter(format!("unknown propagation mode {other:?}"))),
        }
    }
}

fn default_model_config() -> ModelConfig {
    ModelConfig::toy(0)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    /// Load this archive when present; otherwise initialize from `config`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "default_model_config")]
    pub config: ModelConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            checkpoint: None,
            config: default_model_config(),
        }
    }
}

fn default_n_seqs() -> usize {
    8
}
fn default_seq_len() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibSection {
    pub corpus: PathBuf,
    #[serde(default = "default_n_seqs")]
    pub n_seqs: usize,
    #[serde(default = "default_seq_len")]
    pub seq_len: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_k_groups() -> usize {
    7
}
fn default_tau() -> f64 {
    9.0
}
fn default_pca_dim() -> usize {
    64
}
fn default_damping() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}
fn default_method() -> Method {
    Method::FangObc
}
fn default_alloc() -> AllocMode {
    AllocMode::Fc
}
fn default_reweight() -> ReweightMode {
    ReweightMode::Ours
}
fn default_grouping() -> GroupingMode {
    GroupingMode::Fang
}
fn default_propagation() -> Propagation {
    Propagation::Sequential
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PruneSection {
    pub sparsity: f64,
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_k_groups")]
    pub k_groups: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_pca_dim")]
    pub pca_dim: usize,
    #[serde(default = "default_alloc")]
    pub alloc: AllocMode,
    #[serde(default = "default_reweight")]
    pub reweight: ReweightMode,
    #[serde(default = "default_grouping")]
    pub grouping: GroupingMode,
    #[serde(default = "default_true")]
    pub shared_group: bool,
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_propagation")]
    pub propagation: Propagation,
    #[serde(default)]
    pub seed: u64,
    /// Use the fast score-sorted assignment instead of the exact solver.
    #[serde(default)]
    pub greedy_assign: bool,
}

fn default_window() -> usize {
    128
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    /// Defaults to the calibration corpus when absent.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    #[serde(default = "default_window")]
    pub window: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            corpus: None,
            window: default_window(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub model: ModelSection,
    pub calib: CalibSection,
    pub prune: PruneSection,
    #[serde(default)]
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.config.validate()?;
        let p = &self.prune;
        if !(0.0..1.0).contains(&p.sparsity) {
            return Err(Error::Config(format!("sparsity {} outside [0, 1)", p.sparsity)));
        }
        if p.sparsity > 0.0 && p.alloc != AllocMode::Uniform && p.sparsity >= 2.0 / 3.0 {
            return Err(Error::Config(
                "non-uniform allocation needs sparsity below 2/3".into(),
            ));
        }
        if p.k_groups == 0 {
            return Err(Error::Config("k_groups must be at least 1".into()));
        }
        if p.method.is_grouped() {
            let denom = if p.shared_group { p.k_groups + 1 } else { p.k_groups };
            if self.model.config.n_ffn / denom == 0 {
                return Err(Error::Config(format!(
                    "{} neurons cannot form {} groups",
                    self.model.config.n_ffn, denom
                )));
            }
        }
        if p.tau <= 0.0
            && matches!(p.reweight, ReweightMode::Ours | ReweightMode::Reverse)
        {
            return Err(Error::Config("tau must be positive".into()));
        }
        if p.pca_dim == 0 {
            return Err(Error::Config("pca_dim must be at least 1".into()));
        }
        if p.damping < 0.0 {
            return Err(Error::Config("damping must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Per-layer slice of the run report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub target_sparsity: f64,
    pub realized_sparsity: f64,
    pub heads_pruned: usize,
    pub neurons_pruned: usize,
    pub shared_size: usize,
    /// Pre-pruning indices of the removed heads.
    pub pruned_head_indices: Vec<usize>,
    /// Pre-pruning indices of the removed FFN neurons.
    pub pruned_neuron_indices: Vec<usize>,
    /// Pre-pruning indices of the exempt shared-group neurons.
    pub shared_neuron_indices: Vec<usize>,
    pub shortfall: usize,
    pub head_error_before: f64,
    pub head_error_after: f64,
    pub ffn_error_before: f64,
    pub ffn_error_after: f64,
    /// Per functional group (before, after) residuals.
    pub group_errors: Vec<(f64, f64)>,
    /// Mean diagonal and mean off-diagonal reweighting mass.
    pub alpha_diag_mean: f64,
    pub alpha_off_mean: f64,
}

fn report_version() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(default = "report_version")]
    pub version: u32,
    pub config: RunConfig,
    /// Per-block allocation signal (functional complexity or normalized
    /// sensitivity), empty for uniform allocation.
    pub fc: Vec<f64>,
    pub plan: Vec<f64>,
    pub layers: Vec<LayerReport>,
    pub dense_perplexity: f64,
    pub pruned_perplexity: f64,
    pub dense_params: usize,
    pub pruned_params: usize,
    pub dense_prunable_params: usize,
    pub pruned_prunable_params: usize,
    /// Fraction of prunable parameters removed.
    pub realized_sparsity: f64,
    /// Wall-clock seconds per stage. Excluded from determinism comparisons.
    pub timings: BTreeMap<String, f64>,
}

fn stage(err: Error, name: &str, layer: Option<usize>) -> Error {
    let ctx = match layer {
        Some(l) => format!("{name} (layer {l})"),
        None => name.to_string(),
    };
    match err {
        Error::Dimension(m) => Error::Dimension(format!("{ctx}: {m}")),
        Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
        Error::Input(m) => Error::Input(format!("{ctx}: {m}")),
        Error::Parameter(m) => Error::Parameter(format!("{ctx}: {m}")),
        Error::Singular(m) => Error::Singular(format!("{ctx}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{ctx}: {m}")),
        Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
        other => other,
    }
}

fn layer_prunable_params(ckpt: &Checkpoint, l: usize) -> usize {
    let lw = &ckpt.layers[l];
    lw.w_q.rows() * lw.w_q.cols()
        + lw.w_k.rows() * lw.w_k.cols()
        + lw.w_v.rows() * lw.w_v.cols()
        + lw.w_o.rows() * lw.w_o.cols()
        + lw.w_up.rows() * lw.w_up.cols()
        + lw.w_down.rows() * lw.w_down.cols()
        + lw.w_gate.as_ref().map_or(0, |g| g.rows() * g.cols())
}

/// Integer head/neuron budgets for one block: heads rounded to nearest, the
/// remainder of the parameter budget converted into neurons.
fn block_budget(
    sp: f64,
    n_heads: usize,
    n_ffn: usize,
    head_params: usize,
    neuron_params: usize,
    prunable: usize,
) -> (usize, usize) {
    let target = sp * prunable as f64;
    let heads = ((sp * n_heads as f64).round() as usize).min(n_heads.saturating_sub(1));
    let rem = target - (heads * head_params) as f64;
    let neurons = ((rem / neuron_params as f64).round().max(0.0) as usize).min(n_ffn.saturating_sub(1));
    (heads, neurons)
}

struct LayerGrouping {
    grouping: NeuronGrouping,
    labels: Vec<usize>,
    alpha_diag_mean: f64,
    alpha_off_mean: f64,
}

/// Build the neuron grouping for one layer from its captures.
fn build_grouping(cfg: &PruneSection, cap: &BlockCapture, layer: usize) -> Result<LayerGrouping> {
    let n = cap.hidden.rows();
    let t = cap.hidden.cols();
    let k = cfg.k_groups;
    let layer_seed = cfg.seed.wrapping_add(layer as u64);
    let r = cfg.pca_dim.min(cap.ffn_input.rows()).min(t);
    let xr = pca_reduce(&cap.ffn_input, r)?;
    let clusters = kmeans(&xr, k, layer_seed)?;
    let s = score_matrix(&cap.hidden, &cap.grad, &clusters.labels, k)?;
    let (distances, _) = centroid_distance_matrix(&cap.hidden, &clusters.labels, k)?;
    let alpha = alpha_weights(&distances, cfg.tau, cfg.reweight)?;

    let (groups, shared) = match cfg.grouping {
        GroupingMode::Random => {
            if cfg.shared_group {
                random_grouping(n, k, layer_seed)?
            } else {
                // seeded shuffle split into K near-equal groups, no exemption
                use rand::seq::SliceRandom;
                use rand::SeedableRng;
                let mut idx: Vec<usize> = (0..n).collect();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(layer_seed);
                idx.shuffle(&mut rng);
                let base = n / k;
                let extra = n % k;
                let mut groups = Vec::with_capacity(k);
                let mut at = 0;
                for g in 0..k {
                    let len = base + usize::from(g < extra);
                    let mut part = idx[at..at + len].to_vec();
                    part.sort_unstable();
                    groups.push(part);
                    at += len;
                }
                (groups, vec![])
            }
        }
        GroupingMode::Fang => {
            if cfg.shared_group {
                let m = n / (k + 1);
                let shared_size = m + (n - (k + 1) * m);
                let shared = select_shared_group(&s, shared_size)?;
                let in_shared: Vec<bool> = {
                    let mut v = vec![false; n];
                    for &j in &shared {
                        v[j] = true;
                    }
                    v
                };
                let free: Vec<usize> = (0..n).filter(|&j| !in_shared[j]).collect();
                let groups = assign_groups_sized(&s, &free, &vec![m; k], cfg.greedy_assign)?;
                (groups, shared)
            } else {
                let base = n / k;
                let extra = n % k;
                let sizes: Vec<usize> = (0..k).map(|g| base + usize::from(g < extra)).collect();
                let free: Vec<usize> = (0..n).collect();
                let groups = assign_groups_sized(&s, &free, &sizes, cfg.greedy_assign)?;
                (groups, vec![])
            }
        }
    };
    let diag: f64 = (0..k).map(|i| alpha.get(i, i)).sum::<f64>() / k as f64;
    let off = if k > 1 {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += alpha.get(i, j);
                }
            }
        }
        s / (k * (k - 1)) as f64
    } else {
        0.0
    };
    let grouping = NeuronGrouping {
        groups,
        shared,
        alpha,
        distances,
    };
    grouping.check_partition(n)?;
    Ok(LayerGrouping {
        grouping,
        labels: clusters.labels,
        alpha_diag_mean: diag,
        alpha_off_mean: off,
    })
}

fn ffn_prune_plain(
    cfg: &PruneSection,
    cap: &BlockCapture,
    w_down: &Matrix,
    n_prune: usize,
) -> Result<PruneResult> {
    match cfg.method {
        Method::Obc => {
            let h = hessian(&cap.hidden, None)?;
            obc_prune_count(w_down, &h, n_prune, cfg.damping)
        }
        Method::ObcTraditional => {
            let h = hessian(&cap.hidden, None)?;
            let sp = n_prune as f64 / w_down.cols() as f64;
            obc_traditional_prune(w_down, &h, sp, cfg.damping)
        }
        Method::Flap => flap_prune_count(w_down, &cap.hidden, n_prune),
        _ => unreachable!("grouped methods handled separately"),
    }
}

/// Outcome of [`run_prune`]: report plus the pruned model.
pub struct PruneOutcome {
    pub report: RunReport,
    pub pruned: Checkpoint,
}

/// Execute the full pruning pipeline for a resolved configuration.
pub fn run_prune(cfg: &RunConfig) -> Result<PruneOutcome> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();

    let t0 = Instant::now();
    let dense = match &cfg.model.checkpoint {
        Some(path) => Checkpoint::load(path).map_err(|e| stage(e, "load checkpoint", None))?,
        None => init_model(&cfg.model.config).map_err(|e| stage(e, "init model", None))?,
    };
    timings.insert("load".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let corpus = load_corpus(&cfg.calib.corpus).map_err(|e| stage(e, "load corpus", None))?;
    let calib = sample_calibration(&corpus, cfg.calib.n_seqs, cfg.calib.seq_len, cfg.calib.seed)
        .map_err(|e| stage(e, "sample calibration", None))?;
    let mut captures = capture_all(&dense, &calib).map_err(|e| stage(e, "capture", None))?;
    timings.insert("calibrate".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let eval_corpus = match &cfg.eval.corpus {
        Some(p) if Some(p) != Some(&cfg.calib.corpus) => {
            load_corpus(p).map_err(|e| stage(e, "load eval corpus", None))?
        }
        _ => corpus.clone(),
    };
    let dense_ppl = perplexity(&dense, &eval_corpus, cfg.eval.window)
        .map_err(|e| stage(e, "dense eval", None))?;
    timings.insert("dense_eval".into(), t0.elapsed().as_secs_f64());

    let n_layers = dense.layers.len();
    let weights: Vec<f64> = (0..n_layers)
        .map(|l| layer_prunable_params(&dense, l) as f64)
        .collect();

    let t0 = Instant::now();
    let sp = cfg.prune.sparsity;
    let plan: SparsityPlan = if sp == 0.0 {
        SparsityPlan {
            per_block: vec![0.0; n_layers],
            target: 0.0,
            fc: vec![],
            mode: cfg.prune.alloc,
        }
    } else {
        match cfg.prune.alloc {
            AllocMode::Uniform => sparsity_plan(&[], sp, AllocMode::Uniform, &weights)
                .map_err(|e| stage(e, "allocation", None))?,
            AllocMode::Fc => {
                let (fc, _skipped) =
                    functional_complexity(&captures).map_err(|e| stage(e, "allocation", None))?;
                sparsity_plan(&fc, sp, AllocMode::Fc, &weights)
                    .map_err(|e| stage(e, "allocation", None))?
            }
            AllocMode::Taylor => taylor_allocation(&captures, sp, &weights)
                .map_err(|e| stage(e, "allocation", None))?,
        }
    };
    timings.insert("allocate".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let mut ckpt = dense.clone();
    let mut layer_reports = Vec::with_capacity(n_layers);
    let sequential = cfg.prune.propagation == Propagation::Sequential;
    for l in 0..n_layers {
        let sp_l = plan.per_block[l];
        let d_head = ckpt.config.d_head;
        let d_model = ckpt.config.d_model;
        let n_heads = ckpt.layers[l].n_heads;
        let n_ffn = ckpt.layers[l].n_ffn;
        let head_params = d_head * d_model * 4;
        let neuron_params = d_model * if ckpt.layers[l].w_gate.is_some() { 3 } else { 2 };
        let dense_layer_params = layer_prunable_params(&dense, l);
        let (head_count, neuron_count) = block_budget(
            sp_l,
            n_heads,
            n_ffn,
            head_params,
            neuron_params,
            dense_layer_params,
        );

        // head pruning from the current captures
        let mut head_err = (0.0, 0.0);
        let mut pruned_head_indices = Vec::new();
        let mut pruned_neuron_indices = Vec::new();
        let mut shared_neuron_indices = Vec::new();
        if head_count > 0 {
            let (hr, hmask) = prune_heads_count(
                &ckpt.layers[l].w_o,
                &captures[l].attn_concat,
                d_head,
                head_count,
                cfg.prune.method.backend(),
                cfg.prune.damping,
            )
            .map_err(|e| stage(e, "head prune", Some(l)))?;
            head_err = (hr.recon_error_before, hr.recon_error_after);
            pruned_head_indices = hmask
                .iter()
                .enumerate()
                .filter(|&(_, &m)| m == 1)
                .map(|(i, _)| i)
                .collect();
            ckpt.layers[l].w_o = hr.new_weights;
            ckpt = apply_head_mask(&ckpt, l, &hmask, hr.bias.as_deref())
                .map_err(|e| stage(e, "head prune", Some(l)))?;
            if sequential {
                refresh_forward(&ckpt, &calib, &mut captures, l)
                    .map_err(|e| stage(e, "refresh", Some(l)))?;
            }
        }

        // FFN pruning
        let mut shared_size = 0;
        let mut shortfall = 0;
        let mut group_errors = Vec::new();
        let mut alpha_diag = f64::NAN;
        let mut alpha_off = f64::NAN;
        let mut ffn_err = (0.0, 0.0);
        if neuron_count > 0 {
            if cfg.prune.method.is_grouped() {
                let lg = build_grouping(&cfg.prune, &captures[l], l)
                    .map_err(|e| stage(e, "grouping", Some(l)))?;
                shared_size = lg.grouping.shared.len();
                shared_neuron_indices = lg.grouping.shared.clone();
                alpha_diag = lg.alpha_diag_mean;
                alpha_off = lg.alpha_off_mean;
                let fr = fang_prune_ffn(
                    &ckpt.layers[l].w_down,
                    &captures[l].hidden,
                    &lg.labels,
                    &lg.grouping,
                    neuron_count,
                    cfg.prune.method.backend(),
                    cfg.prune.damping,
                )
                .map_err(|e| stage(e, "ffn prune", Some(l)))?;
                ffn_err = (fr.result.recon_error_before, fr.result.recon_error_after);
                shortfall = fr.result.shortfall;
                group_errors = fr.group_errors;
                pruned_neuron_indices = fr
                    .result
                    .mask
                    .iter()
                    .enumerate()
                    .filter(|&(_, &m)| m == 1)
                    .map(|(i, _)| i)
                    .collect();
                ckpt.layers[l].w_down = fr.result.new_weights;
                ckpt = apply_neuron_mask(&ckpt, l, &fr.result.mask, fr.result.bias.as_deref())
                    .map_err(|e| stage(e, "ffn prune", Some(l)))?;
            } else {
                let r = ffn_prune_plain(&cfg.prune, &captures[l], &ckpt.layers[l].w_down, neuron_count)
                    .map_err(|e| stage(e, "ffn prune", Some(l)))?;
                ffn_err = (r.recon_error_before, r.recon_error_after);
                pruned_neuron_indices = r
                    .mask
                    .iter()
                    .enumerate()
                    .filter(|&(_, &m)| m == 1)
                    .map(|(i, _)| i)
                    .collect();
                ckpt.layers[l].w_down = r.new_weights;
                ckpt = apply_neuron_mask(&ckpt, l, &r.mask, r.bias.as_deref())
                    .map_err(|e| stage(e, "ffn prune", Some(l)))?;
                shortfall = r.shortfall;
                group_errors.push((r.recon_error_before, r.recon_error_after));
            }
            if sequential && l + 1 < n_layers {
                refresh_forward(&ckpt, &calib, &mut captures, l + 1)
                    .map_err(|e| stage(e, "refresh", Some(l)))?;
            }
        }

        let realized = 1.0 - layer_prunable_params(&ckpt, l) as f64 / dense_layer_params as f64;
        layer_reports.push(LayerReport {
            layer: l,
            target_sparsity: sp_l,
            realized_sparsity: realized,
            heads_pruned: head_count,
            neurons_pruned: neuron_count,
            shared_size,
            pruned_head_indices,
            pruned_neuron_indices,
            shared_neuron_indices,
            shortfall,
            head_error_before: head_err.0,
            head_error_after: head_err.1,
            ffn_error_before: ffn_err.0,
            ffn_error_after: ffn_err.1,
            group_errors,
            alpha_diag_mean: alpha_diag,
            alpha_off_mean: alpha_off,
        });
    }
    timings.insert("prune".into(), t0.elapsed().as_secs_f64());

    let t0 = Instant::now();
    let pruned_ppl =
        perplexity(&ckpt, &eval_corpus, cfg.eval.window).map_err(|e| stage(e, "pruned eval", None))?;
    timings.insert("pruned_eval".into(), t0.elapsed().as_secs_f64());

    let dense_prunable = dense.prunable_param_count();
    let pruned_prunable = ckpt.prunable_param_count();
    let report = RunReport {
        version: report_version(),
        config: cfg.clone(),
        fc: plan.fc.clone(),
        plan: plan.per_block.clone(),
        layers: layer_reports,
        dense_perplexity: dense_ppl,
        pruned_perplexity: pruned_ppl,
        dense_params: dense.param_count(),
        pruned_params: ckpt.param_count(),
        dense_prunable_params: dense_prunable,
        pruned_prunable_params: pruned_prunable,
        realized_sparsity: 1.0 - pruned_prunable as f64 / dense_prunable as f64,
        timings,
    };
    Ok(PruneOutcome {
        report,
        pruned: ckpt,
    })
}

/// Run a config file and persist `pruned.fang` plus `report.json` under
/// `out_dir`. Partial outputs are removed on failure.
pub fn cmd_prune(config_path: &Path, out_dir: &Path) -> Result<RunReport> {
    let cfg = RunConfig::from_path(config_path)?;
    cmd_prune_resolved(&cfg, out_dir)
}

/// [`cmd_prune`] for an already resolved (e.g. flag-overridden) config.
pub fn cmd_prune_resolved(cfg: &RunConfig, out_dir: &Path) -> Result<RunReport> {
    std::fs::create_dir_all(out_dir)?;
    let ckpt_path = out_dir.join("pruned.fang");
    let report_path = out_dir.join("report.json");
    let write = || -> Result<RunReport> {
        let outcome = run_prune(cfg)?;
        outcome.pruned.save(&ckpt_path)?;
        let mut json = serde_json::to_string_pretty(&outcome.report)?;
        json.push('\n');
        std::fs::write(&report_path, json)?;
        Ok(outcome.report)
    };
    write().inspect_err(|_| {
        let _ = std::fs::remove_file(&ckpt_path);
        let _ = std::fs::remove_file(&report_path);
    })
}

/// Evaluate an archived checkpoint on a corpus. Returns (perplexity, tokens).
pub fn cmd_eval(ckpt_path: &Path, corpus_path: &Path, window: usize) -> Result<(f64, usize)> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let corpus = load_corpus(corpus_path)?;
    let ppl = perplexity(&ckpt, &corpus, window)?;
    Ok((ppl, corpus.len()))
}

/// Default prune-section values, for the report renderer's config delta.
fn prune_defaults(sparsity: f64) -> PruneSection {
    PruneSection {
        sparsity,
        method: default_method(),
        k_groups: default_k_groups(),
        tau: default_tau(),
        pca_dim: default_pca_dim(),
        alloc: default_alloc(),
        reweight: default_reweight(),
        grouping: default_grouping(),
        shared_group: true,
        damping: default_damping(),
        propagation: default_propagation(),
        seed: 0,
        greedy_assign: false,
    }
}

/// Render a report as a human-readable table.
pub fn render_report(report: &RunReport) -> String {
    let mut out = String::new();
    let push = |out: &mut String, s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    push(&mut out, format!(
        "target sparsity {:.4}  realized {:.4}  method {}",
        report.config.prune.sparsity,
        report.realized_sparsity,
        serde_json::to_value(report.config.prune.method)
            .map(|v| v.as_str().unwrap_or("?").to_string())
            .unwrap_or_default()
    ));
    push(&mut out, format!(
        "perplexity dense {:.4} -> pruned {:.4}",
        report.dense_perplexity, report.pruned_perplexity
    ));
    push(&mut out, format!(
        "params {} -> {} (prunable {} -> {})",
        report.dense_params, report.pruned_params,
        report.dense_prunable_params, report.pruned_prunable_params
    ));
    push(&mut out, format!(
        "{:>5} {:>10} {:>10} {:>6} {:>8} {:>8} {:>12} {:>12} {:>8}",
        "layer", "target_sp", "realized", "heads", "neurons", "fc", "ffn_err_pre", "ffn_err_post", "short"
    ));
    for lr in &report.layers {
        let fc = report
            .fc
            .get(lr.layer)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        push(&mut out, format!(
            "{:>5} {:>10.4} {:>10.4} {:>6} {:>8} {:>8} {:>12.4e} {:>12.4e} {:>8}",
            lr.layer,
            lr.target_sparsity,
            lr.realized_sparsity,
            lr.heads_pruned,
            lr.neurons_pruned,
            fc,
            lr.ffn_error_before,
            lr.ffn_error_after,
            lr.shortfall
        ));
    }
    // list prune-section keys that differ from the defaults
    let defaults = serde_json::to_value(prune_defaults(report.config.prune.sparsity)).unwrap();
    let actual = serde_json::to_value(&report.config.prune).unwrap();
    let mut deltas = Vec::new();
    if let (Some(d), Some(a)) = (defaults.as_object(), actual.as_object()) {
        for (key, dv) in d {
            if let Some(av) = a.get(key) {
                if av != dv {
                    deltas.push(format!("{key}={av}"));
                }
            }
        }
    }
    if deltas.is_empty() {
        push(&mut out, "config: all defaults".into());
    } else {
        push(&mut out, format!("config deltas: {}", deltas.join(" ")));
    }
    out
}

/// Load, version-check, and render a report file.
pub fn cmd_report(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text)?;
    let version = value.get("version").and_then(|v| v.as_u64()).unwrap_or(1);
    if version != u64::from(report_version()) {
        return Err(Error::Config(format!(
            "unsupported report version {version}, expected {}",
            report_version()
        )));
    }
    let report: RunReport = serde_json::from_value(value)?;
    Ok(render_report(&report))
}
