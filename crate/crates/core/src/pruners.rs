//! Structured pruning backends. The compensated backend ranks channels by
//! inverse-Hessian importance and repairs the kept weights in one shot or
//! greedily; the fluctuation backend ranks by activation variance and folds
//! the pruned channels' mean contribution into an output bias. Both come in
//! whole-layer form and in group-reweighted form driven by a neuron grouping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::NeuronGrouping;
use crate::numcore::{matmul, sym_inverse_damped, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMethodKind {
    Obc,
    ObcTraditional,
    Flap,
}

/// Outcome of pruning one weight matrix along its input channels.
#[derive(Debug, Clone)]
pub struct PruneResult {
    /// 1 marks a pruned input channel.
    pub mask: Vec<u8>,
    pub new_weights: Matrix,
    /// Output-bias compensation, fluctuation backend only.
    pub bias: Option<Vec<f64>>,
    /// Weighted squared reconstruction residual with pruned columns zeroed
    /// and no compensation applied.
    pub recon_error_before: f64,
    /// Residual after compensation.
    pub recon_error_after: f64,
    pub method: PruneMethodKind,
    /// Channels the integer budget could not place (capacity caps).
    pub shortfall: usize,
}

/// Group-wise FFN pruning outcome: the merged layer result plus the
/// per-group residual pairs (before, after).
#[derive(Debug, Clone)]
pub struct FfnPruneResult {
    pub result: PruneResult,
    pub group_errors: Vec<(f64, f64)>,
}

/// H = sum_t w_t x_t x_t^T over the columns of X.
pub fn hessian(x: &Matrix, weights: Option<&[f64]>) -> Result<Matrix> {
    let n = x.rows();
    let t = x.cols();
    if t == 0 {
        return Err(Error::Input("hessian needs at least one token".into()));
    }
    if let Some(w) = weights {
        if w.len() != t {
            return Err(Error::Dimension("token weight length mismatch".into()));
        }
        if w.iter().any(|&v| v < 0.0) {
            return Err(Error::Parameter("token weights must be nonnegative".into()));
        }
    }
    let mut h = Matrix::zeros(n, n);
    for c in 0..t {
        let w = weights.map_or(1.0, |ws| ws[c]);
        if w == 0.0 {
            continue;
        }
        for i in 0..n {
            let wxi = w * x.get(i, c);
            if wxi == 0.0 {
                continue;
            }
            for j in i..n {
                h.set(i, j, h.get(i, j) + wxi * x.get(j, c));
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            h.set(i, j, h.get(j, i));
        }
    }
    Ok(h)
}

/// Group-restricted reweighted Hessian: rows and columns limited to `group`,
/// each token weighted by its cluster's alpha.
pub fn reweighted_hessian(
    hidden: &Matrix,
    labels: &[usize],
    alpha_row: &[f64],
    group: &[usize],
) -> Result<Matrix> {
    if labels.len() != hidden.cols() {
        return Err(Error::Dimension("labels length != token count".into()));
    }
    let sum: f64 = alpha_row.iter().sum();
    if (sum - 1.0).abs() > 1e-8 {
        return Err(Error::Parameter(format!(
            "cluster weights must sum to 1, got {sum}"
        )));
    }
    let weights: Vec<f64> = labels
        .iter()
        .map(|&l| {
            alpha_row
                .get(l)
                .copied()
                .ok_or_else(|| Error::Input(format!("label {l} outside weight vector")))
        })
        .collect::<Result<_>>()?;
    let sub = hidden.select_rows(group);
    hessian(&sub, Some(&weights))
}

/// Per-column importance e_j = sum_i W_ij^2 / [H^-1]_jj.
pub fn obc_importance(w: &Matrix, hinv: &Matrix) -> Result<Vec<f64>> {
    if w.cols() != hinv.rows() || hinv.rows() != hinv.cols() {
        return Err(Error::Dimension("importance shape mismatch".into()));
    }
    let mut e = Vec::with_capacity(w.cols());
    for j in 0..w.cols() {
        let d = hinv.get(j, j);
        if d <= 0.0 {
            return Err(Error::Numerical(format!(
                "inverse Hessian diagonal nonpositive at column {j}"
            )));
        }
        let sq: f64 = (0..w.rows()).map(|i| w.get(i, j).powi(2)).sum();
        e.push(sq / d);
    }
    Ok(e)
}

/// One-shot compensation for a fixed mask:
/// dW = -[H^-1 I_M (H^-1_MM)^-1 W_M^T]^T.
pub fn obc_compensate(w: &Matrix, hinv: &Matrix, mask: &[u8]) -> Result<Matrix> {
    if mask.len() != w.cols() {
        return Err(Error::Dimension("mask length != column count".into()));
    }
    let m_idx: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] == 1).collect();
    if m_idx.is_empty() {
        return Err(Error::Input("compensation mask selects no columns".into()));
    }
    let a = hinv.select_cols(&m_idx);
    let hmm = hinv.select_rows(&m_idx).select_cols(&m_idx);
    let hmm_inv = sym_inverse_damped(&hmm, 0.0, "pruned-block inverse-Hessian submatrix")?;
    let w_m = w.select_cols(&m_idx);
    let inner = matmul(&matmul(&a, &hmm_inv)?, &w_m.transpose())?;
    Ok(inner.transpose().scale(-1.0))
}

/// tr(delta H delta^T): the weighted squared residual of a weight change.
fn recon_error(delta: &Matrix, h: &Matrix) -> f64 {
    let dh = matmul(delta, h).expect("shape checked by caller");
    delta
        .data()
        .iter()
        .zip(dh.data())
        .map(|(a, b)| a * b)
        .sum()
}

/// Delta that only zeroes the masked columns (no compensation).
fn mask_only_delta(w: &Matrix, mask: &[u8]) -> Matrix {
    let mut d = Matrix::zeros(w.rows(), w.cols());
    for (j, &m) in mask.iter().enumerate() {
        if m == 1 {
            for i in 0..w.rows() {
                d.set(i, j, -w.get(i, j));
            }
        }
    }
    d
}

/// Indices of the `n` smallest values, ties toward the lower index.
fn lowest_indices(values: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap().then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

fn identity_result(w: &Matrix, method: PruneMethodKind) -> PruneResult {
    PruneResult {
        mask: vec![0; w.cols()],
        new_weights: w.clone(),
        bias: None,
        recon_error_before: 0.0,
        recon_error_after: 0.0,
        method,
        shortfall: 0,
    }
}

/// Importance with dead channels (zero Hessian diagonal) forced to zero so
/// they are pruned first.
fn importance_with_dead(w: &Matrix, h: &Matrix, hinv: &Matrix) -> Result<Vec<f64>> {
    let mut e = obc_importance(w, hinv)?;
    for j in 0..h.rows() {
        if h.get(j, j) == 0.0 {
            e[j] = 0.0;
        }
    }
    Ok(e)
}

/// One-shot compensated pruning of exactly `n_prune` columns.
pub fn obc_prune_count(w: &Matrix, h: &Matrix, n_prune: usize, damping: f64) -> Result<PruneResult> {
    let n = w.cols();
    if h.rows() != n || h.cols() != n {
        return Err(Error::Dimension("hessian shape != column count".into()));
    }
    if n_prune >= n && n > 0 {
        return Err(Error::Input("refusing to prune every column".into()));
    }
    if n_prune == 0 {
        return Ok(identity_result(w, PruneMethodKind::Obc));
    }
    let hinv = sym_inverse_damped(h, damping, "channel hessian")?;
    let e = importance_with_dead(w, h, &hinv)?;
    let mut mask = vec![0u8; n];
    for j in lowest_indices(&e, n_prune) {
        mask[j] = 1;
    }
    let delta = obc_compensate(w, &hinv, &mask)?;
    let before = recon_error(&mask_only_delta(w, &mask), h);
    let after = recon_error(&delta, h);
    let mut new_w = w.add(&delta)?;
    for (j, &m) in mask.iter().enumerate() {
        if m == 1 {
            for i in 0..new_w.rows() {
                new_w.set(i, j, 0.0);
            }
        }
    }
    new_w.ensure_finite("compensated weights")?;
    Ok(PruneResult {
        mask,
        new_weights: new_w,
        bias: None,
        recon_error_before: before,
        recon_error_after: after,
        method: PruneMethodKind::Obc,
        shortfall: 0,
    })
}

/// Sparsity wrapper: prunes floor(sp * n) columns in one shot.
pub fn obc_variant_prune(w: &Matrix, h: &Matrix, sp: f64, damping: f64) -> Result<PruneResult> {
    check_sparsity(sp)?;
    obc_prune_count(w, h, (sp * w.cols() as f64).floor() as usize, damping)
}

fn check_sparsity(sp: f64) -> Result<()> {
    if !(0.0..1.0).contains(&sp) {
        return Err(Error::Parameter(format!("sparsity {sp} outside [0, 1)")));
    }
    Ok(())
}

/// Greedy iterative pruning: repeatedly remove the least important column,
/// fold its contribution into the survivors, and eliminate it from the
/// inverse Hessian.
pub fn obc_traditional_prune(w: &Matrix, h: &Matrix, sp: f64, damping: f64) -> Result<PruneResult> {
    check_sparsity(sp)?;
    let n = w.cols();
    if h.rows() != n || h.cols() != n {
        return Err(Error::Dimension("hessian shape != column count".into()));
    }
    let n_prune = (sp * n as f64).floor() as usize;
    if n_prune >= n && n > 0 {
        return Err(Error::Input("refusing to prune every column".into()));
    }
    if n_prune == 0 {
        return Ok(identity_result(w, PruneMethodKind::ObcTraditional));
    }
    let mut hinv = sym_inverse_damped(h, damping, "channel hessian")?;
    let mut cur = w.clone();
    let mut mask = vec![0u8; n];
    for _ in 0..n_prune {
        let mut best = usize::MAX;
        let mut beste = f64::INFINITY;
        for j in 0..n {
            if mask[j] == 1 {
                continue;
            }
            let d = hinv.get(j, j);
            if d <= 0.0 {
                return Err(Error::Numerical(format!(
                    "inverse Hessian diagonal nonpositive at column {j}"
                )));
            }
            let e = if h.get(j, j) == 0.0 {
                0.0
            } else {
                (0..cur.rows()).map(|i| cur.get(i, j).powi(2)).sum::<f64>() / d
            };
            if e < beste {
                beste = e;
                best = j;
            }
        }
        let j = best;
        let djj = hinv.get(j, j);
        // W <- W - (W_:,j / Hinv_jj) Hinv_j,:
        for r in 0..cur.rows() {
            let coef = cur.get(r, j) / djj;
            if coef == 0.0 {
                continue;
            }
            for c in 0..n {
                cur.set(r, c, cur.get(r, c) - coef * hinv.get(j, c));
            }
            cur.set(r, j, 0.0);
        }
        // eliminate row/column j from the inverse
        let col: Vec<f64> = (0..n).map(|i| hinv.get(i, j)).collect();
        let row: Vec<f64> = (0..n).map(|c| hinv.get(j, c)).collect();
        for i in 0..n {
            if col[i] == 0.0 {
                continue;
            }
            for c in 0..n {
                hinv.set(i, c, hinv.get(i, c) - col[i] * row[c] / djj);
            }
        }
        for i in 0..n {
            hinv.set(i, j, 0.0);
            hinv.set(j, i, 0.0);
        }
        mask[j] = 1;
    }
    cur.ensure_finite("compensated weights")?;
    let before = recon_error(&mask_only_delta(w, &mask), h);
    let after = recon_error(&cur.sub(w)?, h);
    Ok(PruneResult {
        mask,
        new_weights: cur,
        bias: None,
        recon_error_before: before,
        recon_error_after: after,
        method: PruneMethodKind::ObcTraditional,
        shortfall: 0,
    })
}

/// Per-row mean and centered-square sum over the columns of X.
pub fn flap_stats(x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = x.cols();
    if t == 0 {
        return Err(Error::Input("activation statistics need tokens".into()));
    }
    let mut means = Vec::with_capacity(x.rows());
    let mut varsums = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / t as f64;
        let vs = row.iter().map(|v| (v - mean) * (v - mean)).sum();
        means.push(mean);
        varsums.push(vs);
    }
    Ok((means, varsums))
}

/// Fluctuation importance S_i = varsum_i * ||W_:,i||^2.
pub fn flap_importance(w: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
    if w.cols() != x.rows() {
        return Err(Error::Dimension("weight columns != activation rows".into()));
    }
    let (_, varsums) = flap_stats(x)?;
    Ok((0..w.cols())
        .map(|i| {
            let nsq: f64 = (0..w.rows()).map(|r| w.get(r, i).powi(2)).sum();
            varsums[i] * nsq
        })
        .collect())
}

/// Group-reweighted fluctuation importance. The mean is global over all
/// tokens; only the centered squares are cluster-weighted.
pub fn flap_group_importance(
    w: &Matrix,
    hidden: &Matrix,
    labels: &[usize],
    alpha_row: &[f64],
    group: &[usize],
) -> Result<Vec<f64>> {
    if w.cols() != hidden.rows() {
        return Err(Error::Dimension("weight columns != activation rows".into()));
    }
    if labels.len() != hidden.cols() {
        return Err(Error::Dimension("labels length != token count".into()));
    }
    let (means, _) = flap_stats(hidden)?;
    let mut out = Vec::with_capacity(group.len());
    for &i in group {
        let mut vs = 0.0;
        for (t, &l) in labels.iter().enumerate() {
            let a = *alpha_row
                .get(l)
                .ok_or_else(|| Error::Input(format!("label {l} outside weight vector")))?;
            let d = hidden.get(i, t) - means[i];
            vs += a * d * d;
        }
        let nsq: f64 = (0..w.rows()).map(|r| w.get(r, i).powi(2)).sum();
        out.push(vs * nsq);
    }
    Ok(out)
}

/// Mean-substitution bias B0 = W (M o xbar) over pruned input channels.
pub fn flap_bias(w: &Matrix, mask: &[u8], means: &[f64]) -> Result<Vec<f64>> {
    if mask.len() != w.cols() || means.len() != w.cols() {
        return Err(Error::Dimension("bias mask/means length mismatch".into()));
    }
    let mut bias = vec![0.0; w.rows()];
    for (j, (&m, &mu)) in mask.iter().zip(means).enumerate() {
        if m == 1 && mu != 0.0 {
            for (r, b) in bias.iter_mut().enumerate() {
                *b += w.get(r, j) * mu;
            }
        }
    }
    Ok(bias)
}

/// Residuals of a fluctuation prune: squared output error of the masked
/// columns, uncompensated and with each token's pruned channels replaced by
/// `means`. Tokens weighted by `weights` when given.
fn flap_errors(
    w: &Matrix,
    x: &Matrix,
    mask: &[u8],
    means: &[f64],
    weights: Option<&[f64]>,
) -> (f64, f64) {
    let pruned: Vec<usize> = (0..mask.len()).filter(|&j| mask[j] == 1).collect();
    let mut before = 0.0;
    let mut after = 0.0;
    for t in 0..x.cols() {
        let wt = weights.map_or(1.0, |ws| ws[t]);
        if wt == 0.0 {
            continue;
        }
        let mut nb = 0.0;
        let mut na = 0.0;
        for r in 0..w.rows() {
            let mut sb = 0.0;
            let mut sa = 0.0;
            for &j in &pruned {
                sb += w.get(r, j) * x.get(j, t);
                sa += w.get(r, j) * (x.get(j, t) - means[j]);
            }
            nb += sb * sb;
            na += sa * sa;
        }
        before += wt * nb;
        after += wt * na;
    }
    (before, after)
}

/// Whole-layer fluctuation pruning of exactly `n_prune` input channels.
pub fn flap_prune_count(w: &Matrix, x: &Matrix, n_prune: usize) -> Result<PruneResult> {
    let n = w.cols();
    if n_prune >= n && n > 0 {
        return Err(Error::Input("refusing to prune every column".into()));
    }
    if n_prune == 0 {
        return Ok(identity_result(w, PruneMethodKind::Flap));
    }
    let imp = flap_importance(w, x)?;
    let mut mask = vec![0u8; n];
    for j in lowest_indices(&imp, n_prune) {
        mask[j] = 1;
    }
    let (means, _) = flap_stats(x)?;
    let bias = flap_bias(w, &mask, &means)?;
    let (before, after) = flap_errors(w, x, &mask, &means, None);
    let mut new_w = w.clone();
    for (j, &m) in mask.iter().enumerate() {
        if m == 1 {
            for r in 0..new_w.rows() {
                new_w.set(r, j, 0.0);
            }
        }
    }
    Ok(PruneResult {
        mask,
        new_weights: new_w,
        bias: Some(bias),
        recon_error_before: before,
        recon_error_after: after,
        method: PruneMethodKind::Flap,
        shortfall: 0,
    })
}

/// Sparsity wrapper around [`flap_prune_count`].
pub fn flap_variant_prune(w: &Matrix, x: &Matrix, sp: f64) -> Result<PruneResult> {
    check_sparsity(sp)?;
    flap_prune_count(w, x, (sp * w.cols() as f64).floor() as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnBackend {
    Obc,
    Flap,
}

/// Spread `total` pruned channels over the groups proportionally to size
/// (largest remainder), capping each group at 95% pruned. Returns
/// (per-group counts, unplaceable shortfall).
fn group_budget(sizes: &[usize], total: usize) -> (Vec<usize>, usize) {
    let free: usize = sizes.iter().sum();
    if free == 0 || total == 0 {
        return (vec![0; sizes.len()], total);
    }
    let caps: Vec<usize> = sizes.iter().map(|&s| (0.95 * s as f64).floor() as usize).collect();
    let quotas: Vec<f64> = sizes
        .iter()
        .map(|&s| total as f64 * s as f64 / free as f64)
        .collect();
    let mut counts: Vec<usize> = quotas
        .iter()
        .zip(&caps)
        .map(|(&q, &cap)| (q.floor() as usize).min(cap))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut assigned: usize = counts.iter().sum();
    // remainder by largest fractional part, then round-robin into spare capacity
    loop {
        let mut progressed = false;
        for &k in &order {
            if assigned == total {
                break;
            }
            if counts[k] < caps[k] {
                counts[k] += 1;
                assigned += 1;
                progressed = true;
            }
        }
        if assigned == total || !progressed {
            break;
        }
    }
    (counts, total - assigned)
}

/// Group-wise reweighted pruning of a down-projection. Shared-group columns
/// are never pruned; each functional group is pruned at its own budget with
/// its own reweighted statistics, and compensation stays inside the group.
pub fn fang_prune_ffn(
    w_down: &Matrix,
    hidden: &Matrix,
    labels: &[usize],
    grouping: &NeuronGrouping,
    n_prune: usize,
    backend: FfnBackend,
    damping: f64,
) -> Result<FfnPruneResult> {
    let n = w_down.cols();
    if hidden.rows() != n {
        return Err(Error::Dimension("hidden rows != neuron count".into()));
    }
    grouping.check_partition(n)?;
    let sizes: Vec<usize> = grouping.groups.iter().map(|g| g.len()).collect();
    let (counts, shortfall) = group_budget(&sizes, n_prune);
    let mut mask = vec![0u8; n];
    let mut new_w = w_down.clone();
    let mut group_errors = Vec::with_capacity(grouping.groups.len());
    for (k, g) in grouping.groups.iter().enumerate() {
        let alpha_row = grouping.alpha.row(k);
        match backend {
            FfnBackend::Obc => {
                let hk = reweighted_hessian(hidden, labels, alpha_row, g)?;
                let wg = w_down.select_cols(g);
                let r = obc_prune_count(&wg, &hk, counts[k], damping)?;
                for (local, &j) in g.iter().enumerate() {
                    if r.mask[local] == 1 {
                        mask[j] = 1;
                    }
                    new_w.set_col(j, &r.new_weights.col(local));
                }
                group_errors.push((r.recon_error_before, r.recon_error_after));
            }
            FfnBackend::Flap => {
                let imp = flap_group_importance(w_down, hidden, labels, alpha_row, g)?;
                for local in lowest_indices(&imp, counts[k]) {
                    mask[g[local]] = 1;
                }
                let token_weights: Vec<f64> = labels.iter().map(|&l| alpha_row[l]).collect();
                let local_mask: Vec<u8> = g.iter().map(|&j| mask[j]).collect();
                let xg = hidden.select_rows(g);
                let wg = w_down.select_cols(g);
                let (gm, _) = flap_stats(&xg)?;
                group_errors.push(flap_errors(&wg, &xg, &local_mask, &gm, Some(&token_weights)));
            }
        }
    }
    let bias = if backend == FfnBackend::Flap {
        let (means, _) = flap_stats(hidden)?;
        for (j, &m) in mask.iter().enumerate() {
            if m == 1 {
                for r in 0..new_w.rows() {
                    new_w.set(r, j, 0.0);
                }
            }
        }
        Some(flap_bias(w_down, &mask, &means)?)
    } else {
        None
    };
    let before = group_errors.iter().map(|e| e.0).sum();
    let after = group_errors.iter().map(|e| e.1).sum();
    Ok(FfnPruneResult {
        result: PruneResult {
            mask,
            new_weights: new_w,
            bias,
            recon_error_before: before,
            recon_error_after: after,
            method: match backend {
                FfnBackend::Obc => PruneMethodKind::Obc,
                FfnBackend::Flap => PruneMethodKind::Flap,
            },
            shortfall,
        },
        group_errors,
    })
}

/// Prune `n_prune` whole attention heads of the output projection. Each head
/// owns a contiguous `d_head`-column block of `w_o`; `x` holds the
/// concatenated per-head inputs to `w_o`.
pub fn prune_heads_count(
    w_o: &Matrix,
    x: &Matrix,
    d_head: usize,
    n_prune: usize,
    backend: FfnBackend,
    damping: f64,
) -> Result<(PruneResult, Vec<u8>)> {
    let cols = w_o.cols();
    if d_head == 0 || cols % d_head != 0 {
        return Err(Error::Dimension(format!(
            "{cols} projection columns not divisible into heads of {d_head}"
        )));
    }
    if x.rows() != cols {
        return Err(Error::Dimension("capture rows != projection columns".into()));
    }
    let n_heads = cols / d_head;
    if n_prune >= n_heads {
        return Err(Error::Input("refusing to prune every head".into()));
    }
    let mut head_mask = vec![0u8; n_heads];
    if n_prune == 0 {
        let kind = match backend {
            FfnBackend::Obc => PruneMethodKind::Obc,
            FfnBackend::Flap => PruneMethodKind::Flap,
        };
        return Ok((identity_result(w_o, kind), head_mask));
    }
    let block = |h: usize| -> Vec<usize> { (h * d_head..(h + 1) * d_head).collect() };
    match backend {
        FfnBackend::Obc => {
            let h = hessian(x, None)?;
            let hinv = sym_inverse_damped(&h, damping, "attention hessian")?;
            let mut scores = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let b = block(hd);
                let wb = w_o.select_cols(&b);
                // trace form: e_B = tr(W_B (Hinv_BB)^-1 W_B^T)
                let hbb = hinv.select_rows(&b).select_cols(&b);
                let binv = sym_inverse_damped(&hbb, 0.0, "head inverse-Hessian block")?;
                let t1 = matmul(&wb, &binv)?;
                let e: f64 = t1.data().iter().zip(wb.data()).map(|(a, b)| a * b).sum();
                scores.push(e);
            }
            for hd in lowest_indices(&scores, n_prune) {
                head_mask[hd] = 1;
            }
            let mut mask = vec![0u8; cols];
            for (hd, &m) in head_mask.iter().enumerate() {
                if m == 1 {
                    for c in block(hd) {
                        mask[c] = 1;
                    }
                }
            }
            let delta = obc_compensate(w_o, &hinv, &mask)?;
            let before = recon_error(&mask_only_delta(w_o, &mask), &h);
            let after = recon_error(&delta, &h);
            let mut new_w = w_o.add(&delta)?;
            for (c, &m) in mask.iter().enumerate() {
                if m == 1 {
                    for r in 0..new_w.rows() {
                        new_w.set(r, c, 0.0);
                    }
                }
            }
            new_w.ensure_finite("compensated projection")?;
            Ok((
                PruneResult {
                    mask,
                    new_weights: new_w,
                    bias: None,
                    recon_error_before: before,
                    recon_error_after: after,
                    method: PruneMethodKind::Obc,
                    shortfall: 0,
                },
                head_mask,
            ))
        }
        FfnBackend::Flap => {
            let imp = flap_importance(w_o, x)?;
            let scores: Vec<f64> = (0..n_heads).map(|hd| block(hd).iter().map(|&c| imp[c]).sum()).collect();
            for hd in lowest_indices(&scores, n_prune) {
                head_mask[hd] = 1;
            }
            let mut mask = vec![0u8; cols];
            for (hd, &m) in head_mask.iter().enumerate() {
                if m == 1 {
                    for c in block(hd) {
                        mask[c] = 1;
                    }
                }
            }
            let (means, _) = flap_stats(x)?;
            let bias = flap_bias(w_o, &mask, &means)?;
            let (before, after) = flap_errors(w_o, x, &mask, &means, None);
            let mut new_w = w_o.clone();
            for (c, &m) in mask.iter().enumerate() {
                if m == 1 {
                    for r in 0..new_w.rows() {
                        new_w.set(r, c, 0.0);
                    }
                }
            }
            Ok((
                PruneResult {
                    mask,
                    new_weights: new_w,
                    bias: Some(bias),
                    recon_error_before: before,
                    recon_error_after: after,
                    method: PruneMethodKind::Flap,
                    shortfall: 0,
                },
                head_mask,
            ))
        }
    }
}

/// Sparsity wrapper: prunes floor(sp * n_heads) heads.
pub fn prune_heads(
    w_o: &Matrix,
    x: &Matrix,
    d_head: usize,
    sp: f64,
    backend: FfnBackend,
    damping: f64,
) -> Result<(PruneResult, Vec<u8>)> {
    check_sparsity(sp)?;
    let n_heads = if d_head == 0 { 0 } else { w_o.cols() / d_head };
    prune_heads_count(w_o, x, d_head, (sp * n_heads as f64).floor() as usize, backend, damping)
}
