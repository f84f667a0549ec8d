//! Per-block sparsity allocation. Blocks that transform their input more
//! (higher functional complexity) receive less pruning; the per-block levels
//! are affinely spread over [0.5*sp, 1.5*sp] and renormalized so the
//! parameter-weighted mean hits the global target.

use serde::{Deserialize, Serialize};

use crate::calib::BlockCapture;
use crate::error::{Error, Result};
use crate::numcore::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllocMode {
    Uniform,
    Fc,
    Taylor,
}

impl std::str::FromStr for AllocMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(AllocMode::Uniform),
            "fc" => Ok(AllocMode::Fc),
            "taylor" => Ok(AllocMode::Taylor),
            other => Err(Error::Parameter(format!("unknown allocation mode {other:?}"))),
        }
    }
}

/// Per-block sparsity levels plus the signal that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparsityPlan {
    pub per_block: Vec<f64>,
    pub target: f64,
    /// Driving per-block signal: functional complexity in `fc` mode,
    /// normalized sensitivity in `taylor` mode, empty in `uniform` mode.
    pub fc: Vec<f64>,
    pub mode: AllocMode,
}

/// 1 - mean cosine similarity between aligned columns of the block input and
/// output. Columns where either side has zero norm are skipped; the count of
/// skipped columns is returned alongside.
pub fn block_complexity(block_in: &Matrix, block_out: &Matrix) -> Result<(f64, usize)> {
    if block_in.rows() != block_out.rows() || block_in.cols() != block_out.cols() {
        return Err(Error::Dimension("block capture shapes differ".into()));
    }
    let t = block_in.cols();
    let mut sum = 0.0;
    let mut used = 0usize;
    for c in 0..t {
        let mut dot = 0.0;
        let mut na = 0.0;
        let mut nb = 0.0;
        for r in 0..block_in.rows() {
            let a = block_in.get(r, c);
            let b = block_out.get(r, c);
            dot += a * b;
            na += a * a;
            nb += b * b;
        }
        if na == 0.0 || nb == 0.0 {
            continue;
        }
        sum += dot / (na.sqrt() * nb.sqrt());
        used += 1;
    }
    if used == 0 {
        return Err(Error::Data("every capture column has zero norm".into()));
    }
    Ok((1.0 - sum / used as f64, t - used))
}

/// Functional complexity per captured block.
pub fn functional_complexity(captures: &[BlockCapture]) -> Result<(Vec<f64>, usize)> {
    let mut fc = Vec::with_capacity(captures.len());
    let mut skipped = 0;
    for cap in captures {
        let (v, s) = block_complexity(&cap.block_in, &cap.block_out)?;
        fc.push(v);
        skipped += s;
    }
    Ok((fc, skipped))
}

fn check_target(sp: f64) -> Result<()> {
    if !(sp > 0.0 && sp < 2.0 / 3.0) {
        return Err(Error::Parameter(format!(
            "global sparsity {sp} outside (0, 2/3)"
        )));
    }
    Ok(())
}

/// Affine spread of (1 - signal) over [0.5*sp, 1.5*sp], then shift+clamp
/// until the weighted mean is within 0.5% of sp.
fn spread_and_renormalize(signal: &[f64], sp: f64, weights: &[f64]) -> Result<Vec<f64>> {
    let lo = 0.5 * sp;
    let hi = 1.5 * sp;
    let v: Vec<f64> = signal.iter().map(|&s| 1.0 - s).collect();
    let vmin = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut per: Vec<f64> = if vmax - vmin <= 1e-12 {
        vec![sp; v.len()]
    } else {
        v.iter().map(|&x| lo + (hi - lo) * (x - vmin) / (vmax - vmin)).collect()
    };
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Input("block weights must have positive sum".into()));
    }
    for _ in 0..20 {
        let mean: f64 = per.iter().zip(weights).map(|(p, w)| p * w).sum::<f64>() / wsum;
        if (mean - sp).abs() <= 0.005 * sp {
            break;
        }
        let shift = sp - mean;
        for p in per.iter_mut() {
            *p = (*p + shift).clamp(lo, hi);
        }
    }
    let mean: f64 = per.iter().zip(weights).map(|(p, w)| p * w).sum::<f64>() / wsum;
    if (mean - sp).abs() > 0.005 * sp {
        return Err(Error::Numerical(format!(
            "allocation mean {mean} did not converge to target {sp}"
        )));
    }
    Ok(per)
}

/// Build the per-block plan. `weights` are the blocks' prunable parameter
/// counts, used for the weighted-mean renormalization.
pub fn sparsity_plan(fc: &[f64], sp: f64, mode: AllocMode, weights: &[f64]) -> Result<SparsityPlan> {
    check_target(sp)?;
    if mode != AllocMode::Uniform && (fc.is_empty() || fc.len() != weights.len()) {
        return Err(Error::Dimension("signal/weight length mismatch".into()));
    }
    let per_block = match mode {
        AllocMode::Uniform => vec![sp; weights.len()],
        AllocMode::Fc | AllocMode::Taylor => spread_and_renormalize(fc, sp, weights)?,
    };
    Ok(SparsityPlan {
        per_block,
        target: sp,
        fc: if mode == AllocMode::Uniform { vec![] } else { fc.to_vec() },
        mode,
    })
}

/// Mean absolute first-order sensitivity of a block's FFN activations.
pub fn taylor_sensitivity(hidden: &Matrix, grad: &Matrix) -> Result<f64> {
    if hidden.rows() != grad.rows() || hidden.cols() != grad.cols() {
        return Err(Error::Dimension("hidden and grad shapes differ".into()));
    }
    let n = hidden.data().len();
    if n == 0 {
        return Err(Error::Input("empty capture".into()));
    }
    Ok(hidden
        .data()
        .iter()
        .zip(grad.data())
        .map(|(h, g)| (h * g).abs())
        .sum::<f64>()
        / n as f64)
}

/// Sensitivity-driven plan: blocks whose activations matter less to the loss
/// take more sparsity. Uses the same spread machinery on the max-normalized
/// sensitivities.
pub fn taylor_allocation(captures: &[BlockCapture], sp: f64, weights: &[f64]) -> Result<SparsityPlan> {
    check_target(sp)?;
    let t: Vec<f64> = captures
        .iter()
        .map(|c| taylor_sensitivity(&c.hidden, &c.grad))
        .collect::<Result<_>>()?;
    let tmax = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if tmax <= 0.0 {
        return Err(Error::Data("all block sensitivities are zero".into()));
    }
    let norm: Vec<f64> = t.iter().map(|&v| v / tmax).collect();
    sparsity_plan(&norm, sp, AllocMode::Taylor, weights)
}
