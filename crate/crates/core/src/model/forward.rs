//! Forward pass with optional activation capture, and perplexity evaluation.

use crate::error::{Error, Result};
use crate::model::checkpoint::{Checkpoint, LayerWeights};
use crate::model::silu;
use crate::numcore::{matmul, Matrix};

/// Per-block activation record from a single forward pass, with one column
/// per token position (the calibration layer trims the last column).
#[derive(Debug, Clone)]
pub struct RawBlockCapture {
    /// Normed input consumed by the FFN up/gate projections (d x T).
    pub ffn_input: Matrix,
    /// FFN hidden activations at the input to w_down (n_ffn x T).
    pub hidden: Matrix,
    /// Concatenated head outputs at the input to w_o ((n_heads*d_head) x T).
    pub attn_concat: Matrix,
    /// Residual stream entering the block (d x T).
    pub block_in: Matrix,
    /// Residual stream leaving the block (d x T).
    pub block_out: Matrix,
}

pub(crate) struct BlockTrace {
    pub x_in: Matrix,
    pub inv_attn: Vec<f64>,
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Attention weights per head; row t1 holds the distribution over t2 <= t1.
    pub probs: Vec<Matrix>,
    pub attn_concat: Matrix,
    pub x_mid: Matrix,
    pub inv_ffn: Vec<f64>,
    pub f_in: Matrix,
    pub gate_pre: Option<Matrix>,
    pub up_pre: Matrix,
    pub hidden: Matrix,
    pub x_out: Matrix,
}

pub(crate) struct Trace {
    pub blocks: Vec<BlockTrace>,
    pub inv_final: Vec<f64>,
    pub logits: Matrix,
}

/// RMS normalization per column: y = g .* x / rms(x). Returns (y, 1/rms).
fn rmsnorm(x: &Matrix, gains: &[f64], eps: f64) -> (Matrix, Vec<f64>) {
    let d = x.rows();
    let t = x.cols();
    let mut y = Matrix::zeros(d, t);
    let mut inv = vec![0.0; t];
    for c in 0..t {
        let mut ss = 0.0;
        for r in 0..d {
            let v = x.get(r, c);
            ss += v * v;
        }
        let iv = 1.0 / (ss / d as f64 + eps).sqrt();
        inv[c] = iv;
        for r in 0..d {
            y.set(r, c, gains[r] * x.get(r, c) * iv);
        }
    }
    (y, inv)
}

/// Rotate (q or k) head rows in place by position-dependent angles.
/// `sign` is +1 for forward, -1 for the backward (inverse) rotation.
pub(crate) fn rope_rotate(m: &mut Matrix, n_heads: usize, d_head: usize, sign: f64) {
    let t = m.cols();
    for h in 0..n_heads {
        for i in 0..d_head / 2 {
            let theta_base = 10000f64.powf(-2.0 * i as f64 / d_head as f64);
            let r0 = h * d_head + 2 * i;
            let r1 = r0 + 1;
            for pos in 0..t {
                let theta = sign * pos as f64 * theta_base;
                let (s, c) = theta.sin_cos();
                let a = m.get(r0, pos);
                let b = m.get(r1, pos);
                m.set(r0, pos, a * c - b * s);
                m.set(r1, pos, a * s + b * c);
            }
        }
    }
}

fn block_forward(
    l: &LayerWeights,
    x: &Matrix,
    cfg_eps: f64,
    d_head: usize,
    rope: bool,
    perturb: Option<(usize, usize, f64)>,
) -> Result<BlockTrace> {
    let t = x.cols();
    let d = x.rows();
    let (a_in, inv_attn) = rmsnorm(x, &l.norm_attn, cfg_eps);
    let mut q = matmul(&l.w_q, &a_in)?;
    let mut k = matmul(&l.w_k, &a_in)?;
    let v = matmul(&l.w_v, &a_in)?;
    if rope {
        rope_rotate(&mut q, l.n_heads, d_head, 1.0);
        rope_rotate(&mut k, l.n_heads, d_head, 1.0);
    }
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut probs = Vec::with_capacity(l.n_heads);
    let mut attn_concat = Matrix::zeros(l.n_heads * d_head, t);
    for h in 0..l.n_heads {
        let base = h * d_head;
        let mut p = Matrix::zeros(t, t);
        for t1 in 0..t {
            // causal softmax over t2 <= t1
            let mut row = vec![0.0; t1 + 1];
            let mut maxv = f64::NEG_INFINITY;
            for (t2, rv) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for r in 0..d_head {
                    s += q.get(base + r, t1) * k.get(base + r, t2);
                }
                *rv = s * scale;
                maxv = maxv.max(*rv);
            }
            let mut denom = 0.0;
            for rv in row.iter_mut() {
                *rv = (*rv - maxv).exp();
                denom += *rv;
            }
            for (t2, rv) in row.iter().enumerate() {
                p.set(t1, t2, rv / denom);
            }
            for r in 0..d_head {
                let mut acc = 0.0;
                for t2 in 0..=t1 {
                    acc += p.get(t1, t2) * v.get(base + r, t2);
                }
                attn_concat.set(base + r, t1, acc);
            }
        }
        probs.push(p);
    }
    let attn_out = matmul(&l.w_o, &attn_concat)?;
    let mut x_mid = x.add(&attn_out)?;
    for c in 0..t {
        for r in 0..d {
            x_mid.set(r, c, x_mid.get(r, c) + l.b_attn[r]);
        }
    }
    let (f_in, inv_ffn) = rmsnorm(&x_mid, &l.norm_ffn, cfg_eps);
    let up_pre = matmul(&l.w_up, &f_in)?;
    let (gate_pre, hidden) = match &l.w_gate {
        Some(wg) => {
            let g = matmul(wg, &f_in)?;
            let mut h = Matrix::zeros(l.n_ffn, t);
            for r in 0..l.n_ffn {
                for c in 0..t {
                    h.set(r, c, silu(g.get(r, c)) * up_pre.get(r, c));
                }
            }
            (Some(g), h)
        }
        None => {
            let mut h = Matrix::zeros(l.n_ffn, t);
            for r in 0..l.n_ffn {
                for c in 0..t {
                    h.set(r, c, silu(up_pre.get(r, c)));
                }
            }
            (None, h)
        }
    };
    let mut hidden = hidden;
    if let Some((r, c, delta)) = perturb {
        hidden.set(r, c, hidden.get(r, c) + delta);
    }
    let ffn_out = matmul(&l.w_down, &hidden)?;
    let mut x_out = x_mid.add(&ffn_out)?;
    for c in 0..t {
        for r in 0..d {
            x_out.set(r, c, x_out.get(r, c) + l.b_down[r]);
        }
    }
    Ok(BlockTrace {
        x_in: x.clone(),
        inv_attn,
        q,
        k,
        v,
        probs,
        attn_concat,
        x_mid,
        inv_ffn,
        f_in,
        gate_pre,
        up_pre,
        hidden,
        x_out,
    })
}

pub(crate) fn run_forward(ckpt: &Checkpoint, tokens: &[u32]) -> Result<Trace> {
    run_forward_perturbed(ckpt, tokens, None)
}

/// Forward pass with an optional additive perturbation of one FFN hidden
/// activation (layer, row, column). Used by finite-difference checks.
pub(crate) fn run_forward_perturbed(
    ckpt: &Checkpoint,
    tokens: &[u32],
    perturb: Option<(usize, usize, usize, f64)>,
) -> Result<Trace> {
    let cfg = &ckpt.config;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Input("empty token sequence".into()));
    }
    for &id in tokens {
        if id as usize >= cfg.vocab {
            return Err(Error::Input(format!(
                "token id {id} out of range (vocab {})",
                cfg.vocab
            )));
        }
    }
    let d = cfg.d_model;
    let mut x = Matrix::zeros(d, t);
    for (c, &id) in tokens.iter().enumerate() {
        for r in 0..d {
            x.set(r, c, ckpt.embed.get(id as usize, r));
        }
    }
    let mut blocks = Vec::with_capacity(ckpt.layers.len());
    for (li, l) in ckpt.layers.iter().enumerate() {
        let p = match perturb {
            Some((pl, r, c, delta)) if pl == li => Some((r, c, delta)),
            _ => None,
        };
        let bt = block_forward(l, &x, cfg.norm_eps, cfg.d_head, cfg.rope, p)?;
        x = bt.x_out.clone();
        blocks.push(bt);
    }
    let (xf, inv_final) = rmsnorm(&x, &ckpt.norm_final, cfg.norm_eps);
    let logits = matmul(&ckpt.head, &xf)?;
    logits.ensure_finite("logits")?;
    Ok(Trace {
        blocks,
        inv_final,
        logits,
    })
}

/// Forward pass over one sequence. With `capture` set, returns the per-block
/// activation records alongside the logits.
pub fn forward(
    ckpt: &Checkpoint,
    tokens: &[u32],
    capture: bool,
) -> Result<(Matrix, Option<Vec<RawBlockCapture>>)> {
    let trace = run_forward(ckpt, tokens)?;
    let captures = capture.then(|| {
        trace
            .blocks
            .iter()
            .map(|b| RawBlockCapture {
                ffn_input: b.f_in.clone(),
                hidden: b.hidden.clone(),
                attn_concat: b.attn_concat.clone(),
                block_in: b.x_in.clone(),
                block_out: b.x_out.clone(),
            })
            .collect()
    });
    Ok((trace.logits, captures))
}

/// Summed next-token NLL with one FFN hidden activation additively
/// perturbed, plus the predicted-position count. Finite-difference hook for
/// gradient verification.
pub fn nll_with_hidden_perturbation(
    ckpt: &Checkpoint,
    tokens: &[u32],
    layer: usize,
    row: usize,
    col: usize,
    delta: f64,
) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::Input("need at least two tokens".into()));
    }
    let trace = run_forward_perturbed(ckpt, tokens, Some((layer, row, col, delta)))?;
    Ok((nll_sum(&trace.logits, tokens), tokens.len() - 1))
}

/// Sum of next-token negative log-likelihoods over a logit matrix.
pub(crate) fn nll_sum(logits: &Matrix, tokens: &[u32]) -> f64 {
    let t = tokens.len();
    let v = logits.rows();
    let mut total = 0.0;
    for pos in 0..t - 1 {
        let mut maxv = f64::NEG_INFINITY;
        for r in 0..v {
            maxv = maxv.max(logits.get(r, pos));
        }
        let mut denom = 0.0;
        for r in 0..v {
            denom += (logits.get(r, pos) - maxv).exp();
        }
        let target = tokens[pos + 1] as usize;
        total += denom.ln() + maxv - logits.get(target, pos);
    }
    total
}

/// Sum of next-token negative log-likelihoods and the number of predicted
/// positions for one window.
pub(crate) fn window_nll(ckpt: &Checkpoint, tokens: &[u32]) -> Result<(f64, usize)> {
    let trace = run_forward(ckpt, tokens)?;
    Ok((nll_sum(&trace.logits, tokens), tokens.len() - 1))
}

/// exp(mean next-token NLL) over non-overlapping windows of `window` tokens.
/// A trailing window shorter than `window` but with at least two tokens still
/// contributes.
pub fn perplexity(ckpt: &Checkpoint, corpus: &[u32], window: usize) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Input("perplexity needs at least two tokens".into()));
    }
    if window < 2 {
        return Err(Error::Parameter("window must be at least 2".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in corpus.chunks(window) {
        if chunk.len() < 2 {
            continue;
        }
        let (nll, n) = window_nll(ckpt, chunk)?;
        total += nll;
        count += n;
    }
    Ok((total / count as f64).exp())
}
