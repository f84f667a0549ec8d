//! Physical application of head and neuron pruning masks: pruned heads lose
//! their q/k/v row blocks and the matching w_o columns, pruned neurons lose
//! their up/gate rows and w_down columns.

use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;

/// Remove the heads flagged with 1 in `mask` from `layer`. An optional bias
/// (from FLAP-style compensation) is accumulated into the layer's attention
/// output bias.
pub fn apply_head_mask(
    ckpt: &Checkpoint,
    layer: usize,
    mask: &[u8],
    bias: Option<&[f64]>,
) -> Result<Checkpoint> {
    let lw = ckpt
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?;
    if mask.len() != lw.n_heads {
        return Err(Error::Dimension(format!(
            "head mask length {} != n_heads {}",
            mask.len(),
            lw.n_heads
        )));
    }
    let kept: Vec<usize> = (0..lw.n_heads).filter(|&h| mask[h] == 0).collect();
    if kept.is_empty() {
        return Err(Error::Input(format!(
            "refusing to prune every head of layer {layer}"
        )));
    }
    let dh = ckpt.config.d_head;
    let kept_rows: Vec<usize> = kept
        .iter()
        .flat_map(|&h| h * dh..(h + 1) * dh)
        .collect();
    let mut out = ckpt.clone();
    let l = &mut out.layers[layer];
    l.w_q = l.w_q.select_rows(&kept_rows);
    l.w_k = l.w_k.select_rows(&kept_rows);
    l.w_v = l.w_v.select_rows(&kept_rows);
    l.w_o = l.w_o.select_cols(&kept_rows);
    l.n_heads = kept.len();
    if let Some(b) = bias {
        if b.len() != l.b_attn.len() {
            return Err(Error::Dimension("head bias length mismatch".into()));
        }
        for (acc, v) in l.b_attn.iter_mut().zip(b) {
            *acc += v;
        }
    }
    Ok(out)
}

/// Remove the FFN neurons flagged with 1 in `mask` from `layer`. An optional
/// compensation bias is accumulated into the layer's FFN output bias.
pub fn apply_neuron_mask(
    ckpt: &Checkpoint,
    layer: usize,
    mask: &[u8],
    bias: Option<&[f64]>,
) -> Result<Checkpoint> {
    let lw = ckpt
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range")))?;
    if mask.len() != lw.n_ffn {
        return Err(Error::Dimension(format!(
            "neuron mask length {} != n_ffn {}",
            mask.len(),
            lw.n_ffn
        )));
    }
    let kept: Vec<usize> = (0..lw.n_ffn).filter(|&j| mask[j] == 0).collect();
    if kept.is_empty() {
        return Err(Error::Input(format!(
            "refusing to prune every neuron of layer {layer}"
        )));
    }
    let mut out = ckpt.clone();
    let l = &mut out.layers[layer];
    l.w_up = l.w_up.select_rows(&kept);
    if let Some(g) = &l.w_gate {
        l.w_gate = Some(g.select_rows(&kept));
    }
    l.w_down = l.w_down.select_cols(&kept);
    l.n_ffn = kept.len();
    if let Some(b) = bias {
        if b.len() != l.b_down.len() {
            return Err(Error::Dimension("neuron bias length mismatch".into()));
        }
        for (acc, v) in l.b_down.iter_mut().zip(b) {
            *acc += v;
        }
    }
    Ok(out)
}
