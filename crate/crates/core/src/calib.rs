//! Calibration corpora, capture passes, and sequential propagation.
//!
//! Tokenization is byte-level: token id == byte value, with ids 256..258
//! reserved for specials the toy pipeline never emits. Captures drop the
//! last position of every sequence so that activation columns align one to
//! one with gradient columns.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{forward, loss_and_grads, Checkpoint};
use crate::numcore::Matrix;

pub const BYTE_VOCAB: usize = 259;

/// Deterministic byte-to-id tokenization of a text file.
pub fn load_corpus(path: &Path) -> Result<Vec<u32>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Input(format!("empty corpus file {path:?}")));
    }
    Ok(bytes.into_iter().map(u32::from).collect())
}

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| u32::from(b)).collect()
}

pub fn detokenize(ids: &[u32]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Input(format!("token id {id} is not a byte")))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct CalibSet {
    pub sequences: Vec<Vec<u32>>,
    pub source: String,
    pub seed: u64,
}

/// Sample `n_seqs` windows of `seq_len` tokens at uniform start offsets.
pub fn sample_calibration(
    corpus: &[u32],
    n_seqs: usize,
    seq_len: usize,
    seed: u64,
) -> Result<CalibSet> {
    if seq_len < 2 {
        return Err(Error::Parameter("seq_len must be at least 2".into()));
    }
    if corpus.len() < seq_len {
        return Err(Error::Input(format!(
            "corpus length {} shorter than seq_len {}",
            corpus.len(),
            seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_start = corpus.len() - seq_len;
    let sequences = (0..n_seqs)
        .map(|_| {
            let start = rng.gen_range(0..=max_start);
            corpus[start..start + seq_len].to_vec()
        })
        .collect();
    Ok(CalibSet {
        sequences,
        source: String::new(),
        seed,
    })
}

/// Per-block calibration record over all calibration sequences, columns
/// concatenated in sequence order. All fields share the same
/// `T_total = n_seqs * (seq_len - 1)` positionally aligned columns.
#[derive(Debug, Clone)]
pub struct BlockCapture {
    pub layer: usize,
    /// Input consumed by the FFN projections (d x T_total).
    pub ffn_input: Matrix,
    /// FFN hidden activations at the input of w_down (n_ffn x T_total).
    pub hidden: Matrix,
    /// Concatenated head outputs at the input of w_o.
    pub attn_concat: Matrix,
    /// Gradient snapshot dL/dh from the dense model; never refreshed.
    pub grad: Matrix,
    pub block_in: Matrix,
    pub block_out: Matrix,
}

fn trim_last_col(m: &Matrix) -> Matrix {
    m.select_cols(&(0..m.cols() - 1).collect::<Vec<_>>())
}

/// Capture forward activations and the dense-model gradient snapshot for
/// every block, concatenated over the calibration sequences.
pub fn capture_all(ckpt: &Checkpoint, calib: &CalibSet) -> Result<Vec<BlockCapture>> {
    let per_seq: Vec<_> = calib
        .sequences
        .par_iter()
        .map(|toks| -> Result<_> {
            let (_, caps) = forward(ckpt, toks, true)?;
            let (_, grads) = loss_and_grads(ckpt, toks)?;
            Ok((caps.expect("capture requested"), grads))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;

    let n_layers = ckpt.layers.len();
    let mut out = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let ffn_input: Vec<Matrix> = per_seq.iter().map(|(c, _)| trim_last_col(&c[l].ffn_input)).collect();
        let hidden: Vec<Matrix> = per_seq.iter().map(|(c, _)| trim_last_col(&c[l].hidden)).collect();
        let attn: Vec<Matrix> = per_seq.iter().map(|(c, _)| trim_last_col(&c[l].attn_concat)).collect();
        let block_in: Vec<Matrix> = per_seq.iter().map(|(c, _)| trim_last_col(&c[l].block_in)).collect();
        let block_out: Vec<Matrix> = per_seq.iter().map(|(c, _)| trim_last_col(&c[l].block_out)).collect();
        let grads: Vec<&Matrix> = per_seq.iter().map(|(_, g)| &g[l]).collect();
        out.push(BlockCapture {
            layer: l,
            ffn_input: Matrix::hcat(&ffn_input.iter().collect::<Vec<_>>())?,
            hidden: Matrix::hcat(&hidden.iter().collect::<Vec<_>>())?,
            attn_concat: Matrix::hcat(&attn.iter().collect::<Vec<_>>())?,
            grad: Matrix::hcat(&grads)?,
            block_in: Matrix::hcat(&block_in.iter().collect::<Vec<_>>())?,
            block_out: Matrix::hcat(&block_out.iter().collect::<Vec<_>>())?,
        });
    }
    Ok(out)
}

/// Recompute the forward-only capture fields for layers >= `from_layer`
/// through the current (possibly partially pruned) checkpoint. Gradient
/// snapshots are left untouched.
pub fn refresh_forward(
    ckpt: &Checkpoint,
    calib: &CalibSet,
    captures: &mut [BlockCapture],
    from_layer: usize,
) -> Result<()> {
    let per_seq: Vec<_> = calib
        .sequences
        .par_iter()
        .map(|toks| -> Result<_> {
            let (_, caps) = forward(ckpt, toks, true)?;
            Ok(caps.expect("capture requested"))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    for l in from_layer..captures.len() {
        let ffn_input: Vec<Matrix> = per_seq.iter().map(|c: &Vec<_>| trim_last_col(&c[l].ffn_input)).collect();
        let hidden: Vec<Matrix> = per_seq.iter().map(|c| trim_last_col(&c[l].hidden)).collect();
        let attn: Vec<Matrix> = per_seq.iter().map(|c| trim_last_col(&c[l].attn_concat)).collect();
        let block_in: Vec<Matrix> = per_seq.iter().map(|c| trim_last_col(&c[l].block_in)).collect();
        let block_out: Vec<Matrix> = per_seq.iter().map(|c| trim_last_col(&c[l].block_out)).collect();
        captures[l].ffn_input = Matrix::hcat(&ffn_input.iter().collect::<Vec<_>>())?;
        captures[l].hidden = Matrix::hcat(&hidden.iter().collect::<Vec<_>>())?;
        captures[l].attn_concat = Matrix::hcat(&attn.iter().collect::<Vec<_>>())?;
        captures[l].block_in = Matrix::hcat(&block_in.iter().collect::<Vec<_>>())?;
        captures[l].block_out = Matrix::hcat(&block_out.iter().collect::<Vec<_>>())?;
    }
    Ok(())
}
