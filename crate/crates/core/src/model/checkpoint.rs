//! Model configuration, parameter container, and archive serialization.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tensor, TensorArchive};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    /// Single up projection followed by the activation.
    Plain,
    /// Gated form: silu(W_gate x) elementwise-times (W_up x).
    Gated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_ffn: usize,
    pub ffn_kind: FfnKind,
    pub vocab: usize,
    pub norm_eps: f64,
    #[serde(default)]
    pub rope: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "d_model {} != n_heads {} * d_head {}",
                self.d_model, self.n_heads, self.d_head
            )));
        }
        if self.n_layers == 0 || self.vocab == 0 || self.n_ffn == 0 {
            return Err(Error::Config("zero-sized model dimension".into()));
        }
        if self.norm_eps <= 0.0 {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Reference toy model used throughout the test suite.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_head: 16,
            n_ffn: 192,
            ffn_kind: FfnKind::Gated,
            vocab: 259,
            norm_eps: 1e-6,
            rope: false,
            seed,
        }
    }
}

/// Weights for one transformer block. Head and neuron counts are per-layer
/// because masks physically shrink them.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub n_heads: usize,
    pub n_ffn: usize,
    /// (n_heads*d_head) x d, head i occupying row block i.
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    /// d x (n_heads*d_head)
    pub w_o: Matrix,
    /// n_ffn x d, present only for the gated FFN kind.
    pub w_gate: Option<Matrix>,
    /// n_ffn x d
    pub w_up: Matrix,
    /// d x n_ffn
    pub w_down: Matrix,
    /// Compensation bias on the attention output (d).
    pub b_attn: Vec<f64>,
    /// Compensation bias on the FFN output (d).
    pub b_down: Vec<f64>,
    pub norm_attn: Vec<f64>,
    pub norm_ffn: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// vocab x d
    pub embed: Matrix,
    pub norm_final: Vec<f64>,
    /// vocab x d
    pub head: Matrix,
    pub layers: Vec<LayerWeights>,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    // Box-Muller; sampled in a fixed order for determinism.
    let mut data = Vec::with_capacity(rows * cols);
    while data.len() < rows * cols {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
        data.push(r * c * std);
        if data.len() < rows * cols {
            data.push(r * s * std);
        }
    }
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Deterministic scaled-Gaussian initialization from (config, seed).
pub fn init_model(config: &ModelConfig) -> Result<Checkpoint> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let proj_std = 1.0 / (d as f64).sqrt();
    let resid_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let hd = config.n_heads * config.d_head;
        layers.push(LayerWeights {
            n_heads: config.n_heads,
            n_ffn: config.n_ffn,
            w_q: gaussian(&mut rng, hd, d, proj_std),
            w_k: gaussian(&mut rng, hd, d, proj_std),
            w_v: gaussian(&mut rng, hd, d, proj_std),
            w_o: gaussian(&mut rng, d, hd, proj_std * resid_scale),
            w_gate: match config.ffn_kind {
                FfnKind::Gated => Some(gaussian(&mut rng, config.n_ffn, d, proj_std)),
                FfnKind::Plain => None,
            },
            w_up: gaussian(&mut rng, config.n_ffn, d, proj_std),
            w_down: gaussian(
                &mut rng,
                d,
                config.n_ffn,
                resid_scale / (config.n_ffn as f64).sqrt(),
            ),
            b_attn: vec![0.0; d],
            b_down: vec![0.0; d],
            norm_attn: vec![1.0; d],
            norm_ffn: vec![1.0; d],
        });
    }
    Ok(Checkpoint {
        embed: gaussian(&mut rng, config.vocab, d, 0.5),
        norm_final: vec![1.0; d],
        head: gaussian(&mut rng, config.vocab, d, proj_std),
        layers,
        config: config.clone(),
    })
}

impl Checkpoint {
    /// Total parameter count across all tensors.
    pub fn param_count(&self) -> usize {
        let mut n = self.embed.rows() * self.embed.cols()
            + self.head.rows() * self.head.cols()
            + self.norm_final.len();
        for l in &self.layers {
            n += l.w_q.rows() * l.w_q.cols()
                + l.w_k.rows() * l.w_k.cols()
                + l.w_v.rows() * l.w_v.cols()
                + l.w_o.rows() * l.w_o.cols()
                + l.w_up.rows() * l.w_up.cols()
                + l.w_down.rows() * l.w_down.cols()
                + l.w_gate.as_ref().map_or(0, |g| g.rows() * g.cols())
                + l.b_attn.len()
                + l.b_down.len()
                + l.norm_attn.len()
                + l.norm_ffn.len();
        }
        n
    }

    /// Parameters in prunable matrices only (attention projections and the
    /// FFN up/gate/down weights).
    pub fn prunable_param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.w_q.rows() * l.w_q.cols()
                    + l.w_k.rows() * l.w_k.cols()
                    + l.w_v.rows() * l.w_v.cols()
                    + l.w_o.rows() * l.w_o.cols()
                    + l.w_up.rows() * l.w_up.cols()
                    + l.w_down.rows() * l.w_down.cols()
                    + l.w_gate.as_ref().map_or(0, |g| g.rows() * g.cols())
            })
            .sum()
    }

    pub fn to_archive(&self) -> Result<TensorArchive> {
        let mut a = TensorArchive::new();
        let mut meta = BTreeMap::new();
        meta.insert("config".to_string(), serde_json::to_string(&self.config)?);
        meta.insert(
            "layer_dims".to_string(),
            serde_json::to_string(
                &self
                    .layers
                    .iter()
                    .map(|l| (l.n_heads, l.n_ffn))
                    .collect::<Vec<_>>(),
            )?,
        );
        a.meta = meta;
        a.insert("embed", Tensor::from_matrix(&self.embed))?;
        a.insert("norm_final", Tensor::from_vec(&self.norm_final))?;
        a.insert("head", Tensor::from_matrix(&self.head))?;
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("layers.{i}");
            a.insert(&format!("{p}.w_q"), Tensor::from_matrix(&l.w_q))?;
            a.insert(&format!("{p}.w_k"), Tensor::from_matrix(&l.w_k))?;
            a.insert(&format!("{p}.w_v"), Tensor::from_matrix(&l.w_v))?;
            a.insert(&format!("{p}.w_o"), Tensor::from_matrix(&l.w_o))?;
            if let Some(g) = &l.w_gate {
                a.insert(&format!("{p}.w_gate"), Tensor::from_matrix(g))?;
            }
            a.insert(&format!("{p}.w_up"), Tensor::from_matrix(&l.w_up))?;
            a.insert(&format!("{p}.w_down"), Tensor::from_matrix(&l.w_down))?;
            a.insert(&format!("{p}.b_attn"), Tensor::from_vec(&l.b_attn))?;
            a.insert(&format!("{p}.b_down"), Tensor::from_vec(&l.b_down))?;
            a.insert(&format!("{p}.norm_attn"), Tensor::from_vec(&l.norm_attn))?;
            a.insert(&format!("{p}.norm_ffn"), Tensor::from_vec(&l.norm_ffn))?;
        }
        Ok(a)
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Checkpoint> {
        let config: ModelConfig = serde_json::from_str(
            a.meta
                .get("config")
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    msg: "checkpoint archive missing config metadata".into(),
                })?,
        )?;
        let layer_dims: Vec<(usize, usize)> = serde_json::from_str(
            a.meta
                .get("layer_dims")
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    msg: "checkpoint archive missing layer_dims metadata".into(),
                })?,
        )?;
        let vec_of = |name: &str| -> Result<Vec<f64>> { Ok(a.require(name)?.data.clone()) };
        let mat_of = |name: &str| -> Result<Matrix> { a.require(name)?.to_matrix() };
        let mut layers = Vec::with_capacity(config.n_layers);
        for (i, &(n_heads, n_ffn)) in layer_dims.iter().enumerate() {
            let p = format!("layers.{i}");
            layers.push(LayerWeights {
                n_heads,
                n_ffn,
                w_q: mat_of(&format!("{p}.w_q"))?,
                w_k: mat_of(&format!("{p}.w_k"))?,
                w_v: mat_of(&format!("{p}.w_v"))?,
                w_o: mat_of(&format!("{p}.w_o"))?,
                w_gate: match config.ffn_kind {
                    FfnKind::Gated => Some(mat_of(&format!("{p}.w_gate"))?),
                    FfnKind::Plain => None,
                },
                w_up: mat_of(&format!("{p}.w_up"))?,
                w_down: mat_of(&format!("{p}.w_down"))?,
                b_attn: vec_of(&format!("{p}.b_attn"))?,
                b_down: vec_of(&format!("{p}.b_down"))?,
                norm_attn: vec_of(&format!("{p}.norm_attn"))?,
                norm_ffn: vec_of(&format!("{p}.norm_ffn"))?,
            });
        }
        let ckpt = Checkpoint {
            embed: mat_of("embed")?,
            norm_final: vec_of("norm_final")?,
            head: mat_of("head")?,
            layers,
            config,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_archive(&TensorArchive::read(path)?)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        let d = c.d_model;
        let chk = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("checkpoint shape mismatch: {what}")))
            }
        };
        chk(self.embed.rows() == c.vocab && self.embed.cols() == d, "embed")?;
        chk(self.head.rows() == c.vocab && self.head.cols() == d, "head")?;
        for (i, l) in self.layers.iter().enumerate() {
            let hd = l.n_heads * c.d_head;
            chk(l.w_q.rows() == hd && l.w_q.cols() == d, &format!("layers.{i}.w_q"))?;
            chk(l.w_o.rows() == d && l.w_o.cols() == hd, &format!("layers.{i}.w_o"))?;
            chk(
                l.w_up.rows() == l.n_ffn && l.w_up.cols() == d,
                &format!("layers.{i}.w_up"),
            )?;
            chk(
                l.w_down.rows() == d && l.w_down.cols() == l.n_ffn,
                &format!("layers.{i}.w_down"),
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy(5);
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_rejects_inconsistent_dims() {
        let cfg = ModelConfig {
            d_head: 8,
            ..ModelConfig::toy(0)
        };
        assert!(matches!(init_model(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn archive_round_trip() {
        let cfg = ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            n_ffn: 12,
            ..ModelConfig::toy(3)
        };
        let ckpt = init_model(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, back);
    }
}
