//! Minimal pre-norm decoder-only transformer with hand-derived forward and
//! backward passes, plus physical application of head and neuron masks.

mod backward;
mod checkpoint;
mod forward;
mod masks;
mod train;

pub use checkpoint::{init_model, Checkpoint, FfnKind, LayerWeights, ModelConfig};
pub use forward::{forward, nll_with_hidden_perturbation, perplexity, RawBlockCapture};

pub use backward::loss_and_grads;
pub use masks::{apply_head_mask, apply_neuron_mask};
pub use train::train_head;

pub(crate) fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub(crate) fn silu_prime(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}
