//! Dense linear-algebra primitives and the tensor-archive file format.

pub mod archive;
pub mod linalg;
pub mod matrix;

pub use archive::{archive_read, archive_write, Tensor, TensorArchive};
pub use linalg::{eigh_topk, sym_inverse_damped};
pub use matrix::{matmul, matvec, Matrix};
