//! Small f64 numerics kernel: tensors, a reverse-mode tape, dense MLPs,
//! sinusoidal step embeddings, Adam, and checkpoint files.

pub mod adam;
pub mod checkpoint;
pub mod embedding;
pub mod gradcheck;
pub mod graph;
pub mod mlp;
pub mod tensor;

pub use adam::{AdamConfig, AdamState, CosineLr};
pub use checkpoint::Checkpoint;
pub use embedding::TimeEmbedding;
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use mlp::{Activation, Bound, MlpNet, MlpSpec, Parameterized};
pub use tensor::Tensor;
