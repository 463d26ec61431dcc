//! Minimal CPU tensor engine: dense f32 tensors, a tape-based autodiff
//! graph, the layers a ViT / conv-VAE / FPN stack needs, AdamW, a
//! warmup-cosine schedule, and the `DITC` checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod layers;
pub mod optim;
mod param;
pub mod schedule;
mod tensor;

pub use error::{NnError, Result};
pub use graph::{Gradients, Graph, Var};
pub use kernels::bilinear_taps;
pub use optim::{AdamW, AdamWConfig, AdamWState};
pub use param::{Param, ParamId, ParamStore};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used for every seeded operation in the workspace.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
