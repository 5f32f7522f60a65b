//! Numeric substrate: parameter storage, a reverse-mode tape, small MLPs,
//! finite-difference verification, AdamW and the checkpoint container.

mod adamw;
mod checkpoint;
mod fd;
mod mlp;
mod params;
mod tape;

pub use adamw::{adamw_step, adamw_step_ranges, AdamState, AdamWConfig};
pub use checkpoint::{read_container, write_container, Checkpoint, CheckpointMeta, ContainerHeader};
pub use fd::{finite_diff_check, finite_diff_check_coords};
pub use mlp::{mlp_forward, Activation, MlpSpec};
pub use params::{ParamLayout, ParamVector, SliceInfo};
pub use tape::{evaluate, grad, log_softmax, Graph, Var};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The seeded generator threaded through every sampling call.
pub type Rng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw `n` independent standard normals.
pub fn normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
