//! Dense linear algebra, clustering primitives and seeded randomness.
//!
//! Everything here works in `f64`. Matrices are row-major and small (desk
//! scale), so the kernels are straightforward loops rather than blocked BLAS.

mod kmeans;
mod linalg;
mod matrix;
mod prob;
mod rng;

pub use kmeans::{kmeans, KMeansResult};
pub use linalg::{svd, sym_eig, Svd, SymEig, MAX_SWEEPS, SWEEP_TOLERANCE};
pub use matrix::Matrix;
pub use prob::{
    argmax, cosine_similarity, gumbel_noise, gumbel_softmax, gumbel_softmax_with_noise, l2_norm,
    normalize, softmax,
};
pub use rng::RngStream;
