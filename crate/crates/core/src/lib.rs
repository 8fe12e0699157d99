//! Crystal structure prediction with an equivariant hypergraph denoiser and
//! joint diffusion over lattice and fractional coordinates.

// `!(x > 0.0)` is used on purpose so NaN fails the check too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod coord_diffusion;
pub mod crystal;
pub mod dataset;
pub mod denoiser;
pub mod error;
pub mod evaluation;
pub mod hypergraph;
pub mod lattice_diffusion;
pub mod nn;
pub mod sampler;
pub mod symmetry;
pub mod trainer;

pub use crystal::{CartesianPoint, Crystal, Frac, Lattice};
pub use error::{Error, Result};
pub use hypergraph::{Hypergraph, HypergraphSpec};
