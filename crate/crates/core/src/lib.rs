//! Receptive graph layers.
//!
//! A receptive graph layer replaces the dense weight matrix of a layer by a
//! sparse operator `Θ = S · W`: the support of `Θ` is the adjacency support of
//! a graph, `W` is a small pool of shared weights (`ω × p × q`) and `S` is a
//! sparse third-rank scheme tensor that says, for every edge, how the pool is
//! distributed onto that edge. Both `S` and `W` are trained.
//!
//! Convolutional and fully-connected layers are special cases, obtained with
//! particular one-hot schemes (see [`scheme::convolution_scheme_1d`] and
//! [`scheme::fully_connected_scheme`]).

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod graph;
pub mod layer;
pub mod model;
pub mod optim;
pub mod real;
pub mod scheme;
pub mod seed;

pub use error::{Error, Result};
pub use graph::Graph;
pub use layer::{ReceptiveGraphLayer, Signal, WeightKernel};
pub use real::Real;
pub use scheme::SchemeTensor;
