//! Spatial Group-wise Enhance (SGE): a per-group spatial gate computed from
//! the similarity between each position and the group's mean feature.
//!
//! The crate provides the operator with an analytic backward pass
//! ([`sge`]), NCHW tensors ([`tensor`]), a small CNN harness and synthetic
//! dataset ([`nn`], [`experiment`]), activation diagnostics ([`stats`]),
//! file formats ([`io`]), verification suites ([`verify`]) and the command
//! line ([`cli`]).
//!
//! ```
//! use sge::{sge_forward, FeatureMap, SgeParams, Shape};
//!
//! let x = FeatureMap::from_fn(Shape::new(1, 4, 3, 3).unwrap(), |_, c, h, w| (c + h * w) as f32);
//! let (y, _) = sge_forward(&x, &SgeParams::new(2, 0.0, 1.0)).unwrap();
//! assert_eq!(y.shape(), x.shape());
//! ```

pub mod error;
pub mod cli;
pub mod experiment;
pub mod io;
pub mod nn;
pub mod rng;
pub mod sge;
pub mod stats;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use sge::{
    count_flops, count_params, sge_backward, sge_forward, similarity_decomposition, SgeForwardCache,
    SgeGradients, SgeParams,
};
pub use tensor::{group_merge, group_split, spatial_mean, FeatureMap, GroupedView, Real, Shape};
