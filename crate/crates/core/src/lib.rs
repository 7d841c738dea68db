//! Residual U-Net with deep supervision for binary sky/cloud segmentation.
//!
//! This crate is the allocation-only computational core: a dense 4-D tensor
//! type with a reverse-mode autodiff tape, the network layers and assembled
//! model, the composite deep-supervision loss, the Adam optimizer with
//! exponential learning-rate decay, a deterministic training loop, an in-memory
//! checkpoint codec and the evaluation metrics (confusion counts, F-measure,
//! error rate and a 256-threshold precision/recall curve).
//!
//! Everything that touches the filesystem, image codecs or the command line
//! lives in the companion `ucloudnet` crate.
//!
//! ```
//! use ucloudnet_core::{model::UCloudNet, autograd::Graph, tensor::{Shape, Tensor}};
//!
//! let mut net = UCloudNet::<f32>::build(1, 7).unwrap();
//! let mut g = Graph::new();
//! let x = g.input(Tensor::full(Shape::new(1, 3, 32, 32), 0.5));
//! let out = net.forward(&mut g, x, false, true).unwrap();
//! assert_eq!(g.value(out.main).shape(), Shape::new(1, 1, 32, 32));
//! ```
#![no_std]

extern crate alloc;

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod element;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use element::{DType, Element};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
