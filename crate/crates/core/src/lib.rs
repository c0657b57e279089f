//! Infrared/visible image fusion with dynamic dilated KNN graph convolution.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod gcn;
pub mod graph;
pub mod image;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Matrix, VertexFeatures};
