//! Quanvolutional neural networks built on QAOA circuits.
//!
//! The pipeline tiles multispectral image patches into blocks, encodes each
//! block as rotation angles of a topology-native QAOA circuit, decodes one
//! scalar feature per (block, filter), and feeds the resulting feature map to
//! a small convolutional classifier. Blocks that were never simulated reuse
//! the output of their nearest simulated neighbour through a balltree.

pub mod data;
pub mod error;
pub mod featcache;
pub mod nn;
pub mod qaoa;
pub mod quanv;
pub mod seed;
pub mod statevector;

pub use data::Dataset;
pub use error::{Error, Result};
pub use featcache::{BallTree, ComputeBudget};
pub use quanv::{FeatureMap, ImageTensor, QuanvFilter, QuanvLayer, ReadoutMode, TensorBlock};
pub use nn::{Network, Shape, Tensor, TrainConfig};
pub use qaoa::{circuit_depth, DeviceTopology, QaoaAnsatz, WeightedGraph};
pub use statevector::{Circuit, Gate, ShotHistogram, Statevector};
