//! Multi-scale face proposals from a 12x12 multi-label fully convolutional
//! network evaluated over a sparse image pyramid.
//!
//! The network scores face, eye, nose and mouth at every cell of a stride-2
//! grid. Part peaks are mapped to face boxes through geometric templates,
//! merged, and combined with direct face detections.

pub mod cli;
pub mod evalbench;
pub mod network;
pub mod pipeline;
pub mod proposals;
pub mod pyramid;
pub mod tensor;

pub use network::{load_weights, save_weights, HeatmapSet, NetworkWeights, ScoreGrid};
pub use pipeline::{Detection, Detector};
pub use proposals::{generate_proposals, merge_part_boxes, BBox, PartTemplate, ProposalConfig};
pub use pyramid::{build_pyramid, pyramid_geometry, pyramid_workload, PyramidConfig};
pub use tensor::Tensor3;
