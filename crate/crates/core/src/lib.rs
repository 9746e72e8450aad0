//! Learned wireless radiance fields: power-of-ReLU KAN layers, causally
//! masked linear attention, volumetric RF rendering, CSI standardization,
//! an image-method multipath simulator, Jacobian explanations and the
//! training/evaluation harness that ties them together.

pub mod attention;
pub mod csi;
pub mod explain;
pub mod field;
pub mod geometry;
pub mod harness;
pub mod numerics;
pub mod powermlp;
pub mod renderer;
pub mod scene;
