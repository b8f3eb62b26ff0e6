//! Unsupervised change detection between co-registered images from
//! heterogeneous sensors using two code-aligned convolutional autoencoders.

pub mod affinity;
pub mod changemap;
pub mod gradengine;
pub mod model;
pub mod raster;
pub mod synthgen;
pub mod trainer;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
