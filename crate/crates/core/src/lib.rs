//! Unsupervised no-reference quality assessment for low-light restored
//! images.
//!
//! Quality-aware features are learned per Laplacian-pyramid level by
//! contrasting patches of differently distorted versions of one scene.
//! A test image is scored by its multivariate-Gaussian distance from a
//! model fitted to sharp, colorful patches of well-lit images.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod filter;
pub mod image;
pub mod io;
pub mod nss;
pub mod pipeline;
pub mod pristine;
pub mod pyramid;
pub mod rng;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{crop_patch, Image, Patch, Rect, Scene, SceneSet};
pub use io::{load_image, save_image};
pub use rng::SeededRng;
