//! Age-range estimation from face images.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! - [`mtcnn`]: three-stage cascaded face detection and face-chip extraction
//! - [`data`]: dataset ingestion, per-class 80/20 split, augmentation
//! - [`model`]: the VGG-Face backbone, the age head, weight files
//! - [`training`]: cross-entropy, analytic head gradients, Adam, the epoch loop
//! - [`inference`]: five-crop averaged prediction
//! - [`evaluation`]: exact / 1-off accuracy, confusion matrix, classification report
//!
//! Everything is built on the HWC [`Tensor`] and the kernels in [`tensor`].

pub mod data;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod inference;
pub mod model;
pub mod mtcnn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{AgeClass, Network, NetworkSpec, Preprocess, WeightStore};
pub use tensor::{ConvParams, Mode, Tensor};
