//! Training-pair synthesis for homography estimation.
//!
//! A labeled pair is built from an unlabeled one by warping the dominant
//! plane of the source with a sampled ground-truth homography while the rest
//! of the scene keeps its observed motion. Generated pairs are cleaned,
//! scored, filtered and used to train a corner-offset regressor, whose
//! estimates seed the next round of generation.

pub mod error;
pub mod estimator;
pub mod eval;
pub mod generator;
pub mod homography;
pub mod imaging;
pub mod pipeline;
pub mod plane_seg;
pub mod refine;
pub mod seed;

pub use error::{Error, Result};
pub use homography::Homography;
pub use imaging::{ImageBuf, PlaneMask};
