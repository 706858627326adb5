//! Needle-tip localization from surface scattering images.
//!
//! A simulator renders the light pattern a sub-surface fiber tip throws onto
//! tissue, a small CNN regresses the tip's `(x, y, z)` from that image, and
//! the harness trains it with MSE + AdamW and reports per-axis and Euclidean
//! errors in millimetres. Pivot calibration of the tracking sensor that
//! supplies ground truth lives in [`calibrate`].

pub mod calibrate;
pub mod error;
pub mod harness;
pub mod io;
pub mod layers;
pub mod model;
pub mod optim;
pub mod preprocess;
pub mod seeding;
pub mod simulate;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{Network, NetworkConfig, ParameterSet};
pub use preprocess::{NormalizationConfig, TipPosition};
pub use simulate::{Dataset, OpticsConfig, SampleRecord};
pub use tensor::{Element, Tensor};
