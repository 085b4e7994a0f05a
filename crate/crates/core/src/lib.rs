//! Contextual lane and road-symbol generation.
//!
//! A U-Net style generator maps `[source | context]` (six channels) to an RGB
//! rendering of lane and symbol classes, which is quantized back to labels
//! against a [`ClassPalette`]. Training alternates a least-squares
//! discriminator update and a generator update on `λ_mse·L_mse + λ_adv·L_adv`.

pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod palette;
pub mod perturb;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{LabelImage, RgbImage};
pub use palette::ClassPalette;
