//! Minimal dense-network stack with reverse-mode gradients, the Adam
//! optimizer, and finite-difference gradient checking. Parameters live in the
//! nets; gradients accumulate into caller-provided flat buffers so a whole
//! model can expose one parameter vector.

mod adam;
mod dense;
mod encoder;
mod gradcheck;

pub use adam::AdamState;
pub use dense::{Activation, DenseCache, DenseLayer, DenseNet};
pub use encoder::{EncoderCache, EncoderNet};
pub use gradcheck::{grad_check, GradCheckReport};
