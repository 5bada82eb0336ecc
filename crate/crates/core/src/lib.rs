//! Decoupled knowledge distillation: closed-form task / target-class /
//! non-target-class logit gradients, tri-buffer momentum, windowed gradient
//! signal-to-noise estimation and dynamic top-k masking of non-target classes.

pub mod distill;
pub mod dtm;
pub mod error;
pub mod fd;
pub mod net;
pub mod numkit;
pub mod objective;
pub mod optim;

pub use error::{Error, Result};
