//! Learned blur-degradation representations for joint image reblurring and
//! deblurring.

pub mod adversarial;
pub mod analysis;
pub mod autograd;
pub mod blur;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod msdi;
pub mod nn;
pub mod tensor;
pub mod training;
