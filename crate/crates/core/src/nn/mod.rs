//! Minimal CPU layers with hand-written backward passes: enough to run and
//! fine-tune small convolutional backbones and fully connected heads.

mod adam;
mod conv;
mod linear;
mod param;

pub use adam::Adam;
pub use conv::{Conv2d, ConvNet, ConvNetCache, ConvNetSpec};
pub use linear::{Head, HeadCache, Linear};
pub use param::{Param, Parameters};
