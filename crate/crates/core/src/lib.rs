pub mod attention;
pub mod autograd;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod image;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod params;
pub mod selfcheck;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod window;

pub use autograd::{Rect, Tape, Var};
pub use error::{Error, Result};
pub use generator::{Enhancer, Generator, GeneratorConfig, Variant};
pub use params::{Bound, ParamId, ParamStore};
pub use tensor::Tensor;
