//! Pure forward/backward kernels used by the tape.

pub mod conv;
pub(crate) mod gemm;
pub mod resize;

pub use conv::{conv2d, transposed_conv2d};
pub use resize::{maxpool_down2, nearest_up2, resize, Resize};
