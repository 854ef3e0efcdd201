//! Closed-form Hessian trace and relative flatness for a convolutional
//! classification head: convolution, global average pooling, softmax and
//! cross-entropy.
//!
//! The math modules are generic over [`Scalar`] (`f32` or `f64`); the
//! trainer and experiment drivers run at `f64`.

pub mod error;
pub mod experiments;
pub mod flatness;
pub mod head;
pub mod io;
pub mod oracles;
pub mod scalar;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use flatness::{FlatnessVariant, TraceMethod, TraceReport};
pub use head::{HeadOutput, KernelBank};
pub use io::TimingMode;
pub use scalar::{Matrix, Scalar};
pub use tensor::{ConvSpec, PatchMatrix, PatchSummary, Tensor3};

pub type Tensor3F64 = Tensor3<f64>;
pub type Tensor3F32 = Tensor3<f32>;
pub type KernelBankF64 = KernelBank<f64>;
pub type KernelBankF32 = KernelBank<f32>;
pub type PatchSummaryF64 = PatchSummary<f64>;
pub type PatchSummaryF32 = PatchSummary<f32>;
pub type HeadOutputF64 = HeadOutput<f64>;
pub type HeadOutputF32 = HeadOutput<f32>;
pub type MatrixF64 = Matrix<f64>;
pub type MatrixF32 = Matrix<f32>;
