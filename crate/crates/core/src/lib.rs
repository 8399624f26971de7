//! Benchmark engine comparing ID-based and modality-based item encoders for
//! sequential (SASRec) and two-tower (DSSM) recommenders.

pub mod autodiff;
pub mod backbones;
pub mod catalog;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod synthgen;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;

/// Keeps freed tensor buffers inside the process instead of handing every
/// large one back to the kernel; training allocates and frees the same sizes
/// thousands of times per epoch. A no-op outside glibc.
pub fn tune_allocator() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TOP_PAD, 64 << 20);
    }
}
