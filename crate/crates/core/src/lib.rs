//! Weight-scale-shift algebra for positively homogeneous networks, the
//! shift-invariant WEISSI regularizer family, FGSM/PGD attacks, and the
//! training/analysis harnesses around them.

pub mod analysis;
pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod kernels;
pub mod nn;
pub mod oracles;
pub mod reg;
pub mod rng;
pub mod scale_shift;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Cap the rayon worker count (no-op without the `parallel` feature).
/// Kernels are deterministic regardless of the thread count.
pub fn set_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

/// Keep glibc from serving the multi-megabyte tensor buffers through
/// mmap/munmap: training allocates and frees them every step, and the
/// page-zeroing traffic otherwise dominates the math. Call once at startup;
/// harmless elsewhere.
pub fn tune_allocator() {
    #[cfg(target_env = "gnu")]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(-1 /* M_TRIM_THRESHOLD */, 1 << 30);
    }
}
