//! Desk-scale engine for nonlocal (integral-operator) residual networks:
//! reversible Hamiltonian/Verlet blocks with PIDE-inspired nonlocal blocks,
//! plus trainers, continuous-side validators, and stability diagnostics.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod hamiltonian;
pub mod nonlocal;
pub mod params;
pub mod pide;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{PideError, Result};
pub use tape::{BatchNormState, KernelTransform, Mode, NodeId, Tape};
pub use tensor::{Padding, Tensor};

// Large tensor buffers churn through the allocator every tape op; a caching
// allocator keeps them out of mmap/munmap round trips.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
