//! Partition-parallel, incremental truncated SVD for time-evolving snapshot
//! data.
//!
//! Spatially distributed simulation fields are compressed on the fly: each
//! time step's states are normalized into one snapshot column, columns are
//! buffered in a bunch matrix, and every filled bunch is absorbed into a
//! truncated SVD by a distributed column-update. Rank is either fixed or
//! adapted from an exactly accumulated energy criterion; completed
//! factorizations reconstruct any time step at any rank up to the stored one,
//! with optional realizability clipping of the fields.
//!
//! The crate ships a deterministic in-process SPMD harness ([`comm`]) whose
//! collectives mirror MPI allreduce/broadcast semantics, synthetic data
//! generators for verification ([`datagen`]), and a binary storage format
//! with a JSON manifest ([`store`]).

pub mod adaptive;
pub mod comm;
pub mod datagen;
pub mod driver;
pub mod error;
pub mod jacobi;
pub mod reconstruct;
pub mod snapshot;
pub mod store;
pub mod svd;
pub mod timing;

pub use adaptive::{adaptive_truncation, estimate_bunch_size, retained_energy, TruncationPolicy};
pub use comm::{run_spmd, Communicator, SpmdMode};
pub use error::{Error, Result};
pub use snapshot::{
    assemble_state_vector, disassemble_state_vector, BunchBuffer, LocalStateVector,
    PartitionLayout, ReferenceScales,
};
pub use svd::{
    accumulate_energy, init_rank_one, orthogonality_defect, parallel_gram_schmidt, update,
    ItSvdState, QrResult, UpdateOptions, UpdateStats, Variant,
};
