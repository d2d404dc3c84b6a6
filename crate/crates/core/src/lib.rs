//! Specification compiler and trace-driven performance model for sparse
//! tensor algebra accelerators built on the fibertree abstraction.

pub mod cli;
pub mod compiler;
pub mod components;
pub mod executor;
pub mod fibertree;
pub mod format;
pub mod pipeline;
pub mod semiring;
pub mod spec;
pub mod tensor_io;
