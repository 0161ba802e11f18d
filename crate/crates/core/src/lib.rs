//! Integer-only CNN quantization toolchain.
//!
//! The pipeline: load a float [`NetworkGraph`](graph::NetworkGraph), choose
//! per-tensor bit widths with [`alloc::allocate`], convert to an
//! [`IntegerGraph`](icn::IntegerGraph) with [`icn::convert_graph`], and run it
//! with [`exec::run_integer`]. [`oracle`] provides the fake-quantized float
//! reference and [`verify`] compares the two.

pub mod alloc;
pub mod artifact;
pub mod error;
pub mod exec;
pub mod fixed_point;
pub mod graph;
pub mod icn;
pub mod manifest;
pub mod memory;
pub mod mobilenet;
pub mod mode;
pub mod oracle;
pub mod packing;
pub mod plan;
pub mod quant;
pub mod synth;
pub mod verify;

pub use error::{Error, InfeasibleReport, Result};
pub use graph::{LayerKind, LayerSpec, NetworkGraph, TensorShape};
pub use memory::MemoryBudget;
pub use mode::QuantMode;
pub use plan::BitPlan;

/// Version tag carried by every JSON artifact.
pub const SCHEMA_VERSION: u32 = 1;
