//! Chunked sparse arrays with a native fixpoint operator.
//!
//! The engine iterates `FixPoint(A, π, f, δ, T, ε)` specs naively, through
//! incremental delta plans, with overlap mini-iterations across chunks, or
//! coarse-to-fine over a grid pyramid.

pub mod apps;
pub mod array;
pub mod error;
pub mod exec;
pub mod expr;
pub mod fixpoint;
pub mod incremental;
pub mod multires;
pub mod ops;
pub mod parallel;
pub mod store;

pub use array::{ArraySchema, Attribute, CellTuple, Chunk, ChunkedArray, Coord, Dimension, Scalar, ScalarKind};
pub use error::{Error, Result};
pub use exec::Executor;
pub use expr::Expr;
pub use fixpoint::{
    classify, rewrite_naive, run, run_array, AssignmentFunction, Classified, Delta, ExecutorStats, FixPointSpec,
    IterationRecord, IterationTrace, Outcome, Plan, Termination,
};
pub use ops::{AggKind, AggregateSpec};
pub use store::{DeltaPair, MergeMode, VersionedStore, Which};
pub use incremental::{rewrite_incremental, run_incremental, AlgebraicRegistry, IncrementalPlan, Strategy, Workload};
pub use parallel::{run_parallel, ParallelConfig, ShufflePolicy};
