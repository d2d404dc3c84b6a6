//! End-to-end runs: compile, execute, model. Batches of independent runs
//! go through rayon when the `parallel` feature is on.

use std::collections::BTreeMap;

use crate::compiler::{compile_cascade, CompileError, CompiledCascade};
use crate::components::{model_cascade, EnergyTable, ModelReport};
use crate::executor::{execute_cascade, CascadeRun, ExecError};
use crate::fibertree::Tensor;
use crate::format::FormatError;
use crate::spec::ProblemSpec;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Compile(#[from] CompileError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub compiled: CompiledCascade,
    pub run: CascadeRun,
    pub report: ModelReport,
}

pub fn simulate(
    spec: &ProblemSpec,
    inputs: &BTreeMap<String, Tensor>,
    table: &EnergyTable,
) -> Result<Simulation, SimError> {
    let compiled = compile_cascade(spec)?;
    let run = execute_cascade(spec, &compiled, inputs)?;
    let traces: Vec<_> = run.runs.iter().map(|r| &r.trace).collect();
    let report = model_cascade(spec, &compiled.schedule, &traces, table)?;
    Ok(Simulation {
        compiled,
        run,
        report,
    })
}

/// Applies `f` to every item, in parallel when enabled. Results keep the
/// order of `items`.
#[cfg(feature = "parallel")]
pub fn run_batch<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn run_batch<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    run_batch_sequential(items, f)
}

pub fn run_batch_sequential<T, R>(items: &[T], f: impl Fn(&T) -> R) -> Vec<R> {
    items.iter().map(f).collect()
}
