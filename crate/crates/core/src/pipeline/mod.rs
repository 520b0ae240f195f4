//! Auto-decoder training, two-phase test-time reconstruction from slices,
//! dense shape queries, and the experiment protocols.

mod experiment;
mod recon;
mod train;

pub use experiment::{
    acquisition_seed, aggregate, experiment_recon_config, run_experiment, run_experiment_observed, write_results_csv, Aggregate, CellStats,
    ExperimentCase, ExperimentConfig, ExperimentName, ResultRow, StructureSummary, SIMPSON_EXPERIMENT,
};
pub use recon::{
    dense_query, reconstruct, reconstruct_observed, slice_objective, slice_objective_value, ReconConfig, ReconResult,
    ReconStep, SliceGradients, SliceTarget,
};
pub use train::{sample_points, train, TrainConfig, TrainOutcome, TrainingShape};

use crate::autodiff::AutodiffError;
use crate::evaluation::EvalError;
use crate::geometry::GeometryError;
use crate::model::{CheckpointError, ModelError};
use crate::views::{ViewError, ViewName};
use crate::volume::VolumeError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("the training cohort is empty")]
    EmptyCohort,
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error("reconstruction diverged at step {step}: loss {loss}")]
    ReconDiverged { step: usize, loss: f64 },
    #[error("view {0} is not in the slice bundle")]
    MissingView(ViewName),
    #[error("case {0} was part of the training set")]
    CohortOverlap(String),
    #[error("failed to write results: {0}")]
    Output(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    View(#[from] ViewError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl PipelineError {
    /// Whether the failure is numerical (divergence or non-finite values)
    /// rather than a problem with the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            PipelineError::Diverged { .. }
                | PipelineError::ReconDiverged { .. }
                | PipelineError::Autodiff(AutodiffError::NonFiniteGradient { .. })
        )
    }
}
