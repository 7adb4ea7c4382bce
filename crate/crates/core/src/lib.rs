//! Kernel ridge regression for potential and interaction energies of
//! Wasserstein gradient and Hamiltonian flows, learned from density trajectories.

pub mod analysis;
pub mod error;
pub mod estimator;
pub mod flows;
pub mod grid;
pub mod io;
pub mod kernels;

pub use analysis::{
    rkhs_error, run_sweep, stability_experiment, wasserstein2_1d, GeneratorSettings, GroundTruth, InitialDensity,
    MassModel, StabilityReport, SweepPlan, SweepPoint, SweepReport,
};
pub use error::{Error, Result};
pub use estimator::{solve, span_candidate, Candidate, EstimationProblem, EstimatorResult, FlowKind, SolveRoute, TerminalSlices};
pub use flows::{gradient_flow_simulate, hamiltonian_flow_simulate, EnergySpec, Field, InternalEnergy, Smooth};
pub use grid::{BoundaryMode, DensityTrajectory, SpaceTimeMesh};
pub use kernels::{KernelFamily, RkhsFunction, SmoothKernel};
