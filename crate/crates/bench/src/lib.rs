//! Shared inputs for the benchmarks.

use wkrr::analysis::{synthesize, GeneratorSettings, GroundTruth};
use wkrr::{EstimationProblem, SmoothKernel};

pub fn kernel() -> SmoothKernel {
    SmoothKernel::gaussian(0.1).expect("valid lengthscale")
}

pub fn truth() -> GroundTruth {
    GroundTruth::reference(kernel(), kernel(), 0.0, 1.0, 0.25).expect("valid truth")
}

/// Heat-flow data with the reference truth on an `n × l` grid.
pub fn problem(n: usize, l: usize) -> EstimationProblem {
    let traj = synthesize(&truth(), &GeneratorSettings::default(), n, l).expect("simulation succeeds");
    EstimationProblem::new(traj, kernel(), kernel(), 0.05, 0.05)
}
