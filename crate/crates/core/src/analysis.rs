//! Experiment harness: reconstruction errors, rate sweeps, 1-D Wasserstein-2
//! distances and the flow-stability experiment.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{apply_candidate, solve, solve_with, Candidate, EstimationProblem, FlowKind, NodeData, TerminalSlices};
use crate::flows::{gradient_flow_simulate, hamiltonian_flow_simulate, EnergySpec, Field, InternalEnergy, Smooth};
use crate::grid::{BoundaryMode, DensityTrajectory, SpaceTimeMesh};
use crate::kernels::{kappa_sq, rkhs_norm_sq, RkhsFunction, SmoothKernel};

/// Source-condition exponents reported alongside every sweep.
pub const GAMMA_GRID: [f64; 4] = [0.25, 0.5, 0.75, 1.0];

/// Slack subtracted from the most pessimistic predicted exponent in [`SweepReport::band_check`].
pub const SLOPE_SLACK: f64 = 0.3;

/// Known potential and interaction functions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub v: RkhsFunction,
    pub w: RkhsFunction,
}

impl GroundTruth {
    pub fn new(v: RkhsFunction, w: RkhsFunction) -> Self {
        Self { v, w }
    }

    pub fn zero(kernel1: SmoothKernel, kernel2: SmoothKernel) -> Self {
        Self::new(RkhsFunction::zero(kernel1), RkhsFunction::zero(kernel2))
    }

    /// Three-center truth with weights `amplitude·(1, -2, 1)`: `V` centered at
    /// `a + (0.3, 0.5, 0.7)|Ω|`, `W` at `(-0.2, 0, 0.2)|Ω|`.
    pub fn reference(kernel1: SmoothKernel, kernel2: SmoothKernel, a: f64, b: f64, amplitude: f64) -> Result<Self> {
        let len = b - a;
        let weights = [amplitude, -2.0 * amplitude, amplitude];
        Ok(Self::new(
            RkhsFunction::point_sections(kernel1, &[a + 0.3 * len, a + 0.5 * len, a + 0.7 * len], &weights)?,
            RkhsFunction::point_sections(kernel2, &[-0.2 * len, 0.0, 0.2 * len], &weights.map(|w| -w))?,
        ))
    }

    /// Point-section sums with 3 to 5 centers each. Weights are centered to sum
    /// to zero so the truth has no component along functions that are nearly
    /// constant on the data support. `V` centers are stratified over the middle
    /// half of `[a, b]`, `W` centers over `[-extent/4, extent/4]`, one per
    /// equal sub-interval.
    pub fn random(kernel1: SmoothKernel, kernel2: SmoothKernel, a: f64, b: f64, amplitude: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = b - a;
        let draw = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
            let m = rng.gen_range(3..=5);
            let h = (hi - lo) / m as f64;
            let centers: Vec<f64> = (0..m)
                .map(|i| lo + h * (i as f64 + rng.gen_range(0.25..0.75)))
                .collect();
            let mut weights: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mean = weights.iter().sum::<f64>() / m as f64;
            weights.iter_mut().for_each(|w| *w = amplitude * (*w - mean));
            (centers, weights)
        };
        let (vc, vw) = draw(a + 0.25 * len, b - 0.25 * len, &mut rng);
        let (wc, ww) = draw(-0.25 * len, 0.25 * len, &mut rng);
        Ok(Self::new(
            RkhsFunction::point_sections(kernel1, &vc, &vw)?,
            RkhsFunction::point_sections(kernel2, &wc, &ww)?,
        ))
    }

    pub fn norm(&self) -> f64 {
        (rkhs_norm_sq(&self.v) + rkhs_norm_sq(&self.w)).sqrt()
    }

    pub fn energy_spec(&self, internal: InternalEnergy) -> Result<EnergySpec> {
        EnergySpec::new(Field::Rkhs(self.v.clone()), Field::Rkhs(self.w.clone()), internal)
    }

    pub fn candidate(&self) -> Candidate {
        Candidate {
            v: self.v.clone(),
            w: self.w.clone(),
            u: None,
        }
    }
}

/// `‖(V̂, Ŵ) - (V, W)‖` in the product RKHS.
pub fn rkhs_error(est: &Candidate, truth: &GroundTruth) -> Result<f64> {
    let dv = rkhs_norm_sq(&est.v.sub(&truth.v)?);
    let dw = rkhs_norm_sq(&est.w.sub(&truth.w)?);
    Ok((dv + dw).sqrt())
}

/// Component errors `(‖V̂ - V‖, ‖Ŵ - W‖)`.
pub fn component_errors(est: &Candidate, truth: &GroundTruth) -> Result<(f64, f64)> {
    Ok((
        rkhs_norm_sq(&est.v.sub(&truth.v)?).sqrt(),
        rkhs_norm_sq(&est.w.sub(&truth.w)?).sqrt(),
    ))
}

/// Largest pointwise error on `points` for `V` and on `points - points` for `W`.
pub fn sup_error(est: &Candidate, truth: &GroundTruth, points: &[f64]) -> f64 {
    let mut sup: f64 = 0.0;
    for &x in points {
        sup = sup.max((est.v.value(x) - truth.v.value(x)).abs());
        for &y in points {
            sup = sup.max((est.w.value(x - y) - truth.w.value(x - y)).abs());
        }
    }
    sup
}

/// Node data with the forward-model residual removed: `f := A(V, W)` at the
/// data nodes, with spatial slopes from `exact_slope(t, x)` when given.
pub fn scheme_free_data(
    problem: &EstimationProblem,
    truth: &GroundTruth,
    exact_slope: Option<&dyn Fn(f64, f64) -> f64>,
) -> Result<NodeData> {
    let mut data = NodeData::from_problem(problem)?;
    if let Some(slope) = exact_slope {
        let mesh = problem.traj.mesh();
        for (s, &(l, n)) in data.slopes.iter_mut().zip(&data.nodes) {
            *s = slope(mesh.t(l), mesh.x(n));
        }
    }
    data.rhs = apply_candidate(problem, &data, &truth.candidate())?;
    Ok(data)
}

/// Initial density used by the data generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InitialDensity {
    /// Normalized Gaussian bump plus a positive floor.
    Bump { center: f64, width: f64, floor: f64 },
    /// `1 + amplitude·cos(2π·frequency·(x - a)/|Ω|)` scaled to unit mass.
    Cosine { amplitude: f64, frequency: f64 },
}

impl InitialDensity {
    pub fn sample(&self, mesh: &SpaceTimeMesh) -> Result<Vec<f64>> {
        let xs = mesh.space_points();
        let len = mesh.domain_length();
        let values: Vec<f64> = match *self {
            InitialDensity::Bump { center, width, floor } => {
                if !(width > 0.0 && floor > 0.0) {
                    return Err(Error::InvalidProblem("bump width and floor must be positive".into()));
                }
                let norm = 1.0 / (2.0 * std::f64::consts::PI * width * width).sqrt();
                xs.iter()
                    .map(|&x| norm * (-(x - center).powi(2) / (2.0 * width * width)).exp() + floor)
                    .collect()
            }
            InitialDensity::Cosine { amplitude, frequency } => {
                if amplitude.abs() >= 1.0 {
                    return Err(Error::InvalidProblem("cosine amplitude must be below 1".into()));
                }
                xs.iter()
                    .map(|&x| {
                        let phase = 2.0 * std::f64::consts::PI * frequency * (x - mesh.a()) / len;
                        (1.0 + amplitude * phase.cos()) / len
                    })
                    .collect()
            }
        };
        Ok(values)
    }
}

/// Data synthesis settings shared by all sweep points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSettings {
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    /// Spatial refinement of the simulation mesh relative to `N`; at least 4.
    pub fine_factor: usize,
    pub initial: InitialDensity,
    pub flow: FlowKind,
    /// Internal energy, known to the estimator.
    pub internal: InternalEnergy,
    pub terminal: TerminalSlices,
    /// Boundary mode the estimator sees after restriction.
    pub boundary: BoundaryMode,
    /// Solver step; gradient flows default to the stability bound, Hamiltonian
    /// flows to a quarter of the output step.
    pub dt_solver: Option<f64>,
}

impl Default for GeneratorSettings {
    fn default() -> Self {
        Self {
            a: 0.0,
            b: 1.0,
            horizon: 0.02,
            fine_factor: 4,
            initial: InitialDensity::Bump {
                center: 0.5,
                width: 0.1,
                floor: 1e-6,
            },
            flow: FlowKind::Gradient,
            internal: InternalEnergy::Entropy,
            terminal: TerminalSlices::Exclude,
            boundary: BoundaryMode::Periodic,
            dt_solver: None,
        }
    }
}

/// Simulates on the fine mesh and restricts to the `N × L` data grid.
pub fn synthesize(truth: &GroundTruth, settings: &GeneratorSettings, n_space: usize, n_time: usize) -> Result<DensityTrajectory> {
    if settings.fine_factor < 4 {
        return Err(Error::InvalidPlan(format!(
            "fine_factor must be at least 4, got {}",
            settings.fine_factor
        )));
    }
    let fine = SpaceTimeMesh::new(settings.a, settings.b, settings.horizon, settings.fine_factor * n_space, n_time)?;
    let mu0 = settings.initial.sample(&fine)?;
    let traj = match settings.flow {
        FlowKind::Gradient => {
            let spec = truth.energy_spec(settings.internal)?;
            gradient_flow_simulate(&mu0, &spec, &fine, settings.dt_solver)?.0
        }
        FlowKind::Hamiltonian => {
            let spec = truth.energy_spec(InternalEnergy::None)?;
            let dt = settings.dt_solver.unwrap_or(0.25 * fine.dt());
            hamiltonian_flow_simulate(&mu0, &Field::Zero, &spec, &fine, dt)?.0
        }
    };
    let coarse = traj.restrict(settings.fine_factor, 1)?;
    DensityTrajectory::new(*coarse.mesh(), coarse.values().to_vec(), settings.boundary)
}

/// Parameters of a convergence-rate sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub n_list: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub c_lambda: f64,
    pub c_l: f64,
    pub truth: GroundTruth,
    pub generator: GeneratorSettings,
}

impl SweepPlan {
    pub fn new(n_list: Vec<usize>, alpha: f64, beta: f64, truth: GroundTruth, generator: GeneratorSettings) -> Self {
        Self {
            n_list,
            alpha,
            beta,
            c_lambda: 1.0,
            c_l: 1.0,
            truth,
            generator,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() || self.n_list.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidPlan("N list must be non-empty and strictly increasing".into()));
        }
        if self.n_list[0] < 2 {
            return Err(Error::InvalidPlan("N must be at least 2".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0 / 3.0) {
            return Err(Error::InvalidPlan(format!("alpha must lie in (0, 1/3), got {}", self.alpha)));
        }
        if !(self.beta > 3.0 * self.alpha) {
            return Err(Error::InvalidPlan(format!(
                "beta must exceed 3 alpha = {}, got {}",
                3.0 * self.alpha,
                self.beta
            )));
        }
        if !(self.c_lambda > 0.0 && self.c_l > 0.0) {
            return Err(Error::InvalidPlan("c_lambda and c_L must be positive".into()));
        }
        if self.generator.fine_factor < 4 {
            return Err(Error::InvalidPlan("fine_factor must be at least 4".into()));
        }
        Ok(())
    }

    pub fn lambda(&self, n: usize) -> f64 {
        self.c_lambda * (n as f64).powf(-self.alpha)
    }

    pub fn n_time(&self, n: usize) -> usize {
        // Guard against round-off pushing an exact power over an integer.
        let raw = self.c_l * (n as f64).powf(self.beta);
        ((raw - 1e-9).ceil() as usize).max(1)
    }

    /// Predicted decay exponent `min{αγ, ½(min(β, 1) - 3α)}`.
    pub fn predicted_exponent(&self, gamma: f64) -> f64 {
        (self.alpha * gamma).min(0.5 * (self.beta.min(1.0) - 3.0 * self.alpha))
    }
}

/// Result for one `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub n: usize,
    pub lambda: f64,
    pub n_time: usize,
    pub rkhs_error: f64,
    pub v_error: f64,
    pub w_error: f64,
    pub relative_error: f64,
    pub sup_error: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedBand {
    pub gamma: f64,
    pub exponent: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepReport {
    pub points: Vec<SweepPoint>,
    /// Least-squares slope of `log error` against `log N`; `None` when fewer
    /// than two points have a positive error.
    pub slope: Option<f64>,
    pub predicted: Vec<PredictedBand>,
    /// Estimates by `N`, in the order of `points`.
    #[serde(skip)]
    pub estimates: Vec<Candidate>,
}

impl SweepReport {
    pub fn errors(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rkhs_error).collect()
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.points.windows(2).all(|w| w[1].rkhs_error < w[0].rkhs_error)
    }

    /// Negative slope whose decay rate is at least the most pessimistic
    /// prediction minus [`SLOPE_SLACK`].
    pub fn band_check(&self) -> bool {
        let worst = self.predicted.iter().map(|b| b.exponent).fold(f64::INFINITY, f64::min);
        match self.slope {
            Some(s) => s < 0.0 && -s >= worst - SLOPE_SLACK,
            None => false,
        }
    }
}

/// Least-squares slope of `log y` against `log x`, skipping non-positive `y`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = x
        .iter()
        .zip(y)
        .filter(|(_, &y)| y > 1e-300 && y.is_finite())
        .map(|(&x, &y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn sweep_point(plan: &SweepPlan, n: usize) -> Result<(SweepPoint, Candidate)> {
    let start = Instant::now();
    let lambda = plan.lambda(n);
    let n_time = plan.n_time(n);
    let traj = synthesize(&plan.truth, &plan.generator, n, n_time)?;
    let points = traj.mesh().space_points();
    let problem = EstimationProblem::new(
        traj,
        *plan.truth.v.kernel(),
        *plan.truth.w.kernel(),
        lambda,
        lambda,
    )
    .with_flow(plan.generator.flow)
    .with_known_u(match plan.generator.flow {
        FlowKind::Gradient => plan.generator.internal,
        FlowKind::Hamiltonian => InternalEnergy::None,
    })
    .with_terminal(plan.generator.terminal);
    let est = solve(&problem)?.candidate();
    let rkhs = rkhs_error(&est, &plan.truth)?;
    let (v_error, w_error) = component_errors(&est, &plan.truth)?;
    let norm = plan.truth.norm();
    let point = SweepPoint {
        n,
        lambda,
        n_time,
        rkhs_error: rkhs,
        v_error,
        w_error,
        relative_error: if norm > 0.0 { rkhs / norm } else { rkhs },
        sup_error: sup_error(&est, &plan.truth, &points),
        wall_ms: start.elapsed().as_secs_f64() * 1e3,
    };
    Ok((point, est))
}

/// Runs the sweep, returning whatever completed before the first failure.
pub fn run_sweep_partial(plan: &SweepPlan) -> (SweepReport, Option<Error>) {
    let empty = |plan: &SweepPlan| SweepReport {
        points: Vec::new(),
        slope: None,
        predicted: predicted_bands(plan),
        estimates: Vec::new(),
    };
    if let Err(e) = plan.validate() {
        return (empty(plan), Some(e));
    }
    let outcomes: Vec<Result<(SweepPoint, Candidate)>> = plan.n_list.par_iter().map(|&n| sweep_point(plan, n)).collect();
    let mut report = empty(plan);
    let mut failure = None;
    for (&n, outcome) in plan.n_list.iter().zip(outcomes) {
        match outcome {
            Ok((point, est)) => {
                report.points.push(point);
                report.estimates.push(est);
            }
            Err(source) => {
                failure = Some(Error::SweepAborted {
                    n,
                    source: Box::new(source),
                });
                break;
            }
        }
    }
    let ns: Vec<f64> = report.points.iter().map(|p| p.n as f64).collect();
    report.slope = loglog_slope(&ns, &report.errors());
    (report, failure)
}

/// Runs the sweep; a generator or solver failure aborts with [`Error::SweepAborted`].
pub fn run_sweep(plan: &SweepPlan) -> Result<SweepReport> {
    match run_sweep_partial(plan) {
        (report, None) => Ok(report),
        (_, Some(e)) => Err(e),
    }
}

fn predicted_bands(plan: &SweepPlan) -> Vec<PredictedBand> {
    GAMMA_GRID
        .iter()
        .map(|&gamma| PredictedBand {
            gamma,
            exponent: plan.predicted_exponent(gamma),
        })
        .collect()
}

/// How grid values are read as a distribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassModel {
    /// Constant density on each cell `[x_n - Δx/2, x_n + Δx/2]`.
    #[default]
    PiecewiseConstant,
    /// A point mass at each node.
    PointMasses,
}

struct Quantiles {
    edges: Vec<f64>,
    cdf: Vec<f64>,
    nodes: Vec<f64>,
    model: MassModel,
    period: f64,
}

impl Quantiles {
    fn new(rho: &[f64], mesh: &SpaceTimeMesh, model: MassModel) -> Result<Self> {
        if let Some((index, &value)) = rho.iter().enumerate().find(|(_, &v)| !(v > 0.0 && v.is_finite())) {
            return Err(Error::NonPositiveDensity { index, value });
        }
        let dx = mesh.dx();
        let total: f64 = rho.iter().sum();
        let mut cdf = Vec::with_capacity(rho.len() + 1);
        cdf.push(0.0);
        let mut acc = 0.0;
        for &r in rho {
            acc += r / total;
            cdf.push(acc);
        }
        let nodes = mesh.space_points();
        let edges = (0..=rho.len()).map(|k| nodes[0] - 0.5 * dx + k as f64 * dx).collect();
        Ok(Self {
            edges,
            cdf,
            nodes,
            model,
            period: mesh.domain_length(),
        })
    }

    /// Quantile at `u ∈ [0, 1]`.
    fn eval(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c < u).clamp(1, self.cdf.len() - 1);
        match self.model {
            MassModel::PointMasses => self.nodes[k - 1],
            MassModel::PiecewiseConstant => {
                let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
                let s = if c1 > c0 { ((u - c0) / (c1 - c0)).clamp(0.0, 1.0) } else { 0.0 };
                self.edges[k - 1] + s * (self.edges[k] - self.edges[k - 1])
            }
        }
    }

    /// Quantile of the periodically unrolled distribution.
    fn eval_unrolled(&self, u: f64) -> f64 {
        let k = u.floor();
        self.eval(u - k) + k * self.period
    }
}

fn check_masses(rho: &[f64], sigma: &[f64], mesh: &SpaceTimeMesh) -> Result<()> {
    if rho.len() != mesh.n_space() || sigma.len() != mesh.n_space() {
        return Err(Error::LengthMismatch {
            expected: mesh.n_space(),
            got: if rho.len() != mesh.n_space() { rho.len() } else { sigma.len() },
        });
    }
    let (m1, m2): (f64, f64) = (rho.iter().sum(), sigma.iter().sum());
    if (m1 - m2).abs() > 0.02 * m1.max(m2) {
        return Err(Error::InvalidProblem(format!(
            "masses differ by more than 2%: {} vs {}",
            m1 * mesh.dx(),
            m2 * mesh.dx()
        )));
    }
    Ok(())
}

/// `W₂` between two grid densities via the quantile formula, evaluated at
/// `n_quantiles` midpoint levels. Masses are normalized internally. In
/// periodic mode the level shift `θ` is split evenly between the two
/// distributions so swapping them mirrors `θ`; the convex cost in `θ` is
/// minimized over a grid of `2N + 1` offsets in `[-1, 1]` followed by a
/// golden-section refinement, `O(N · n_quantiles)` in total.
pub fn wasserstein2_1d(
    rho: &[f64],
    sigma: &[f64],
    mesh: &SpaceTimeMesh,
    n_quantiles: usize,
    boundary: BoundaryMode,
    model: MassModel,
) -> Result<f64> {
    if n_quantiles == 0 {
        return Err(Error::InvalidProblem("n_quantiles must be positive".into()));
    }
    check_masses(rho, sigma, mesh)?;
    let p = Quantiles::new(rho, mesh, model)?;
    let q = Quantiles::new(sigma, mesh, model)?;
    let levels: Vec<f64> = (0..n_quantiles).map(|i| (i as f64 + 0.5) / n_quantiles as f64).collect();
    let cost = |theta: f64| -> f64 {
        let half = 0.5 * theta;
        levels
            .iter()
            .map(|&u| (p.eval_unrolled(u - half) - q.eval_unrolled(u + half)).powi(2))
            .sum::<f64>()
            / n_quantiles as f64
    };
    let w2_sq = match boundary {
        BoundaryMode::PaperTruncated => cost(0.0),
        BoundaryMode::Periodic => {
            let n = mesh.n_space() as i64;
            let step = 1.0 / n as f64;
            let (mut best_theta, mut best) = (0.0, cost(0.0));
            for k in (-n..=n).filter(|&k| k != 0) {
                let theta = k as f64 * step;
                let c = cost(theta);
                if c < best {
                    best = c;
                    best_theta = theta;
                }
            }
            let (mut lo, mut hi) = (best_theta - step, best_theta + step);
            let g = 0.5 * (5f64.sqrt() - 1.0);
            let (mut t1, mut t2) = (hi - g * (hi - lo), lo + g * (hi - lo));
            let (mut c1, mut c2) = (cost(t1), cost(t2));
            for _ in 0..60 {
                if c1 < c2 {
                    hi = t2;
                    t2 = t1;
                    c2 = c1;
                    t1 = hi - g * (hi - lo);
                    c1 = cost(t1);
                } else {
                    lo = t1;
                    t1 = t2;
                    c1 = c2;
                    t2 = lo + g * (hi - lo);
                    c2 = cost(t2);
                }
            }
            best.min(c1).min(c2)
        }
    };
    Ok(w2_sq.max(0.0).sqrt())
}

/// Output of [`stability_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub sup_w2: f64,
    /// `W₂(ρ_t, ρ̂_t)` at each output time.
    pub w2_by_time: Vec<f64>,
    pub rkhs_error: f64,
    /// `sqrt(κ₁²‖V̂ - V‖² + κ₂²‖Ŵ - W‖²)`.
    pub kappa_error: f64,
}

/// Runs the Hamiltonian flow with the true and with the estimated functions
/// from the same `(μ0, Φ)` and compares the density paths.
pub fn stability_experiment(
    truth: &GroundTruth,
    est: &Candidate,
    mu0: &[f64],
    phase: &dyn Smooth,
    mesh: &SpaceTimeMesh,
    dt_solver: f64,
) -> Result<StabilityReport> {
    let true_spec = truth.energy_spec(InternalEnergy::None)?;
    let est_spec = EnergySpec::new(Field::Rkhs(est.v.clone()), Field::Rkhs(est.w.clone()), InternalEnergy::None)?;
    let (rho, _) = hamiltonian_flow_simulate(mu0, phase, &true_spec, mesh, dt_solver)?;
    let (rho_hat, _) = hamiltonian_flow_simulate(mu0, phase, &est_spec, mesh, dt_solver)?;
    let n_quantiles = 4 * mesh.n_space();
    let w2_by_time = (0..mesh.n_time())
        .map(|l| {
            wasserstein2_1d(
                rho.row(l),
                rho_hat.row(l),
                mesh,
                n_quantiles,
                BoundaryMode::Periodic,
                MassModel::PiecewiseConstant,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    let (ev, ew) = component_errors(est, truth)?;
    let extent = mesh.domain_length();
    let kappa_error = (kappa_sq(truth.v.kernel(), extent) * ev * ev + kappa_sq(truth.w.kernel(), extent) * ew * ew).sqrt();
    Ok(StabilityReport {
        sup_w2: w2_by_time.iter().copied().fold(0.0, f64::max),
        w2_by_time,
        rkhs_error: (ev * ev + ew * ew).sqrt(),
        kappa_error,
    })
}

/// Solves with the scheme-free data of [`scheme_free_data`] and returns the error.
pub fn scheme_free_error(
    problem: &EstimationProblem,
    truth: &GroundTruth,
    exact_slope: Option<&dyn Fn(f64, f64) -> f64>,
) -> Result<f64> {
    let data = scheme_free_data(problem, truth, exact_slope)?;
    rkhs_error(&solve_with(problem, &data)?.candidate(), truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mesh(n: usize) -> SpaceTimeMesh {
        SpaceTimeMesh::new(0.0, 1.0, 0.1, n, 4).unwrap()
    }

    #[test]
    fn slope_of_power_law() {
        let x = [32.0, 48.0, 64.0, 96.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-0.4)).collect();
        assert!((loglog_slope(&x, &y).unwrap() + 0.4).abs() < 1e-12);
        assert!(loglog_slope(&x, &[0.0; 4]).is_none());
    }

    #[test]
    fn plan_validation() {
        let k = SmoothKernel::gaussian(0.1).unwrap();
        let truth = GroundTruth::zero(k, k);
        let good = SweepPlan::new(vec![8, 12], 0.2, 1.2, truth.clone(), GeneratorSettings::default());
        assert!(good.validate().is_ok());
        for (alpha, beta) in [(0.4, 1.2), (0.0, 1.2), (0.2, 0.5)] {
            let p = SweepPlan::new(vec![8, 12], alpha, beta, truth.clone(), GeneratorSettings::default());
            assert!(matches!(p.validate(), Err(Error::InvalidPlan(_))));
        }
        let p = SweepPlan::new(vec![12, 8], 0.2, 1.2, truth, GeneratorSettings::default());
        assert!(p.validate().is_err());
        assert_eq!(good.n_time(32), 64);
        assert!((good.predicted_exponent(1.0) - 0.2).abs() < 1e-15);
        assert!((good.predicted_exponent(0.25) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn random_truth_is_seeded() {
        let k = SmoothKernel::gaussian(0.1).unwrap();
        let a = GroundTruth::random(k, k, 0.0, 1.0, 0.5, 7).unwrap();
        let b = GroundTruth::random(k, k, 0.0, 1.0, 0.5, 7).unwrap();
        assert_eq!(a, b);
        let m = a.v.atoms().len();
        assert!((3..=5).contains(&m));
        let sum: f64 = a.v.atoms().iter().map(|at| at.weight).sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn quantiles_invert_the_cdf() {
        let m = mesh(10);
        let q = Quantiles::new(&vec![1.0; 10], &m, MassModel::PiecewiseConstant).unwrap();
        // Uniform on [0.05, 1.05]
        assert!((q.eval(0.5) - 0.55).abs() < 1e-12);
        assert!((q.eval_unrolled(1.25) - (0.3 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn periodic_shift_is_found() {
        let m = mesh(64);
        let xs = m.space_points();
        // A narrow bump; for near-uniform densities a rotation costs less than the shift.
        let rho: Vec<f64> = xs.iter().map(|&x| (-(x - 0.9f64).powi(2) / 0.005).exp() + 1e-9).collect();
        let shifted: Vec<f64> = (0..64).map(|i| rho[(i + 64 - 5) % 64]).collect();
        let w = wasserstein2_1d(&rho, &shifted, &m, 512, BoundaryMode::Periodic, MassModel::PiecewiseConstant).unwrap();
        assert!((w - 5.0 / 64.0).abs() < 1e-3, "{w}");
    }

    #[test]
    fn mass_mismatch_is_rejected() {
        let m = mesh(8);
        let r = wasserstein2_1d(&[1.0; 8], &[1.1; 8], &m, 16, BoundaryMode::PaperTruncated, MassModel::PointMasses);
        assert!(matches!(r, Err(Error::InvalidProblem(_))));
        let r = wasserstein2_1d(&[1.0; 8], &[0.0; 8], &m, 16, BoundaryMode::PaperTruncated, MassModel::PointMasses);
        assert!(r.is_err());
    }
}
