//! Closed-form structure-preserving kernel ridge regression.
//!
//! The estimator minimizes
//! `c Σ_i ρ_i |A^δ(φ, ψ)_i - f_i|² + λ₁‖φ‖² + λ₂‖ψ‖²` with `c = T|Ω| / NL`.
//! Its minimizer has coefficients `C_k = (c / λ_k) r` where `r = f - A^δ(V̂, Ŵ)`
//! is the node residual, and lives in the span of the weighted-Laplacian
//! sections. Every section is a finite combination of a small set of kernel
//! atoms (`∂ᵃK(x_n, ·)` for plain sections, `∂ᵃK((n - m)Δx, ·)` for convolved
//! ones), so two equivalent solves are available:
//!
//! * **dense**: the node-space system with the section Gram matrix;
//! * **feature**: the atom-space system `(Λ/c + PᵀC_ρP M) θ = PᵀC_ρ f`, whose
//!   size depends on `N` only and which scales to large `L`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{christoffel_term, InternalEnergy, Smooth};
use crate::grid::{diff_x_row, BoundaryMode, DensityTrajectory};
use crate::kernels::{rkhs_inner, Atom, RkhsFunction, SmoothKernel};

/// Largest node count solved with the dense route under [`SolveRoute::Auto`].
pub const DENSE_NODE_LIMIT: usize = 4096;

const JITTER: [f64; 3] = [1e-12, 1e-10, 1e-8];
const CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    #[default]
    Gradient,
    Hamiltonian,
}

/// Treatment of the last time slices, where the forward time differences use
/// the truncation branch `-ρ_L/Δt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalSlices {
    /// Use every slice, as in the loss as written.
    #[default]
    Include,
    /// Drop the slices whose time differences hit the truncation branch: the
    /// last one for gradient flows, the last two for Hamiltonian flows.
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveRoute {
    /// Dense when the node count is at most [`DENSE_NODE_LIMIT`].
    #[default]
    Auto,
    Dense,
    Feature,
}

/// Inputs of one estimation.
#[derive(Debug, Clone)]
pub struct EstimationProblem {
    pub traj: DensityTrajectory,
    pub kernel1: SmoothKernel,
    pub kernel2: SmoothKernel,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Kernel and penalty of the learned internal-energy term.
    pub third: Option<(SmoothKernel, f64)>,
    pub flow: FlowKind,
    /// Internal energy assumed known when no third kernel is given.
    pub known_u: InternalEnergy,
    pub terminal: TerminalSlices,
    pub route: SolveRoute,
}

impl EstimationProblem {
    pub fn new(
        traj: DensityTrajectory,
        kernel1: SmoothKernel,
        kernel2: SmoothKernel,
        lambda1: f64,
        lambda2: f64,
    ) -> Self {
        Self {
            traj,
            kernel1,
            kernel2,
            lambda1,
            lambda2,
            third: None,
            flow: FlowKind::Gradient,
            known_u: InternalEnergy::None,
            terminal: TerminalSlices::Include,
            route: SolveRoute::Auto,
        }
    }

    pub fn with_flow(mut self, flow: FlowKind) -> Self {
        self.flow = flow;
        self
    }

    pub fn with_known_u(mut self, u: InternalEnergy) -> Self {
        self.known_u = u;
        self
    }

    pub fn with_third(mut self, kernel3: SmoothKernel, lambda3: f64) -> Self {
        self.third = Some((kernel3, lambda3));
        self
    }

    pub fn with_terminal(mut self, terminal: TerminalSlices) -> Self {
        self.terminal = terminal;
        self
    }

    pub fn with_route(mut self, route: SolveRoute) -> Self {
        self.route = route;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lam) in self.lambdas().iter().enumerate() {
            if !(lam.is_finite() && *lam > 0.0) {
                return Err(Error::InvalidProblem(format!("lambda{} must be positive, got {lam}", name + 1)));
            }
        }
        self.known_u.validate()?;
        if self.third.is_none() && matches!(self.known_u, InternalEnergy::Fisher) {
            return Err(Error::InvalidEnergy("fisher information is not supported by the estimator".into()));
        }
        if self.flow == FlowKind::Hamiltonian && self.traj.n_time() < 3 {
            return Err(Error::InvalidProblem("hamiltonian data needs at least 3 time slices".into()));
        }
        if self.active_slices() == 0 {
            return Err(Error::InvalidProblem("no time slices left after dropping terminal slices".into()));
        }
        Ok(())
    }

    /// `(λ₁, λ₂[, λ₃])`.
    pub fn lambdas(&self) -> Vec<f64> {
        let mut l = vec![self.lambda1, self.lambda2];
        if let Some((_, l3)) = self.third {
            l.push(l3);
        }
        l
    }

    /// `T|Ω| / (N L)` over the full mesh.
    pub fn prefactor(&self) -> f64 {
        let mesh = self.traj.mesh();
        mesh.horizon() * mesh.domain_length() / (mesh.n_space() * mesh.n_time()) as f64
    }

    pub fn active_slices(&self) -> usize {
        let drop = match (self.terminal, self.flow) {
            (TerminalSlices::Include, _) => 0,
            (TerminalSlices::Exclude, FlowKind::Gradient) => 1,
            (TerminalSlices::Exclude, FlowKind::Hamiltonian) => 2,
        };
        self.traj.n_time().saturating_sub(drop)
    }

    /// Data nodes `(l, n)` entering the loss, in row-major order.
    pub fn active_nodes(&self) -> Vec<(usize, usize)> {
        let n = self.traj.n_space();
        (0..self.active_slices()).flat_map(|l| (0..n).map(move |k| (l, k))).collect()
    }
}

/// Per-node quantities entering the loss: slope `d = δ⁺ₓρ`, density `r = ρ`
/// (which is also the loss weight) and the data functional `f`.
///
/// Normally built from the trajectory with [`NodeData::from_problem`]; the
/// fields may be replaced, e.g. by exact derivatives, to isolate the
/// discretization error of the scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeData {
    pub nodes: Vec<(usize, usize)>,
    pub slopes: Vec<f64>,
    pub densities: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl NodeData {
    pub fn from_problem(problem: &EstimationProblem) -> Result<Self> {
        problem.validate()?;
        let traj = &problem.traj;
        let nodes = problem.active_nodes();
        let known_u = if problem.third.is_some() {
            InternalEnergy::None
        } else {
            problem.known_u
        };
        let f = assemble_fdelta(traj, problem.flow, known_u)?;
        let n = traj.n_space();
        let mut slopes = Vec::with_capacity(nodes.len());
        let mut densities = Vec::with_capacity(nodes.len());
        let mut rhs = Vec::with_capacity(nodes.len());
        for &(l, k) in &nodes {
            slopes.push(traj.forward_diff_x(l, k)?);
            densities.push(traj.value(l, k));
            rhs.push(f[l * n + k]);
        }
        Ok(Self {
            nodes,
            slopes,
            densities,
            rhs,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self) -> Result<()> {
        let n = self.nodes.len();
        for v in [&self.slopes, &self.densities, &self.rhs] {
            if v.len() != n {
                return Err(Error::LengthMismatch {
                    expected: n,
                    got: v.len(),
                });
            }
        }
        if let Some(i) = self.densities.iter().position(|&r| !(r > 0.0)) {
            return Err(Error::NonPositiveDensity {
                index: i,
                value: self.densities[i],
            });
        }
        Ok(())
    }
}

/// `A^δ(φ, ψ)(t_l, x_n) = d ∂ₓ(φ + ψ*ρ_l)(x_n) + ρ ∂ₓₓ(φ + ψ*ρ_l)(x_n)`,
/// evaluated directly from the kernel sums.
pub fn apply_adelta(
    traj: &DensityTrajectory,
    phi: &dyn Smooth,
    psi: &dyn Smooth,
    l: usize,
    n: usize,
) -> Result<f64> {
    let slope = traj.forward_diff_x(l, n)?;
    let mesh = traj.mesh();
    let x = mesh.x(n);
    let dx = mesh.dx();
    let (mut g1, mut g2) = (phi.derivative(1, x), phi.derivative(2, x));
    for (m, &r) in traj.row(l).iter().enumerate() {
        let z = x - mesh.x(m);
        g1 += dx * r * psi.derivative(1, z);
        g2 += dx * r * psi.derivative(2, z);
    }
    Ok(slope * g1 + traj.value(l, n) * g2)
}

/// `U′`-terms `d ∂ₓU′(ρ) + ρ ∂ₓₓU′(ρ)` of one slice via the chain rule.
fn internal_terms(row: &[f64], slopes: &[f64], dx: f64, mode: BoundaryMode, u: InternalEnergy) -> Result<Vec<f64>> {
    if u.is_none() {
        return Ok(vec![0.0; row.len()]);
    }
    let h = row
        .iter()
        .zip(slopes)
        .map(|(&r, &d)| Ok(u.second(r)? * d))
        .collect::<Result<Vec<f64>>>()?;
    let dh = diff_x_row(&h, dx, mode);
    Ok((0..row.len()).map(|i| slopes[i] * h[i] + row[i] * dh[i]).collect())
}

/// Data functional `f^δ` on all `N L` nodes, row-major in time.
pub fn assemble_fdelta(traj: &DensityTrajectory, flow: FlowKind, known_u: InternalEnergy) -> Result<Vec<f64>> {
    let mesh = traj.mesh();
    let mode = traj.boundary();
    if flow == FlowKind::Hamiltonian {
        if traj.n_time() < 3 {
            return Err(Error::InvalidProblem("hamiltonian data needs at least 3 time slices".into()));
        }
        if mode != BoundaryMode::Periodic {
            return Err(Error::RequiresPeriodic);
        }
    }
    let mut f = Vec::with_capacity(traj.values().len());
    for l in 0..traj.n_time() {
        let row = traj.row(l);
        let slopes = traj.diff_x_row(l);
        let u_terms = internal_terms(row, &slopes, mesh.dx(), mode, known_u)?;
        match flow {
            FlowKind::Gradient => {
                let dt = traj.diff_t_row(l);
                f.extend(dt.iter().zip(&u_terms).map(|(a, b)| a - b));
            }
            FlowKind::Hamiltonian => {
                let mut rate = traj.diff_t_row(l);
                // Γ acts on zero-mean tangent vectors; remove the mass drift.
                let mean = rate.iter().sum::<f64>() / rate.len() as f64;
                rate.iter_mut().for_each(|v| *v -= mean);
                let gamma = christoffel_term(row, &rate, mesh)?;
                let dtt = traj.diff_tt_row(l);
                f.extend((0..row.len()).map(|i| dtt[i] + gamma[i] - u_terms[i]));
            }
        }
    }
    Ok(f)
}

/// Finite atom basis spanning one family of sections, with the sparse map
/// from node sections to atoms.
struct Basis {
    kernel: SmoothKernel,
    atoms: Vec<(f64, usize)>,
    rows: Vec<Vec<(usize, f64)>>,
}

impl Basis {
    fn plain(kernel: SmoothKernel, traj: &DensityTrajectory, data: &NodeData) -> Self {
        let mesh = traj.mesh();
        let atoms = (0..mesh.n_space())
            .flat_map(|n| [(mesh.x(n), 1), (mesh.x(n), 2)])
            .collect();
        let rows = data
            .nodes
            .iter()
            .zip(data.slopes.iter().zip(&data.densities))
            .map(|(&(_, n), (&d, &r))| vec![(2 * n, d), (2 * n + 1, r)])
            .collect();
        Self { kernel, atoms, rows }
    }

    fn convolved(kernel: SmoothKernel, traj: &DensityTrajectory, data: &NodeData) -> Self {
        let mesh = traj.mesh();
        let (n_space, dx) = (mesh.n_space(), mesh.dx());
        let atoms = (0..2 * n_space - 1)
            .flat_map(|j| {
                let c = (j as f64 - (n_space as f64 - 1.0)) * dx;
                [(c, 1), (c, 2)]
            })
            .collect();
        let rows = data
            .nodes
            .iter()
            .zip(data.slopes.iter().zip(&data.densities))
            .map(|(&(l, n), (&d, &r))| {
                let mut row = Vec::with_capacity(2 * n_space);
                for (m, &rho) in traj.row(l).iter().enumerate() {
                    let j = n + n_space - 1 - m;
                    let q = dx * rho;
                    row.push((2 * j, d * q));
                    row.push((2 * j + 1, r * q));
                }
                row
            })
            .collect();
        Self { kernel, atoms, rows }
    }

    fn dim(&self) -> usize {
        self.atoms.len()
    }

    fn gram(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_fn(d, d, |a, b| {
            let (ca, oa) = self.atoms[a];
            let (cb, ob) = self.atoms[b];
            self.kernel.partial(oa, ob, ca, cb)
        })
    }

    /// Dense block of rows `range` of the section-to-atom map.
    fn dense_rows(&self, range: std::ops::Range<usize>) -> DMatrix<f64> {
        let mut p = DMatrix::zeros(range.len(), self.dim());
        for (i, row) in range.clone().zip(0..) {
            for &(j, v) in &self.rows[i] {
                p[(row, j)] += v;
            }
        }
        p
    }

    fn function(&self, theta: &[f64]) -> RkhsFunction {
        let atoms = self
            .atoms
            .iter()
            .zip(theta)
            .filter(|(_, &w)| w != 0.0)
            .map(|(&(center, order), &weight)| Atom { center, order, weight })
            .collect();
        RkhsFunction::from_atoms(self.kernel, atoms).expect("orders are at most 2")
    }

    /// `Pᵀ v`.
    fn adjoint(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (row, &vi) in self.rows.iter().zip(v) {
            for &(j, p) in row {
                out[j] += p * vi;
            }
        }
        out
    }

    /// `P u`.
    fn forward(&self, u: &[f64]) -> Vec<f64> {
        self.rows
            .iter()
            .map(|row| row.iter().map(|&(j, p)| p * u[j]).sum())
            .collect()
    }
}

fn bases(problem: &EstimationProblem, data: &NodeData) -> Vec<Basis> {
    let traj = &problem.traj;
    let mut out = vec![
        Basis::plain(problem.kernel1, traj, data),
        Basis::convolved(problem.kernel2, traj, data),
    ];
    if let Some((k3, _)) = problem.third {
        out.push(Basis::plain(k3, traj, data));
    }
    out
}

fn section_gram_of(basis: &Basis) -> DMatrix<f64> {
    let p = basis.dense_rows(0..basis.rows.len());
    let pm = &p * basis.gram();
    pm * p.transpose()
}

/// `(Σ_i w1_i s1_i, Σ_i w2_i s2_i[, Σ_i w3_i s3_i])` over the active nodes.
pub fn span_candidate(problem: &EstimationProblem, data: &NodeData, weights: &[Vec<f64>]) -> Result<Candidate> {
    let bs = bases(problem, data);
    if weights.len() != bs.len() {
        return Err(Error::LengthMismatch {
            expected: bs.len(),
            got: weights.len(),
        });
    }
    let mut parts = Vec::with_capacity(bs.len());
    for (basis, w) in bs.iter().zip(weights) {
        if w.len() != data.len() {
            return Err(Error::LengthMismatch {
                expected: data.len(),
                got: w.len(),
            });
        }
        parts.push(basis.function(&basis.adjoint(w)));
    }
    let mut parts = parts.into_iter();
    Ok(Candidate {
        v: parts.next().expect("two bases"),
        w: parts.next().expect("two bases"),
        u: parts.next(),
    })
}

/// Unweighted section Grams `⟨s_k,i, s_k,j⟩` over the active nodes, one per
/// learned function (`Δ^{(1,1)δ}K₁`, `Δ^{(1,1)δ}(K₂**ρ)`, then `Δ^{(1,1)δ}K₃`).
pub fn section_grams(problem: &EstimationProblem) -> Result<Vec<DMatrix<f64>>> {
    let data = NodeData::from_problem(problem)?;
    Ok(bases(problem, &data).iter().map(section_gram_of).collect())
}

/// `G = C_ρ(Σ_k (Π_{j≠k} λ_j) S_k)C_ρ` over the active nodes.
pub fn assemble_gram(problem: &EstimationProblem) -> Result<DMatrix<f64>> {
    let grams = section_grams(problem)?;
    let lams = problem.lambdas();
    let total: f64 = lams.iter().product();
    let rho: Vec<f64> = problem
        .active_nodes()
        .iter()
        .map(|&(l, n)| problem.traj.value(l, n))
        .collect();
    let n = rho.len();
    let mut g = DMatrix::zeros(n, n);
    for (s, lam) in grams.iter().zip(&lams) {
        g += s * (total / lam);
    }
    for i in 0..n {
        for j in 0..n {
            g[(i, j)] *= rho[i] * rho[j];
        }
    }
    Ok(g)
}

/// An element of `H_{K₁} × H_{K₂} [× H_{K₃}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub v: RkhsFunction,
    pub w: RkhsFunction,
    pub u: Option<RkhsFunction>,
}

impl Candidate {
    pub fn zero(problem: &EstimationProblem) -> Self {
        Self {
            v: RkhsFunction::zero(problem.kernel1),
            w: RkhsFunction::zero(problem.kernel2),
            u: problem.third.map(|(k, _)| RkhsFunction::zero(k)),
        }
    }

    fn parts(&self) -> Vec<&RkhsFunction> {
        let mut p = vec![&self.v, &self.w];
        if let Some(u) = &self.u {
            p.push(u);
        }
        p
    }

    fn check(&self, problem: &EstimationProblem) -> Result<()> {
        if self.u.is_some() != problem.third.is_some() {
            return Err(Error::InvalidProblem("candidate and problem disagree on the third function".into()));
        }
        Ok(())
    }
}

/// Penalized coefficients and RKHS norms of the estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RkhsNorms {
    pub v: f64,
    pub w: f64,
    pub u: Option<f64>,
}

/// Output of [`solve`].
#[derive(Debug, Clone)]
pub struct EstimatorResult {
    /// Active nodes `(l, n)` indexing the coefficient vectors.
    pub nodes: Vec<(usize, usize)>,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    pub c3: Option<Vec<f64>>,
    pub v_hat: RkhsFunction,
    pub w_hat: RkhsFunction,
    pub u_hat: Option<RkhsFunction>,
    pub norms: RkhsNorms,
    /// Value of the regularized empirical loss at the estimate.
    pub loss: f64,
    /// `f - A^δ(V̂, Ŵ)` on the active nodes.
    pub residual: Vec<f64>,
    /// Condition estimate of the factorized system (ratio of factor diagonals).
    pub gram_condition: f64,
    /// Route actually used.
    pub route: SolveRoute,
    pub prefactor: f64,
    pub lambdas: Vec<f64>,
}

impl EstimatorResult {
    pub fn candidate(&self) -> Candidate {
        Candidate {
            v: self.v_hat.clone(),
            w: self.w_hat.clone(),
            u: self.u_hat.clone(),
        }
    }

    /// `Ŵ(x) - Ŵ(0)`; interaction kernels are identifiable up to constants.
    pub fn w_centered(&self, x: f64) -> f64 {
        self.w_hat.value(x) - self.w_hat.value(0.0)
    }
}

/// Solves the estimation problem.
pub fn solve(problem: &EstimationProblem) -> Result<EstimatorResult> {
    let data = NodeData::from_problem(problem)?;
    solve_with(problem, &data)
}

/// Solves with caller-provided node data (slopes, densities, right-hand side).
pub fn solve_with(problem: &EstimationProblem, data: &NodeData) -> Result<EstimatorResult> {
    problem.validate()?;
    data.check()?;
    let route = match problem.route {
        SolveRoute::Auto if data.len() <= DENSE_NODE_LIMIT => SolveRoute::Dense,
        SolveRoute::Auto => SolveRoute::Feature,
        r => r,
    };
    let bases = bases(problem, data);
    let lams = problem.lambdas();
    let c = problem.prefactor();
    let grams: Vec<DMatrix<f64>> = bases.iter().map(Basis::gram).collect();

    // Scaled coefficients y = c r (so that C_k = y / λ_k) and atom weights θ_k.
    let (y, thetas, condition) = match route {
        SolveRoute::Dense => dense_solve(&bases, &grams, &lams, c, data)?,
        _ => feature_solve(&bases, &grams, &lams, c, data)?,
    };

    let residual: Vec<f64> = y.iter().map(|v| v / c).collect();
    let mut norms_sq = Vec::with_capacity(bases.len());
    for (theta, m) in thetas.iter().zip(&grams) {
        let t = DVector::from_column_slice(theta);
        norms_sq.push((t.transpose() * m * &t)[(0, 0)].max(0.0));
    }
    let fit: f64 = residual
        .iter()
        .zip(&data.densities)
        .map(|(r, rho)| r * r * rho)
        .sum::<f64>()
        * c;
    let loss = fit + norms_sq.iter().zip(&lams).map(|(n, l)| n * l).sum::<f64>();
    let coeffs: Vec<Vec<f64>> = lams.iter().map(|l| y.iter().map(|v| v / l).collect()).collect();
    let functions: Vec<RkhsFunction> = bases.iter().zip(&thetas).map(|(b, t)| b.function(t)).collect();

    Ok(EstimatorResult {
        nodes: data.nodes.clone(),
        c1: coeffs[0].clone(),
        c2: coeffs[1].clone(),
        c3: coeffs.get(2).cloned(),
        v_hat: functions[0].clone(),
        w_hat: functions[1].clone(),
        u_hat: functions.get(2).cloned(),
        norms: RkhsNorms {
            v: norms_sq[0].sqrt(),
            w: norms_sq[1].sqrt(),
            u: norms_sq.get(2).map(|v| v.sqrt()),
        },
        loss,
        residual,
        gram_condition: condition,
        route,
        prefactor: c,
        lambdas: lams,
    })
}

type Solution = (Vec<f64>, Vec<Vec<f64>>, f64);

/// Node space: `(C^{1/2} S C^{1/2} + I/c) u = C^{1/2} f`, `y = C^{-1/2} u`,
/// with `S = Σ_k S_k / λ_k`. This is the Gram system scaled by `1/Πλ` and
/// symmetrized by `C^{1/2}`.
fn dense_solve(bases: &[Basis], grams: &[DMatrix<f64>], lams: &[f64], c: f64, data: &NodeData) -> Result<Solution> {
    let n = data.len();
    let sqrt_rho: Vec<f64> = data.densities.iter().map(|r| r.sqrt()).collect();
    let mut sys = DMatrix::<f64>::zeros(n, n);
    for ((basis, m), lam) in bases.iter().zip(grams).zip(lams) {
        let p = basis.dense_rows(0..n);
        let pm = &p * m;
        sys.gemm(1.0 / lam, &pm, &p.transpose(), 1.0);
    }
    for i in 0..n {
        for j in 0..n {
            sys[(i, j)] *= sqrt_rho[i] * sqrt_rho[j];
        }
        sys[(i, i)] += 1.0 / c;
    }
    // Enforce exact symmetry before factorizing.
    let sys = (&sys + sys.transpose()) * 0.5;
    let rhs = DVector::from_iterator(n, data.rhs.iter().zip(&sqrt_rho).map(|(f, s)| f * s));
    let max_diag = sys.diagonal().iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    let mut chol = sys.clone().cholesky();
    for eps in JITTER {
        if chol.is_some() {
            break;
        }
        let mut jittered = sys.clone();
        for i in 0..n {
            jittered[(i, i)] += eps * max_diag;
        }
        chol = jittered.cholesky();
    }
    let chol = chol.ok_or(Error::Factorization {
        condition: diagonal_ratio(sys.diagonal().iter().cloned()),
    })?;
    let condition = diagonal_ratio(chol.l_dirty().diagonal().iter().cloned()).powi(2);
    let u = chol.solve(&rhs);
    let y: Vec<f64> = u.iter().zip(&sqrt_rho).map(|(u, s)| u / s).collect();

    let weighted: Vec<f64> = y.iter().zip(&data.densities).map(|(y, r)| y * r).collect();
    let thetas = bases
        .iter()
        .zip(lams)
        .map(|(b, lam)| b.adjoint(&weighted).into_iter().map(|v| v / lam).collect())
        .collect();
    Ok((y, thetas, condition))
}

/// Atom space: `(Λ/c + H M) θ = g` with `H = PᵀC_ρP`, `g = PᵀC_ρ f`, then
/// `y = c (f - P M θ)`.
fn feature_solve(bases: &[Basis], grams: &[DMatrix<f64>], lams: &[f64], c: f64, data: &NodeData) -> Result<Solution> {
    let n = data.len();
    let dims: Vec<usize> = bases.iter().map(Basis::dim).collect();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let total: usize = dims.iter().sum();

    let mut h = DMatrix::<f64>::zeros(total, total);
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let mut p = DMatrix::<f64>::zeros(end - start, total);
        for (basis, &off) in bases.iter().zip(&offsets) {
            let block = basis.dense_rows(start..end);
            p.view_mut((0, off), (end - start, basis.dim())).copy_from(&block);
        }
        let mut wp = p.clone();
        for (i, mut row) in wp.row_iter_mut().enumerate() {
            row *= data.densities[start + i];
        }
        h.gemm_tr(1.0, &p, &wp, 1.0);
        start = end;
    }

    let weighted_f: Vec<f64> = data.rhs.iter().zip(&data.densities).map(|(f, r)| f * r).collect();
    let mut g = DVector::zeros(total);
    for (basis, &off) in bases.iter().zip(&offsets) {
        for (j, v) in basis.adjoint(&weighted_f).into_iter().enumerate() {
            g[off + j] = v;
        }
    }

    let mut m = DMatrix::<f64>::zeros(total, total);
    for (gram, &off) in grams.iter().zip(&offsets) {
        m.view_mut((off, off), gram.shape()).copy_from(gram);
    }
    let mut sys = &h * &m;
    for (k, &off) in offsets.iter().enumerate() {
        for j in 0..dims[k] {
            sys[(off + j, off + j)] += lams[k] / c;
        }
    }
    let lu = sys.lu();
    let condition = diagonal_ratio(lu.u().diagonal().iter().cloned());
    let theta = lu.solve(&g).ok_or(Error::Factorization { condition })?;
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Factorization { condition });
    }

    let mtheta = &m * &theta;
    let mut fitted = vec![0.0; n];
    for (basis, &off) in bases.iter().zip(&offsets) {
        let part = basis.forward(&mtheta.as_slice()[off..off + basis.dim()]);
        fitted.iter_mut().zip(part).for_each(|(a, b)| *a += b);
    }
    let y = data.rhs.iter().zip(&fitted).map(|(f, a)| c * (f - a)).collect();
    let thetas = offsets
        .iter()
        .zip(&dims)
        .map(|(&off, &d)| theta.as_slice()[off..off + d].to_vec())
        .collect();
    Ok((y, thetas, condition))
}

fn diagonal_ratio(diag: impl Iterator<Item = f64>) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for v in diag {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo > 0.0 {
        hi / lo
    } else {
        f64::INFINITY
    }
}

/// `A^δ(candidate)` on the nodes of `data`. The convolved part uses `ψ′, ψ″`
/// tabulated on the lattice of node differences `(n - m)Δx`.
pub fn apply_candidate(problem: &EstimationProblem, data: &NodeData, cand: &Candidate) -> Result<Vec<f64>> {
    cand.check(problem)?;
    let traj = &problem.traj;
    let mesh = traj.mesh();
    let (n_space, dx) = (mesh.n_space(), mesh.dx());
    let lattice = |order: usize| -> Vec<f64> {
        (0..2 * n_space - 1)
            .map(|k| cand.w.derivative(order, (k as f64 - (n_space - 1) as f64) * dx))
            .collect()
    };
    let (w1, w2) = (lattice(1), lattice(2));
    Ok(data
        .nodes
        .iter()
        .enumerate()
        .map(|(i, &(l, n))| {
            let x = mesh.x(n);
            let (mut g1, mut g2) = (cand.v.derivative(1, x), cand.v.derivative(2, x));
            if let Some(u) = &cand.u {
                g1 += u.derivative(1, x);
                g2 += u.derivative(2, x);
            }
            for (m, &r) in traj.row(l).iter().enumerate() {
                let k = n + n_space - 1 - m;
                g1 += dx * r * w1[k];
                g2 += dx * r * w2[k];
            }
            data.slopes[i] * g1 + data.densities[i] * g2
        })
        .collect())
}

/// Regularized empirical loss `R̂(φ, ψ[, χ])`.
pub fn empirical_loss(problem: &EstimationProblem, data: &NodeData, cand: &Candidate) -> Result<f64> {
    let a = apply_candidate(problem, data, cand)?;
    let fit: f64 = a
        .iter()
        .zip(&data.rhs)
        .zip(&data.densities)
        .map(|((a, f), r)| (a - f).powi(2) * r)
        .sum();
    let mut loss = problem.prefactor() * fit;
    for (f, lam) in cand.parts().into_iter().zip(problem.lambdas()) {
        loss += lam * rkhs_inner(f, f)?;
    }
    Ok(loss)
}

/// Gâteaux derivative of `R̂` at `point` along `direction`:
/// `2c Σ ρ (A(point) - f) A(direction) + 2 Σ_k λ_k ⟨point_k, direction_k⟩`.
pub fn gateaux_derivative(
    problem: &EstimationProblem,
    data: &NodeData,
    point: &Candidate,
    direction: &Candidate,
) -> Result<f64> {
    let a = apply_candidate(problem, data, point)?;
    derivative_with(problem, data, &a, point, direction)
}

fn derivative_with(
    problem: &EstimationProblem,
    data: &NodeData,
    a: &[f64],
    point: &Candidate,
    direction: &Candidate,
) -> Result<f64> {
    let da = apply_candidate(problem, data, direction)?;
    let mut total = 0.0;
    for i in 0..data.len() {
        total += data.densities[i] * (a[i] - data.rhs[i]) * da[i];
    }
    total *= 2.0 * problem.prefactor();
    for ((p, d), lam) in point.parts().into_iter().zip(direction.parts()).zip(problem.lambdas()) {
        total += 2.0 * lam * rkhs_inner(p, d)?;
    }
    Ok(total)
}

/// Largest `|DR̂|` at the estimate over the given directions.
pub fn stationarity_check(
    result: &EstimatorResult,
    problem: &EstimationProblem,
    data: &NodeData,
    directions: &[Candidate],
) -> Result<f64> {
    let point = result.candidate();
    let a = apply_candidate(problem, data, &point)?;
    let mut worst: f64 = 0.0;
    for d in directions {
        worst = worst.max(derivative_with(problem, data, &a, &point, d)?.abs());
    }
    Ok(worst)
}

/// `Tr(B^δ) = c Σ_i ρ_i Σ_k ‖s_k,i‖²` over the active nodes.
pub fn trace_bdelta(problem: &EstimationProblem) -> Result<f64> {
    let data = NodeData::from_problem(problem)?;
    let mut trace = 0.0;
    for basis in bases(problem, &data).iter().take(2) {
        let m = basis.gram();
        for (row, &rho) in basis.rows.iter().zip(&data.densities) {
            let mut sq = 0.0;
            for &(a, pa) in row {
                for &(b, pb) in row {
                    sq += pa * pb * m[(a, b)];
                }
            }
            trace += rho * sq;
        }
    }
    Ok(problem.prefactor() * trace)
}
