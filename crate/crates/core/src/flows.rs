//! Forward models: weighted Laplacian and its pseudo-inverse, the Christoffel
//! term of the Wasserstein metric, an explicit gradient-flow solver and a
//! particle (characteristics) solver for the Hamiltonian flow.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryMode, DensityTrajectory, SpaceTimeMesh};
use crate::kernels::RkhsFunction;

/// Density floor used by the gradient-flow solver.
pub const DENSITY_FLOOR: f64 = 1e-10;

/// Fraction of nodes allowed to undershoot the floor in one step before the
/// step is rejected.
pub const CFL_UNDERSHOOT_FRACTION: f64 = 0.01;

/// A scalar function of one variable with derivatives up to order 3.
pub trait Smooth {
    fn derivative(&self, order: usize, x: f64) -> f64;

    fn value(&self, x: f64) -> f64 {
        self.derivative(0, x)
    }
}

impl Smooth for RkhsFunction {
    fn derivative(&self, order: usize, x: f64) -> f64 {
        RkhsFunction::derivative(self, order, x)
    }
}

/// Closed-form or RKHS-valued potential / interaction profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Field {
    #[default]
    Zero,
    /// `slope · x + offset`
    Linear { slope: f64, offset: f64 },
    /// `½ curvature (x - center)²`
    Quadratic { curvature: f64, center: f64 },
    /// `amplitude · cos(2π frequency x + phase)`
    Cosine {
        amplitude: f64,
        frequency: f64,
        phase: f64,
    },
    /// `amplitude · exp(-(x - center)² / (2 width²))`
    Gaussian {
        amplitude: f64,
        center: f64,
        width: f64,
    },
    /// Sum of other fields.
    Sum { terms: Vec<Field> },
    Rkhs(RkhsFunction),
}

impl Field {
    pub fn is_zero(&self) -> bool {
        match self {
            Field::Zero => true,
            Field::Sum { terms: parts } => parts.iter().all(Field::is_zero),
            _ => false,
        }
    }
}

impl Smooth for Field {
    fn derivative(&self, order: usize, x: f64) -> f64 {
        match self {
            Field::Zero => 0.0,
            Field::Linear { slope, offset } => match order {
                0 => slope * x + offset,
                1 => *slope,
                _ => 0.0,
            },
            Field::Quadratic { curvature, center } => match order {
                0 => 0.5 * curvature * (x - center).powi(2),
                1 => curvature * (x - center),
                2 => *curvature,
                _ => 0.0,
            },
            Field::Cosine {
                amplitude,
                frequency,
                phase,
            } => {
                let w = 2.0 * PI * frequency;
                amplitude * w.powi(order as i32) * (w * x + phase + order as f64 * PI / 2.0).cos()
            }
            Field::Gaussian {
                amplitude,
                center,
                width,
            } => {
                let u = (x - center) / width;
                let (mut h_prev, mut h) = (0.0, 1.0);
                for k in 0..order {
                    let next = u * h - k as f64 * h_prev;
                    h_prev = h;
                    h = next;
                }
                let sign = if order % 2 == 0 { 1.0 } else { -1.0 };
                amplitude * sign * h * (-0.5 * u * u).exp() / width.powi(order as i32)
            }
            Field::Sum { terms: parts } => parts.iter().map(|p| p.derivative(order, x)).sum(),
            Field::Rkhs(f) => f.derivative(order, x),
        }
    }
}

/// Internal energy density `U(ρ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InternalEnergy {
    #[default]
    None,
    /// `ρ log ρ`
    Entropy,
    /// `ρᵐ / (m - 1)`, `m > 1`
    Power { m: f64 },
    /// `ρ |∇ log ρ|²`; labels data only.
    Fisher,
}

impl InternalEnergy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            InternalEnergy::Power { m } if !(m.is_finite() && m > 1.0) => {
                Err(Error::InvalidEnergy(format!("power exponent must exceed 1, got {m}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, InternalEnergy::None)
    }

    /// `U(ρ)`; Fisher has no pointwise density.
    pub fn density(&self, rho: f64) -> Result<f64> {
        match *self {
            InternalEnergy::None => Ok(0.0),
            InternalEnergy::Entropy => Ok(rho * rho.ln()),
            InternalEnergy::Power { m } => Ok(rho.powf(m) / (m - 1.0)),
            InternalEnergy::Fisher => Err(self.unsupported()),
        }
    }

    /// `U′(ρ)`.
    pub fn first(&self, rho: f64) -> Result<f64> {
        match *self {
            InternalEnergy::None => Ok(0.0),
            InternalEnergy::Entropy => Ok(rho.ln() + 1.0),
            InternalEnergy::Power { m } => Ok(m * rho.powf(m - 1.0) / (m - 1.0)),
            InternalEnergy::Fisher => Err(self.unsupported()),
        }
    }

    /// `U″(ρ)`.
    pub fn second(&self, rho: f64) -> Result<f64> {
        match *self {
            InternalEnergy::None => Ok(0.0),
            InternalEnergy::Entropy => Ok(1.0 / rho),
            InternalEnergy::Power { m } => Ok(m * rho.powf(m - 2.0)),
            InternalEnergy::Fisher => Err(self.unsupported()),
        }
    }

    /// Nonlinear diffusivity `ρ U″(ρ)`.
    pub fn diffusivity(&self, rho: f64) -> Result<f64> {
        Ok(rho * self.second(rho)?)
    }

    fn unsupported(&self) -> Error {
        Error::InvalidEnergy("fisher information needs fourth-order terms; not supported here".into())
    }
}

/// Energy `E(ρ) = ∫U(ρ) + ∫Vρ + ½∫∫W(x - y)ρ(x)ρ(y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct EnergySpec {
    #[serde(rename = "V", default)]
    pub potential: Field,
    #[serde(rename = "W", default)]
    pub interaction: Field,
    #[serde(rename = "U", default)]
    pub internal: InternalEnergy,
}

impl EnergySpec {
    pub fn new(potential: Field, interaction: Field, internal: InternalEnergy) -> Result<Self> {
        internal.validate()?;
        Ok(Self {
            potential,
            interaction,
            internal,
        })
    }

    /// Discrete energy of one density slice.
    pub fn energy(&self, rho: &[f64], mesh: &SpaceTimeMesh) -> Result<f64> {
        let dx = mesh.dx();
        let conv = interaction_potential(&self.interaction, rho, mesh);
        let mut e = 0.0;
        for (n, &r) in rho.iter().enumerate() {
            e += (self.internal.density(r)? + self.potential.value(mesh.x(n)) * r + 0.5 * conv[n] * r) * dx;
        }
        Ok(e)
    }

    /// `U′(ρ) + V + W * ρ` on the grid.
    pub fn first_variation(&self, rho: &[f64], mesh: &SpaceTimeMesh) -> Result<Vec<f64>> {
        let conv = interaction_potential(&self.interaction, rho, mesh);
        rho.iter()
            .enumerate()
            .map(|(n, &r)| Ok(self.internal.first(r)? + self.potential.value(mesh.x(n)) + conv[n]))
            .collect()
    }
}

/// `(W * ρ)(x_n) = Δx Σ_m W(x_n - x_m) ρ_m` on the grid, with the same
/// truncation to the observation grid as the estimator's convolutions.
pub fn interaction_potential(w: &Field, rho: &[f64], mesh: &SpaceTimeMesh) -> Vec<f64> {
    let n = rho.len();
    if w.is_zero() {
        return vec![0.0; n];
    }
    let dx = mesh.dx();
    // W((n - m)Δx) tabulated at offset n - m + (N - 1).
    let table: Vec<f64> = (0..2 * n - 1)
        .map(|k| w.value((k as f64 - (n as f64 - 1.0)) * dx))
        .collect();
    (0..n)
        .map(|i| {
            let base = i + n - 1;
            dx * rho.iter().enumerate().map(|(m, &r)| table[base - m] * r).sum::<f64>()
        })
        .collect()
}

fn check_positive(rho: &[f64]) -> Result<()> {
    match rho.iter().position(|&r| !(r > 0.0 && r.is_finite())) {
        Some(index) => Err(Error::NonPositiveDensity {
            index,
            value: rho[index],
        }),
        None => Ok(()),
    }
}

/// `(F_n - F_{n-1}) / Δx` with `F_n = ½(w_n + w_{n+1}) δ⁺φ_n`; any sign of `w`.
fn divergence_form(weight: &[f64], phi: &[f64], dx: f64, mode: BoundaryMode) -> Vec<f64> {
    let n = phi.len();
    let at = |v: &[f64], i: usize| -> f64 {
        if i < n {
            v[i]
        } else {
            match mode {
                BoundaryMode::Periodic => v[i - n],
                BoundaryMode::PaperTruncated => 0.0,
            }
        }
    };
    let flux: Vec<f64> = (0..n)
        .map(|i| 0.5 * (weight[i] + at(weight, i + 1)) * (at(phi, i + 1) - phi[i]) / dx)
        .collect();
    let left_flux = match mode {
        BoundaryMode::Periodic => flux[n - 1],
        // Zero extension on the left: w_{-1} = φ_{-1} = 0.
        BoundaryMode::PaperTruncated => 0.5 * weight[0] * phi[0] / dx,
    };
    (0..n)
        .map(|i| {
            let prev = if i == 0 { left_flux } else { flux[i - 1] };
            (flux[i] - prev) / dx
        })
        .collect()
}

/// Discrete `Δ_ρ φ = ∇·(ρ∇φ)`.
pub fn weighted_laplacian_apply(
    rho: &[f64],
    phi: &[f64],
    mesh: &SpaceTimeMesh,
    mode: BoundaryMode,
) -> Result<Vec<f64>> {
    check_len(rho, mesh)?;
    check_len(phi, mesh)?;
    check_positive(rho)?;
    Ok(divergence_form(rho, phi, mesh.dx(), mode))
}

/// `∇·(w∇φ)` for a signed weight, periodic or truncated.
pub fn weighted_laplacian_signed(
    weight: &[f64],
    phi: &[f64],
    mesh: &SpaceTimeMesh,
    mode: BoundaryMode,
) -> Result<Vec<f64>> {
    check_len(weight, mesh)?;
    check_len(phi, mesh)?;
    Ok(divergence_form(weight, phi, mesh.dx(), mode))
}

fn check_len(v: &[f64], mesh: &SpaceTimeMesh) -> Result<()> {
    if v.len() != mesh.n_space() {
        return Err(Error::LengthMismatch {
            expected: mesh.n_space(),
            got: v.len(),
        });
    }
    Ok(())
}

/// Projects `σ` onto zero-mean vectors if its mean is within round-off.
pub fn project_zero_mean(sigma: &[f64]) -> Result<Vec<f64>> {
    let mean = sigma.iter().sum::<f64>() / sigma.len() as f64;
    let scale = sigma.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    if mean.abs() > 1e-8 * scale {
        return Err(Error::NotZeroMean { mean });
    }
    Ok(sigma.iter().map(|v| v - mean).collect())
}

/// Zero-mean `φ` with `Δ_ρ φ = σ` on the periodic grid.
pub fn weighted_laplacian_pinv(rho: &[f64], sigma: &[f64], mesh: &SpaceTimeMesh) -> Result<Vec<f64>> {
    check_len(rho, mesh)?;
    check_len(sigma, mesh)?;
    check_positive(rho)?;
    let min = rho.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= DENSITY_FLOOR {
        return Err(Error::SingularLaplacian { min });
    }
    let sigma = project_zero_mean(sigma)?;
    let n = rho.len();
    if n == 1 {
        return Ok(vec![0.0]);
    }
    let dx2 = mesh.dx() * mesh.dx();
    // Edge conductances a_i between nodes i and i+1 (periodic).
    let a: Vec<f64> = (0..n).map(|i| 0.5 * (rho[i] + rho[(i + 1) % n])).collect();

    // Pin φ_0 = 0 and drop equation 0; equations 1..N-1 form a symmetric
    // tridiagonal system in φ_1..φ_{N-1}.
    let m = n - 1;
    let solve = |rhs: &[f64]| -> Vec<f64> {
        let mut diag: Vec<f64> = (1..n).map(|i| -(a[i] + a[i - 1]) / dx2).collect();
        let off: Vec<f64> = (1..m).map(|i| a[i] / dx2).collect();
        let mut b = rhs.to_vec();
        for k in 1..m {
            let w = off[k - 1] / diag[k - 1];
            diag[k] -= w * off[k - 1];
            b[k] -= w * b[k - 1];
        }
        let mut x = vec![0.0; m];
        x[m - 1] = b[m - 1] / diag[m - 1];
        for k in (0..m - 1).rev() {
            x[k] = (b[k] - off[k] * x[k + 1]) / diag[k];
        }
        x
    };
    let reduced = |phi_tail: &[f64]| -> Vec<f64> {
        let mut full = Vec::with_capacity(n);
        full.push(0.0);
        full.extend_from_slice(phi_tail);
        divergence_form(rho, &full, mesh.dx(), BoundaryMode::Periodic)[1..].to_vec()
    };

    let rhs = &sigma[1..];
    let mut tail = solve(rhs);
    // One step of iterative refinement.
    let r: Vec<f64> = rhs.iter().zip(reduced(&tail)).map(|(s, v)| s - v).collect();
    for (t, c) in tail.iter_mut().zip(solve(&r)) {
        *t += c;
    }

    let mut phi = Vec::with_capacity(n);
    phi.push(0.0);
    phi.extend(tail);
    let mean = phi.iter().sum::<f64>() / n as f64;
    Ok(phi.into_iter().map(|v| v - mean).collect())
}

/// `Γ(ρ̇, ρ̇) = -(Δ_{ρ̇} φ + ½ Δ_ρ |δ⁺φ|²)` with `φ = Δ_ρ^† ρ̇` (periodic).
pub fn christoffel_term(rho: &[f64], rho_dot: &[f64], mesh: &SpaceTimeMesh) -> Result<Vec<f64>> {
    let phi = weighted_laplacian_pinv(rho, rho_dot, mesh)?;
    let rho_dot = project_zero_mean(rho_dot)?;
    let mode = BoundaryMode::Periodic;
    let transport = divergence_form(&rho_dot, &phi, mesh.dx(), mode);
    let grad = crate::grid::diff_x_row(&phi, mesh.dx(), mode);
    let sq: Vec<f64> = grad.iter().map(|g| g * g).collect();
    let bulk = divergence_form(rho, &sq, mesh.dx(), mode);
    Ok(transport.iter().zip(bulk).map(|(t, b)| -(t + 0.5 * b)).collect())
}

/// Gradient-flow solver state.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub density: Vec<f64>,
    pub time: f64,
    /// Cumulative count of nodes floored at [`DENSITY_FLOOR`].
    pub floor_hits: usize,
}

impl FlowState {
    pub fn new(density: Vec<f64>) -> Self {
        Self {
            density,
            time: 0.0,
            floor_hits: 0,
        }
    }
}

/// One explicit-Euler step `ρ ← ρ + dt Δ_ρ(U′(ρ) + V + W * ρ)` on the periodic grid.
pub fn gradient_flow_step(
    state: &FlowState,
    spec: &EnergySpec,
    mesh: &SpaceTimeMesh,
    dt: f64,
) -> Result<FlowState> {
    check_len(&state.density, mesh)?;
    check_positive(&state.density)?;
    if matches!(spec.internal, InternalEnergy::Fisher) {
        return Err(spec.internal.unsupported());
    }
    let potential = spec.first_variation(&state.density, mesh)?;
    let rate = divergence_form(&state.density, &potential, mesh.dx(), BoundaryMode::Periodic);
    let mut density: Vec<f64> = state.density.iter().zip(&rate).map(|(r, v)| r + dt * v).collect();
    let under = density.iter().filter(|v| !(**v >= DENSITY_FLOOR)).count();
    if under as f64 > CFL_UNDERSHOOT_FRACTION * density.len() as f64 || density.iter().any(|v| v.is_nan()) {
        return Err(Error::CflViolation {
            count: under,
            total: density.len(),
            dt,
        });
    }
    for v in density.iter_mut() {
        if *v < DENSITY_FLOOR {
            *v = DENSITY_FLOOR;
        }
    }
    Ok(FlowState {
        density,
        time: state.time + dt,
        floor_hits: state.floor_hits + under,
    })
}

/// Default explicit step: `min(Δt, 0.2 Δx² / max ρU″(ρ), 0.5 Δx / max |∂(V + W*ρ)|)`.
pub fn default_solver_step(rho: &[f64], spec: &EnergySpec, mesh: &SpaceTimeMesh) -> Result<f64> {
    let dx = mesh.dx();
    let mut dt = mesh.dt();
    let mut d_max: f64 = 0.0;
    for &r in rho {
        d_max = d_max.max(spec.internal.diffusivity(r)?);
    }
    if d_max > 0.0 {
        dt = dt.min(0.2 * dx * dx / d_max);
    }
    let conv = interaction_potential(&spec.interaction, rho, mesh);
    let drift: Vec<f64> = (0..rho.len())
        .map(|n| spec.potential.value(mesh.x(n)) + conv[n])
        .collect();
    let v_max = crate::grid::diff_x_row(&drift, dx, BoundaryMode::Periodic)
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    if v_max > 0.0 {
        dt = dt.min(0.5 * dx / v_max);
    }
    Ok(dt)
}

/// Diagnostics of a forward simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub dt_solver: f64,
    pub steps: usize,
    pub floor_hits: usize,
    /// Discrete energy at each output time.
    pub energy: Vec<f64>,
}

fn substeps(mesh: &SpaceTimeMesh, dt_solver: f64) -> Result<(usize, f64)> {
    if !(dt_solver.is_finite() && dt_solver > 0.0) {
        return Err(Error::InvalidProblem(format!("dt_solver must be positive, got {dt_solver}")));
    }
    let k = (mesh.dt() / dt_solver).ceil().max(1.0) as usize;
    Ok((k, mesh.dt() / k as f64))
}

/// Runs the gradient flow from `μ0` at `t = 0` and samples `t_1..t_L`.
pub fn gradient_flow_simulate(
    mu0: &[f64],
    spec: &EnergySpec,
    mesh: &SpaceTimeMesh,
    dt_solver: Option<f64>,
) -> Result<(DensityTrajectory, SimulationReport)> {
    check_len(mu0, mesh)?;
    check_positive(mu0)?;
    spec.internal.validate()?;
    let requested = match dt_solver {
        Some(dt) => dt,
        None => default_solver_step(mu0, spec, mesh)?,
    };
    let (k, dt) = substeps(mesh, requested)?;
    let mut state = FlowState::new(mu0.to_vec());
    let mut values = Vec::with_capacity(mesh.n_space() * mesh.n_time());
    let mut energy = Vec::with_capacity(mesh.n_time());
    for _ in 0..mesh.n_time() {
        for _ in 0..k {
            state = gradient_flow_step(&state, spec, mesh, dt)?;
        }
        energy.push(spec.energy(&state.density, mesh)?);
        values.extend_from_slice(&state.density);
    }
    let report = SimulationReport {
        dt_solver: dt,
        steps: k * mesh.n_time(),
        floor_hits: state.floor_hits,
        energy,
    };
    Ok((DensityTrajectory::new(*mesh, values, BoundaryMode::Periodic)?, report))
}

/// Particle state of the characteristics solver.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    /// Unwrapped positions; strictly increasing within one period.
    pub positions: Vec<f64>,
    pub velocities: Vec<f64>,
    /// Quadrature masses `μ0(x_i) Δx`.
    pub masses: Vec<f64>,
    pub time: f64,
}

struct Torus {
    a: f64,
    len: f64,
}

impl Torus {
    fn wrap(&self, q: f64) -> f64 {
        self.a + (q - self.a).rem_euclid(self.len)
    }
}

fn accelerations(state: &ParticleState, spec: &EnergySpec, torus: &Torus) -> Vec<f64> {
    let wrapped: Vec<f64> = state.positions.iter().map(|&q| torus.wrap(q)).collect();
    let with_w = !spec.interaction.is_zero();
    wrapped
        .iter()
        .map(|&qi| {
            let mut force = -spec.potential.derivative(1, qi);
            if with_w {
                for (&qj, &mj) in wrapped.iter().zip(&state.masses) {
                    force -= mj * spec.interaction.derivative(1, qi - qj);
                }
            }
            force
        })
        .collect()
}

/// Kinetic plus potential plus interaction energy of the particle system.
pub fn particle_energy(state: &ParticleState, spec: &EnergySpec, mesh: &SpaceTimeMesh) -> f64 {
    let torus = Torus {
        a: mesh.a(),
        len: mesh.domain_length(),
    };
    let wrapped: Vec<f64> = state.positions.iter().map(|&q| torus.wrap(q)).collect();
    let mut e = 0.0;
    for (i, (&qi, &mi)) in wrapped.iter().zip(&state.masses).enumerate() {
        e += mi * (0.5 * state.velocities[i].powi(2) + spec.potential.value(qi));
        if !spec.interaction.is_zero() {
            for (&qj, &mj) in wrapped.iter().zip(&state.masses) {
                e += 0.5 * mi * mj * spec.interaction.value(qi - qj);
            }
        }
    }
    e
}

/// One velocity-Verlet step.
pub fn verlet_step(state: &ParticleState, spec: &EnergySpec, mesh: &SpaceTimeMesh, dt: f64) -> ParticleState {
    let torus = Torus {
        a: mesh.a(),
        len: mesh.domain_length(),
    };
    let acc = accelerations(state, spec, &torus);
    let half: Vec<f64> = state.velocities.iter().zip(&acc).map(|(v, a)| v + 0.5 * dt * a).collect();
    let positions: Vec<f64> = state.positions.iter().zip(&half).map(|(q, v)| q + dt * v).collect();
    let mut next = ParticleState {
        positions,
        velocities: half.clone(),
        masses: state.masses.clone(),
        time: state.time + dt,
    };
    let acc = accelerations(&next, spec, &torus);
    next.velocities = half.iter().zip(&acc).map(|(v, a)| v + 0.5 * dt * a).collect();
    next
}

fn is_monotone(q: &[f64], len: f64) -> bool {
    q.windows(2).all(|w| w[1] > w[0]) && q[q.len() - 1] < q[0] + len
}

/// Push-forward density on the grid. Particle `i` carries mass `m_i` over the
/// cell between the midpoints to its neighbours, so the cumulative mass at the
/// midpoints is the transport map in CDF form. It is interpolated by a periodic
/// monotone cubic and differenced over the grid cells, which conserves mass
/// and positivity and returns `μ0` exactly at `t = 0`.
pub fn reconstruct_density(state: &ParticleState, mesh: &SpaceTimeMesh) -> Vec<f64> {
    let n = state.positions.len();
    let len = mesh.domain_length();
    let dx = mesh.dx();
    let q = &state.positions;
    let total: f64 = state.masses.iter().sum();
    let mut knots: Vec<f64> = (0..n)
        .map(|i| {
            let next = if i + 1 < n { q[i + 1] } else { q[0] + len };
            0.5 * (q[i] + next)
        })
        .collect();
    // Bring the first knot into the first period so two ghost periods suffice.
    let shift = ((knots[0] - mesh.a()) / len).floor() * len;
    knots.iter_mut().for_each(|k| *k -= shift);
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &m in &state.masses {
        acc += m;
        cumulative.push(acc);
    }
    let mut xs = Vec::with_capacity(5 * n);
    let mut ys = Vec::with_capacity(5 * n);
    for k in -2..=2 {
        for (&x, &y) in knots.iter().zip(&cumulative) {
            xs.push(x + k as f64 * len);
            ys.push(y + k as f64 * total);
        }
    }
    let cdf = Pchip::new(xs, ys);
    let edges: Vec<f64> = (0..=mesh.n_space()).map(|k| mesh.x(0) - 0.5 * dx + k as f64 * dx).collect();
    let at_edges: Vec<f64> = edges.iter().map(|&e| cdf.eval(e)).collect();
    at_edges.windows(2).map(|w| (w[1] - w[0]) / dx).collect()
}

/// Particle solver for the Hamiltonian flow on the torus `[a, b)`; `U` must be none.
pub fn hamiltonian_flow_simulate(
    mu0: &[f64],
    phase: &dyn Smooth,
    spec: &EnergySpec,
    mesh: &SpaceTimeMesh,
    dt_solver: f64,
) -> Result<(DensityTrajectory, SimulationReport)> {
    check_len(mu0, mesh)?;
    check_positive(mu0)?;
    if !spec.internal.is_none() {
        return Err(Error::InvalidEnergy(
            "the particle push-forward only applies without internal energy".into(),
        ));
    }
    let (k, dt) = substeps(mesh, dt_solver)?;
    let dx = mesh.dx();
    let len = mesh.domain_length();
    let points = mesh.space_points();
    let mut state = ParticleState {
        velocities: points.iter().map(|&x| phase.derivative(1, x)).collect(),
        positions: points,
        masses: mu0.iter().map(|m| m * dx).collect(),
        time: 0.0,
    };
    let mut values = Vec::with_capacity(mesh.n_space() * mesh.n_time());
    let mut energy = Vec::with_capacity(mesh.n_time());
    for _ in 0..mesh.n_time() {
        for _ in 0..k {
            state = verlet_step(&state, spec, mesh, dt);
            if !is_monotone(&state.positions, len) {
                return Err(Error::ParticleCrossing { time: state.time });
            }
        }
        energy.push(particle_energy(&state, spec, mesh));
        values.extend(reconstruct_density(&state, mesh));
    }
    let report = SimulationReport {
        dt_solver: dt,
        steps: k * mesh.n_time(),
        floor_hits: 0,
        energy,
    };
    Ok((DensityTrajectory::new(*mesh, values, BoundaryMode::Periodic)?, report))
}

/// Fritsch–Carlson monotone cubic Hermite interpolant.
struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        let n = x.len();
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let s: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
        let mut d = vec![0.0; n];
        for i in 1..n - 1 {
            if s[i - 1] * s[i] > 0.0 {
                let w1 = 2.0 * h[i] + h[i - 1];
                let w2 = h[i] + 2.0 * h[i - 1];
                d[i] = (w1 + w2) / (w1 / s[i - 1] + w2 / s[i]);
            }
        }
        d[0] = s[0];
        d[n - 1] = s[n - 2];
        Self { x, y, d }
    }

    fn eval(&self, t: f64) -> f64 {
        let i = match self.x.partition_point(|&v| v <= t) {
            0 => 0,
            p => (p - 1).min(self.x.len() - 2),
        };
        let h = self.x[i + 1] - self.x[i];
        let u = (t - self.x[i]) / h;
        let (u2, u3) = (u * u, u * u * u);
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        h00 * self.y[i] + h10 * h * self.d[i] + h01 * self.y[i + 1] + h11 * h * self.d[i + 1]
    }
}
