//! Smooth Mercer kernels with analytic mixed partials, density convolutions,
//! and RKHS elements built from differentiated kernel sections.
//!
//! Every RKHS element is stored as a finite sum of *atoms*
//! `w · ∂₁ᵃK(z, ·)`. Plain weighted-Laplacian sections contribute two atoms at
//! the node, convolved sections contribute two atoms per quadrature node.
//! Inner products then follow from the derivative reproducing property
//! `⟨∂₁ᵃK(z, ·), ∂₁ᵇK(z', ·)⟩ = ∂₁ᵃ∂₂ᵇK(z, z')`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DensityTrajectory;

/// Highest derivative order supported in each kernel slot.
pub const MAX_ORDER: usize = 3;

/// Kernel family and its hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum KernelFamily {
    /// `exp(-(x - y)² / (2ℓ²))`
    Gaussian { lengthscale: f64 },
    /// `(1 + (x - y)² / ℓ²)^(-β)`
    #[serde(rename = "imq")]
    InverseMultiquadric { lengthscale: f64, beta: f64 },
}

/// A translation-invariant C^∞ kernel on ℝ × ℝ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "KernelFamily", into = "KernelFamily")]
pub struct SmoothKernel {
    family: KernelFamily,
}

impl TryFrom<KernelFamily> for SmoothKernel {
    type Error = Error;

    fn try_from(family: KernelFamily) -> Result<Self> {
        Self::new(family)
    }
}

impl From<SmoothKernel> for KernelFamily {
    fn from(k: SmoothKernel) -> Self {
        k.family
    }
}

impl SmoothKernel {
    pub fn new(family: KernelFamily) -> Result<Self> {
        match family {
            KernelFamily::Gaussian { lengthscale } => {
                if !(lengthscale.is_finite() && lengthscale > 0.0) {
                    return Err(Error::InvalidKernel(format!("lengthscale {lengthscale}")));
                }
            }
            KernelFamily::InverseMultiquadric { lengthscale, beta } => {
                if !(lengthscale.is_finite() && lengthscale > 0.0) {
                    return Err(Error::InvalidKernel(format!("lengthscale {lengthscale}")));
                }
                if !(beta.is_finite() && beta > 0.5) {
                    return Err(Error::InvalidKernel(format!("imq exponent must exceed 1/2, got {beta}")));
                }
            }
        }
        Ok(Self { family })
    }

    pub fn gaussian(lengthscale: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian { lengthscale })
    }

    pub fn inverse_multiquadric(lengthscale: f64, beta: f64) -> Result<Self> {
        Self::new(KernelFamily::InverseMultiquadric { lengthscale, beta })
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn lengthscale(&self) -> f64 {
        match self.family {
            KernelFamily::Gaussian { lengthscale } => lengthscale,
            KernelFamily::InverseMultiquadric { lengthscale, .. } => lengthscale,
        }
    }

    /// `∂₁ⁱ∂₂ʲK(x, y)` with order validation.
    pub fn eval(&self, i: usize, j: usize, x: f64, y: f64) -> Result<f64> {
        if i > MAX_ORDER || j > MAX_ORDER {
            return Err(Error::UnsupportedOrder { i, j });
        }
        Ok(self.partial(i, j, x, y))
    }

    /// Unchecked variant of [`eval`](Self::eval) for hot loops; orders must be ≤ 3.
    #[inline]
    pub fn partial(&self, i: usize, j: usize, x: f64, y: f64) -> f64 {
        debug_assert!(i <= MAX_ORDER && j <= MAX_ORDER);
        // K(x, y) = k(x - y), so ∂_y contributes a factor -1 per order.
        let d = self.radial(i + j, x - y);
        if j % 2 == 1 {
            -d
        } else {
            d
        }
    }

    /// `k⁽ᵐ⁾(r)` of the profile `K(x, y) = k(x - y)`.
    pub fn radial(&self, m: usize, r: f64) -> f64 {
        match self.family {
            KernelFamily::Gaussian { lengthscale } => gaussian_radial(m, r, lengthscale),
            KernelFamily::InverseMultiquadric { lengthscale, beta } => {
                imq_radial(m, r, lengthscale, beta)
            }
        }
    }
}

fn gaussian_radial(m: usize, r: f64, ell: f64) -> f64 {
    // d^m/dr^m exp(-u²/2) = (-1)^m He_m(u) exp(-u²/2) / ℓ^m with u = r/ℓ.
    let u = r / ell;
    let (mut h_prev, mut h) = (0.0, 1.0);
    for k in 0..m {
        let next = u * h - k as f64 * h_prev;
        h_prev = h;
        h = next;
    }
    let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
    sign * h * (-0.5 * u * u).exp() / ell.powi(m as i32)
}

fn imq_radial(m: usize, r: f64, ell: f64, beta: f64) -> f64 {
    // k(r) = g(c r²) with g(s) = (1 + s)^(-β), c = 1/ℓ²; expand by Faà di Bruno
    // for a quadratic inner function.
    let c = 1.0 / (ell * ell);
    let s = c * r * r;
    let g = |p: usize| -> f64 {
        let mut coef = 1.0;
        for q in 0..p {
            coef *= -beta - q as f64;
        }
        coef * (1.0 + s).powf(-beta - p as f64)
    };
    let mut total = 0.0;
    for k in 0..=m / 2 {
        let comb = factorial(m) / (factorial(k) * factorial(m - 2 * k));
        total += comb * c.powi((m - k) as i32) * (2.0 * r).powi((m - 2 * k) as i32) * g(m - k);
    }
    total
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// One term `weight · ∂₁^order K(center, ·)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    pub center: f64,
    pub order: usize,
    pub weight: f64,
}

/// Which kernel section a basis element is built from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SectionKind {
    /// `Δ_ρ^{(1,0)δ}K(x_n, ·)`
    Plain,
    /// `Δ_ρ^{(1,0)δ}(K * ρ_{t_l})(x_n, ·)`
    Convolved,
}

/// A section specification used to assemble RKHS elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Section {
    /// Weighted-Laplacian section at data node `(l, n)`.
    Node { l: usize, n: usize, kind: SectionKind },
    /// Point evaluation section `K(z, ·)`.
    Point(f64),
}

/// A finite element of the RKHS `H_K`, represented by atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RkhsFunction {
    kernel: SmoothKernel,
    atoms: Vec<Atom>,
}

impl RkhsFunction {
    pub fn zero(kernel: SmoothKernel) -> Self {
        Self {
            kernel,
            atoms: Vec::new(),
        }
    }

    pub fn from_atoms(kernel: SmoothKernel, atoms: Vec<Atom>) -> Result<Self> {
        if let Some(a) = atoms.iter().find(|a| a.order > 2) {
            return Err(Error::UnsupportedOrder { i: a.order, j: 0 });
        }
        Ok(Self { kernel, atoms })
    }

    /// `Σ_i w_i K(z_i, ·)`.
    pub fn point_sections(kernel: SmoothKernel, centers: &[f64], weights: &[f64]) -> Result<Self> {
        if centers.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: centers.len(),
                got: weights.len(),
            });
        }
        let atoms = centers
            .iter()
            .zip(weights)
            .map(|(&center, &weight)| Atom {
                center,
                order: 0,
                weight,
            })
            .collect();
        Ok(Self { kernel, atoms })
    }

    /// Weighted combination of sections over a trajectory.
    pub fn from_sections(
        kernel: SmoothKernel,
        traj: &DensityTrajectory,
        sections: &[Section],
        weights: &[f64],
    ) -> Result<Self> {
        if sections.len() != weights.len() {
            return Err(Error::LengthMismatch {
                expected: sections.len(),
                got: weights.len(),
            });
        }
        let mut out = Self::zero(kernel);
        for (section, &w) in sections.iter().zip(weights) {
            match *section {
                Section::Node { l, n, kind } => {
                    let s = diff_section(&kernel, traj, l, n, kind)?;
                    out.atoms.extend(s.atoms.iter().map(|a| Atom {
                        weight: w * a.weight,
                        ..*a
                    }));
                }
                Section::Point(z) => out.atoms.push(Atom {
                    center: z,
                    order: 0,
                    weight: w,
                }),
            }
        }
        Ok(out)
    }

    pub fn kernel(&self) -> &SmoothKernel {
        &self.kernel
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    /// `f(y)`.
    pub fn value(&self, y: f64) -> f64 {
        self.derivative(0, y)
    }

    /// `f⁽ᵇ⁾(y)`, `b ≤ 3`.
    pub fn derivative(&self, b: usize, y: f64) -> f64 {
        self.atoms
            .iter()
            .map(|a| a.weight * self.kernel.partial(a.order, b, a.center, y))
            .sum()
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            kernel: self.kernel,
            atoms: self
                .atoms
                .iter()
                .map(|a| Atom {
                    weight: alpha * a.weight,
                    ..*a
                })
                .collect(),
        }
    }

    /// `self + alpha · other`.
    pub fn add_scaled(&self, alpha: f64, other: &Self) -> Result<Self> {
        if self.kernel != other.kernel {
            return Err(Error::KernelMismatch);
        }
        let mut atoms = self.atoms.clone();
        atoms.extend(other.atoms.iter().map(|a| Atom {
            weight: alpha * a.weight,
            ..*a
        }));
        Ok(Self {
            kernel: self.kernel,
            atoms,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.add_scaled(-1.0, other)
    }

    /// Merges atoms sharing a center and order (exact float match).
    pub fn compact(&self) -> Self {
        let mut atoms: Vec<Atom> = Vec::with_capacity(self.atoms.len());
        let mut sorted = self.atoms.clone();
        sorted.sort_by(|a, b| {
            a.order
                .cmp(&b.order)
                .then(a.center.total_cmp(&b.center))
        });
        for a in sorted {
            match atoms.last_mut() {
                Some(last) if last.order == a.order && last.center == a.center => {
                    last.weight += a.weight
                }
                _ => atoms.push(a),
            }
        }
        Self {
            kernel: self.kernel,
            atoms,
        }
    }
}

/// `⟨f, g⟩_{H_K}`.
pub fn rkhs_inner(f: &RkhsFunction, g: &RkhsFunction) -> Result<f64> {
    if f.kernel != g.kernel {
        return Err(Error::KernelMismatch);
    }
    let k = f.kernel;
    let mut total = 0.0;
    for a in &f.atoms {
        let mut row = 0.0;
        for b in &g.atoms {
            row += b.weight * k.partial(a.order, b.order, a.center, b.center);
        }
        total += a.weight * row;
    }
    Ok(total)
}

/// `‖f‖²_{H_K}`; clamped at zero against round-off.
pub fn rkhs_norm_sq(f: &RkhsFunction) -> f64 {
    rkhs_inner(f, f).expect("same kernel").max(0.0)
}

/// Weighted-Laplacian section `slope·∂₁K(x, ·) + density·∂₁²K(x, ·)`, or its
/// convolved analogue when `conv` lists quadrature nodes `(z_m, Δx ρ(z_m))`.
pub fn laplacian_section(
    kernel: &SmoothKernel,
    x: f64,
    slope: f64,
    density: f64,
    conv: Option<&[(f64, f64)]>,
) -> RkhsFunction {
    let atoms = match conv {
        None => vec![
            Atom {
                center: x,
                order: 1,
                weight: slope,
            },
            Atom {
                center: x,
                order: 2,
                weight: density,
            },
        ],
        Some(nodes) => nodes
            .iter()
            .flat_map(|&(z, q)| {
                [
                    Atom {
                        center: x - z,
                        order: 1,
                        weight: slope * q,
                    },
                    Atom {
                        center: x - z,
                        order: 2,
                        weight: density * q,
                    },
                ]
            })
            .collect(),
    };
    RkhsFunction {
        kernel: *kernel,
        atoms,
    }
}

/// Quadrature nodes `(x_m, Δx ρ_l^m)` of one trajectory slice.
pub fn density_nodes(traj: &DensityTrajectory, l: usize) -> Result<Vec<(f64, f64)>> {
    if l >= traj.n_time() {
        return Err(Error::OutOfBounds {
            what: "time index",
            index: l,
            len: traj.n_time(),
        });
    }
    let mesh = traj.mesh();
    let dx = mesh.dx();
    Ok(traj
        .row(l)
        .iter()
        .enumerate()
        .map(|(m, &r)| (mesh.x(m), dx * r))
        .collect())
}

/// `Δ_{ρ_{t_l}}^{(1,0)δ}K(x_n, ·)` or `Δ_{ρ_{t_l}}^{(1,0)δ}(K * ρ_{t_l})(x_n, ·)`.
pub fn diff_section(
    kernel: &SmoothKernel,
    traj: &DensityTrajectory,
    l: usize,
    n: usize,
    kind: SectionKind,
) -> Result<RkhsFunction> {
    let slope = traj.forward_diff_x(l, n)?;
    let density = traj.value(l, n);
    let x = traj.mesh().x(n);
    Ok(match kind {
        SectionKind::Plain => laplacian_section(kernel, x, slope, density, None),
        SectionKind::Convolved => {
            let nodes = density_nodes(traj, l)?;
            laplacian_section(kernel, x, slope, density, Some(&nodes))
        }
    })
}

/// `(K * ρ)(x, y) = Σ_m Δx ρ^m K(x - x_m, y)` on the observation grid.
#[derive(Debug, Clone)]
pub struct ConvolvedKernel {
    kernel: SmoothKernel,
    nodes: Vec<(f64, f64)>,
}

impl ConvolvedKernel {
    pub fn new(kernel: SmoothKernel, nodes: Vec<(f64, f64)>) -> Self {
        Self { kernel, nodes }
    }

    /// `∂ₓⁱ∂ᵧʲ(K * ρ)(x, y)`.
    pub fn eval(&self, i: usize, j: usize, x: f64, y: f64) -> Result<f64> {
        if i > MAX_ORDER || j > MAX_ORDER {
            return Err(Error::UnsupportedOrder { i, j });
        }
        Ok(self
            .nodes
            .iter()
            .map(|&(z, q)| q * self.kernel.partial(i, j, x - z, y))
            .sum())
    }
}

/// `K * ρ_{t_l}` for a trajectory slice.
pub fn convolve_with_density(
    kernel: &SmoothKernel,
    traj: &DensityTrajectory,
    l: usize,
) -> Result<ConvolvedKernel> {
    Ok(ConvolvedKernel::new(*kernel, density_nodes(traj, l)?))
}

/// `(K ** (ρ, π))(x, y) = Σ_{m,m'} Δx² ρ^m π^{m'} K(x - x_m, y - x_{m'})`.
#[derive(Debug, Clone)]
pub struct DoublyConvolvedKernel {
    kernel: SmoothKernel,
    first: Vec<(f64, f64)>,
    second: Vec<(f64, f64)>,
}

impl DoublyConvolvedKernel {
    pub fn new(kernel: SmoothKernel, first: Vec<(f64, f64)>, second: Vec<(f64, f64)>) -> Self {
        Self {
            kernel,
            first,
            second,
        }
    }

    pub fn eval(&self, i: usize, j: usize, x: f64, y: f64) -> Result<f64> {
        if i > MAX_ORDER || j > MAX_ORDER {
            return Err(Error::UnsupportedOrder { i, j });
        }
        let mut total = 0.0;
        for &(z1, q1) in &self.first {
            let mut inner = 0.0;
            for &(z2, q2) in &self.second {
                inner += q2 * self.kernel.partial(i, j, x - z1, y - z2);
            }
            total += q1 * inner;
        }
        Ok(total)
    }
}

/// `K ** (ρ_{t_l}, ρ_{t_k})`.
pub fn double_convolve(
    kernel: &SmoothKernel,
    traj: &DensityTrajectory,
    l: usize,
    k: usize,
) -> Result<DoublyConvolvedKernel> {
    Ok(DoublyConvolvedKernel::new(
        *kernel,
        density_nodes(traj, l)?,
        density_nodes(traj, k)?,
    ))
}

/// `max |∂ⁱ∂ʲK|` over `i + j ≤ 4` and `|x - y| ≤ extent`, sampled on a grid.
/// `κ² = 2‖K‖_{C⁴}` bounds the weighted-Laplacian sections.
pub fn kappa_sq(kernel: &SmoothKernel, extent: f64) -> f64 {
    let samples = 401;
    let mut sup: f64 = 0.0;
    for s in 0..samples {
        let r = extent * (2.0 * s as f64 / (samples - 1) as f64 - 1.0);
        for m in 0..=4 {
            sup = sup.max(kernel.radial(m, r).abs());
        }
    }
    2.0 * sup
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{BoundaryMode, SpaceTimeMesh};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, SymmetricEigen};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernels() -> Vec<SmoothKernel> {
        vec![
            SmoothKernel::gaussian(0.5).unwrap(),
            SmoothKernel::gaussian(1.3).unwrap(),
            SmoothKernel::inverse_multiquadric(0.7, 1.5).unwrap(),
            SmoothKernel::inverse_multiquadric(0.4, 0.75).unwrap(),
        ]
    }

    /// Central difference of the order-(i, j) partial in the first slot.
    fn fd_first_slot(k: &SmoothKernel, i: usize, j: usize, x: f64, y: f64, h: f64) -> f64 {
        (k.partial(i, j, x + h, y) - k.partial(i, j, x - h, y)) / (2.0 * h)
    }

    fn fd_second_slot(k: &SmoothKernel, i: usize, j: usize, x: f64, y: f64, h: f64) -> f64 {
        (k.partial(i, j, x, y + h) - k.partial(i, j, x, y - h)) / (2.0 * h)
    }

    #[test]
    fn gaussian_basic_values() {
        let k = SmoothKernel::gaussian(1.0).unwrap();
        assert_eq!(k.eval(0, 0, 0.3, 0.3).unwrap(), 1.0);
        assert_eq!(k.eval(1, 0, 0.3, 0.3).unwrap(), 0.0);
        assert!(matches!(k.eval(4, 0, 0.0, 0.0), Err(Error::UnsupportedOrder { .. })));
    }

    #[test]
    fn second_derivative_matches_finite_difference() {
        let k = SmoothKernel::gaussian(0.5).unwrap();
        let h = 1e-4;
        let fd = (k.partial(0, 0, h, 0.3) - 2.0 * k.partial(0, 0, 0.0, 0.3)
            + k.partial(0, 0, -h, 0.3))
            / (h * h);
        assert_relative_eq!(k.eval(2, 0, 0.0, 0.3).unwrap(), fd, max_relative = 1e-5);
    }

    #[test]
    fn all_partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for k in kernels() {
            let h = 1e-4 * k.lengthscale();
            for _ in 0..20 {
                let x: f64 = rng.gen_range(-1.0..1.0);
                let y: f64 = rng.gen_range(-1.0..1.0);
                for i in 0..MAX_ORDER {
                    for j in 0..=MAX_ORDER {
                        let fd = fd_first_slot(&k, i, j, x, y, h);
                        let exact = k.partial(i + 1, j, x, y);
                        assert!((fd - exact).abs() <= 1e-5 * (1.0 + exact.abs()), "{k:?} ({i},{j})");
                    }
                }
                for j in 0..MAX_ORDER {
                    let fd = fd_second_slot(&k, 1, j, x, y, h);
                    let exact = k.partial(1, j + 1, x, y);
                    assert!((fd - exact).abs() <= 1e-5 * (1.0 + exact.abs()));
                }
            }
        }
    }

    #[test]
    fn symmetry_and_positive_semidefinite_gram() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for k in kernels() {
            let pts: Vec<f64> = (0..25).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let g = DMatrix::from_fn(pts.len(), pts.len(), |i, j| k.partial(0, 0, pts[i], pts[j]));
            for i in 0..pts.len() {
                for j in 0..pts.len() {
                    assert_eq!(g[(i, j)], k.partial(0, 0, pts[j], pts[i]));
                }
            }
            let eig = SymmetricEigen::new(g).eigenvalues;
            let max = eig.max();
            assert!(eig.min() >= -1e-8 * max);
        }
    }

    #[test]
    fn kernel_config_json() {
        let k: SmoothKernel = serde_json::from_str(r#"{"family":"gaussian","lengthscale":0.3}"#).unwrap();
        assert_eq!(k, SmoothKernel::gaussian(0.3).unwrap());
        let k: SmoothKernel =
            serde_json::from_str(r#"{"family":"imq","lengthscale":0.3,"beta":1.5}"#).unwrap();
        assert_eq!(k, SmoothKernel::inverse_multiquadric(0.3, 1.5).unwrap());
        let back = serde_json::to_string(&k).unwrap();
        assert!(back.contains("\"imq\""));
        assert!(serde_json::from_str::<SmoothKernel>(r#"{"family":"imq","lengthscale":0.3,"beta":0.2}"#).is_err());
        assert!(serde_json::from_str::<SmoothKernel>(r#"{"family":"gaussian","lengthscale":-1}"#).is_err());
    }

    fn periodic_traj(n: usize, l: usize, seed: u64) -> DensityTrajectory {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mesh = SpaceTimeMesh::new(0.0, 1.0, 1.0, n, l).unwrap();
        let values = (0..n * l).map(|_| rng.gen_range(0.5..1.5)).collect();
        DensityTrajectory::new(mesh, values, BoundaryMode::Periodic).unwrap()
    }

    #[test]
    fn point_mass_convolution_is_a_shift() {
        let mesh = SpaceTimeMesh::new(0.0, 1.0, 1.0, 10, 1).unwrap();
        let dx = mesh.dx();
        let mut values = vec![1e-300; 10];
        values[3] = 1.0 / dx;
        let traj = DensityTrajectory::new(mesh, values, BoundaryMode::Periodic).unwrap();
        let k = SmoothKernel::gaussian(0.3).unwrap();
        let conv = convolve_with_density(&k, &traj, 0).unwrap();
        for (x, y) in [(0.1, 0.2), (0.7, -0.3), (1.5, 0.4)] {
            let expect = k.partial(0, 0, x - mesh.x(3), y);
            assert_relative_eq!(conv.eval(0, 0, x, y).unwrap(), expect, max_relative = 1e-12);
        }
    }

    #[test]
    fn uniform_density_convolution_has_small_x_dependence_away_from_edges() {
        // The convolution is truncated to the observation grid, so translation
        // invariance only holds for x whose kernel footprint stays inside it.
        let n = 400;
        let mesh = SpaceTimeMesh::new(-3.0, 4.0, 1.0, n, 1).unwrap();
        let traj = DensityTrajectory::new(mesh, vec![1.0 / 7.0; n], BoundaryMode::Periodic).unwrap();
        let k = SmoothKernel::gaussian(0.2).unwrap();
        let conv = convolve_with_density(&k, &traj, 0).unwrap();
        let base = conv.eval(0, 0, 0.0, 0.5).unwrap();
        for s in 0..20 {
            let x = -0.5 + 0.05 * s as f64;
            assert!((conv.eval(0, 0, x, 0.5 + x).unwrap() - base).abs() < 1e-10);
        }
    }

    #[test]
    fn convolution_is_linear_in_density() {
        let a = periodic_traj(12, 1, 1);
        let b = periodic_traj(12, 1, 2);
        let (alpha, beta) = (0.3, 1.7);
        let mix: Vec<f64> = a.values().iter().zip(b.values()).map(|(u, v)| alpha * u + beta * v).collect();
        let m = DensityTrajectory::new(*a.mesh(), mix, BoundaryMode::Periodic).unwrap();
        let k = SmoothKernel::inverse_multiquadric(0.3, 1.0).unwrap();
        for (i, j, x, y) in [(0, 0, 0.2, 0.5), (1, 2, 0.9, 0.1), (2, 1, -0.3, 0.4)] {
            let lhs = convolve_with_density(&k, &m, 0).unwrap().eval(i, j, x, y).unwrap();
            let rhs = alpha * convolve_with_density(&k, &a, 0).unwrap().eval(i, j, x, y).unwrap()
                + beta * convolve_with_density(&k, &b, 0).unwrap().eval(i, j, x, y).unwrap();
            assert_relative_eq!(lhs, rhs, max_relative = 1e-12, epsilon = 1e-14);
        }
    }

    #[test]
    fn double_convolution_properties() {
        let k = SmoothKernel::gaussian(0.4).unwrap();
        // Point masses reduce to a shifted kernel.
        let mesh = SpaceTimeMesh::new(0.0, 1.0, 1.0, 8, 2).unwrap();
        let dx = mesh.dx();
        let mut values = vec![1e-300; 16];
        values[2] = 1.0 / dx;
        values[8 + 5] = 1.0 / dx;
        let traj = DensityTrajectory::new(mesh, values, BoundaryMode::Periodic).unwrap();
        let dc = double_convolve(&k, &traj, 0, 1).unwrap();
        let expect = k.partial(0, 0, 0.3 - mesh.x(2), 0.8 - mesh.x(5));
        assert_relative_eq!(dc.eval(0, 0, 0.3, 0.8).unwrap(), expect, max_relative = 1e-12);

        let traj = periodic_traj(9, 3, 5);
        let same = double_convolve(&k, &traj, 1, 1).unwrap();
        for (x, y) in [(0.1, 0.7), (0.4, 0.45), (1.2, -0.2)] {
            assert!((same.eval(0, 0, x, y).unwrap() - same.eval(0, 0, y, x).unwrap()).abs() < 1e-12);
        }

        // Oracle: compose single convolutions slot by slot.
        let dc = double_convolve(&k, &traj, 0, 2).unwrap();
        let second = density_nodes(&traj, 2).unwrap();
        let first = convolve_with_density(&k, &traj, 0).unwrap();
        for (i, j, x, y) in [(0, 0, 0.3, 0.6), (1, 1, 0.2, 0.9), (2, 2, 0.5, 0.5)] {
            let composed: f64 = second
                .iter()
                .map(|&(z, q)| q * first.eval(i, j, x, y - z).unwrap())
                .sum();
            assert!((dc.eval(i, j, x, y).unwrap() - composed).abs() < 1e-12 * (1.0 + composed.abs()));
        }
    }

    #[test]
    fn constant_periodic_density_gives_pure_second_derivative_section() {
        let mesh = SpaceTimeMesh::new(0.0, 1.0, 1.0, 6, 1).unwrap();
        let c = 0.8;
        let traj = DensityTrajectory::new(mesh, vec![c; 6], BoundaryMode::Periodic).unwrap();
        let k = SmoothKernel::gaussian(1.0).unwrap();
        let s = diff_section(&k, &traj, 0, 2, SectionKind::Plain).unwrap();
        for y in [0.0, 0.25, 0.9] {
            let expect = c * k.partial(2, 0, mesh.x(2), y);
            assert!((s.value(y) - expect).abs() < 1e-14);
        }
        // At y = x_n the first-order term vanishes by symmetry; compare the
        // composition of individual kernel evaluations.
        let traj = periodic_traj(6, 1, 3);
        let s = diff_section(&k, &traj, 0, 4, SectionKind::Plain).unwrap();
        let x = mesh.x(4);
        let expect = traj.forward_diff_x(0, 4).unwrap() * k.eval(1, 0, x, x).unwrap()
            + traj.value(0, 4) * k.eval(2, 0, x, x).unwrap();
        assert!((s.value(x) - expect).abs() < 1e-12);
        let scaled = s.scaled(2.5);
        for y in [0.1, 0.6] {
            assert!((scaled.value(y) - 2.5 * s.value(y)).abs() < 1e-12);
        }
    }

    #[test]
    fn point_section_norm_and_zero_weights() {
        let k = SmoothKernel::inverse_multiquadric(0.5, 1.0).unwrap();
        let f = RkhsFunction::point_sections(k, &[0.3], &[1.0]).unwrap();
        assert_relative_eq!(rkhs_norm_sq(&f), k.partial(0, 0, 0.3, 0.3));
        let z = RkhsFunction::point_sections(k, &[0.3, 0.5], &[0.0, 0.0]).unwrap();
        assert_eq!(rkhs_norm_sq(&z), 0.0);
        let other = RkhsFunction::zero(SmoothKernel::gaussian(0.5).unwrap());
        assert!(matches!(rkhs_inner(&f, &other), Err(Error::KernelMismatch)));
    }

    #[test]
    fn plain_section_pairing_matches_finite_difference_laplacian() {
        // ⟨s_i, s_j⟩ = Δ^{(1,1)δ}K(x_i, x_j); the oracle applies the discrete
        // weighted Laplacian d ∂ + r ∂² to kernel values via central differences.
        let traj = periodic_traj(8, 2, 9);
        let k = SmoothKernel::gaussian(0.35).unwrap();
        let mesh = *traj.mesh();
        let h = 1e-3;
        let d1 = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + h) - f(x - h)) / (2.0 * h);
        let d2 = |f: &dyn Fn(f64) -> f64, x: f64| (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h);
        for (li, ni, lj, nj) in [(0, 1, 1, 5), (1, 3, 1, 3), (0, 7, 0, 0)] {
            let si = diff_section(&k, &traj, li, ni, SectionKind::Plain).unwrap();
            let sj = diff_section(&k, &traj, lj, nj, SectionKind::Plain).unwrap();
            let inner = rkhs_inner(&si, &sj).unwrap();
            let (xi, xj) = (mesh.x(ni), mesh.x(nj));
            let (di, ri) = (traj.forward_diff_x(li, ni).unwrap(), traj.value(li, ni));
            let (dj, rj) = (traj.forward_diff_x(lj, nj).unwrap(), traj.value(lj, nj));
            // Apply in y first, then in x.
            let g = |x: f64| {
                let k0 = |y: f64| k.partial(0, 0, x, y);
                dj * d1(&k0, xj) + rj * d2(&k0, xj)
            };
            let oracle = di * d1(&g, xi) + ri * d2(&g, xi);
            // Nested central differences carry an O(h²) truncation error.
            assert!((inner - oracle).abs() <= 1e-4 * (1.0 + inner.abs()), "{inner} vs {oracle}");
        }
    }

    #[test]
    fn discrete_reproducing_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = SmoothKernel::gaussian(0.3).unwrap();
        let traj = periodic_traj(10, 2, 4);
        let nodes = density_nodes(&traj, 1).unwrap();
        for _ in 0..10 {
            let centers: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let weights: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let f = RkhsFunction::point_sections(k, &centers, &weights).unwrap();
            let x: f64 = rng.gen_range(0.0..1.0);
            let (slope, dens) = (rng.gen_range(-2.0..2.0), rng.gen_range(0.2..2.0));
            let s = laplacian_section(&k, x, slope, dens, None);
            let lhs = rkhs_inner(&f, &s).unwrap();
            let rhs = slope * f.derivative(1, x) + dens * f.derivative(2, x);
            assert!((lhs - rhs).abs() < 1e-8);

            let s = laplacian_section(&k, x, slope, dens, Some(&nodes));
            let lhs = rkhs_inner(&f, &s).unwrap();
            let conv = |b: usize| -> f64 { nodes.iter().map(|&(z, q)| q * f.derivative(b, x - z)).sum() };
            let rhs = slope * conv(1) + dens * conv(2);
            assert!((lhs - rhs).abs() < 1e-8);
        }
    }

    #[test]
    fn compact_preserves_function() {
        let k = SmoothKernel::gaussian(0.3).unwrap();
        let f = RkhsFunction::point_sections(k, &[0.1, 0.2, 0.1], &[1.0, 2.0, 3.0]).unwrap();
        let c = f.compact();
        assert_eq!(c.atoms().len(), 2);
        for y in [0.0, 0.15, 0.7] {
            assert!((c.value(y) - f.value(y)).abs() < 1e-14);
        }
    }
}
