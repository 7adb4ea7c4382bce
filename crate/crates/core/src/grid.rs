//! Uniform space-time meshes, forward finite differences and Riemann quadrature.
//!
//! Indices are zero-based throughout: space index `n` in `0..N` addresses the
//! node `x_n = a + (n + 1) Δx`, time index `l` in `0..L` addresses
//! `t_l = (l + 1) Δt`. The last node of each axis therefore sits exactly on
//! the right endpoint (`x = b`, `t = T`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative mass defect above which a trajectory slice triggers a warning.
pub const MASS_TOLERANCE: f64 = 0.05;

/// How forward differences treat the last spatial index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Values beyond the grid are taken to be zero: `δ⁺f_N = -f_N / Δx`.
    #[default]
    PaperTruncated,
    /// The grid wraps around: `δ⁺f_N = (f_1 - f_N) / Δx`.
    Periodic,
}

/// Uniform grid on `[0, T] × [a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeMesh {
    a: f64,
    b: f64,
    horizon: f64,
    n_space: usize,
    n_time: usize,
}

impl SpaceTimeMesh {
    pub fn new(a: f64, b: f64, horizon: f64, n_space: usize, n_time: usize) -> Result<Self> {
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(Error::InvalidMesh(format!("need b > a, got [{a}, {b}]")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidMesh(format!("need T > 0, got {horizon}")));
        }
        if n_space == 0 || n_time == 0 {
            return Err(Error::InvalidMesh("N and L must be positive".into()));
        }
        Ok(Self {
            a,
            b,
            horizon,
            n_space,
            n_time,
        })
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Time horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of spatial nodes `N`.
    pub fn n_space(&self) -> usize {
        self.n_space
    }

    /// Number of time slices `L`.
    pub fn n_time(&self) -> usize {
        self.n_time
    }

    /// Lebesgue measure of the spatial domain.
    pub fn domain_length(&self) -> f64 {
        self.b - self.a
    }

    pub fn dx(&self) -> f64 {
        (self.b - self.a) / self.n_space as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_time as f64
    }

    /// Spatial node `x_n` (zero-based).
    pub fn x(&self, n: usize) -> f64 {
        if n + 1 == self.n_space {
            self.b
        } else {
            self.a + (n + 1) as f64 * self.dx()
        }
    }

    /// Time node `t_l` (zero-based).
    pub fn t(&self, l: usize) -> f64 {
        if l + 1 == self.n_time {
            self.horizon
        } else {
            (l + 1) as f64 * self.dt()
        }
    }

    pub fn space_points(&self) -> Vec<f64> {
        (0..self.n_space).map(|n| self.x(n)).collect()
    }

    pub fn time_points(&self) -> Vec<f64> {
        (0..self.n_time).map(|l| self.t(l)).collect()
    }

    /// Same spatial grid with a different time discretisation.
    pub fn with_time(&self, horizon: f64, n_time: usize) -> Result<Self> {
        Self::new(self.a, self.b, horizon, self.n_space, n_time)
    }

    fn check_space(&self, n: usize) -> Result<()> {
        if n >= self.n_space {
            return Err(Error::OutOfBounds {
                what: "space index",
                index: n,
                len: self.n_space,
            });
        }
        Ok(())
    }

    fn check_time(&self, l: usize) -> Result<()> {
        if l >= self.n_time {
            return Err(Error::OutOfBounds {
                what: "time index",
                index: l,
                len: self.n_time,
            });
        }
        Ok(())
    }
}

/// Forward difference of one spatial row, honouring the boundary mode.
pub fn diff_x_row(row: &[f64], dx: f64, mode: BoundaryMode) -> Vec<f64> {
    let n = row.len();
    (0..n)
        .map(|i| {
            let next = if i + 1 < n {
                row[i + 1]
            } else {
                match mode {
                    BoundaryMode::PaperTruncated => 0.0,
                    BoundaryMode::Periodic => row[0],
                }
            };
            (next - row[i]) / dx
        })
        .collect()
}

/// Left-endpoint Riemann sum on the spatial grid (`values.len() == N`) or on
/// the full space-time grid (`values.len() == N·L`).
pub fn quadrature(values: &[f64], mesh: &SpaceTimeMesh) -> Result<f64> {
    let n = mesh.n_space();
    let sum: f64 = values.iter().sum();
    if values.len() == n {
        Ok(mesh.dx() * sum)
    } else if values.len() == n * mesh.n_time() {
        Ok(mesh.dx() * mesh.dt() * sum)
    } else {
        Err(Error::LengthMismatch {
            expected: n,
            got: values.len(),
        })
    }
}

/// Samples `ρ(t_l, x_n)` of a strictly positive density path.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityTrajectory {
    mesh: SpaceTimeMesh,
    values: Vec<f64>,
    boundary: BoundaryMode,
}

impl DensityTrajectory {
    /// `values` is row-major: row `l` holds the `N` spatial samples at `t_l`.
    pub fn new(mesh: SpaceTimeMesh, values: Vec<f64>, boundary: BoundaryMode) -> Result<Self> {
        let expected = mesh.n_space() * mesh.n_time();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v > 0.0))
        {
            return Err(Error::NonPositiveDensity { index, value });
        }
        let traj = Self {
            mesh,
            values,
            boundary,
        };
        for (l, defect) in traj.mass_defects().into_iter().enumerate() {
            if defect.abs() > MASS_TOLERANCE {
                log::warn!("time slice {l}: quadrature mass deviates from 1 by {defect:.3e}");
            }
        }
        Ok(traj)
    }

    /// Builds a trajectory from a list of rows.
    pub fn from_rows(mesh: SpaceTimeMesh, rows: &[Vec<f64>], boundary: BoundaryMode) -> Result<Self> {
        if rows.len() != mesh.n_time() {
            return Err(Error::LengthMismatch {
                expected: mesh.n_time(),
                got: rows.len(),
            });
        }
        let mut values = Vec::with_capacity(mesh.n_space() * mesh.n_time());
        for row in rows {
            if row.len() != mesh.n_space() {
                return Err(Error::LengthMismatch {
                    expected: mesh.n_space(),
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(mesh, values, boundary)
    }

    pub fn mesh(&self) -> &SpaceTimeMesh {
        &self.mesh
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_space(&self) -> usize {
        self.mesh.n_space()
    }

    pub fn n_time(&self) -> usize {
        self.mesh.n_time()
    }

    /// Spatial row at `t_l`. Panics on a bad index.
    pub fn row(&self, l: usize) -> &[f64] {
        let n = self.mesh.n_space();
        &self.values[l * n..(l + 1) * n]
    }

    /// `ρ_l^n`. Panics on a bad index.
    pub fn value(&self, l: usize, n: usize) -> f64 {
        self.values[l * self.mesh.n_space() + n]
    }

    /// `Δx Σ_n ρ_l^n - 1` for each slice.
    pub fn mass_defects(&self) -> Vec<f64> {
        let dx = self.mesh.dx();
        (0..self.n_time())
            .map(|l| dx * self.row(l).iter().sum::<f64>() - 1.0)
            .collect()
    }

    /// `(δ_x⁺ρ)_l^n`.
    pub fn forward_diff_x(&self, l: usize, n: usize) -> Result<f64> {
        self.mesh.check_time(l)?;
        self.mesh.check_space(n)?;
        let next = if n + 1 < self.n_space() {
            self.value(l, n + 1)
        } else {
            match self.boundary {
                BoundaryMode::PaperTruncated => 0.0,
                BoundaryMode::Periodic => self.value(l, 0),
            }
        };
        Ok((next - self.value(l, n)) / self.mesh.dx())
    }

    /// `δ_x⁺ρ` for a whole slice.
    pub fn diff_x_row(&self, l: usize) -> Vec<f64> {
        diff_x_row(self.row(l), self.mesh.dx(), self.boundary)
    }

    /// `(δ_t⁺ρ)_l^n`; the final slice uses `-ρ_L^n / Δt`.
    pub fn forward_diff_t(&self, l: usize, n: usize) -> Result<f64> {
        self.mesh.check_time(l)?;
        self.mesh.check_space(n)?;
        Ok(self.diff_t_unchecked(l, n))
    }

    fn diff_t_unchecked(&self, l: usize, n: usize) -> f64 {
        let next = if l + 1 < self.n_time() {
            self.value(l + 1, n)
        } else {
            0.0
        };
        (next - self.value(l, n)) / self.mesh.dt()
    }

    /// `(δ_tt⁺ρ)_l^n`; the final slice uses `-(δ_t⁺ρ)_L^n / Δt`.
    pub fn forward_diff_tt(&self, l: usize, n: usize) -> Result<f64> {
        self.mesh.check_time(l)?;
        self.mesh.check_space(n)?;
        let next = if l + 1 < self.n_time() {
            self.diff_t_unchecked(l + 1, n)
        } else {
            0.0
        };
        Ok((next - self.diff_t_unchecked(l, n)) / self.mesh.dt())
    }

    /// `δ_t⁺ρ` for a whole slice.
    pub fn diff_t_row(&self, l: usize) -> Vec<f64> {
        (0..self.n_space())
            .map(|n| self.diff_t_unchecked(l, n))
            .collect()
    }

    /// `δ_tt⁺ρ` for a whole slice.
    pub fn diff_tt_row(&self, l: usize) -> Vec<f64> {
        (0..self.n_space())
            .map(|n| self.forward_diff_tt(l, n).expect("validated index"))
            .collect()
    }

    /// Keeps every `stride`-th spatial node and every `time_stride`-th slice,
    /// so that the coarse node `x_n` coincides with fine node `x_{(n+1)·stride - 1}`.
    pub fn restrict(&self, stride: usize, time_stride: usize) -> Result<Self> {
        if stride == 0
            || time_stride == 0
            || self.n_space() % stride != 0
            || self.n_time() % time_stride != 0
        {
            return Err(Error::InvalidMesh(format!(
                "cannot restrict {}x{} by ({time_stride}, {stride})",
                self.n_time(),
                self.n_space()
            )));
        }
        let mesh = SpaceTimeMesh::new(
            self.mesh.a,
            self.mesh.b,
            self.mesh.horizon,
            self.n_space() / stride,
            self.n_time() / time_stride,
        )?;
        let mut values = Vec::with_capacity(mesh.n_space() * mesh.n_time());
        for l in 0..mesh.n_time() {
            let fine_l = (l + 1) * time_stride - 1;
            for n in 0..mesh.n_space() {
                values.push(self.value(fine_l, (n + 1) * stride - 1));
            }
        }
        Self::new(mesh, values, self.boundary)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_mesh(n: usize, l: usize) -> SpaceTimeMesh {
        SpaceTimeMesh::new(0.0, 1.0, 1.0, n, l).unwrap()
    }

    #[test]
    fn mesh_endpoints_and_spacing() {
        let mesh = SpaceTimeMesh::new(-1.0, 2.0, 0.7, 30, 7).unwrap();
        assert_eq!(mesh.x(29), 2.0);
        assert_eq!(mesh.t(6), 0.7);
        let xs = mesh.space_points();
        for w in xs.windows(2) {
            assert!(w[1] > w[0]);
            assert_abs_diff_eq!(w[1] - w[0], mesh.dx(), epsilon = 1e-14);
        }
        assert!(SpaceTimeMesh::new(1.0, 1.0, 1.0, 3, 3).is_err());
        assert!(SpaceTimeMesh::new(0.0, 1.0, 0.0, 3, 3).is_err());
        assert!(SpaceTimeMesh::new(0.0, 1.0, 1.0, 0, 3).is_err());
    }

    #[test]
    fn forward_diff_x_interior_and_boundary() {
        // Δx = 0.5 needs b - a = 1.5 with N = 3.
        let mesh = SpaceTimeMesh::new(0.0, 1.5, 1.0, 3, 1).unwrap();
        let traj = DensityTrajectory::new(mesh, vec![1.0, 2.0, 4.0], BoundaryMode::PaperTruncated).unwrap();
        assert_eq!(traj.forward_diff_x(0, 0).unwrap(), 2.0);
        assert_eq!(traj.forward_diff_x(0, 2).unwrap(), -8.0);
        let periodic = DensityTrajectory::new(mesh, vec![1.0, 2.0, 4.0], BoundaryMode::Periodic).unwrap();
        assert_eq!(periodic.forward_diff_x(0, 2).unwrap(), (1.0 - 4.0) / 0.5);
        assert!(matches!(
            traj.forward_diff_x(0, 3),
            Err(Error::OutOfBounds { .. })
        ));
        assert!(traj.forward_diff_x(1, 0).is_err());
    }

    #[test]
    fn constant_periodic_row_has_zero_difference() {
        let traj = DensityTrajectory::new(unit_mesh(3, 1), vec![0.7; 3], BoundaryMode::Periodic).unwrap();
        for n in 0..3 {
            assert_eq!(traj.forward_diff_x(0, n).unwrap(), 0.0);
        }
    }

    #[test]
    fn time_differences() {
        // ρ(t, x) = t on t ∈ {0.5, 1.0}.
        let mesh = SpaceTimeMesh::new(0.0, 1.0, 1.0, 2, 2).unwrap();
        let traj = DensityTrajectory::new(mesh, vec![0.5, 0.5, 1.0, 1.0], BoundaryMode::Periodic).unwrap();
        assert_abs_diff_eq!(traj.forward_diff_t(0, 0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(traj.forward_diff_t(1, 1).unwrap(), -2.0, epsilon = 1e-15);

        let constant = DensityTrajectory::new(unit_mesh(2, 4), vec![1.0; 8], BoundaryMode::Periodic).unwrap();
        for l in 0..3 {
            assert_eq!(constant.forward_diff_t(l, 0).unwrap(), 0.0);
        }
        for l in 0..2 {
            assert_eq!(constant.forward_diff_tt(l, 1).unwrap(), 0.0);
        }
    }

    #[test]
    fn second_time_difference_of_quadratic_is_two() {
        // ρ = t² at t = Δt, 2Δt, 3Δt, 4Δt with Δt = 0.25.
        let mesh = SpaceTimeMesh::new(0.0, 1.0, 1.0, 1, 4).unwrap();
        let values: Vec<f64> = (1..=4).map(|k| (0.25 * k as f64).powi(2)).collect();
        let traj = DensityTrajectory::new(mesh, values, BoundaryMode::Periodic).unwrap();
        assert_abs_diff_eq!(traj.forward_diff_tt(0, 0).unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(traj.forward_diff_tt(1, 0).unwrap(), 2.0, epsilon = 1e-12);
    }

    #[test]
    fn quadrature_examples() {
        let mesh = unit_mesh(10, 1);
        assert_abs_diff_eq!(quadrature(&[1.0; 10], &mesh).unwrap(), 1.0, epsilon = 1e-15);

        let mesh = unit_mesh(100, 1);
        let f: Vec<f64> = mesh.space_points();
        // Σ_{n=1}^{100} (n/100) / 100 = 5050 / 10000.
        assert_abs_diff_eq!(quadrature(&f, &mesh).unwrap(), 0.505, epsilon = 1e-14);

        let s: Vec<f64> = mesh
            .space_points()
            .iter()
            .map(|x| (2.0 * std::f64::consts::PI * x).sin())
            .collect();
        assert_abs_diff_eq!(quadrature(&s, &mesh).unwrap(), 0.0, epsilon = 1e-12);

        assert!(matches!(
            quadrature(&[1.0; 7], &mesh),
            Err(Error::LengthMismatch { .. })
        ));
        let st = unit_mesh(4, 5);
        assert_abs_diff_eq!(quadrature(&[1.0; 20], &st).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn rejects_non_positive_values() {
        let err = DensityTrajectory::new(unit_mesh(2, 1), vec![1.0, 0.0], BoundaryMode::Periodic);
        assert!(matches!(err, Err(Error::NonPositiveDensity { index: 1, .. })));
    }

    #[test]
    fn forward_diff_x_converges_at_first_order() {
        let err_at = |n: usize| {
            let mesh = unit_mesh(n, 1);
            let row: Vec<f64> = mesh.space_points().iter().map(|x| 2.0 + x.sin()).collect();
            let traj = DensityTrajectory::new(mesh, row, BoundaryMode::PaperTruncated).unwrap();
            (0..n - 1)
                .map(|i| (traj.forward_diff_x(0, i).unwrap() - mesh.x(i).cos()).abs())
                .fold(0.0, f64::max)
        };
        let ratio = err_at(64) / err_at(128);
        assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn quadrature_converges_at_first_order() {
        let err_at = |n: usize| {
            let mesh = unit_mesh(n, 1);
            let v: Vec<f64> = mesh.space_points().iter().map(|x| x.exp()).collect();
            (quadrature(&v, &mesh).unwrap() - (1f64.exp() - 1.0)).abs()
        };
        let ratio = err_at(100) / err_at(200);
        assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn restriction_picks_coinciding_nodes() {
        let fine = SpaceTimeMesh::new(0.0, 1.0, 1.0, 8, 4).unwrap();
        let values: Vec<f64> = (0..32).map(|k| 1.0 + k as f64).collect();
        let traj = DensityTrajectory::new(fine, values, BoundaryMode::Periodic).unwrap();
        let coarse = traj.restrict(2, 2).unwrap();
        assert_eq!(coarse.n_space(), 4);
        assert_eq!(coarse.n_time(), 2);
        for l in 0..2 {
            for n in 0..4 {
                assert_eq!(coarse.mesh().x(n), fine.x(2 * n + 1));
                assert_eq!(coarse.value(l, n), traj.value(2 * l + 1, 2 * n + 1));
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn differences_and_quadrature_are_linear(
                u in prop::collection::vec(0.1f64..2.0, 6),
                v in prop::collection::vec(0.1f64..2.0, 6),
                alpha in 0.1f64..3.0,
                beta in 0.1f64..3.0,
            ) {
                let mesh = unit_mesh(6, 1);
                for mode in [BoundaryMode::Periodic, BoundaryMode::PaperTruncated] {
                    let mix: Vec<f64> = u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect();
                    let du = diff_x_row(&u, mesh.dx(), mode);
                    let dv = diff_x_row(&v, mesh.dx(), mode);
                    let dm = diff_x_row(&mix, mesh.dx(), mode);
                    for i in 0..6 {
                        prop_assert!((dm[i] - alpha * du[i] - beta * dv[i]).abs() < 1e-9);
                    }
                }
                let qm = quadrature(&u.iter().zip(&v).map(|(a, b)| alpha * a + beta * b).collect::<Vec<_>>(), &mesh).unwrap();
                let qu = quadrature(&u, &mesh).unwrap();
                let qv = quadrature(&v, &mesh).unwrap();
                prop_assert!((qm - alpha * qu - beta * qv).abs() < 1e-12);
            }
        }
    }
}
