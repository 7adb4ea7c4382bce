use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::{json, Map, Value};

use wkrr::analysis::{run_sweep_partial, SweepPoint, SweepReport};
use wkrr::estimator::{solve_with, span_candidate, stationarity_check, NodeData};
use wkrr::io::{self, fmt_f64, meta_path};
use wkrr::kernels::rkhs_norm_sq;
use wkrr::{
    gradient_flow_simulate, hamiltonian_flow_simulate, stability_experiment, wasserstein2_1d, Candidate, DensityTrajectory,
    EnergySpec, EstimationProblem, FlowKind, GroundTruth, SpaceTimeMesh, StabilityReport,
};

use crate::artifacts::Run;
use crate::config::{parse_u, EstimateSettings, SimulateSettings, StabilitySettings, SweepSettings, W2Settings};
use crate::{CliError, Shared};

/// Resolved shared settings.
pub struct Context {
    pub out: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
}

impl Context {
    pub fn new(shared: &Shared, doc: &Map<String, Value>, _command: &str) -> Result<Self, CliError> {
        let from_doc = |key: &str| doc.get(key).filter(|v| !v.is_null());
        let seed = match (shared.seed, from_doc("seed")) {
            (Some(s), _) => s,
            (None, Some(v)) => v.as_u64().ok_or_else(|| CliError::config("seed must be an unsigned integer"))?,
            (None, None) => 0,
        };
        let threads = match (shared.threads, from_doc("threads")) {
            (Some(t), _) => Some(t),
            (None, Some(v)) => Some(v.as_u64().ok_or_else(|| CliError::config("threads must be an unsigned integer"))? as usize),
            (None, None) => None,
        };
        if threads == Some(0) {
            return Err(CliError::config("threads must be positive"));
        }
        let out = match (&shared.out, from_doc("out")) {
            (Some(p), _) => p.clone(),
            (None, Some(v)) => PathBuf::from(v.as_str().ok_or_else(|| CliError::config("out must be a string"))?),
            (None, None) => PathBuf::from("out"),
        };
        Ok(Self { out, seed, threads })
    }
}

fn invalid(e: wkrr::Error) -> CliError {
    CliError::validation(e)
}

/// Writes a header and pre-formatted rows.
fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn read_input(path: &Path, run: &mut Run) -> Result<DensityTrajectory, CliError> {
    let traj = io::read_trajectory(path)?;
    run.input(path);
    run.input(&meta_path(path));
    Ok(traj)
}

pub fn simulate(ctx: &Context, s: SimulateSettings) -> Result<(), CliError> {
    if s.name.is_empty() || s.name.contains(['/', '\\']) {
        return Err(CliError::config("name must be a plain file stem"));
    }
    let u = parse_u(&s.u)?;
    let mesh = SpaceTimeMesh::new(s.a, s.b, s.horizon, s.n, s.l).map_err(invalid)?;
    let spec = EnergySpec::new(s.potential.clone(), s.interaction.clone(), u).map_err(invalid)?;
    let mu0 = s.initial.sample(&mesh).map_err(invalid)?;
    let mut run = Run::start(&ctx.out, "simulate", ctx.seed, &s)?;
    let (traj, report) = run.timed("simulate", || match s.flow {
        FlowKind::Gradient => gradient_flow_simulate(&mu0, &spec, &mesh, s.dt_solver),
        FlowKind::Hamiltonian => {
            let dt = s.dt_solver.unwrap_or(0.25 * mesh.dt());
            hamiltonian_flow_simulate(&mu0, &s.phase, &spec, &mesh, dt)
        }
    })?;
    let traj = DensityTrajectory::new(mesh, traj.values().to_vec(), s.boundary)?;
    let csv = run.path(&format!("{}.csv", s.name));
    io::write_trajectory(&csv, &traj)?;
    run.output(&file_name(&csv));
    run.output(&file_name(&meta_path(&csv)));
    run.record("simulation", &report)?;
    run.finish()
}

/// Unit-norm random element of the section span.
fn random_direction(problem: &EstimationProblem, data: &NodeData, rng: &mut ChaCha8Rng) -> Result<Candidate, CliError> {
    let parts = if problem.third.is_some() { 3 } else { 2 };
    let weights: Vec<Vec<f64>> = (0..parts)
        .map(|_| (0..data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .collect();
    let d = span_candidate(problem, data, &weights)?;
    let mut norm_sq = rkhs_norm_sq(&d.v) + rkhs_norm_sq(&d.w);
    if let Some(u) = &d.u {
        norm_sq += rkhs_norm_sq(u);
    }
    let s = if norm_sq > 0.0 { 1.0 / norm_sq.sqrt() } else { 1.0 };
    Ok(Candidate {
        v: d.v.scaled(s),
        w: d.w.scaled(s),
        u: d.u.map(|u| u.scaled(s)),
    })
}

pub fn estimate(ctx: &Context, s: EstimateSettings) -> Result<(), CliError> {
    let data_path = s.data.clone().ok_or_else(|| CliError::config("estimate needs --data"))?;
    let (k1, k2, third) = s.kernels()?;
    let u = parse_u(&s.u)?;
    let traj = io::read_trajectory(&data_path)?;
    let mesh = *traj.mesh();
    let points = s.grid.points((mesh.a(), mesh.b()))?;
    let mut problem = EstimationProblem::new(traj, k1, k2, s.lambda1, s.lambda2)
        .with_flow(s.flow)
        .with_known_u(u)
        .with_terminal(s.terminal)
        .with_route(s.route);
    if let Some((k3, l3)) = third {
        problem = problem.with_third(k3, l3);
    }
    problem.validate().map_err(invalid)?;

    let mut run = Run::start(&ctx.out, "estimate", ctx.seed, &s)?;
    read_input(&data_path, &mut run)?;
    let data = NodeData::from_problem(&problem)?;
    let result = run.timed("solve", || solve_with(&problem, &data))?;

    io::write_coefficients(&run.path("coefficients.bin"), &run.path("coefficients.json"), &result)?;
    run.output("coefficients.bin");
    run.output("coefficients.json");

    let mut header = vec!["x", "v_hat", "w_hat", "w_hat_centered"];
    if result.u_hat.is_some() {
        header.push("u_hat");
    }
    let rows: Vec<Vec<String>> = points
        .iter()
        .map(|&x| {
            let mut row = vec![
                fmt_f64(x),
                fmt_f64(result.v_hat.value(x)),
                fmt_f64(result.w_hat.value(x)),
                fmt_f64(result.w_centered(x)),
            ];
            if let Some(u) = &result.u_hat {
                row.push(fmt_f64(u.value(x)));
            }
            row
        })
        .collect();
    write_csv(&run.path("functions.csv"), &header, &rows)?;
    run.output("functions.csv");
    run.json_output("functions.json", &json!({"v": result.v_hat, "w": result.w_hat, "u": result.u_hat}))?;

    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let directions = (0..s.directions)
        .map(|_| random_direction(&problem, &data, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let stationarity = run.timed("stationarity", || stationarity_check(&result, &problem, &data, &directions))?;
    let residual_rms = (result.residual.iter().map(|r| r * r).sum::<f64>() / result.residual.len().max(1) as f64).sqrt();
    let diagnostics = json!({
        "loss": result.loss,
        "norms": result.norms,
        "gram_condition": result.gram_condition,
        "route": result.route,
        "prefactor": result.prefactor,
        "lambdas": result.lambdas,
        "nodes": result.nodes.len(),
        "residual_rms": residual_rms,
        "stationarity": {
            "directions": s.directions,
            "seed": ctx.seed,
            "max_abs_derivative": stationarity,
        },
    });
    run.json_output("diagnostics.json", &diagnostics)?;
    run.finish()
}

fn point_json(p: &SweepPoint) -> Value {
    json!({
        "N": p.n,
        "lambda": p.lambda,
        "L": p.n_time,
        "rkhs_error": p.rkhs_error,
        "v_error": p.v_error,
        "w_error": p.w_error,
        "relative_error": p.relative_error,
        "sup_error": p.sup_error,
    })
}

fn record_sweep(run: &mut Run, report: &SweepReport) {
    for p in &report.points {
        run.time(&format!("N={}", p.n), p.wall_ms);
    }
}

pub fn sweep(ctx: &Context, s: SweepSettings) -> Result<(), CliError> {
    let plan = s.plan(ctx.seed)?;
    let mut run = Run::start(&ctx.out, "sweep", ctx.seed, &s)?;
    let (report, failure) = run_sweep_partial(&plan);
    record_sweep(&mut run, &report);
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .map(|p| {
            vec![
                p.n.to_string(),
                fmt_f64(p.lambda),
                p.n_time.to_string(),
                fmt_f64(p.rkhs_error),
                fmt_f64(p.relative_error),
                fmt_f64(p.sup_error),
            ]
        })
        .collect();
    write_csv(
        &run.path("sweep.csv"),
        &["N", "lambda", "L", "rkhs_error", "relative_error", "sup_error"],
        &rows,
    )?;
    run.output("sweep.csv");
    let summary = json!({
        "points": report.points.iter().map(point_json).collect::<Vec<_>>(),
        "slope": report.slope,
        "predicted": report.predicted,
        "strictly_decreasing": report.strictly_decreasing(),
        "band_check": report.band_check(),
        "complete": failure.is_none(),
    });
    run.json_output("sweep.json", &summary)?;
    run.json_output("truth.json", &plan.truth)?;
    run.finish()?;
    match failure {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

fn stability_json(r: &StabilityReport) -> Value {
    json!({
        "sup_w2": r.sup_w2,
        "w2_by_time": r.w2_by_time,
        "rkhs_error": r.rkhs_error,
        "kappa_error": r.kappa_error,
    })
}

pub fn stability(ctx: &Context, s: StabilitySettings) -> Result<(), CliError> {
    let sw = &s.sweep;
    let mesh = SpaceTimeMesh::new(sw.a, sw.b, s.stability_horizon, s.stability_n, s.stability_l).map_err(invalid)?;
    let mu0 = s.stability_initial.sample(&mesh).map_err(invalid)?;
    let dt = s.stability_dt.unwrap_or(0.25 * mesh.dt());

    if let Some(path) = &s.estimate {
        let truth = sw.truth(ctx.seed)?;
        let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let est: GroundTruth = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut run = Run::start(&ctx.out, "stability", ctx.seed, &s)?;
        run.input(path);
        let report = run.timed("stability", || stability_experiment(&truth, &est.candidate(), &mu0, &s.phase, &mesh, dt))?;
        let rows: Vec<Vec<String>> = report
            .w2_by_time
            .iter()
            .enumerate()
            .map(|(l, w)| vec![l.to_string(), fmt_f64(mesh.t(l)), fmt_f64(*w)])
            .collect();
        write_csv(&run.path("stability.csv"), &["l", "t", "w2"], &rows)?;
        run.output("stability.csv");
        run.json_output("stability.json", &stability_json(&report))?;
        return run.finish();
    }

    let plan = sw.plan(ctx.seed)?;
    let mut run = Run::start(&ctx.out, "stability", ctx.seed, &s)?;
    let (report, failure) = run_sweep_partial(&plan);
    record_sweep(&mut run, &report);
    if let Some(e) = failure {
        run.finish()?;
        return Err(e.into());
    }
    let experiments = run.timed("stability", || {
        report
            .estimates
            .par_iter()
            .map(|est| stability_experiment(&plan.truth, est, &mu0, &s.phase, &mesh, dt))
            .collect::<wkrr::Result<Vec<_>>>()
    })?;
    let baseline = stability_experiment(&plan.truth, &plan.truth.candidate(), &mu0, &s.phase, &mesh, dt)?;
    let rows: Vec<Vec<String>> = report
        .points
        .iter()
        .zip(&experiments)
        .map(|(p, e)| {
            vec![
                p.n.to_string(),
                fmt_f64(p.lambda),
                p.n_time.to_string(),
                fmt_f64(p.rkhs_error),
                fmt_f64(e.sup_w2),
            ]
        })
        .collect();
    write_csv(&run.path("stability.csv"), &["N", "lambda", "L", "rkhs_error", "sup_w2"], &rows)?;
    run.output("stability.csv");
    let non_increasing = experiments.windows(2).all(|w| w[1].sup_w2 <= w[0].sup_w2);
    let summary = json!({
        "points": report.points.iter().zip(&experiments).map(|(p, e)| {
            let mut v = point_json(p);
            v["stability"] = stability_json(e);
            v
        }).collect::<Vec<_>>(),
        "errors_strictly_decreasing": report.strictly_decreasing(),
        "sup_w2_non_increasing": non_increasing,
        "identical_dynamics_sup_w2": baseline.sup_w2,
        "dx": mesh.dx(),
    });
    run.json_output("stability.json", &summary)?;
    run.json_output("truth.json", &plan.truth)?;
    run.finish()
}

pub fn w2(ctx: &Context, s: W2Settings) -> Result<(), CliError> {
    let rho_path = s.rho.clone().ok_or_else(|| CliError::config("w2 needs --rho"))?;
    let sigma_path = s.sigma.clone().ok_or_else(|| CliError::config("w2 needs --sigma"))?;
    let rho = io::read_trajectory(&rho_path)?;
    let sigma = io::read_trajectory(&sigma_path)?;
    if rho.mesh() != sigma.mesh() {
        return Err(CliError::config("rho and sigma live on different meshes"));
    }
    let mesh = *rho.mesh();
    let quantiles = s.quantiles.unwrap_or(4 * mesh.n_space());
    let mut run = Run::start(&ctx.out, "w2", ctx.seed, &s)?;
    read_input(&rho_path, &mut run)?;
    read_input(&sigma_path, &mut run)?;
    let w2 = run.timed("w2", || {
        (0..mesh.n_time())
            .map(|l| wasserstein2_1d(rho.row(l), sigma.row(l), &mesh, quantiles, rho.boundary(), s.mass_model))
            .collect::<wkrr::Result<Vec<f64>>>()
    })?;
    let rows: Vec<Vec<String>> = w2
        .iter()
        .enumerate()
        .map(|(l, w)| vec![l.to_string(), fmt_f64(mesh.t(l)), fmt_f64(*w)])
        .collect();
    write_csv(&run.path("w2.csv"), &["l", "t", "w2"], &rows)?;
    run.output("w2.csv");
    run.json_output(
        "w2.json",
        &json!({
            "w2": w2,
            "sup_w2": w2.iter().copied().fold(0.0, f64::max),
            "quantiles": quantiles,
            "boundary_mode": rho.boundary(),
        }),
    )?;
    run.finish()
}
