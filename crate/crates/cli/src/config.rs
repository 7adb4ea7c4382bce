//! Settings resolution: built-in defaults, then the `--config` JSON document,
//! then command-line flags.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use wkrr::analysis::{GeneratorSettings, GroundTruth, InitialDensity, SweepPlan};
use wkrr::{BoundaryMode, Field, FlowKind, InternalEnergy, KernelFamily, SmoothKernel, SolveRoute, TerminalSlices};

use crate::CliError;

/// Keys of the config document handled outside the command settings.
const SHARED_KEYS: [&str; 4] = ["command", "out", "seed", "threads"];

/// Parses an inline JSON value, or reads it from a file when prefixed with `@`.
pub fn parse_json_arg(text: &str) -> Result<Value, String> {
    let body = match text.strip_prefix('@') {
        Some(path) => fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))?,
        None => text.to_string(),
    };
    serde_json::from_str(&body).map_err(|e| e.to_string())
}

/// Reads the config document; it must be a JSON object.
pub fn load_config(path: Option<&Path>, command: &str) -> Result<Map<String, Value>, CliError> {
    let Some(path) = path else {
        return Ok(Map::new());
    };
    let text = fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let Value::Object(map) = value else {
        return Err(CliError::config("config document must be a JSON object"));
    };
    if let Some(c) = map.get("command") {
        if c.as_str() != Some(command) {
            return Err(CliError::config(format!("config is for command {c}, not {command:?}")));
        }
    }
    Ok(map)
}

/// Overlays the config document and then the flag values on the serialized
/// defaults and deserializes the result, rejecting keys the settings type does
/// not know.
pub fn resolve<T: DeserializeOwned + Serialize + Default>(
    config: &Map<String, Value>,
    flags: Map<String, Value>,
) -> Result<T, CliError> {
    let Value::Object(mut merged) = serde_json::to_value(T::default()).map_err(|e| CliError::config(e.to_string()))? else {
        unreachable!("settings serialize to objects");
    };
    let known: BTreeSet<String> = merged.keys().cloned().collect();
    let given = config.keys().chain(flags.keys()).filter(|k| !SHARED_KEYS.contains(&k.as_str()));
    let unknown: Vec<&String> = given.filter(|k| !known.contains(*k)).collect();
    if !unknown.is_empty() {
        return Err(CliError::config(format!("unknown config keys: {unknown:?}")));
    }
    let overlay = config
        .iter()
        .filter(|(k, _)| !SHARED_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .chain(flags);
    for (k, v) in overlay {
        match (merged.get_mut(&k), v) {
            (Some(Value::Object(base)), Value::Object(over)) if k == "grid" => base.extend(over),
            (_, v) => {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::config(e.to_string()))
}

/// Flag values that were given, keyed by their settings names.
pub fn flag_map(flags: &impl Serialize) -> Map<String, Value> {
    match serde_json::to_value(flags) {
        Ok(Value::Object(map)) => map.into_iter().filter(|(_, v)| !v.is_null()).collect(),
        _ => Map::new(),
    }
}

/// Parses `none`, `entropy`, `fisher` or `power:<m>`.
pub fn parse_u(text: &str) -> Result<InternalEnergy, CliError> {
    let u = match text {
        "none" => InternalEnergy::None,
        "entropy" => InternalEnergy::Entropy,
        "fisher" => InternalEnergy::Fisher,
        other => match other.strip_prefix("power:").map(str::parse::<f64>) {
            Some(Ok(m)) => InternalEnergy::Power { m },
            _ => return Err(CliError::config(format!("unknown internal energy {other:?}"))),
        },
    };
    u.validate().map_err(CliError::validation)?;
    Ok(u)
}

fn kernel(family: KernelFamily) -> Result<SmoothKernel, CliError> {
    SmoothKernel::new(family).map_err(CliError::validation)
}

fn gaussian(lengthscale: f64) -> KernelFamily {
    KernelFamily::Gaussian { lengthscale }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimulateSettings {
    pub flow: FlowKind,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    pub n: usize,
    pub l: usize,
    pub potential: Field,
    pub interaction: Field,
    pub u: String,
    pub initial: InitialDensity,
    /// Initial phase `Φ` of the Hamiltonian flow.
    pub phase: Field,
    pub dt_solver: Option<f64>,
    /// Boundary mode recorded in the sidecar.
    pub boundary: BoundaryMode,
    pub name: String,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self {
            flow: FlowKind::Gradient,
            a: 0.0,
            b: 1.0,
            horizon: 0.1,
            n: 64,
            l: 20,
            potential: Field::Zero,
            interaction: Field::Zero,
            u: "entropy".into(),
            initial: InitialDensity::Bump {
                center: 0.5,
                width: 0.1,
                floor: 1e-6,
            },
            phase: Field::Zero,
            dt_solver: None,
            boundary: BoundaryMode::Periodic,
            name: "rho".into(),
        }
    }
}

/// Sampling grid for reconstructed functions; the ends default to the data domain.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleGrid {
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub n: usize,
}

impl Default for SampleGrid {
    fn default() -> Self {
        Self { a: None, b: None, n: 201 }
    }
}

impl SampleGrid {
    pub fn points(&self, domain: (f64, f64)) -> Result<Vec<f64>, CliError> {
        let (a, b) = (self.a.unwrap_or(domain.0), self.b.unwrap_or(domain.1));
        if self.n < 2 || !(b > a) {
            return Err(CliError::config("sample grid needs n >= 2 and b > a"));
        }
        let h = (b - a) / (self.n - 1) as f64;
        Ok((0..self.n).map(|i| a + i as f64 * h).collect())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimateSettings {
    pub data: Option<PathBuf>,
    pub kernel1: KernelFamily,
    pub kernel2: KernelFamily,
    pub kernel3: Option<KernelFamily>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: Option<f64>,
    pub flow: FlowKind,
    pub u: String,
    pub terminal: TerminalSlices,
    pub route: SolveRoute,
    pub grid: SampleGrid,
    /// Random span directions used for the stationarity residual.
    pub directions: usize,
}

impl Default for EstimateSettings {
    fn default() -> Self {
        Self {
            data: None,
            kernel1: gaussian(0.1),
            kernel2: gaussian(0.1),
            kernel3: None,
            lambda1: 0.1,
            lambda2: 0.1,
            lambda3: None,
            flow: FlowKind::Gradient,
            u: "none".into(),
            terminal: TerminalSlices::Include,
            route: SolveRoute::Auto,
            grid: SampleGrid::default(),
            directions: 20,
        }
    }
}

impl EstimateSettings {
    pub fn kernels(&self) -> Result<(SmoothKernel, SmoothKernel, Option<(SmoothKernel, f64)>), CliError> {
        let third = match (self.kernel3, self.lambda3) {
            (Some(k), Some(l)) => Some((kernel(k)?, l)),
            (None, None) => None,
            _ => return Err(CliError::config("kernel3 and lambda3 must be given together")),
        };
        Ok((kernel(self.kernel1)?, kernel(self.kernel2)?, third))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub n_list: Vec<usize>,
    pub alpha: f64,
    pub beta: f64,
    pub c_lambda: f64,
    pub c_l: f64,
    /// Explicit truth; when absent, the three-center reference truth or, with
    /// `random_truth`, a truth drawn from the seed.
    pub truth: Option<GroundTruth>,
    pub random_truth: bool,
    pub kernel1: KernelFamily,
    pub kernel2: KernelFamily,
    /// Weight scale of the generated truth.
    pub amplitude: f64,
    pub a: f64,
    pub b: f64,
    pub horizon: f64,
    pub fine_factor: usize,
    pub initial: InitialDensity,
    pub flow: FlowKind,
    pub u: String,
    pub terminal: TerminalSlices,
    pub boundary: BoundaryMode,
    pub dt_solver: Option<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        let g = GeneratorSettings::default();
        Self {
            n_list: vec![32, 48, 64, 96],
            alpha: 0.2,
            beta: 1.2,
            c_lambda: 1.0,
            c_l: 1.0,
            truth: None,
            random_truth: false,
            kernel1: gaussian(0.1),
            kernel2: gaussian(0.1),
            amplitude: 0.25,
            a: g.a,
            b: g.b,
            horizon: g.horizon,
            fine_factor: g.fine_factor,
            initial: g.initial,
            flow: g.flow,
            u: "entropy".into(),
            terminal: g.terminal,
            boundary: g.boundary,
            dt_solver: g.dt_solver,
        }
    }
}

impl SweepSettings {
    pub fn truth(&self, seed: u64) -> Result<GroundTruth, CliError> {
        let (k1, k2) = (kernel(self.kernel1)?, kernel(self.kernel2)?);
        match &self.truth {
            Some(t) => Ok(t.clone()),
            None if self.random_truth => {
                GroundTruth::random(k1, k2, self.a, self.b, self.amplitude, seed).map_err(CliError::validation)
            }
            None => GroundTruth::reference(k1, k2, self.a, self.b, self.amplitude).map_err(CliError::validation),
        }
    }

    pub fn plan(&self, seed: u64) -> Result<SweepPlan, CliError> {
        let generator = GeneratorSettings {
            a: self.a,
            b: self.b,
            horizon: self.horizon,
            fine_factor: self.fine_factor,
            initial: self.initial,
            flow: self.flow,
            internal: parse_u(&self.u)?,
            terminal: self.terminal,
            boundary: self.boundary,
            dt_solver: self.dt_solver,
        };
        let plan = SweepPlan {
            n_list: self.n_list.clone(),
            alpha: self.alpha,
            beta: self.beta,
            c_lambda: self.c_lambda,
            c_l: self.c_l,
            truth: self.truth(seed)?,
            generator,
        };
        plan.validate().map_err(CliError::validation)?;
        Ok(plan)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct StabilitySettings {
    #[serde(flatten)]
    pub sweep: SweepSettings,
    /// Functions file written by `estimate`; compared against `truth` alone
    /// instead of running a sweep.
    pub estimate: Option<PathBuf>,
    pub stability_n: usize,
    pub stability_l: usize,
    pub stability_horizon: f64,
    pub stability_initial: InitialDensity,
    pub phase: Field,
    pub stability_dt: Option<f64>,
}

impl Default for StabilitySettings {
    fn default() -> Self {
        // Weak forces keep particle paths from crossing over the long horizon.
        let sweep = SweepSettings {
            n_list: vec![32, 48, 64],
            c_lambda: 1e-3,
            amplitude: 0.02,
            horizon: 0.1,
            flow: FlowKind::Hamiltonian,
            u: "none".into(),
            ..SweepSettings::default()
        };
        Self {
            sweep,
            estimate: None,
            stability_n: 128,
            stability_l: 50,
            stability_horizon: 0.5,
            stability_initial: InitialDensity::Cosine {
                amplitude: 0.3,
                frequency: 1.0,
            },
            phase: Field::Zero,
            stability_dt: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct W2Settings {
    pub rho: Option<PathBuf>,
    pub sigma: Option<PathBuf>,
    /// Defaults to `4 N`.
    pub quantiles: Option<usize>,
    pub mass_model: wkrr::MassModel,
}

impl Default for W2Settings {
    fn default() -> Self {
        Self {
            rho: None,
            sigma: None,
            quantiles: None,
            mass_model: wkrr::MassModel::PiecewiseConstant,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[derive(Serialize)]
    struct Flags {
        #[serde(skip_serializing_if = "Option::is_none")]
        lambda1: Option<f64>,
    }

    #[test]
    fn flags_override_config() {
        let config = json!({"command": "estimate", "lambda1": 0.5, "lambda2": 0.25, "seed": 3});
        let config = config.as_object().unwrap().clone();
        let s: EstimateSettings = resolve(&config, flag_map(&Flags { lambda1: Some(2.0) })).unwrap();
        assert_eq!((s.lambda1, s.lambda2), (2.0, 0.25));
        let s: EstimateSettings = resolve(&config, flag_map(&Flags { lambda1: None })).unwrap();
        assert_eq!(s.lambda1, 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let config = json!({"lamda1": 0.5}).as_object().unwrap().clone();
        let r: Result<EstimateSettings, _> = resolve(&config, Map::new());
        assert!(r.is_err());
        let config = json!({"stability_n": 64, "alpha": 0.1}).as_object().unwrap().clone();
        let s: StabilitySettings = resolve(&config, Map::new()).unwrap();
        assert_eq!((s.stability_n, s.sweep.alpha), (64, 0.1));
        assert_eq!(s.sweep.amplitude, StabilitySettings::default().sweep.amplitude);
    }

    #[test]
    fn grid_flags_merge_into_config_grid() {
        let config = json!({"grid": {"a": -1.0, "n": 11}}).as_object().unwrap().clone();
        let flags = json!({"grid": {"n": 21}}).as_object().unwrap().clone();
        let s: EstimateSettings = resolve(&config, flags).unwrap();
        assert_eq!((s.grid.a, s.grid.b, s.grid.n), (Some(-1.0), None, 21));
    }

    #[test]
    fn internal_energy_strings() {
        assert_eq!(parse_u("power:2").unwrap(), InternalEnergy::Power { m: 2.0 });
        assert!(parse_u("power:0.5").is_err());
        assert!(parse_u("heat").is_err());
    }
}
