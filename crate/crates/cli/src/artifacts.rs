//! Output directory lock, checksums, manifest and timings.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Holds `<out>/.lock` for the lifetime of a run.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::runtime(
                "output_locked",
                format!("{} exists; another run is writing to this directory", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::runtime("io_error", format!("{}: {e}", path.display())))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// Collects what a run read and wrote; `finish` writes the manifest.
pub struct Run {
    out: PathBuf,
    command: String,
    seed: u64,
    config: Value,
    inputs: Vec<PathBuf>,
    outputs: Vec<String>,
    extra: BTreeMap<String, Value>,
    timings: BTreeMap<String, f64>,
    start: Instant,
    _lock: OutputLock,
}

impl Run {
    pub fn start(out: &Path, command: &str, seed: u64, settings: &impl Serialize) -> Result<Self, CliError> {
        let lock = OutputLock::acquire(out)?;
        let mut config = serde_json::to_value(settings)?;
        if let Value::Object(map) = &mut config {
            map.insert("command".into(), command.into());
            map.insert("seed".into(), seed.into());
        }
        Ok(Self {
            out: out.to_path_buf(),
            command: command.into(),
            seed,
            config,
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: BTreeMap::new(),
            timings: BTreeMap::new(),
            start: Instant::now(),
            _lock: lock,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn output(&mut self, file: &str) {
        self.outputs.push(file.into());
    }

    pub fn json_output(&mut self, file: &str, value: &impl Serialize) -> Result<(), CliError> {
        write_json(&self.path(file), value)?;
        self.output(file);
        Ok(())
    }

    pub fn record(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        self.extra.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    /// Times `f` and stores the wall time under `label` in `timings.json`.
    pub fn timed<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.insert(label.into(), t.elapsed().as_secs_f64() * 1e3);
        out
    }

    pub fn time(&mut self, label: &str, ms: f64) {
        self.timings.insert(label.into(), ms);
    }

    /// Writes `timings.json` and `manifest.json`. The manifest holds no wall
    /// times so reruns produce identical bytes.
    pub fn finish(mut self) -> Result<(), CliError> {
        self.timings.insert("total".into(), self.start.elapsed().as_secs_f64() * 1e3);
        write_json(&self.path("timings.json"), &self.timings)?;
        let inputs = self
            .inputs
            .iter()
            .map(|p| Ok(json!({"path": p, "sha256": sha256_file(p)?})))
            .collect::<Result<Vec<Value>, CliError>>()?;
        let outputs = self
            .outputs
            .iter()
            .map(|f| Ok(json!({"file": f, "sha256": sha256_file(&self.path(f))?})))
            .collect::<Result<Vec<Value>, CliError>>()?;
        let manifest = json!({
            "tool": "wkrr",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "inputs": inputs,
            "outputs": outputs,
            "details": self.extra,
        });
        write_json(&self.path("manifest.json"), &manifest)
    }
}
