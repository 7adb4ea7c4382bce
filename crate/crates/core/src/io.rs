//! File formats: density trajectories (CSV plus JSON sidecar) and estimator
//! coefficients (little-endian `f64` blob plus JSON header).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimator::{EstimatorResult, SolveRoute};
use crate::grid::{BoundaryMode, DensityTrajectory, SpaceTimeMesh};
use crate::kernels::KernelFamily;

/// Scientific notation with 17 significant digits; round-trips every `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Sidecar describing a trajectory CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMeta {
    pub a: f64,
    pub b: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    #[serde(rename = "N")]
    pub n_space: usize,
    #[serde(rename = "L")]
    pub n_time: usize,
    pub boundary_mode: BoundaryMode,
}

impl TrajectoryMeta {
    pub fn of(traj: &DensityTrajectory) -> Self {
        let m = traj.mesh();
        Self {
            a: m.a(),
            b: m.b(),
            horizon: m.horizon(),
            n_space: m.n_space(),
            n_time: m.n_time(),
            boundary_mode: traj.boundary(),
        }
    }

    pub fn mesh(&self) -> Result<SpaceTimeMesh> {
        SpaceTimeMesh::new(self.a, self.b, self.horizon, self.n_space, self.n_time)
    }
}

/// `dir/name.csv` → `dir/name.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    let stem = csv.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    csv.with_file_name(format!("{stem}.meta.json"))
}

/// Writes one CSV row per time slice and the sidecar next to it.
pub fn write_trajectory(path: &Path, traj: &DensityTrajectory) -> Result<()> {
    write_rows(path, (0..traj.n_time()).map(|l| traj.row(l)))?;
    let meta = serde_json::to_string_pretty(&TrajectoryMeta::of(traj))?;
    fs::write(meta_path(path), meta + "\n")?;
    Ok(())
}

/// Writes numeric rows without a header.
pub fn write_rows<'a>(path: &Path, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|&x| fmt_f64(x))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a header line followed by numeric rows.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    w.write_record(header).map_err(csv_error)?;
    for row in rows {
        w.write_record(row.iter().map(|&x| fmt_f64(x))).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Reads the sidecar for `csv`; a missing file is [`Error::MetaMissing`].
pub fn read_meta(csv: &Path) -> Result<TrajectoryMeta> {
    let path = meta_path(csv);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MetaMissing(path.display().to_string()),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a trajectory and checks its shape against the sidecar.
pub fn read_trajectory(path: &Path) -> Result<DensityTrajectory> {
    let meta = read_meta(path)?;
    let mesh = meta.mesh()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_error)?;
    let mut values = Vec::with_capacity(meta.n_space * meta.n_time);
    let mut rows = 0;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        if record.len() != meta.n_space {
            return Err(Error::Format(format!(
                "row {rows} has {} columns, sidecar says N = {}",
                record.len(),
                meta.n_space
            )));
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Format(format!("row {rows}: cannot parse {field:?} as a number")))?;
            values.push(v);
        }
        rows += 1;
    }
    if rows != meta.n_time {
        return Err(Error::Format(format!("found {rows} rows, sidecar says L = {}", meta.n_time)));
    }
    DensityTrajectory::new(mesh, values, meta.boundary_mode)
}

/// One coefficient block inside the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBlock {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// JSON header accompanying the coefficient blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientHeader {
    pub dtype: String,
    pub byte_order: String,
    pub length: usize,
    pub blocks: Vec<CoefficientBlock>,
    /// `(l, n)` data node of each coefficient within a block.
    pub nodes: Vec<(usize, usize)>,
    pub lambdas: Vec<f64>,
    pub prefactor: f64,
    pub route: SolveRoute,
    pub kernels: Vec<KernelFamily>,
}

/// Writes `C₁, C₂[, C₃]` back to back as little-endian `f64` and the header as JSON.
pub fn write_coefficients(bin: &Path, header: &Path, result: &EstimatorResult) -> Result<CoefficientHeader> {
    let mut blocks = vec![("c1", &result.c1), ("c2", &result.c2)];
    if let Some(c3) = &result.c3 {
        blocks.push(("c3", c3));
    }
    let mut bytes = Vec::new();
    let mut meta = Vec::new();
    let mut offset = 0;
    for (name, block) in blocks {
        for x in block.iter() {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        meta.push(CoefficientBlock {
            name: name.to_string(),
            offset,
            len: block.len(),
        });
        offset += block.len();
    }
    let mut kernels = vec![result.v_hat.kernel().family(), result.w_hat.kernel().family()];
    if let Some(u) = &result.u_hat {
        kernels.push(u.kernel().family());
    }
    let head = CoefficientHeader {
        dtype: "f64".into(),
        byte_order: "little".into(),
        length: offset,
        blocks: meta,
        nodes: result.nodes.clone(),
        lambdas: result.lambdas.clone(),
        prefactor: result.prefactor,
        route: result.route,
        kernels,
    };
    fs::write(bin, bytes)?;
    fs::write(header, serde_json::to_string_pretty(&head)? + "\n")?;
    Ok(head)
}

/// Reads a coefficient blob; returns the header and one vector per block.
pub fn read_coefficients(bin: &Path, header: &Path) -> Result<(CoefficientHeader, Vec<Vec<f64>>)> {
    let head: CoefficientHeader = serde_json::from_str(&fs::read_to_string(header)?)?;
    let bytes = fs::read(bin)?;
    if bytes.len() != 8 * head.length {
        return Err(Error::Format(format!(
            "coefficient file has {} bytes, header expects {}",
            bytes.len(),
            8 * head.length
        )));
    }
    let all: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let blocks = head
        .blocks
        .iter()
        .map(|b| {
            all.get(b.offset..b.offset + b.len)
                .map(<[f64]>::to_vec)
                .ok_or_else(|| Error::Format(format!("block {} exceeds the data", b.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((head, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formatting_round_trips() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, f64::MIN_POSITIVE] {
            let s = fmt_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
        }
    }

    #[test]
    fn sidecar_keys() {
        let mesh = SpaceTimeMesh::new(0.0, 1.0, 0.5, 3, 2).unwrap();
        let traj = DensityTrajectory::new(mesh, vec![1.0; 6], BoundaryMode::Periodic).unwrap();
        let v: serde_json::Value = serde_json::to_value(TrajectoryMeta::of(&traj)).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, ["L", "N", "T", "a", "b", "boundary_mode"]);
        assert_eq!(v["boundary_mode"], "periodic");
    }

    #[test]
    fn meta_path_replaces_extension() {
        assert_eq!(meta_path(Path::new("out/rho.csv")), PathBuf::from("out/rho.meta.json"));
    }
}
