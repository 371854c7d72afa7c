//! File formats: trajectory and dataset CSV, binary model snapshots, scenario TOML and
//! metrics JSON.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controllers::Obstacle;
use crate::dynamics::{State, Vec3, Vec6};
use crate::error::FormatError;
use crate::knode::{ModelSnapshot, Sample};
use crate::neural::ResidualNet;
use crate::sim::{BenchmarkReport, MetricsReport, RunReport, Scenario, TrajectoryLog, TrajectoryRow};

const MODEL_MAGIC: &[u8; 8] = b"NODECBF\0";
const MODEL_FORMAT_VERSION: u32 = 1;

/// Column names of a trajectory CSV with `n_obstacles` barrier columns.
pub fn trajectory_header(n_obstacles: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["t", "r_x", "r_y", "r_z", "v_x", "v_y", "v_z"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["udes", "u"] {
        for axis in ["x", "y", "z"] {
            cols.push(format!("{prefix}_{axis}"));
        }
    }
    for i in 1..=n_obstacles {
        cols.push(format!("h_{i}"));
    }
    cols.push("psi2_margin".into());
    cols.push("snapshot_version".into());
    cols
}

pub fn write_trajectory<W: Write>(log: &TrajectoryLog, out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(trajectory_header(log.obstacles.len()))?;
    for row in &log.rows {
        let mut rec: Vec<String> = Vec::with_capacity(16 + row.h.len());
        rec.push(row.t.to_string());
        rec.extend(row.x.0.iter().map(|v| v.to_string()));
        rec.extend(row.u_des.iter().map(|v| v.to_string()));
        rec.extend(row.u.iter().map(|v| v.to_string()));
        rec.extend(row.h.iter().map(|v| v.to_string()));
        rec.push(row.psi2_margin.to_string());
        rec.push(row.snapshot_version.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_trajectory(log: &TrajectoryLog, path: &Path) -> Result<(), FormatError> {
    write_trajectory(log, BufWriter::new(File::create(path)?))
}

struct Columns {
    index: std::collections::HashMap<String, usize>,
}

impl Columns {
    fn new(headers: &csv::StringRecord) -> Self {
        Columns {
            index: headers.iter().enumerate().map(|(i, h)| (h.trim().to_string(), i)).collect(),
        }
    }

    fn find(&self, name: &str) -> Result<usize, FormatError> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| FormatError::MissingColumn(name.into()))
    }

    fn get(&self, rec: &csv::StringRecord, col: usize, line: usize) -> Result<f64, FormatError> {
        let raw = rec.get(col).unwrap_or("").trim();
        raw.parse::<f64>()
            .map_err(|_| FormatError::Invalid(format!("line {line}: cannot parse {raw:?} as a number")))
    }
}

fn vec_cols(cols: &Columns, names: &[&str]) -> Result<Vec<usize>, FormatError> {
    names.iter().map(|n| cols.find(n)).collect()
}

/// Reads a trajectory CSV. Barrier columns `h_1..h_N` are optional; obstacles are not stored
/// in the file and must be supplied for metric computation.
pub fn read_trajectory<R: Read>(input: R, obstacles: Vec<Obstacle>) -> Result<TrajectoryLog, FormatError> {
    let mut rd = csv::Reader::from_reader(input);
    let cols = Columns::new(rd.headers()?);
    let t = cols.find("t")?;
    let xs = vec_cols(&cols, &["r_x", "r_y", "r_z", "v_x", "v_y", "v_z"])?;
    let udes = vec_cols(&cols, &["udes_x", "udes_y", "udes_z"]).ok();
    let us = vec_cols(&cols, &["u_x", "u_y", "u_z"])?;
    let mut hs = Vec::new();
    while let Ok(c) = cols.find(&format!("h_{}", hs.len() + 1)) {
        hs.push(c);
    }
    let psi = cols.find("psi2_margin").ok();
    let ver = cols.find("snapshot_version").ok();
    let mut rows = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let get = |c: usize| cols.get(&rec, c, line);
        let mut x = Vec6::zeros();
        for (k, &c) in xs.iter().enumerate() {
            x[k] = get(c)?;
        }
        let read3 = |idx: &[usize]| -> Result<Vec3, FormatError> { Ok(Vec3::new(get(idx[0])?, get(idx[1])?, get(idx[2])?)) };
        rows.push(TrajectoryRow {
            t: get(t)?,
            x: State(x),
            u_des: match &udes {
                Some(c) => read3(c)?,
                None => Vec3::zeros(),
            },
            u: read3(&us)?,
            h: hs.iter().map(|&c| get(c)).collect::<Result<_, _>>()?,
            psi2_margin: match psi {
                Some(c) => get(c)?,
                None => f64::NAN,
            },
            snapshot_version: match ver {
                Some(c) => get(c)? as u64,
                None => 0,
            },
        });
    }
    Ok(TrajectoryLog {
        rows,
        obstacles,
        infeasible_steps: 0,
        aborted: false,
    })
}

pub fn load_trajectory(path: &Path, obstacles: Vec<Obstacle>) -> Result<TrajectoryLog, FormatError> {
    read_trajectory(BufReader::new(File::open(path)?), obstacles)
}

/// Reads `(t, x, u)` samples from any CSV carrying `t`, `r_*`, `v_*` and `u_*` columns, which
/// includes trajectory files written by [`write_trajectory`].
pub fn read_dataset<R: Read>(input: R) -> Result<Vec<Sample>, FormatError> {
    Ok(read_trajectory(input, Vec::new())?.samples())
}

pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, FormatError> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset<W: Write>(samples: &[Sample], out: W) -> Result<(), FormatError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "r_x", "r_y", "r_z", "v_x", "v_y", "v_z", "u_x", "u_y", "u_z"])?;
    for s in samples {
        let mut rec = vec![s.t.to_string()];
        rec.extend(s.x.0.iter().map(|v| v.to_string()));
        rec.extend(s.u.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Binary snapshot layout (little endian): magic, format version (u32), hidden width (u32),
/// seed (u64), snapshot version (u64), trained_at (f64), parameter count (u64), parameters (f64).
pub fn write_model<W: Write>(snap: &ModelSnapshot, mut out: W) -> Result<(), FormatError> {
    out.write_all(MODEL_MAGIC)?;
    out.write_all(&MODEL_FORMAT_VERSION.to_le_bytes())?;
    out.write_all(&(snap.net.hidden() as u32).to_le_bytes())?;
    out.write_all(&snap.seed.to_le_bytes())?;
    out.write_all(&snap.version.to_le_bytes())?;
    out.write_all(&snap.trained_at.to_le_bytes())?;
    let params = snap.net.params();
    out.write_all(&(params.len() as u64).to_le_bytes())?;
    for p in params {
        out.write_all(&p.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

fn read_array<const N: usize, R: Read>(input: &mut R) -> Result<[u8; N], FormatError> {
    let mut buf = [0u8; N];
    input
        .read_exact(&mut buf)
        .map_err(|_| FormatError::Model("truncated model file".into()))?;
    Ok(buf)
}

pub fn read_model<R: Read>(mut input: R) -> Result<ModelSnapshot, FormatError> {
    let magic: [u8; 8] = read_array(&mut input)?;
    if &magic != MODEL_MAGIC {
        return Err(FormatError::Model("not a model snapshot (bad magic)".into()));
    }
    let format = u32::from_le_bytes(read_array(&mut input)?);
    if format != MODEL_FORMAT_VERSION {
        return Err(FormatError::Model(format!("unsupported snapshot format {format}")));
    }
    let hidden = u32::from_le_bytes(read_array(&mut input)?) as usize;
    let seed = u64::from_le_bytes(read_array(&mut input)?);
    let version = u64::from_le_bytes(read_array(&mut input)?);
    let trained_at = f64::from_le_bytes(read_array(&mut input)?);
    let count = u64::from_le_bytes(read_array(&mut input)?) as usize;
    let expected = ResidualNet::param_count(hidden);
    if count != expected {
        return Err(FormatError::Model(format!(
            "hidden width {hidden} needs {expected} parameters, file has {count}"
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(f64::from_le_bytes(read_array(&mut input)?));
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(FormatError::Model(format!("{} trailing bytes", rest.len())));
    }
    let net = ResidualNet::from_params(hidden, crate::neural::ParamVector(params)).map_err(|e| FormatError::Model(e.to_string()))?;
    Ok(ModelSnapshot {
        net,
        seed,
        version,
        trained_at,
    })
}

pub fn save_model(snap: &ModelSnapshot, path: &Path) -> Result<(), FormatError> {
    write_model(snap, BufWriter::new(File::create(path)?))
}

pub fn load_model(path: &Path) -> Result<ModelSnapshot, FormatError> {
    read_model(BufReader::new(File::open(path)?))
}

pub fn parse_scenario(text: &str) -> Result<Scenario, FormatError> {
    Ok(toml::from_str(text)?)
}

pub fn load_scenario(path: &Path) -> Result<Scenario, FormatError> {
    parse_scenario(&std::fs::read_to_string(path)?)
}

/// A benchmark suite file: a list of `[[scenario]]` tables.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteFile {
    #[serde(default)]
    pub scenario: Vec<Scenario>,
}

pub fn parse_suite(text: &str) -> Result<Vec<Scenario>, FormatError> {
    let suite: SuiteFile = toml::from_str(text)?;
    if suite.scenario.is_empty() {
        return Err(FormatError::Invalid("suite contains no scenarios".into()));
    }
    Ok(suite.scenario)
}

pub fn load_suite(path: &Path) -> Result<Vec<Scenario>, FormatError> {
    parse_suite(&std::fs::read_to_string(path)?)
}

pub fn run_report_json(report: &RunReport) -> Result<String, FormatError> {
    Ok(serde_json::to_string_pretty(report)?)
}

pub fn metrics_json(metrics: &MetricsReport) -> Result<String, FormatError> {
    Ok(serde_json::to_string_pretty(metrics)?)
}

/// Pretty JSON with a trailing newline; field order is fixed by the struct layout, so equal
/// reports serialize to identical bytes.
pub fn benchmark_json(report: &BenchmarkReport) -> Result<String, FormatError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}
