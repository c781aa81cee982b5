//! File formats. Angles are degrees in every file, radians in memory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{Association, Match, TileGrid};
use crate::error::{Error, Result};
use crate::geometry::{ComponentVisibility, EnvironmentModel, Facet, ReflectionCoeff, VisibilityMask};
use crate::sbl::{MpcEstimate, SubarrayResult};
use crate::synth::{ChannelTensor, FreqGrid, TensorMetadata};
use crate::vec3::Vec3;

pub const TENSOR_FORMAT: &str = "pla-cfr-v1";

/// Parse JSON, reporting syntax and schema errors with line and column.
pub(crate) fn parse_json<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Write `bytes`, creating parent directories.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    // serializing plain data structs cannot fail
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

// ---------------------------------------------------------------------------
// environment

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFacet {
    id: String,
    #[serde(default)]
    name: String,
    vertices: Vec<Vec3>,
    reflection_coeff: ReflectionCoeff,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvironment {
    name: String,
    facets: Vec<RawFacet>,
}

/// Parse and validate an environment. Syntax errors carry line context;
/// geometry violations name the offending facet.
pub fn environment_from_json(text: &str, path: &Path) -> Result<EnvironmentModel> {
    let raw: RawEnvironment = parse_json(text, path)?;
    let facets = raw
        .facets
        .into_iter()
        .map(|f| {
            Facet::new(
                f.id,
                f.name,
                f.vertices,
                Complex64::new(f.reflection_coeff.re, f.reflection_coeff.im),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    EnvironmentModel::new(raw.name, facets)
}

pub fn load_environment(path: &Path) -> Result<EnvironmentModel> {
    environment_from_json(&read_text(path)?, path)
}

pub fn save_environment(env: &EnvironmentModel, path: &Path) -> Result<()> {
    write_file(path, to_json(env).as_bytes())
}

// ---------------------------------------------------------------------------
// channel tensor

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorHeader {
    format: String,
    elements: usize,
    freqs: FreqGrid,
    metadata: TensorMetadata,
    element_positions: Vec<Vec3>,
}

/// One JSON header line, then `M·N` little-endian `(re, im)` f64 pairs,
/// element-major.
pub fn write_tensor(mut w: impl Write, t: &ChannelTensor) -> std::io::Result<()> {
    let header = TensorHeader {
        format: TENSOR_FORMAT.into(),
        elements: t.n_elements(),
        freqs: t.freqs,
        metadata: t.metadata.clone(),
        element_positions: t.element_positions.clone(),
    };
    let mut line = serde_json::to_vec(&header).expect("serializable");
    line.push(b'\n');
    w.write_all(&line)?;
    let mut buf = Vec::with_capacity(t.h.len() * 16);
    for z in t.h.iter() {
        buf.extend_from_slice(&z.re.to_le_bytes());
        buf.extend_from_slice(&z.im.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_tensor(mut r: impl Read, path: &Path) -> Result<ChannelTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: 1,
        message: "missing header line".into(),
    })?;
    let header_text = std::str::from_utf8(&bytes[..nl]).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        column: e.valid_up_to() + 1,
        message: "header is not UTF-8".into(),
    })?;
    let header: TensorHeader = parse_json(header_text, path)?;
    if header.format != TENSOR_FORMAT {
        return Err(Error::Config(format!(
            "{}: unsupported tensor format `{}`",
            path.display(),
            header.format
        )));
    }
    let (m, n) = (header.elements, header.freqs.count);
    let body = &bytes[nl + 1..];
    if body.len() != m * n * 16 {
        return Err(Error::Dimension(format!(
            "{}: payload has {} bytes, header declares {m}x{n} complex samples",
            path.display(),
            body.len()
        )));
    }
    let f = |c: &[u8]| f64::from_le_bytes(c.try_into().expect("8 bytes"));
    let data: Vec<Complex64> = body.chunks_exact(16).map(|c| Complex64::new(f(&c[..8]), f(&c[8..]))).collect();
    let h = Array2::from_shape_vec((m, n), data).map_err(|e| Error::Dimension(e.to_string()))?;
    ChannelTensor::new(header.freqs, h, header.element_positions, header.metadata)
}

pub fn save_tensor(t: &ChannelTensor, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t).map_err(|e| Error::io(path, e))?;
    write_file(path, &buf)
}

pub fn load_tensor(path: &Path) -> Result<ChannelTensor> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(std::io::BufReader::new(file), path)
}

// ---------------------------------------------------------------------------
// CSV

/// 2-D grid with a header row of column-axis values and a leading column of
/// row-axis values. With `db`, values are `10·log10(p / max)` floored at
/// −300 dB.
pub fn grid_csv(values: &Array2<f64>, row_axis: (&str, &[f64]), col_axis: (&str, &[f64]), db: bool) -> String {
    let max = values.iter().cloned().fold(0.0, f64::max);
    let fmt = |p: f64| {
        if db {
            if max > 0.0 && p > 0.0 {
                (10.0 * (p / max).log10()).max(-300.0)
            } else {
                -300.0
            }
        } else {
            p
        }
    };
    let mut s = format!("{}\\{}", row_axis.0, col_axis.0);
    for c in col_axis.1 {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (i, r) in row_axis.1.iter().enumerate() {
        let _ = write!(s, "{r}");
        for j in 0..col_axis.1.len() {
            let _ = write!(s, ",{}", fmt(values[[i, j]]));
        }
        s.push('\n');
    }
    s
}

/// Tile grid, one CSV row per tile row; empty cells stay blank.
pub fn map_csv(grid: &TileGrid<Option<f64>>) -> String {
    let mut s = String::new();
    for r in 0..grid.rows {
        let row: Vec<String> = (0..grid.cols)
            .map(|c| grid.get(r, c).map(|v| v.to_string()).unwrap_or_default())
            .collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn bool_grid_csv(grid: &TileGrid<bool>) -> String {
    let mut s = String::new();
    for r in 0..grid.rows {
        let row: Vec<&str> = (0..grid.cols).map(|c| if *grid.get(r, c) { "1" } else { "0" }).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// estimates and associations

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateRecord {
    delay_s: f64,
    azimuth_deg: f64,
    elevation_deg: f64,
    amplitude_re: f64,
    amplitude_im: f64,
    gamma: f64,
    component_snr_db: f64,
}

impl From<&MpcEstimate> for EstimateRecord {
    fn from(e: &MpcEstimate) -> Self {
        Self {
            delay_s: e.delay,
            azimuth_deg: e.azimuth.to_degrees(),
            elevation_deg: e.elevation.to_degrees(),
            amplitude_re: e.amplitude.re,
            amplitude_im: e.amplitude.im,
            gamma: e.gamma,
            component_snr_db: e.component_snr_db,
        }
    }
}

impl From<&EstimateRecord> for MpcEstimate {
    fn from(r: &EstimateRecord) -> Self {
        Self {
            delay: r.delay_s,
            azimuth: r.azimuth_deg.to_radians(),
            elevation: r.elevation_deg.to_radians(),
            amplitude: Complex64::new(r.amplitude_re, r.amplitude_im),
            gamma: r.gamma,
            component_snr_db: r.component_snr_db,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResultRecord {
    index: usize,
    noise_var: f64,
    residual_energy_frac: f64,
    total_energy: f64,
    log_evidence: f64,
    iterations: usize,
    estimates: Vec<EstimateRecord>,
}

/// One subarray result per line.
pub fn results_jsonl(results: &[SubarrayResult]) -> String {
    let mut s = String::new();
    for r in results {
        let rec = ResultRecord {
            index: r.subarray_index,
            noise_var: r.noise_var,
            residual_energy_frac: r.residual_energy_frac,
            total_energy: r.total_energy,
            log_evidence: r.log_evidence,
            iterations: r.iterations,
            estimates: r.estimates.iter().map(EstimateRecord::from).collect(),
        };
        s.push_str(&serde_json::to_string(&rec).expect("serializable"));
        s.push('\n');
    }
    s
}

pub fn parse_results_jsonl(text: &str, path: &Path) -> Result<Vec<SubarrayResult>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let rec: ResultRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                column: e.column(),
                message: e.to_string(),
            })?;
            Ok(SubarrayResult {
                subarray_index: rec.index,
                estimates: rec.estimates.iter().map(MpcEstimate::from).collect(),
                noise_var: rec.noise_var,
                residual_energy_frac: rec.residual_energy_frac,
                total_energy: rec.total_energy,
                log_evidence: rec.log_evidence,
                iterations: rec.iterations,
            })
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MatchRecord {
    component_id: String,
    estimate_index: usize,
    distance: f64,
    predicted_distance_m: f64,
    estimate: EstimateRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AssociationRecord {
    subarray_index: usize,
    matches: Vec<MatchRecord>,
    unmatched: Vec<String>,
    unassociated: Vec<usize>,
}

pub fn associations_json(assoc: &[Association]) -> String {
    let recs: Vec<AssociationRecord> = assoc
        .iter()
        .map(|a| AssociationRecord {
            subarray_index: a.subarray_index,
            matches: a
                .matches
                .iter()
                .map(|m| MatchRecord {
                    component_id: m.component_id.clone(),
                    estimate_index: m.estimate_index,
                    distance: m.distance,
                    predicted_distance_m: m.predicted_distance,
                    estimate: EstimateRecord::from(&m.estimate),
                })
                .collect(),
            unmatched: a.unmatched.clone(),
            unassociated: a.unassociated.clone(),
        })
        .collect();
    to_json(&recs)
}

pub fn parse_associations_json(text: &str, path: &Path) -> Result<Vec<Association>> {
    let recs: Vec<AssociationRecord> = parse_json(text, path)?;
    Ok(recs
        .into_iter()
        .map(|r| Association {
            subarray_index: r.subarray_index,
            matches: r
                .matches
                .into_iter()
                .map(|m| Match {
                    component_id: m.component_id,
                    estimate_index: m.estimate_index,
                    estimate: MpcEstimate::from(&m.estimate),
                    distance: m.distance,
                    predicted_distance: m.predicted_distance_m,
                })
                .collect(),
            unmatched: r.unmatched,
            unassociated: r.unassociated,
        })
        .collect())
}

// ---------------------------------------------------------------------------
// visibility

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VisibilityRecord {
    component_id: String,
    /// One `0`/`1` character per element.
    visible: String,
}

pub fn visibility_json(mask: &VisibilityMask) -> String {
    let recs: Vec<VisibilityRecord> = mask
        .components
        .iter()
        .map(|c| VisibilityRecord {
            component_id: c.component_id.clone(),
            visible: c.visible.iter().map(|v| if *v { '1' } else { '0' }).collect(),
        })
        .collect();
    to_json(&recs)
}

pub fn parse_visibility_json(text: &str, path: &Path) -> Result<VisibilityMask> {
    let recs: Vec<VisibilityRecord> = parse_json(text, path)?;
    let components = recs
        .into_iter()
        .map(|r| {
            let visible = r
                .visible
                .chars()
                .map(|c| match c {
                    '0' => Ok(false),
                    '1' => Ok(true),
                    other => Err(Error::Config(format!(
                        "{}: component {}: unexpected visibility flag `{other}`",
                        path.display(),
                        r.component_id
                    ))),
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ComponentVisibility {
                component_id: r.component_id,
                visible,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(VisibilityMask { components })
}

// ---------------------------------------------------------------------------
// manifest

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
}

/// Produced files per stage with content hashes; no timestamps, so equal
/// inputs give equal manifests.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub seed: Option<u64>,
    pub stages: BTreeMap<String, Vec<ManifestEntry>>,
}

impl Manifest {
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            parse_json(&read_text(path)?, path)
        } else {
            Ok(Self::default())
        }
    }

    pub fn to_json(&self) -> String {
        to_json(self)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Relative path of `file` below `root`, with `/` separators.
pub fn relative(root: &Path, file: &Path) -> String {
    let rel: PathBuf = file.strip_prefix(root).unwrap_or(file).to_path_buf();
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
