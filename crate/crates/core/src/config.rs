//! Scenario configuration. Angles in files are degrees.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{Gates, PredictionMode};
use crate::array::{make_ura, AntennaPattern, ArrayFrame, ArrayGeometry};
use crate::beamformer::{linspace, SpectrumGrid};
use crate::error::{Error, Result};
use crate::geometry::EnvironmentModel;
use crate::sbl::SblConfig;
use crate::synth::{Antenna, DiffuseSpec, FreqGrid};
use crate::vec3::Vec3;

/// Frequencies the toolkit accepts [Hz].
pub const SYSTEM_BAND: (f64, f64) = (3e9, 10e9);

/// UE antenna heights of the medium (`M1`–`M5`) and large (`L1`–`L5`)
/// measurement positions [m].
pub const HEIGHTS_M: [f64; 5] = [1.546, 0.895, 2.235, 1.478, 1.202];
pub const HEIGHTS_L: [f64; 5] = [1.145, 1.317, 1.162, 1.590, 1.592];

/// Height of a named position preset such as `M3` or `L1`.
pub fn preset_height(name: &str) -> Option<f64> {
    let (set, idx) = name.split_at_checked(1)?;
    let i: usize = idx.parse().ok()?;
    let table = match set {
        "M" | "m" => &HEIGHTS_M,
        "L" | "l" => &HEIGHTS_L,
        _ => return None,
    };
    table.get(i.checked_sub(1)?).copied()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayConfig {
    pub rows: usize,
    pub cols: usize,
    pub f_c_hz: f64,
    /// Position of element (0, 0) [m].
    pub origin: Vec3,
    #[serde(default = "default_boresight")]
    pub boresight: Vec3,
    #[serde(default = "default_up")]
    pub up: Vec3,
    #[serde(default)]
    pub pattern: AntennaPattern,
}

fn default_boresight() -> Vec3 {
    Vec3::X
}

fn default_up() -> Vec3 {
    Vec3::Z
}

impl ArrayConfig {
    pub fn build(&self) -> Result<ArrayGeometry> {
        self.pattern.validate()?;
        make_ura(self.rows, self.cols, self.f_c_hz, self.origin, ArrayFrame::new(self.boresight, self.up)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Centered on the array carrier.
    #[serde(default = "default_synth_band")]
    pub bandwidth_hz: f64,
    pub n_freqs: usize,
    #[serde(default = "default_order")]
    pub max_order: usize,
    #[serde(default)]
    pub diffuse: DiffuseSpec,
    /// Noise level relative to the mean noiseless channel power (specular
    /// plus diffuse); absent = noiseless.
    #[serde(default)]
    pub snr_db: Option<f64>,
}

fn default_synth_band() -> f64 {
    3e9
}

fn default_order() -> usize {
    2
}

/// `start`, `stop` inclusive, `count` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub start: f64,
    pub stop: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamformConfig {
    pub azimuth_deg: Axis,
    pub elevation_deg: Axis,
    pub distance_m: Axis,
    /// Use every `freq_stride`-th frequency; 1 = full bandwidth.
    #[serde(default = "one")]
    pub freq_stride: usize,
    #[serde(default = "default_peaks")]
    pub max_peaks: usize,
    #[serde(default = "default_peak_db")]
    pub peak_db_below_max: f64,
}

fn one() -> usize {
    1
}

fn default_peaks() -> usize {
    10
}

fn default_peak_db() -> f64 {
    30.0
}

impl BeamformConfig {
    pub fn grid(&self) -> Result<SpectrumGrid> {
        let deg = |a: &Axis| linspace(a.start.to_radians(), a.stop.to_radians(), a.count);
        SpectrumGrid::new(
            deg(&self.azimuth_deg),
            deg(&self.elevation_deg),
            linspace(self.distance_m.start, self.distance_m.stop, self.distance_m.count),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationConfig {
    #[serde(default = "default_tile")]
    pub subarray_size: usize,
    #[serde(default)]
    pub sbl: SblConfig,
}

fn default_tile() -> usize {
    4
}

impl Default for EstimationConfig {
    fn default() -> Self {
        Self {
            subarray_size: default_tile(),
            sbl: SblConfig::default(),
        }
    }
}

/// Gate widths as written in files: delay in seconds, angles in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateConfig {
    pub delay_s: f64,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Absent = delay `2/B` of the estimation band, angles 5°.
    #[serde(default)]
    pub gates: Option<GateConfig>,
    #[serde(default)]
    pub prediction: PredictionMode,
    #[serde(default = "yes")]
    pub compensate_pathloss: bool,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
}

fn yes() -> bool {
    true
}

fn default_top_k() -> usize {
    6
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            gates: None,
            prediction: PredictionMode::default(),
            compensate_pathloss: true,
            top_k: default_top_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    /// Path relative to the config file, or `builtin:<scene>`.
    pub environment: String,
    pub ue_position: Vec3,
    /// Named height preset (`M1`…`M5`, `L1`…`L5`) overriding the z coordinate.
    #[serde(default)]
    pub ue_preset: Option<String>,
    #[serde(default = "Antenna::isotropic")]
    pub ue_antenna: Antenna,
    pub array: ArrayConfig,
    pub synthesis: SynthesisConfig,
    pub beamform: BeamformConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Directory the relative environment path resolves against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn in_band(what: &str, center: f64, bandwidth: f64) -> Result<()> {
    let (lo, hi) = (center - bandwidth / 2.0, center + bandwidth / 2.0);
    if !(lo >= SYSTEM_BAND.0 && hi <= SYSTEM_BAND.1) {
        return Err(Error::Config(format!(
            "{what} [{:.4}, {:.4}] GHz leaves the supported {:.0}-{:.0} GHz range",
            lo / 1e9,
            hi / 1e9,
            SYSTEM_BAND.0 / 1e9,
            SYSTEM_BAND.1 / 1e9
        )));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let mut cfg: ScenarioConfig = crate::io::parse_json(text, path)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        let f_c = self.array.f_c_hz;
        if !(f_c > 0.0) {
            return Err(Error::Config(format!("carrier must be positive, got {f_c}")));
        }
        let s = &self.synthesis;
        if s.n_freqs < 2 {
            return Err(Error::Config("synthesis needs at least 2 frequencies".into()));
        }
        in_band("synthesis band", f_c, s.bandwidth_hz)?;
        in_band("estimation band", f_c, self.estimation.sbl.band_hz)?;
        if self.estimation.sbl.band_hz > s.bandwidth_hz {
            return Err(Error::Config(format!(
                "estimation band {} Hz exceeds synthesis band {} Hz",
                self.estimation.sbl.band_hz, s.bandwidth_hz
            )));
        }
        if s.max_order > 2 {
            return Err(Error::Config(format!("max_order {} exceeds 2", s.max_order)));
        }
        if let Some(snr) = s.snr_db {
            if !snr.is_finite() {
                return Err(Error::Config("snr_db must be finite".into()));
            }
        }
        s.diffuse.validate()?;
        self.estimation.sbl.validate()?;
        let t = self.estimation.subarray_size;
        if t == 0 || t > self.array.rows || t > self.array.cols {
            return Err(Error::Config(format!(
                "subarray size {t} does not fit a {}x{} array",
                self.array.rows, self.array.cols
            )));
        }
        if self.beamform.freq_stride == 0 {
            return Err(Error::Config("freq_stride must be at least 1".into()));
        }
        if self.analysis.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        self.gates().validate()?;
        if let Some(p) = &self.ue_preset {
            if preset_height(p).is_none() {
                return Err(Error::Config(format!("unknown UE preset `{p}` (use M1-M5 or L1-L5)")));
            }
        }
        if !self.ue_position.is_finite() {
            return Err(Error::Config("UE position must be finite".into()));
        }
        if !self.environment.starts_with("builtin:") && !self.environment_path().exists() {
            return Err(Error::Config(format!(
                "environment file {} does not exist",
                self.environment_path().display()
            )));
        }
        Ok(())
    }

    pub fn environment_path(&self) -> PathBuf {
        self.base_dir.join(&self.environment)
    }

    pub fn load_environment(&self) -> Result<EnvironmentModel> {
        match self.environment.strip_prefix("builtin:") {
            Some(name) => crate::scenes::environment(name),
            None => crate::io::load_environment(&self.environment_path()),
        }
    }

    pub fn ue(&self) -> Vec3 {
        let mut p = self.ue_position;
        if let Some(h) = self.ue_preset.as_deref().and_then(preset_height) {
            p.z = h;
        }
        p
    }

    pub fn freqs(&self) -> Result<FreqGrid> {
        FreqGrid::centered(self.array.f_c_hz, self.synthesis.bandwidth_hz, self.synthesis.n_freqs)
    }

    pub fn gates(&self) -> Gates {
        match self.analysis.gates {
            Some(g) => Gates {
                delay: g.delay_s,
                azimuth: g.azimuth_deg.to_radians(),
                elevation: g.elevation_deg.to_radians(),
            },
            None => Gates::for_bandwidth(self.estimation.sbl.band_hz),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const COMPACT: &str = include_str!("../scenes/compact.scenario.json");

    #[test]
    fn presets() {
        assert_eq!(preset_height("M1"), Some(1.546));
        assert_eq!(preset_height("M3"), Some(2.235));
        assert_eq!(preset_height("L4"), Some(1.590));
        assert_eq!(preset_height("L5"), Some(1.592));
        for bad in ["M0", "M6", "X1", "", "M", "Mx"] {
            assert_eq!(preset_height(bad), None, "{bad}");
        }
    }

    #[test]
    fn shipped_compact_config_is_valid() {
        let cfg = ScenarioConfig::from_json(COMPACT, &scene_path()).unwrap();
        assert!(cfg.load_environment().is_ok());
        assert!(cfg.array.build().is_ok());
        assert!(cfg.beamform.grid().is_ok());
        let g = cfg.gates();
        assert!((g.delay - 2.0 / cfg.estimation.sbl.band_hz).abs() < 1e-24);
    }

    fn scene_path() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("scenes/compact.scenario.json")
    }

    fn with(edit: impl FnOnce(&mut serde_json::Value)) -> Result<ScenarioConfig> {
        let mut v: serde_json::Value = serde_json::from_str(COMPACT).unwrap();
        edit(&mut v);
        ScenarioConfig::from_json(&v.to_string(), &scene_path())
    }

    #[test]
    fn rejects_out_of_band_and_bad_values() {
        assert!(matches!(with(|v| v["array"]["f_c_hz"] = 2.5e9.into()), Err(Error::Config(_))));
        assert!(matches!(with(|v| v["synthesis"]["bandwidth_hz"] = 8e9.into()), Err(Error::Config(_))));
        assert!(matches!(with(|v| v["estimation"]["sbl"]["band_hz"] = 4e9.into()), Err(Error::Config(_))));
        assert!(matches!(with(|v| v["ue_preset"] = "M9".into()), Err(Error::Config(_))));
        assert!(matches!(with(|v| v["environment"] = "missing.json".into()), Err(Error::Config(_))));
        assert!(matches!(with(|v| v["estimation"]["subarray_size"] = 0.into()), Err(Error::Config(_))));
        assert!(matches!(with(|v| v["bogus"] = 1.into()), Err(Error::Parse { .. })));
    }

    #[test]
    fn preset_overrides_height() {
        let cfg = with(|v| v["ue_preset"] = "M2".into()).unwrap();
        assert_eq!(cfg.ue().z, 0.895);
        assert_eq!(cfg.ue().x, cfg.ue_position.x);
    }
}
