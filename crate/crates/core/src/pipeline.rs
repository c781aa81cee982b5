//! Batch workflow: synth → visibility → beamform → estimate → associate →
//! report. Each stage reads its inputs from the output directory, writes
//! its artifacts there and records them with content hashes in
//! `manifest.json`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Axis;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{amplitude_maps, associate, energy_report, mismatch_score, predict, subarray_visibility, Association};
use crate::array::{partition_subarrays, ArrayGeometry, Subarray};
use crate::beamformer::{find_peaks, marginals, spherical_spectrum};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::geometry::{compute_image_sources, visibility_mask, EnvironmentModel, ImageSource};
use crate::io::{self, Manifest, ManifestEntry};
use crate::sbl::{sbl_estimate, SubarrayResult};
use crate::synth::{noise_realization, noise_var_for_snr, synthesize, ChannelTensor, FreqGrid, SynthesisSetup};

pub const MANIFEST: &str = "manifest.json";
pub const TENSOR_FILE: &str = "channel.cfr";
pub const VISIBILITY_FILE: &str = "visibility.json";
pub const ESTIMATES_FILE: &str = "estimates.jsonl";
pub const ASSOCIATIONS_FILE: &str = "associations.json";
pub const REPORT_CSV: &str = "energy_report.csv";
pub const REPORT_TXT: &str = "energy_report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Synth,
    Visibility,
    Beamform,
    Estimate,
    Associate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Synth,
        Stage::Visibility,
        Stage::Beamform,
        Stage::Estimate,
        Stage::Associate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Visibility => "visibility",
            Stage::Beamform => "beamform",
            Stage::Estimate => "estimate",
            Stage::Associate => "associate",
            Stage::Report => "report",
        }
    }

    /// `(stage, file)` pairs this stage reads.
    fn inputs(self) -> &'static [(Stage, &'static str)] {
        match self {
            Stage::Synth | Stage::Visibility => &[],
            Stage::Beamform | Stage::Estimate => &[(Stage::Synth, TENSOR_FILE)],
            Stage::Associate => &[(Stage::Estimate, ESTIMATES_FILE), (Stage::Visibility, VISIBILITY_FILE)],
            Stage::Report => &[(Stage::Estimate, ESTIMATES_FILE), (Stage::Associate, ASSOCIATIONS_FILE)],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (expected one of synth, visibility, beamform, estimate, associate, report)")))
    }
}

/// Parse a comma-separated stage list; `all` selects every stage.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    let mut out = Vec::new();
    for part in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        if part == "all" {
            out.extend(Stage::ALL);
        } else {
            out.push(part.parse()?);
        }
    }
    if out.is_empty() {
        return Err(Error::Config("no stages selected".into()));
    }
    out.sort();
    out.dedup();
    Ok(out)
}

/// Everything the stages share, built once from the config.
struct Context<'a> {
    cfg: &'a ScenarioConfig,
    out: &'a Path,
    env: EnvironmentModel,
    arr: ArrayGeometry,
    subarrays: Vec<Subarray>,
    sources: Vec<ImageSource>,
}

impl Context<'_> {
    fn path(&self, file: &str) -> PathBuf {
        self.out.join(file)
    }

    fn require(&self, stage: Stage) -> Result<()> {
        for (dep, file) in stage.inputs() {
            if !self.path(file).exists() {
                return Err(Error::Dependency {
                    stage: dep.name().into(),
                    detail: format!(
                        "`{stage}` reads {} in {}; run the `{dep}` stage first",
                        file,
                        self.out.display()
                    ),
                });
            }
        }
        Ok(())
    }

    fn write(&self, produced: &mut Vec<PathBuf>, file: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(file);
        io::write_file(&path, bytes)?;
        produced.push(path);
        Ok(())
    }

    fn load_tensor(&self) -> Result<ChannelTensor> {
        let t = io::load_tensor(&self.path(TENSOR_FILE))?;
        let stale = |what: &str| Error::Dependency {
            stage: Stage::Synth.name().into(),
            detail: format!("{TENSOR_FILE} does not match the scenario ({what}); rerun `synth`"),
        };
        if t.n_elements() != self.arr.len() || t.element_positions != self.arr.element_positions {
            return Err(stale("array geometry"));
        }
        if t.metadata.f_c != self.arr.f_c {
            return Err(stale("carrier"));
        }
        Ok(t)
    }

    fn load_results(&self) -> Result<Vec<SubarrayResult>> {
        let path = self.path(ESTIMATES_FILE);
        let results = io::parse_results_jsonl(&io::read_text(&path)?, &path)?;
        if results.len() != self.subarrays.len()
            || results.iter().zip(&self.subarrays).any(|(r, s)| r.subarray_index != s.index)
        {
            return Err(Error::Dependency {
                stage: Stage::Estimate.name().into(),
                detail: format!("{ESTIMATES_FILE} does not match the subarray tiling; rerun `estimate`"),
            });
        }
        Ok(results)
    }
}

/// File-name-safe form of a component id.
fn file_stem(component_id: &str) -> String {
    component_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_+.".contains(c) { c } else { '_' })
        .collect()
}

fn synth(ctx: &Context<'_>, produced: &mut Vec<PathBuf>) -> Result<()> {
    let cfg = ctx.cfg;
    let seed = cfg
        .seed
        .ok_or_else(|| Error::Config("synthesis needs a seed (set `seed` or pass --seed)".into()))?;
    let freqs = cfg.freqs()?;
    let setup = SynthesisSetup {
        env: &ctx.env,
        ue: cfg.ue(),
        ue_antenna: cfg.ue_antenna,
        array: &ctx.arr,
        element_pattern: cfg.array.pattern,
        freqs,
        max_order: cfg.synthesis.max_order,
        diffuse: cfg.synthesis.diffuse,
        noise_var: 0.0,
        seed,
        scenario: cfg.name.clone(),
    };
    let mut syn = synthesize(&setup)?;
    if let Some(snr) = cfg.synthesis.snr_db {
        let nv = noise_var_for_snr(&syn.tensor.h, snr);
        syn.tensor.h += &noise_realization(nv, freqs.count, ctx.arr.len(), seed);
    }
    let path = ctx.path(TENSOR_FILE);
    io::save_tensor(&syn.tensor, &path)?;
    produced.push(path);
    Ok(())
}

fn visibility(ctx: &Context<'_>, produced: &mut Vec<PathBuf>) -> Result<()> {
    let mask = visibility_mask(&ctx.env, &ctx.arr.element_positions, &ctx.sources);
    ctx.write(produced, VISIBILITY_FILE, io::visibility_json(&mask).as_bytes())?;
    for id in mask.component_ids() {
        let grid = subarray_visibility(&mask, id, &ctx.subarrays)?;
        let file = format!("visibility/{}.csv", file_stem(id));
        ctx.write(produced, &file, io::bool_grid_csv(&grid).as_bytes())?;
    }
    Ok(())
}

/// Every `stride`-th frequency of the tensor.
fn decimate(t: &ChannelTensor, stride: usize) -> Result<ChannelTensor> {
    if stride == 1 {
        return Ok(t.clone());
    }
    let keep: Vec<usize> = (0..t.n_freqs()).step_by(stride).collect();
    let freqs = FreqGrid::new(t.freqs.start, t.freqs.step * stride as f64, keep.len())?;
    ChannelTensor::new(freqs, t.h.select(Axis(1), &keep), t.element_positions.clone(), t.metadata.clone())
}

#[derive(Serialize)]
struct PeakRecord {
    azimuth_deg: f64,
    elevation_deg: f64,
    distance_m: f64,
    power: f64,
    power_db: f64,
}

fn beamform(ctx: &Context<'_>, produced: &mut Vec<PathBuf>) -> Result<()> {
    let bf = &ctx.cfg.beamform;
    let tensor = decimate(&ctx.load_tensor()?, bf.freq_stride)?;
    let grid = bf.grid()?;
    let spec = spherical_spectrum(&tensor, &ctx.arr, &grid)?;
    let m = marginals(&spec);
    let deg = |v: &[f64]| v.iter().map(|x| x.to_degrees()).collect::<Vec<_>>();
    let (az, el, dist) = (deg(&grid.azimuths), deg(&grid.elevations), grid.distances.clone());
    let planes = [
        ("az_el", &m.az_el, ("azimuth_deg", &az), ("elevation_deg", &el)),
        ("az_dist", &m.az_dist, ("azimuth_deg", &az), ("distance_m", &dist)),
        ("el_dist", &m.el_dist, ("elevation_deg", &el), ("distance_m", &dist)),
    ];
    for (name, values, (rn, ra), (cn, ca)) in planes {
        for (suffix, db) in [("", false), ("_db", true)] {
            let csv = io::grid_csv(values, (rn, ra), (cn, ca), db);
            ctx.write(produced, &format!("beamform/{name}{suffix}.csv"), csv.as_bytes())?;
        }
    }
    let peaks = find_peaks(&spec, bf.peak_db_below_max, bf.max_peaks);
    let top = peaks.first().map_or(1.0, |p| p.power);
    let records: Vec<PeakRecord> = peaks
        .iter()
        .map(|p| PeakRecord {
            azimuth_deg: p.azimuth.to_degrees(),
            elevation_deg: p.elevation.to_degrees(),
            distance_m: p.distance,
            power: p.power,
            power_db: 10.0 * (p.power / top).log10(),
        })
        .collect();
    ctx.write(produced, "beamform/peaks.json", io::to_json(&records).as_bytes())
}

fn estimate(ctx: &Context<'_>, produced: &mut Vec<PathBuf>) -> Result<()> {
    let sbl = &ctx.cfg.estimation.sbl;
    let tensor = ctx.load_tensor()?.sub_band(ctx.arr.f_c, sbl.band_hz)?;
    let results = ctx
        .subarrays
        .par_iter()
        .map(|sub| sbl_estimate(&tensor.gather(&sub.element_indices), sub, &ctx.arr, &tensor.freqs, sbl))
        .collect::<Result<Vec<_>>>()?;
    ctx.write(produced, ESTIMATES_FILE, io::results_jsonl(&results).as_bytes())
}

#[derive(Serialize)]
struct MismatchRecord {
    component_id: String,
    geometric_visible_subarrays: usize,
    estimated_present_subarrays: usize,
    mismatch: f64,
}

fn associate_stage(ctx: &Context<'_>, produced: &mut Vec<PathBuf>) -> Result<()> {
    let results = ctx.load_results()?;
    let gates = ctx.cfg.gates();
    let mode = ctx.cfg.analysis.prediction;
    let associations: Vec<Association> = ctx
        .subarrays
        .par_iter()
        .zip(results.par_iter())
        .map(|(sub, r)| {
            let preds = predict(&ctx.env, sub, &ctx.arr, &ctx.sources, mode);
            associate(sub.index, &r.estimates, &preds, &gates)
        })
        .collect();
    ctx.write(produced, ASSOCIATIONS_FILE, io::associations_json(&associations).as_bytes())?;

    let vis_path = ctx.path(VISIBILITY_FILE);
    let mask = io::parse_visibility_json(&io::read_text(&vis_path)?, &vis_path)?;
    let ids: Vec<String> = ctx.sources.iter().map(|s| s.component_id.clone()).collect();
    let maps = amplitude_maps(&ids, &associations, &ctx.subarrays, ctx.arr.f_c, ctx.cfg.analysis.compensate_pathloss)?;
    let mut mismatch = Vec::with_capacity(maps.len());
    for map in &maps {
        ctx.write(produced, &format!("maps/{}.csv", file_stem(&map.component_id)), io::map_csv(&map.grid).as_bytes())?;
        let geo = subarray_visibility(&mask, &map.component_id, &ctx.subarrays).map_err(|_| Error::Dependency {
            stage: Stage::Visibility.name().into(),
            detail: format!("{VISIBILITY_FILE} has no component `{}`; rerun `visibility`", map.component_id),
        })?;
        mismatch.push(MismatchRecord {
            component_id: map.component_id.clone(),
            geometric_visible_subarrays: geo.cells.iter().filter(|v| **v).count(),
            estimated_present_subarrays: map.grid.cells.iter().filter(|v| v.is_some()).count(),
            mismatch: mismatch_score(&geo, &map.grid)?,
        });
    }
    ctx.write(produced, "mismatch.json", io::to_json(&mismatch).as_bytes())
}

fn report(ctx: &Context<'_>, produced: &mut Vec<PathBuf>) -> Result<()> {
    let results = ctx.load_results()?;
    let path = ctx.path(ASSOCIATIONS_FILE);
    let associations = io::parse_associations_json(&io::read_text(&path)?, &path)?;
    if associations.len() != results.len() {
        return Err(Error::Dependency {
            stage: Stage::Associate.name().into(),
            detail: format!("{ASSOCIATIONS_FILE} does not match {ESTIMATES_FILE}; rerun `associate`"),
        });
    }
    let rep = energy_report(&results, &associations, ctx.cfg.analysis.top_k)?;
    ctx.write(produced, REPORT_CSV, rep.to_csv().as_bytes())?;
    ctx.write(produced, REPORT_TXT, rep.to_table().as_bytes())
}

/// Run `stages` (in pipeline order) for `cfg`, writing into `out` with at
/// most `jobs` worker threads. Outputs do not depend on `jobs`.
pub fn run_pipeline(cfg: &ScenarioConfig, stages: &[Stage], out: &Path, jobs: usize) -> Result<Manifest> {
    cfg.validate()?;
    if jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {jobs} worker threads: {e}")))?;
    pool.install(|| run_stages(cfg, stages, out))
}

fn run_stages(cfg: &ScenarioConfig, stages: &[Stage], out: &Path) -> Result<Manifest> {
    let env = cfg.load_environment()?;
    let arr = cfg.array.build()?;
    let subarrays = partition_subarrays(&arr, cfg.estimation.subarray_size)?;
    let sources = compute_image_sources(&env, cfg.ue(), cfg.synthesis.max_order)?;
    let ctx = Context {
        cfg,
        out,
        env,
        arr,
        subarrays,
        sources,
    };
    let manifest_path = out.join(MANIFEST);
    let mut manifest = Manifest::load_or_default(&manifest_path)?;
    if manifest.scenario != cfg.name || manifest.seed != cfg.seed {
        manifest = Manifest::default();
    }
    manifest.scenario = cfg.name.clone();
    manifest.seed = cfg.seed;

    let mut ordered = stages.to_vec();
    ordered.sort();
    ordered.dedup();
    for stage in ordered {
        ctx.require(stage)?;
        let mut produced = Vec::new();
        match stage {
            Stage::Synth => synth(&ctx, &mut produced)?,
            Stage::Visibility => visibility(&ctx, &mut produced)?,
            Stage::Beamform => beamform(&ctx, &mut produced)?,
            Stage::Estimate => estimate(&ctx, &mut produced)?,
            Stage::Associate => associate_stage(&ctx, &mut produced)?,
            Stage::Report => report(&ctx, &mut produced)?,
        }
        let entries = produced
            .iter()
            .map(|p| {
                Ok(ManifestEntry {
                    file: io::relative(out, p),
                    sha256: io::sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        manifest.stages.insert(stage.name().into(), entries);
        io::write_file(&manifest_path, manifest.to_json().as_bytes())?;
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("bogus".parse::<Stage>().is_err());
        assert_eq!(parse_stages("report, synth,synth").unwrap(), vec![Stage::Synth, Stage::Report]);
        assert_eq!(parse_stages("all").unwrap(), Stage::ALL.to_vec());
        assert!(parse_stages(" , ").is_err());
    }

    #[test]
    fn file_stems_are_safe() {
        assert_eq!(file_stem("wall_right+floor"), "wall_right+floor");
        assert_eq!(file_stem("a/b c"), "a_b_c");
    }

    #[test]
    fn decimation_keeps_every_stride_th_frequency() {
        let freqs = FreqGrid::new(6e9, 1e6, 10).unwrap();
        let h = ndarray::Array2::from_shape_fn((2, 10), |(m, n)| crate::Complex64::new(m as f64, n as f64));
        let meta = crate::synth::TensorMetadata {
            f_c: 6e9,
            bandwidth: 1e7,
            scenario: "t".into(),
            seed: 0,
        };
        let t = ChannelTensor::new(freqs, h, vec![crate::Vec3::ZERO; 2], meta).unwrap();
        let d = decimate(&t, 3).unwrap();
        assert_eq!(d.n_freqs(), 4);
        assert_eq!(d.freqs.step, 3e6);
        assert_eq!(d.h[[1, 2]], crate::Complex64::new(1.0, 6.0));
        assert_eq!(d.freqs.freq(3), t.freqs.freq(9));
    }
}
