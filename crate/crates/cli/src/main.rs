//! `pla`: batch pipeline for physically-large-array channel analysis.
//!
//! Exit codes: 0 success, 2 configuration error, 3 invariant violation,
//! 4 missing dependency (an earlier stage has not been run).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pla_core::analysis::PredictionMode;
use pla_core::config::ScenarioConfig;
use pla_core::pipeline::{parse_stages, run_pipeline, Stage, MANIFEST};
use pla_core::{scenes, Error, Result, Vec3};

#[derive(Parser)]
#[command(name = "pla", version, about = "Channel synthesis and multipath analysis for physically large arrays")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the channel tensor (channel.cfr).
    Synth {
        #[command(flatten)]
        common: Common,
        /// RNG seed for diffuse and noise realizations.
        #[arg(long, required = true)]
        seed: u64,
    },
    /// Per-element geometric visibility of every image source.
    Visibility(Common),
    /// Spherical-wave beamforming spectrum and peaks.
    Beamform(Common),
    /// Per-subarray sparse Bayesian estimation.
    Estimate(Common),
    /// Associate estimates with predicted components; amplitude maps.
    Associate(Common),
    /// Energy report over subarrays.
    Report(Common),
    /// Run several stages in order.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stages, or `all`.
        #[arg(long, default_value = "all")]
        stages: String,
        /// Overrides the scenario seed; required if the stages include synth
        /// and the scenario has none.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the built-in scenarios.
    Scenarios,
}

#[derive(Args)]
struct Common {
    /// Scenario file (JSON).
    #[arg(long, conflicts_with = "scenario", required_unless_present = "scenario")]
    config: Option<PathBuf>,
    /// Built-in scenario name (see `pla scenarios`).
    #[arg(long)]
    scenario: Option<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results are identical for any value.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[command(flatten)]
    overrides: Overrides,
}

/// Command-line overrides of scenario fields.
#[derive(Args)]
struct Overrides {
    /// UE position `x,y,z` in meters.
    #[arg(long, value_parser = parse_point, allow_hyphen_values = true)]
    ue: Option<Vec3>,
    /// UE height preset (M1-M5, L1-L5).
    #[arg(long)]
    ue_preset: Option<String>,
    /// Synthesis SNR [dB].
    #[arg(long, allow_negative_numbers = true)]
    snr_db: Option<f64>,
    /// Number of synthesized frequencies.
    #[arg(long)]
    n_freqs: Option<usize>,
    /// Maximum reflection order (0-2).
    #[arg(long)]
    max_order: Option<usize>,
    /// Subarray edge length in elements.
    #[arg(long)]
    subarray_size: Option<usize>,
    /// Component budget per subarray.
    #[arg(long)]
    k_max: Option<usize>,
    /// Estimation bandwidth [Hz].
    #[arg(long)]
    band_hz: Option<f64>,
    /// Prediction mode: traced or image_only.
    #[arg(long, value_parser = parse_mode)]
    prediction: Option<PredictionMode>,
    /// Components listed in the energy report.
    #[arg(long)]
    top_k: Option<usize>,
}

fn parse_point(s: &str) -> std::result::Result<Vec3, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, z] => Ok(Vec3::new(x, y, z)),
        _ => Err(format!("expected x,y,z, got {} values", v.len())),
    }
}

fn parse_mode(s: &str) -> std::result::Result<PredictionMode, String> {
    match s {
        "traced" => Ok(PredictionMode::Traced),
        "image_only" => Ok(PredictionMode::ImageOnly),
        _ => Err(format!("expected `traced` or `image_only`, got `{s}`")),
    }
}

impl Common {
    fn load(&self, seed: Option<u64>) -> Result<ScenarioConfig> {
        let mut cfg = match (&self.config, &self.scenario) {
            (Some(path), _) => ScenarioConfig::load(path)?,
            (None, Some(name)) => scenes::scenario(name)?,
            (None, None) => return Err(Error::Config("pass --config or --scenario".into())),
        };
        let o = &self.overrides;
        if let Some(p) = o.ue {
            cfg.ue_position = p;
            cfg.ue_preset = None;
        }
        if let Some(p) = &o.ue_preset {
            cfg.ue_preset = Some(p.clone());
        }
        if let Some(v) = o.snr_db {
            cfg.synthesis.snr_db = Some(v);
        }
        if let Some(v) = o.n_freqs {
            cfg.synthesis.n_freqs = v;
        }
        if let Some(v) = o.max_order {
            cfg.synthesis.max_order = v;
        }
        if let Some(v) = o.subarray_size {
            cfg.estimation.subarray_size = v;
        }
        if let Some(v) = o.k_max {
            cfg.estimation.sbl.k_max = v;
        }
        if let Some(v) = o.band_hz {
            cfg.estimation.sbl.band_hz = v;
        }
        if let Some(v) = o.prediction {
            cfg.analysis.prediction = v;
        }
        if let Some(v) = o.top_k {
            cfg.analysis.top_k = v;
        }
        if seed.is_some() {
            cfg.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run(&self, stages: &[Stage], seed: Option<u64>) -> Result<()> {
        let cfg = self.load(seed)?;
        let manifest = run_pipeline(&cfg, stages, &self.out, self.jobs)?;
        for stage in stages {
            for entry in manifest.stages.get(stage.name()).into_iter().flatten() {
                println!("{stage:<10} {}", entry.file);
            }
        }
        println!("manifest   {}", self.out.join(MANIFEST).display());
        Ok(())
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common, seed } => common.run(&[Stage::Synth], Some(seed)),
        Command::Visibility(c) => c.run(&[Stage::Visibility], None),
        Command::Beamform(c) => c.run(&[Stage::Beamform], None),
        Command::Estimate(c) => c.run(&[Stage::Estimate], None),
        Command::Associate(c) => c.run(&[Stage::Associate], None),
        Command::Report(c) => c.run(&[Stage::Report], None),
        Command::Pipeline { common, stages, seed } => common.run(&parse_stages(&stages)?, seed),
        Command::Scenarios => {
            for name in scenes::scenario_names() {
                println!("{name}");
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
