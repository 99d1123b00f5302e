//! Config-driven command line entry point.
//!
//! Exit codes: 0 when every asserted verdict passes, 1 when one fails, 2 for
//! configuration errors (nothing is written), 3 for numerical failures.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coefficient_map::{evaluate_coefficient, CoefficientField, MapSpec};
use crate::corrector::{corrector_growth_scan, solve_corrector_with, solve_flux_corrector_with, GrowthScanSpec, SolverOptions};
use crate::error::{Error, Result};
use crate::fft::Spectral;
use crate::gaussian_field::{empirical_covariance, sample_field_with, CovarianceModel};
use crate::grid::LatticeGrid;
use crate::malliavin::{run_suite, SuiteOptions};
use crate::statistics::{
    covariance_structure_check, degeneracy_scan, normality_distances, run_ensemble, variance_scaling_fit,
    DegeneracyConfig, EnsembleConfig, EnsembleReport, Verdict,
};

pub const ARTIFACT_SCHEMA_VERSION: u32 = 1;
pub const MIN_ASSERTED_SAMPLES: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "homlab", version, about = "Correctors, commutators and their fluctuations in Gaussian random media")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML experiment file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads (overrides the config).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Base seed (overrides the config).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Sample fields and their empirical covariance.
    SampleField,
    /// Solve the corrector problem on one medium.
    SolveCorrector,
    /// Corrector size across grid sizes.
    GrowthScan,
    /// Ensemble of commutator functionals.
    CommutatorScan,
    /// Covariance of two functionals against the regime's limit.
    CovarianceCheck,
    /// Distances of functionals to the normal law.
    Normality,
    /// Homogenized coefficient and K over shifted fields.
    DegeneracyScan,
    /// Finite-dimensional Malliavin identities.
    MalliavinCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::SampleField => "sample-field",
            Command::SolveCorrector => "solve-corrector",
            Command::GrowthScan => "growth-scan",
            Command::CommutatorScan => "commutator-scan",
            Command::CovarianceCheck => "covariance-check",
            Command::Normality => "normality",
            Command::DegeneracyScan => "degeneracy-scan",
            Command::MalliavinCheck => "malliavin-check",
        }
    }
}

fn default_kappa() -> usize {
    1
}

fn default_decay() -> f64 {
    20.0
}

fn default_samples() -> usize {
    1
}

fn default_tolerance() -> f64 {
    crate::corrector::DEFAULT_TOLERANCE
}

fn default_exponent_tolerance() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub dim: usize,
    pub side: usize,
    pub beta: f64,
    #[serde(default = "default_kappa")]
    pub kappa: usize,
    #[serde(default = "default_decay")]
    pub decay_constant: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    pub seed: u64,
    /// Lags for the empirical covariance; defaults to `0..4` along each axis.
    #[serde(default)]
    pub lags: Vec<Vec<i64>>,
}

/// Coefficient field for `solve-corrector`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Medium {
    /// `a0(G(x) + shift)` for one sample of the Gaussian model.
    Random {
        dim: usize,
        side: usize,
        beta: f64,
        #[serde(default = "default_decay")]
        decay_constant: f64,
        map: MapSpec,
        seed: u64,
        #[serde(default)]
        sample_index: u64,
        #[serde(default)]
        shift: Vec<f64>,
    },
    /// Two phases stacked along the first axis in `d = 2`.
    Laminate { side: usize, values: [f64; 2] },
    /// Two-phase checkerboard of period `side` in `d = 2`.
    Checkerboard { side: usize, values: [f64; 2] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectorSection {
    pub medium: Medium,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub flux_corrector: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrowthSection {
    pub dim: usize,
    pub beta: f64,
    #[serde(default = "default_decay")]
    pub decay_constant: f64,
    pub map: MapSpec,
    pub sides: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Asserted bound on the relative spread of `E[|phi|^2]^{1/2} / mu(N)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ratio_variation: Option<f64>,
    /// Asserted growth exponent against `log(1 + N)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_exponent: Option<f64>,
    #[serde(default = "default_exponent_tolerance")]
    pub exponent_tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalingSection {
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceSection {
    pub f: String,
    pub g: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalitySection {
    /// Asserted bound on the KS statistic at the smallest `eps`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_ks: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MalliavinSection {
    #[serde(default = "default_cases")]
    pub cases: usize,
    #[serde(default = "default_max_variables")]
    pub max_variables: usize,
    #[serde(default = "default_max_degree")]
    pub max_degree: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_cases() -> usize {
    SuiteOptions::default().cases
}

fn default_max_variables() -> usize {
    SuiteOptions::default().max_variables
}

fn default_max_degree() -> usize {
    SuiteOptions::default().max_degree
}

impl Default for MalliavinSection {
    fn default() -> Self {
        let d = SuiteOptions::default();
        Self {
            cases: d.cases,
            max_variables: d.max_variables,
            max_degree: d.max_degree,
            seed: d.seed,
        }
    }
}

/// One experiment file. Each subcommand reads the sections it needs.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    #[serde(default)]
    pub quiet: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<FieldSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corrector: Option<CorrectorSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub growth: Option<GrowthSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaling: Option<ScalingSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariance: Option<CovarianceSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normality: Option<NormalitySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degeneracy: Option<DegeneracyConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub malliavin: Option<MalliavinSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// SHA-256 of everything that affects results; `out`, `workers` and
    /// `quiet` are left out.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = None;
        canonical.workers = None;
        canonical.quiet = false;
        hex::encode(Sha256::digest(serde_json::to_vec(&canonical).expect("config serializes")))
    }

    /// Overwrite the seed of every section that has one.
    pub fn override_seed(&mut self, seed: u64) {
        if let Some(f) = &mut self.field {
            f.seed = seed;
        }
        if let Some(CorrectorSection {
            medium: Medium::Random { seed: s, .. },
            ..
        }) = &mut self.corrector
        {
            *s = seed;
        }
        if let Some(g) = &mut self.growth {
            g.seed = seed;
        }
        if let Some(e) = &mut self.ensemble {
            e.seed = seed;
        }
        if let Some(d) = &mut self.degeneracy {
            d.seed = seed;
        }
        if let Some(m) = &mut self.malliavin {
            m.seed = seed;
        }
    }

    /// Seed of the section used by `command`.
    pub fn seed_for(&self, command: Command) -> Option<u64> {
        match command {
            Command::SampleField => self.field.as_ref().map(|f| f.seed),
            Command::SolveCorrector => match &self.corrector {
                Some(CorrectorSection {
                    medium: Medium::Random { seed, .. },
                    ..
                }) => Some(*seed),
                _ => None,
            },
            Command::GrowthScan => self.growth.as_ref().map(|g| g.seed),
            Command::CommutatorScan | Command::CovarianceCheck | Command::Normality => {
                self.ensemble.as_ref().map(|e| e.seed)
            }
            Command::DegeneracyScan => self.degeneracy.as_ref().map(|d| d.seed),
            Command::MalliavinCheck => Some(self.malliavin.clone().unwrap_or_default().seed),
        }
    }

    /// Check everything `command` needs without running it.
    pub fn validate(&self, command: Command) -> Result<()> {
        if let Some(c) = self.command {
            if c != command {
                return Err(Error::Config(format!(
                    "config is for `{}`, invoked as `{}`",
                    c.name(),
                    command.name()
                )));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be positive".into()));
        }
        let missing = |name: &str| Error::Config(format!("`{}` needs a [{name}] section", command.name()));
        match command {
            Command::SampleField => {
                let f = self.field.as_ref().ok_or_else(|| missing("field"))?;
                let grid = LatticeGrid::new(f.dim, f.side).map_err(config_error)?;
                CovarianceModel::build(f.beta, f.kappa, f.decay_constant, grid).map_err(config_error)?;
                if f.samples == 0 {
                    return Err(Error::Config("samples must be positive".into()));
                }
                if f.lags.iter().any(|l| l.len() != f.dim) {
                    return Err(Error::Config("every lag needs one entry per axis".into()));
                }
            }
            Command::SolveCorrector => {
                let c = self.corrector.as_ref().ok_or_else(|| missing("corrector"))?;
                SolverOptions::with_tolerance(c.tolerance).validate().map_err(config_error)?;
                match &c.medium {
                    Medium::Random {
                        dim,
                        side,
                        beta,
                        decay_constant,
                        map,
                        shift,
                        ..
                    } => {
                        let m = map.build(*dim).map_err(config_error)?;
                        let grid = LatticeGrid::new(*dim, *side).map_err(config_error)?;
                        CovarianceModel::build(*beta, m.kappa(), *decay_constant, grid).map_err(config_error)?;
                        if !shift.is_empty() && shift.len() != m.kappa() {
                            return Err(Error::Config("shift length must equal kappa".into()));
                        }
                    }
                    Medium::Laminate { side, values } | Medium::Checkerboard { side, values } => {
                        LatticeGrid::new(2, *side).map_err(config_error)?;
                        if values.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                            return Err(Error::Config("phase values must lie in (0, 1]".into()));
                        }
                    }
                }
            }
            Command::GrowthScan => {
                let g = self.growth.as_ref().ok_or_else(|| missing("growth"))?;
                let m = g.map.build(g.dim).map_err(config_error)?;
                SolverOptions::with_tolerance(g.tolerance).validate().map_err(config_error)?;
                if g.sides.len() < 3 || g.samples < 2 {
                    return Err(Error::Config("growth scan needs at least 3 sides and 2 samples".into()));
                }
                for &side in &g.sides {
                    let grid = LatticeGrid::new(g.dim, side).map_err(config_error)?;
                    CovarianceModel::build(g.beta, m.kappa(), g.decay_constant, grid).map_err(config_error)?;
                }
            }
            Command::CommutatorScan | Command::CovarianceCheck | Command::Normality => {
                let e = self.ensemble.as_ref().ok_or_else(|| missing("ensemble"))?;
                e.validate()?;
                e.build_model().map_err(config_error)?;
                let asserted = match command {
                    Command::CommutatorScan => self.scaling.is_some(),
                    Command::CovarianceCheck => true,
                    _ => self.normality.as_ref().is_some_and(|n| n.max_ks.is_some()),
                };
                if asserted && e.samples < MIN_ASSERTED_SAMPLES {
                    return Err(Error::Config(format!(
                        "runs with an asserted verdict need at least {MIN_ASSERTED_SAMPLES} samples"
                    )));
                }
                if command == Command::CovarianceCheck {
                    let c = self.covariance.as_ref().ok_or_else(|| missing("covariance"))?;
                    for id in [&c.f, &c.g] {
                        if !e.test_functions.iter().any(|f| &f.id == id) {
                            return Err(Error::Config(format!("unknown test function `{id}`")));
                        }
                    }
                }
                if command == Command::Normality && e.samples < crate::statistics::MIN_NORMALITY_SAMPLES {
                    return Err(Error::Config(format!(
                        "normality needs at least {} samples",
                        crate::statistics::MIN_NORMALITY_SAMPLES
                    )));
                }
                if command == Command::CommutatorScan && self.scaling.is_some() && e.epsilons.len() < 3 {
                    return Err(Error::Config("a scaling verdict needs at least 3 epsilons".into()));
                }
            }
            Command::DegeneracyScan => {
                let d = self.degeneracy.as_ref().ok_or_else(|| missing("degeneracy"))?;
                d.validate()?;
                let grid = LatticeGrid::new(d.dim, d.side).map_err(config_error)?;
                CovarianceModel::build(d.beta, 1, d.decay_constant, grid).map_err(config_error)?;
            }
            Command::MalliavinCheck => {
                let m = self.malliavin.clone().unwrap_or_default();
                if m.cases == 0 || m.max_variables == 0 || m.max_degree == 0 {
                    return Err(Error::Config("malliavin suite sizes must be positive".into()));
                }
            }
        }
        Ok(())
    }
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

/// JSON artifact envelope.
#[derive(Debug, Serialize)]
struct Artifact<'a, T: Serialize> {
    schema_version: u32,
    config_hash: &'a str,
    data: T,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub command: Command,
    pub config_sha256: String,
    pub config_file: String,
    pub seed: Option<u64>,
    pub version: String,
    pub wall_time_seconds: f64,
    pub verdict_passed: bool,
    pub artifacts: Vec<String>,
}

struct Output {
    dir: PathBuf,
    hash: String,
    written: Vec<String>,
}

impl Output {
    fn json<T: Serialize>(&mut self, name: &str, data: T) -> Result<()> {
        let envelope = Artifact {
            schema_version: ARTIFACT_SCHEMA_VERSION,
            config_hash: &self.hash,
            data,
        };
        fs::write(self.dir.join(name), serde_json::to_string_pretty(&envelope)?)?;
        self.written.push(name.into());
        Ok(())
    }

    fn file(&mut self, name: &str, write: impl FnOnce(BufWriter<fs::File>) -> Result<()>) -> Result<()> {
        write(BufWriter::new(fs::File::create(self.dir.join(name))?))?;
        self.written.push(name.into());
        Ok(())
    }
}

/// Parse arguments, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            code
        }
    }
}

pub fn run(cli: &Cli) -> i32 {
    let mut config = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("{e}");
                return 2;
            }
        },
        None if cli.command == Command::MalliavinCheck => ExperimentConfig::default(),
        None => {
            eprintln!("config error: `{}` needs --config", cli.command.name());
            return 2;
        }
    };
    if let Some(seed) = cli.seed {
        config.override_seed(seed);
    }
    if let Some(out) = &cli.out {
        config.out = Some(out.clone());
    }
    if let Some(w) = cli.workers {
        config.workers = Some(w);
    }
    config.quiet |= cli.quiet;
    if let Err(e) = config.validate(cli.command) {
        eprintln!("{e}");
        return 2;
    }
    let dir = config.out.clone().unwrap_or_else(|| PathBuf::from("homlab-out"));
    let start = Instant::now();
    let hash = config.hash();
    if let Err(e) = fs::create_dir_all(&dir) {
        eprintln!("cannot create {}: {e}", dir.display());
        return 3;
    }
    let mut out = Output {
        dir: dir.clone(),
        hash: hash.clone(),
        written: Vec::new(),
    };
    let outcome = config
        .to_toml()
        .and_then(|text| Ok(fs::write(dir.join("config.toml"), text)?))
        .and_then(|_| execute(cli.command, &config, &mut out));
    let passed = match outcome {
        Ok(p) => p,
        Err(e) => {
            eprintln!("numerical failure: {e}");
            return 3;
        }
    };
    let manifest = Manifest {
        schema_version: ARTIFACT_SCHEMA_VERSION,
        command: cli.command,
        config_sha256: hash,
        config_file: "config.toml".into(),
        seed: config.seed_for(cli.command),
        version: env!("CARGO_PKG_VERSION").into(),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        verdict_passed: passed,
        artifacts: out.written.clone(),
    };
    let written = serde_json::to_string_pretty(&manifest)
        .map_err(Error::from)
        .and_then(|text| Ok(fs::write(dir.join("manifest.json"), text)?));
    if let Err(e) = written {
        eprintln!("cannot write manifest: {e}");
        return 3;
    }
    if !config.quiet {
        println!(
            "{}: {} ({} artifacts in {})",
            cli.command.name(),
            if passed { "pass" } else { "FAIL" },
            out.written.len(),
            dir.display()
        );
    }
    if passed {
        0
    } else {
        1
    }
}

fn say(config: &ExperimentConfig, line: impl AsRef<str>) {
    if !config.quiet {
        println!("{}", line.as_ref());
    }
}

/// Returns whether every asserted verdict passed.
fn execute(command: Command, config: &ExperimentConfig, out: &mut Output) -> Result<bool> {
    let workers = config.workers.unwrap_or(1);
    match command {
        Command::SampleField => {
            let f = config.field.as_ref().expect("validated");
            let grid = LatticeGrid::new(f.dim, f.side)?;
            let model = CovarianceModel::build(f.beta, f.kappa, f.decay_constant, grid)?;
            let spectral = Spectral::new(grid);
            let samples: Vec<_> = crate::parallel::ordered_map(workers, f.samples, |m| {
                sample_field_with(&model, &spectral, f.seed, m as u64)
            })?;
            for s in &samples {
                out.file(&format!("field_{}.bin", s.sample_index), |w| s.write_binary(w))?;
            }
            out.file("field_0.csv", |w| samples[0].write_csv(w))?;
            if samples.len() >= 2 {
                let lags = if f.lags.is_empty() {
                    (0..f.dim)
                        .flat_map(|axis| {
                            (0..4).map(move |r| {
                                let mut lag = vec![0i64; f.dim];
                                lag[axis] = r;
                                lag
                            })
                        })
                        .collect()
                } else {
                    f.lags.clone()
                };
                let table = empirical_covariance(&samples, &lags)?;
                out.json("covariance.json", &table)?;
            }
            say(config, format!("sampled {} fields on {}^{}", samples.len(), f.side, f.dim));
            Ok(true)
        }
        Command::SolveCorrector => {
            let c = config.corrector.as_ref().expect("validated");
            let coeff = build_medium(&c.medium)?;
            let spectral = Spectral::new(coeff.grid);
            let mut sol = solve_corrector_with(&coeff, &SolverOptions::with_tolerance(c.tolerance), &spectral)?;
            if c.flux_corrector {
                solve_flux_corrector_with(&mut sol, &spectral)?;
            }
            #[derive(Serialize)]
            struct Summary<'a> {
                abar_per: &'a [f64],
                residual: f64,
                iterations: &'a [usize],
                mean_phi_squared: f64,
                sigma_divergence_error: Option<f64>,
            }
            out.json(
                "abar.json",
                Summary {
                    abar_per: &sol.abar_per,
                    residual: sol.residual,
                    iterations: &sol.iterations,
                    mean_phi_squared: sol.mean_phi_squared(),
                    sigma_divergence_error: sol.has_sigma().then(|| sol.sigma_divergence_error()),
                },
            )?;
            out.json("corrector.json", &sol)?;
            let (seed, index) = match &c.medium {
                Medium::Random { seed, sample_index, .. } => (*seed, *sample_index),
                _ => (0, 0),
            };
            let phi = sol.phi_field(seed, index);
            out.file("phi.bin", |w| phi.write_binary(w))?;
            say(config, format!("abar_per = {:?}", sol.abar_per));
            Ok(true)
        }
        Command::GrowthScan => {
            let g = config.growth.as_ref().expect("validated");
            let map = g.map.build(g.dim)?;
            let table = corrector_growth_scan(&GrowthScanSpec {
                map: map.as_ref(),
                beta: g.beta,
                decay_constant: g.decay_constant,
                sides: &g.sides,
                samples: g.samples,
                seed: g.seed,
                workers,
                solver: SolverOptions::with_tolerance(g.tolerance),
            })?;
            let mut passed = true;
            if let Some(bound) = g.max_ratio_variation {
                passed &= table.ratio_variation.is_some_and(|v| v < bound);
            }
            if let Some(expected) = g.expected_exponent {
                passed &= table.exponent.is_some_and(|e| (e - expected).abs() <= g.exponent_tolerance);
            }
            out.file("growth.csv", |w| table.write_csv(w))?;
            out.json("growth.json", &table)?;
            say(
                config,
                format!("exponent {:?}, ratio variation {:?}", table.exponent, table.ratio_variation),
            );
            Ok(passed)
        }
        Command::CommutatorScan => {
            let report = ensemble(config, out, workers)?;
            let mut passed = true;
            if let Some(s) = &config.scaling {
                let fits = (0..report.config.test_functions.len())
                    .map(|f| variance_scaling_fit(&report, f, s.tolerance))
                    .collect::<Result<Vec<_>>>()?;
                for fit in &fits {
                    say(
                        config,
                        format!("{}: slope {:.3} (expected {}) {:?}", fit.f_id, fit.slope, fit.expected_slope, fit.verdict),
                    );
                    passed &= fit.verdict != Verdict::Fail;
                }
                out.json("scaling.json", &fits)?;
            }
            Ok(passed)
        }
        Command::CovarianceCheck => {
            let report = ensemble(config, out, workers)?;
            let c = config.covariance.as_ref().expect("validated");
            let f = report.f_index(&c.f).expect("validated");
            let g = report.f_index(&c.g).expect("validated");
            let check = covariance_structure_check(&report, f, g)?;
            say(config, format!("{:?} regime: {:?}", check.regime, check.verdict));
            out.json("covariance.json", &check)?;
            Ok(check.verdict != Verdict::Fail)
        }
        Command::Normality => {
            let report = ensemble(config, out, workers)?;
            #[derive(Serialize)]
            struct Row {
                epsilon: f64,
                f_id: String,
                distances: crate::statistics::NormalityDistances,
            }
            let rows = report
                .tables
                .iter()
                .map(|t| {
                    Ok(Row {
                        epsilon: t.epsilon,
                        f_id: t.f_id.clone(),
                        distances: normality_distances(&t.values)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let mut passed = true;
            if let Some(bound) = config.normality.as_ref().and_then(|n| n.max_ks) {
                let smallest = report.config.epsilons.iter().cloned().fold(f64::INFINITY, f64::min);
                passed = rows
                    .iter()
                    .filter(|r| r.epsilon == smallest)
                    .all(|r| r.distances.kolmogorov_smirnov < bound);
            }
            for r in &rows {
                say(
                    config,
                    format!(
                        "eps {} {}: W1 {:.4}, KS {:.4}",
                        r.epsilon, r.f_id, r.distances.wasserstein1, r.distances.kolmogorov_smirnov
                    ),
                );
            }
            out.json("normality.json", &rows)?;
            Ok(passed)
        }
        Command::DegeneracyScan => {
            let d = config.degeneracy.as_ref().expect("validated");
            let report = degeneracy_scan(d, workers)?;
            out.file("degeneracy.csv", |mut w| {
                use std::io::Write;
                writeln!(w, "z,axis,abar,abar_stderr,K,K_stderr,slope,identity_error")?;
                for r in &report.rows {
                    for i in 0..r.abar.len() {
                        let opt = |v: &Option<Vec<f64>>| v.as_ref().map(|s| format!("{:e}", s[i])).unwrap_or_default();
                        writeln!(
                            w,
                            "{},{},{:e},{:e},{:e},{:e},{},{}",
                            r.z,
                            i,
                            r.abar[i],
                            r.abar_stderr[i],
                            r.k[i],
                            r.k_stderr[i],
                            opt(&r.slope),
                            opt(&r.identity_error)
                        )?;
                    }
                }
                Ok(())
            })?;
            say(
                config,
                format!(
                    "z_max {}, K(z_max) = {:.3e} +/- {:.1e}, identity {}, harmonic bound {}",
                    report.z_max, report.k_at_max, report.k_at_max_stderr, report.identity_holds, report.harmonic_bound_holds
                ),
            );
            let passed = report.identity_holds && report.harmonic_bound_holds;
            out.json("degeneracy.json", &report)?;
            Ok(passed)
        }
        Command::MalliavinCheck => {
            let m = config.malliavin.clone().unwrap_or_default();
            let records = run_suite(&SuiteOptions {
                cases: m.cases,
                max_variables: m.max_variables,
                max_degree: m.max_degree,
                seed: m.seed,
            })?;
            let mut identities: Vec<String> = records.iter().map(|r| r.identity.clone()).collect();
            identities.dedup();
            identities.sort();
            identities.dedup();
            #[derive(Serialize)]
            struct Summary {
                identity: String,
                checks: usize,
                failed: usize,
                max_rel_gap: f64,
            }
            let summary: Vec<Summary> = identities
                .into_iter()
                .map(|id| {
                    let rs: Vec<_> = records.iter().filter(|r| r.identity == id).collect();
                    Summary {
                        checks: rs.len(),
                        failed: rs.iter().filter(|r| !r.passed).count(),
                        max_rel_gap: rs.iter().map(|r| r.rel_gap).fold(0.0, f64::max),
                        identity: id,
                    }
                })
                .collect();
            for s in &summary {
                say(
                    config,
                    format!("{}: {} checks, {} failed, max rel. gap {:.2e}", s.identity, s.checks, s.failed, s.max_rel_gap),
                );
            }
            let passed = records.iter().all(|r| r.passed);
            #[derive(Serialize)]
            struct Suite<'a> {
                summary: Vec<Summary>,
                records: &'a [crate::malliavin::VerificationRecord],
            }
            out.json(
                "malliavin.json",
                Suite {
                    summary,
                    records: &records,
                },
            )?;
            Ok(passed)
        }
    }
}

fn ensemble(config: &ExperimentConfig, out: &mut Output, workers: usize) -> Result<EnsembleReport> {
    let e = config.ensemble.as_ref().expect("validated");
    let report = run_ensemble(e, workers)?;
    out.json("report.json", &report)?;
    out.file("ensemble.csv", |w| report.write_csv(w))?;
    say(
        config,
        format!(
            "{} samples ({} failed), abar = {:?}",
            report.records.len(),
            report.failures.len(),
            report.homogenized.mean
        ),
    );
    Ok(report)
}

pub fn build_medium(medium: &Medium) -> Result<CoefficientField> {
    match medium {
        Medium::Random {
            dim,
            side,
            beta,
            decay_constant,
            map,
            seed,
            sample_index,
            shift,
        } => {
            let map = map.build(*dim)?;
            let grid = LatticeGrid::new(*dim, *side)?;
            let model = CovarianceModel::build(*beta, map.kappa(), *decay_constant, grid)?;
            let g = sample_field_with(&model, &Spectral::new(grid), *seed, *sample_index);
            let shift = if shift.is_empty() { vec![0.0; map.kappa()] } else { shift.clone() };
            evaluate_coefficient(map.as_ref(), &g, &shift)
        }
        Medium::Laminate { side, values } => {
            let grid = LatticeGrid::new(2, *side)?;
            let half = side / 2;
            CoefficientField::from_scalar_fn(grid, "laminate", |c| if c[0] < half { values[0] } else { values[1] })
        }
        Medium::Checkerboard { side, values } => {
            let grid = LatticeGrid::new(2, *side)?;
            let half = side / 2;
            CoefficientField::from_scalar_fn(grid, "checkerboard", |c| {
                if (c[0] < half) == (c[1] < half) {
                    values[0]
                } else {
                    values[1]
                }
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::commutator::TestFunction;
    use crate::statistics::AbarMode;

    fn full_config() -> ExperimentConfig {
        ExperimentConfig {
            command: Some(Command::CovarianceCheck),
            out: Some("runs/a".into()),
            workers: Some(2),
            quiet: true,
            ensemble: Some(EnsembleConfig {
                dim: 2,
                beta: 1.0,
                decay_constant: 20.0,
                map: MapSpec::Sigmoid { lambda: 0.25 },
                side: 64,
                epsilons: vec![1.0 / 16.0],
                test_functions: vec![TestFunction::slot(2, 0, 0, 0.9, vec![0.0, 0.0]).unwrap()],
                samples: 100,
                seed: 1,
                shift: vec![],
                abar_mode: AbarMode::EnsembleMean,
                tolerance: 1e-9,
            }),
            covariance: Some(CovarianceSection {
                f: "bump00".into(),
                g: "bump00".into(),
            }),
            growth: Some(GrowthSection {
                dim: 2,
                beta: 4.0,
                decay_constant: 20.0,
                map: MapSpec::Diagonal {
                    profiles: vec![
                        crate::coefficient_map::ScalarProfile::Sigmoid { lambda: 0.3 },
                        crate::coefficient_map::ScalarProfile::Constant { value: 0.5 },
                    ],
                },
                sides: vec![16, 32, 64],
                samples: 4,
                seed: 2,
                tolerance: 1e-8,
                max_ratio_variation: Some(0.2),
                expected_exponent: None,
                exponent_tolerance: 0.1,
            }),
            corrector: Some(CorrectorSection {
                medium: Medium::Laminate {
                    side: 32,
                    values: [1.0, 0.5],
                },
                tolerance: 1e-10,
                flux_corrector: true,
            }),
            malliavin: Some(MalliavinSection::default()),
            ..Default::default()
        }
    }

    #[test]
    fn toml_round_trip() {
        let config = full_config();
        let text = config.to_toml().unwrap();
        let parsed = ExperimentConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.hash(), config.hash());
        assert!(config.validate(Command::CovarianceCheck).is_ok());
    }

    #[test]
    fn unknown_keys_and_mismatched_command_are_rejected() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("[field]\ndim = 2\nside = 16\nbeta = 4.0\nseed = 0\ncolour = 1").is_err());
        let config = full_config();
        assert!(matches!(config.validate(Command::Normality), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let mut config = full_config();
        config.override_seed(99);
        assert_eq!(config.seed_for(Command::CommutatorScan), Some(99));
        assert_eq!(config.seed_for(Command::GrowthScan), Some(99));
        assert_eq!(config.seed_for(Command::MalliavinCheck), Some(99));
    }
}
