//! Config-driven, seeded experiment pipelines: sample an atmosphere,
//! propagate it to the guide stars, add noise, reconstruct, evaluate, and
//! write the resulting tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, TomoError};
use crate::evaluation::{evaluate_reduced, fmt_f64, QualityReport};
use crate::geometry::{
    circular_asterism, Aperture, ApertureGrid, EvaluationGrid, GuideStar, LayerGrid, ARCMIN,
};
use crate::operator::{add_noise, covering_layer_grids, flop_cost, NoiseModel, TomographyOperator, WavefrontSet};
use crate::solvers::{
    reconstruct, ClusterPartition, Problem, ReconstructionResult, RhoInit, SolverConfig, Variant,
};
use crate::turbulence::{
    build_covariances, sample_atmosphere, AtmosphereProfile, LayerStack, TurbulenceStatistics,
    DEFAULT_MAX_NODES,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApertureConfig {
    /// Outer diameter in meters.
    pub diameter: f64,
    #[serde(default)]
    pub inner_diameter: f64,
    #[serde(default = "default_samples")]
    pub samples: usize,
}

fn default_samples() -> usize {
    21
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StarConfig {
    pub x_arcmin: f64,
    pub y_arcmin: f64,
    /// Beacon altitude for a laser guide star; natural star if absent.
    pub lgs_altitude: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsterismConfig {
    /// `"circle"` or `"on-axis"`; ignored when `stars` is given.
    pub preset: Option<String>,
    pub count: Option<usize>,
    pub radius_arcmin: Option<f64>,
    pub stars: Option<Vec<StarConfig>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    /// TOML file with `altitudes` and `weights`, relative to the config file.
    pub path: Option<String>,
    pub altitudes: Option<Vec<f64>>,
    pub weights: Option<Vec<f64>>,
    pub r0: f64,
    pub outer_scale: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    altitudes: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClustersConfig {
    /// Layer indices per cluster, counting from 1. One cluster if absent.
    pub groups: Option<Vec<Vec<usize>>>,
    /// Cluster energies; taken from the profile if absent.
    pub energies: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    /// Standard deviation of the simulated measurement noise.
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
    /// Noise level assumed by the solvers, `C_η = model_sigma² I`.
    #[serde(default = "one")]
    pub model_sigma: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            seed: 0,
            model_sigma: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    #[serde(default = "default_eval_grid")]
    pub grid: usize,
    #[serde(default = "default_fov")]
    pub fov_arcmin: f64,
}

fn default_eval_grid() -> usize {
    5
}

fn default_fov() -> f64 {
    3.0
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            grid: default_eval_grid(),
            fov_arcmin: default_fov(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Layer grid spacing per layer in meters; the aperture spacing if absent.
    pub layer_spacing: Option<Vec<f64>>,
    /// Largest layer grid, in nodes, that will be factored densely.
    pub max_layer_nodes: Option<usize>,
}

/// Seed list: an explicit array or a half-open range `"a..b"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SeedSpec {
    List(Vec<u64>),
    Range(String),
}

impl SeedSpec {
    pub fn expand(&self) -> Result<Vec<u64>> {
        match self {
            SeedSpec::List(v) if !v.is_empty() => Ok(v.clone()),
            SeedSpec::List(_) => Err(TomoError::Config("seed list is empty".into())),
            SeedSpec::Range(s) => parse_seed_range(s),
        }
    }
}

/// Parses `"a..b"` (half-open) or a single number.
pub fn parse_seed_range(s: &str) -> Result<Vec<u64>> {
    let bad = || TomoError::Config(format!("invalid seed range {s:?}, expected a..b"));
    let seeds: Vec<u64> = match s.split_once("..") {
        Some((a, b)) => {
            let a: u64 = a.trim().parse().map_err(|_| bad())?;
            let b: u64 = b.trim().parse().map_err(|_| bad())?;
            (a..b).collect()
        }
        None => vec![s.trim().parse().map_err(|_| bad())?],
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: SeedSpec,
    #[serde(default = "default_output")]
    pub output: String,
}

fn default_seeds() -> SeedSpec {
    SeedSpec::List(vec![0])
}

fn default_output() -> String {
    "out".into()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: default_seeds(),
            output: default_output(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareEntry {
    pub name: String,
    /// Keys overriding the base `[solver]` table.
    #[serde(default)]
    pub solver: toml::Table,
    pub clusters: Option<ClustersConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSelectConfig {
    /// Cluster whose layer is being chosen, counting from 1.
    pub cluster: usize,
    /// Layers kept in every baseline run, counting from 1.
    pub fixed: Vec<usize>,
    /// Candidate layers; the members of `cluster` if absent.
    pub candidates: Option<Vec<usize>>,
    /// Keys overriding the base `[solver]` table for the baseline runs.
    #[serde(default)]
    pub baseline: toml::Table,
    /// Noise level assumed by the selection run; `[noise].model_sigma` if
    /// absent. Baselines always use `[noise].model_sigma`.
    pub selector_model_sigma: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    pub stars: u64,
    pub full_layers: u64,
    pub reduced_layers: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub aperture: ApertureConfig,
    pub asterism: AsterismConfig,
    pub profile: ProfileConfig,
    #[serde(default)]
    pub clusters: ClustersConfig,
    #[serde(default)]
    pub solver: toml::Table,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub run: RunConfig,
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub compare: Vec<CompareEntry>,
    pub layer_select: Option<LayerSelectConfig>,
    #[serde(default)]
    pub cost: Vec<CostConfig>,
}

fn config_err(e: impl std::fmt::Display) -> TomoError {
    TomoError::Config(e.to_string())
}

/// Reads a config file and inlines a referenced profile file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| TomoError::io(path, e))?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}

/// Parses a config; a relative profile path is resolved against `base_dir`.
pub fn parse_config(text: &str, base_dir: &Path) -> Result<ExperimentConfig> {
    let mut config: ExperimentConfig = toml::from_str(text).map_err(config_err)?;
    if let Some(p) = config.profile.path.take() {
        if config.profile.altitudes.is_some() || config.profile.weights.is_some() {
            return Err(TomoError::Config(
                "profile gives both a path and inline values".into(),
            ));
        }
        let full = base_dir.join(&p);
        let text = fs::read_to_string(&full).map_err(|e| TomoError::io(&full, e))?;
        let file: ProfileFile = toml::from_str(&text).map_err(config_err)?;
        config.profile.altitudes = Some(file.altitudes);
        config.profile.weights = Some(file.weights);
    }
    config.solver_config()?;
    Ok(config)
}

/// Merges `overrides` into `base` key by key.
fn merged(base: &toml::Table, overrides: &toml::Table) -> toml::Table {
    let mut out = base.clone();
    for (k, v) in overrides {
        out.insert(k.clone(), v.clone());
    }
    out
}

fn solver_from_table(table: &toml::Table) -> Result<SolverConfig> {
    let config: SolverConfig = toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| TomoError::Config(format!("solver block: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn one_based(indices: &[usize], num_layers: usize) -> Result<Vec<usize>> {
    indices
        .iter()
        .map(|&i| {
            if i == 0 || i > num_layers {
                Err(TomoError::Config(format!(
                    "layer {i} out of range 1..={num_layers}"
                )))
            } else {
                Ok(i - 1)
            }
        })
        .collect()
}

impl ExperimentConfig {
    pub fn solver_config(&self) -> Result<SolverConfig> {
        solver_from_table(&self.solver)
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.run.seeds.expand()
    }

    /// Hash of everything that influences results; the `[run]` block is
    /// excluded.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.run = RunConfig::default();
        let text = toml::to_string(&canonical).expect("config serializes");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn profile(&self) -> Result<AtmosphereProfile> {
        let p = &self.profile;
        let (Some(alt), Some(w)) = (&p.altitudes, &p.weights) else {
            return Err(TomoError::Config(
                "profile needs altitudes and weights, inline or from a file".into(),
            ));
        };
        let stats = TurbulenceStatistics::new(p.r0, p.outer_scale)?;
        AtmosphereProfile::new(alt.clone(), w.clone(), stats)
    }

    pub fn stars(&self) -> Result<Vec<GuideStar>> {
        let a = &self.asterism;
        if let Some(stars) = &a.stars {
            if stars.is_empty() {
                return Err(TomoError::Config("asterism has no stars".into()));
            }
            return stars
                .iter()
                .map(|s| {
                    let dir = [s.x_arcmin * ARCMIN, s.y_arcmin * ARCMIN];
                    match s.lgs_altitude {
                        Some(h) => GuideStar::lgs(dir, h),
                        None => Ok(GuideStar::ngs(dir)),
                    }
                })
                .collect();
        }
        match a.preset.as_deref() {
            Some("circle") => circular_asterism(
                a.count.ok_or_else(|| config_err("circle asterism needs count"))?,
                a.radius_arcmin
                    .ok_or_else(|| config_err("circle asterism needs radius_arcmin"))?,
            ),
            Some("on-axis") => Ok(vec![GuideStar::on_axis()]),
            other => Err(TomoError::Config(format!(
                "unknown asterism preset {other:?}; use \"circle\", \"on-axis\" or explicit stars"
            ))),
        }
    }

    pub fn partition_from(&self, clusters: &ClustersConfig, profile: &AtmosphereProfile) -> Result<ClusterPartition> {
        let l = profile.len();
        let Some(groups) = &clusters.groups else {
            return ClusterPartition::single(l);
        };
        let groups = groups
            .iter()
            .map(|g| one_based(g, l))
            .collect::<Result<Vec<_>>>()?;
        match &clusters.energies {
            Some(d) => ClusterPartition::new(groups, d.clone(), l),
            None => ClusterPartition::from_profile(groups, &profile.rho),
        }
    }

    pub fn evaluation_grid(&self) -> Result<EvaluationGrid> {
        EvaluationGrid::square(self.evaluation.grid, self.evaluation.fov_arcmin)
    }

    /// Builds the geometry and checks every reference without factoring
    /// any covariance.
    pub fn validate(&self) -> Result<()> {
        let profile = self.profile()?;
        self.partition_from(&self.clusters, &profile)?;
        let (op, _) = self.operator(&profile)?;
        let cap = self.grid.max_layer_nodes.unwrap_or(DEFAULT_MAX_NODES);
        if let Some(n) = op.layer_sizes().into_iter().find(|n| *n > cap) {
            return Err(TomoError::TooLarge { nodes: n, cap });
        }
        for entry in &self.compare {
            solver_from_table(&merged(&self.solver, &entry.solver))?;
            if let Some(c) = &entry.clusters {
                self.partition_from(c, &profile)?;
            }
        }
        if let Some(ls) = &self.layer_select {
            self.layer_select_plan(ls, &profile)?;
        }
        if !(self.noise.sigma >= 0.0) || !(self.noise.model_sigma > 0.0) {
            return Err(TomoError::Config(
                "noise needs sigma >= 0 and model_sigma > 0".into(),
            ));
        }
        self.seeds()?;
        Ok(())
    }

    fn operator(&self, profile: &AtmosphereProfile) -> Result<(TomographyOperator, EvaluationGrid)> {
        let a = &self.aperture;
        let aperture = Aperture::new(a.inner_diameter / 2.0, a.diameter / 2.0)?;
        let ap_grid = ApertureGrid::new(aperture, a.samples)?;
        let stars = self.stars()?;
        let eval = self.evaluation_grid()?;
        let grids: Vec<LayerGrid> = match &self.grid.layer_spacing {
            None => covering_layer_grids(&ap_grid, &stars, &eval.directions, &profile.altitudes, None)?,
            Some(sp) if sp.len() == profile.len() => profile
                .altitudes
                .iter()
                .zip(sp)
                .map(|(&h, &s)| {
                    covering_layer_grids(&ap_grid, &stars, &eval.directions, &[h], Some(s))
                        .map(|mut g| g.remove(0))
                })
                .collect::<Result<_>>()?,
            Some(sp) => {
                return Err(TomoError::Config(format!(
                    "{} layer spacings for {} layers",
                    sp.len(),
                    profile.len()
                )))
            }
        };
        Ok((TomographyOperator::new(ap_grid, stars, grids)?, eval))
    }

    fn layer_select_plan(&self, ls: &LayerSelectConfig, profile: &AtmosphereProfile) -> Result<LayerSelectPlan> {
        let partition = self.partition_from(&self.clusters, profile)?;
        if ls.cluster == 0 || ls.cluster > partition.num_clusters() {
            return Err(TomoError::Config(format!(
                "layer_select cluster {} out of range 1..={}",
                ls.cluster,
                partition.num_clusters()
            )));
        }
        let members = partition.clusters()[ls.cluster - 1].clone();
        let candidates = match &ls.candidates {
            Some(c) => one_based(c, profile.len())?,
            None => members.clone(),
        };
        if candidates.is_empty() {
            return Err(TomoError::Config("layer_select has no candidates".into()));
        }
        let fixed = one_based(&ls.fixed, profile.len())?;
        if candidates.iter().any(|c| fixed.contains(c)) {
            return Err(TomoError::Config(
                "a layer_select candidate is also a fixed layer".into(),
            ));
        }
        let baseline = solver_from_table(&merged(&self.solver, &ls.baseline))?;
        let selector_noise = NoiseModel::new(ls.selector_model_sigma.unwrap_or(self.noise.model_sigma), 0)?;
        selector_noise.precision()?;
        Ok(LayerSelectPlan {
            cluster: ls.cluster - 1,
            fixed,
            candidates,
            baseline,
            selector_noise,
        })
    }
}

struct LayerSelectPlan {
    cluster: usize,
    fixed: Vec<usize>,
    candidates: Vec<usize>,
    baseline: SolverConfig,
    selector_noise: NoiseModel,
}

/// Everything that is shared by all trials of one config: the operator,
/// the factored layer covariances and the evaluation grid.
#[derive(Debug)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub hash: String,
    pub profile: AtmosphereProfile,
    pub problem: Problem,
    pub partition: ClusterPartition,
    pub eval: EvaluationGrid,
}

/// Mixes the noise seed with the trial seed.
fn noise_seed(base: u64, seed: u64) -> u64 {
    base ^ seed.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl Setup {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let profile = config.profile()?;
        let partition = config.partition_from(&config.clusters, &profile)?;
        let (op, eval) = config.operator(&profile)?;
        let cap = config.grid.max_layer_nodes.unwrap_or(DEFAULT_MAX_NODES);
        let covs = build_covariances(&op.layers, &profile.stats, cap)?;
        let noise = NoiseModel::new(config.noise.model_sigma, 0)?;
        let problem = Problem::new(op, covs, noise)?;
        Ok(Self {
            hash: config.hash(),
            config,
            profile,
            problem,
            partition,
            eval,
        })
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(load_config(path)?)
    }

    /// True layers and the noisy guide-star data for one seed.
    pub fn simulate(&self, seed: u64) -> Result<(LayerStack, WavefrontSet)> {
        let truth = sample_atmosphere(&self.profile, &self.problem.covs, seed)?;
        let clean = self.problem.op.forward(&truth);
        let noise = NoiseModel::new(self.config.noise.sigma, noise_seed(self.config.noise.seed, seed))?;
        Ok((truth, add_noise(&clean, &noise)))
    }

    fn trial(
        &self,
        problem: &Problem,
        truth: &LayerStack,
        data: &WavefrontSet,
        partition: &ClusterPartition,
        solver: &SolverConfig,
        seed: u64,
        label: &str,
    ) -> Result<Trial> {
        let start = Instant::now();
        let result = reconstruct(problem, data, partition, solver)?;
        let report = evaluate_reduced(truth, &self.problem.op, &result.phi, &problem.op, &self.eval)?;
        let wall_time = start.elapsed();
        Ok(Trial {
            record: RunRecord::new(&self.hash, seed, label, solver, &result, &report, wall_time),
            result,
            report,
        })
    }

    /// One seeded end-to-end run with a given solver and partition.
    pub fn run_with(&self, solver: &SolverConfig, partition: &ClusterPartition, seed: u64) -> Result<Trial> {
        let wrap = |e| TomoError::InRun { seed, source: Box::new(e) };
        let (truth, data) = self.simulate(seed).map_err(wrap)?;
        self.trial(&self.problem, &truth, &data, partition, solver, seed, solver.variant.name())
            .map_err(wrap)
    }
}

/// Summary of one reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub label: String,
    pub variant: Variant,
    pub alpha: f64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged: bool,
    pub final_objective: f64,
    pub nnz: usize,
    pub rho: Vec<f64>,
    pub center_strehl: f64,
    pub mean_strehl: f64,
    pub star_errors: Vec<f64>,
    pub star_residual_errors: Vec<f64>,
    /// Not written to any table, so outputs stay reproducible.
    pub wall_time: Duration,
}

impl RunRecord {
    fn new(
        hash: &str,
        seed: u64,
        label: &str,
        solver: &SolverConfig,
        result: &ReconstructionResult,
        report: &QualityReport,
        wall_time: Duration,
    ) -> Self {
        Self {
            config_hash: hash.to_string(),
            seed,
            label: label.to_string(),
            variant: solver.variant,
            alpha: solver.alpha,
            iterations: result.iterations,
            converged: result.converged,
            diverged: result.diverged,
            final_objective: result.objective_trace.last().copied().unwrap_or(f64::NAN),
            nnz: result.nonzero_weights(),
            rho: result.rho.clone(),
            center_strehl: report.center_strehl,
            mean_strehl: report.mean_strehl,
            star_errors: report.star_errors.clone(),
            star_residual_errors: report.star_residual_errors.clone(),
            wall_time,
        }
    }

    fn header(layers: usize, stars: usize) -> String {
        let mut h = String::from(
            "label,seed,variant,alpha,iterations,converged,diverged,final_objective,nnz_rho,center_strehl,mean_strehl",
        );
        for l in 1..=layers {
            write!(h, ",rho_{l}").unwrap();
        }
        for g in 1..=stars {
            write!(h, ",epsilon_{g}").unwrap();
        }
        for g in 1..=stars {
            write!(h, ",residual_norm_error_{g}").unwrap();
        }
        h
    }

    fn row(&self) -> String {
        let mut r = format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.label,
            self.seed,
            self.variant.name(),
            fmt_f64(self.alpha),
            self.iterations,
            self.converged,
            self.diverged,
            fmt_f64(self.final_objective),
            self.nnz,
            fmt_f64(self.center_strehl),
            fmt_f64(self.mean_strehl)
        );
        for v in self.rho.iter().chain(&self.star_errors).chain(&self.star_residual_errors) {
            write!(r, ",{}", fmt_f64(*v)).unwrap();
        }
        r
    }
}

/// A run's record plus the full solver output and quality report.
#[derive(Debug, Clone)]
pub struct Trial {
    pub record: RunRecord,
    pub result: ReconstructionResult,
    pub report: QualityReport,
}

/// Maps `f` over `items` on up to `threads` scoped threads, keeping order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|t| {
                let f = &f;
                scope.spawn(move || {
                    (t..items.len())
                        .step_by(threads)
                        .map(|i| (i, f(&items[i])))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("worker thread panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every slot filled")).collect()
}

fn table_preamble(hash: &str, seeds: &[u64]) -> String {
    let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
    format!("# config_hash={hash}\n# seeds={}\n", list.join(" "))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| TomoError::io(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| TomoError::io(&path, e))?;
    Ok(path)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Seeded runs of the configured solver.
pub fn run_single(setup: &Setup, seed: u64) -> Result<Trial> {
    setup.run_with(&setup.config.solver_config()?, &setup.partition, seed)
}

pub fn run_batch(setup: &Setup, seeds: &[u64], threads: usize) -> Result<Vec<Trial>> {
    par_map(seeds, threads, |&s| run_single(setup, s))
        .into_iter()
        .collect()
}

/// Writes `runs.csv` plus per-seed trace, weight and quality tables.
pub fn write_runs(setup: &Setup, trials: &[Trial], dir: &Path) -> Result<()> {
    let seeds: Vec<u64> = trials.iter().map(|t| t.record.seed).collect();
    let pre = table_preamble(&setup.hash, &seeds);
    let mut runs = pre.clone();
    runs += &RunRecord::header(setup.profile.len(), setup.problem.op.num_stars());
    runs.push('\n');
    for t in trials {
        runs += &t.record.row();
        runs.push('\n');
        let sub = dir.join(format!("seed_{}", t.record.seed));
        let mut trace = pre.clone() + "outer_iteration,objective\n";
        for (k, v) in t.result.objective_trace.iter().enumerate() {
            writeln!(trace, "{},{}", k + 1, fmt_f64(*v)).unwrap();
        }
        write_file(&sub, "trace.csv", &trace)?;
        let mut rho = pre.clone() + "layer,altitude_m,rho,rho_true\n";
        for (l, r) in t.result.rho.iter().enumerate() {
            writeln!(
                rho,
                "{},{},{},{}",
                l + 1,
                fmt_f64(setup.profile.altitudes[l]),
                fmt_f64(*r),
                fmt_f64(setup.profile.rho[l])
            )
            .unwrap();
        }
        write_file(&sub, "rho.csv", &rho)?;
        let mut quality = Vec::new();
        t.report.write_csv(&mut quality).expect("writing to memory");
        write_file(&sub, "quality.csv", &(pre.clone() + &String::from_utf8(quality).expect("utf8")))?;
    }
    write_file(dir, "runs.csv", &runs)?;
    Ok(())
}

/// Per-α aggregates of a regularization sweep.
#[derive(Debug, Clone)]
pub struct SweepTable {
    pub hash: String,
    pub seeds: Vec<u64>,
    pub alphas: Vec<f64>,
    /// `records[a][s]` for alpha index `a` and seed index `s`.
    pub records: Vec<Vec<RunRecord>>,
}

impl SweepTable {
    pub fn mean_nnz(&self, alpha_index: usize) -> f64 {
        let r = &self.records[alpha_index];
        r.iter().map(|x| x.nnz as f64).sum::<f64>() / r.len() as f64
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let pre = table_preamble(&self.hash, &self.seeds);
        let layers = self.records[0][0].rho.len();
        let stars = self.records[0][0].star_errors.len();
        let mut runs = pre.clone() + &RunRecord::header(layers, stars) + "\n";
        let mut summary = pre.clone()
            + "alpha,center_strehl_mean,center_strehl_std,mean_strehl_mean,mean_strehl_std,epsilon_mean,epsilon_std,nnz_rho_mean,nnz_rho_std\n";
        let mut rho = pre.clone() + "alpha,layer,rho_mean,rho_std\n";
        let mut dat = pre.clone() + "# series: center_strehl, mean_strehl, epsilon, nnz_rho\n# alpha value\n";
        let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
        for (alpha, recs) in self.alphas.iter().zip(&self.records) {
            for r in recs {
                runs += &r.row();
                runs.push('\n');
            }
            let center: Vec<f64> = recs.iter().map(|r| r.center_strehl).collect();
            let mean: Vec<f64> = recs.iter().map(|r| r.mean_strehl).collect();
            let eps: Vec<f64> = recs
                .iter()
                .map(|r| r.star_errors.iter().sum::<f64>() / r.star_errors.len() as f64)
                .collect();
            let nnz: Vec<f64> = recs.iter().map(|r| r.nnz as f64).collect();
            let mut line = fmt_f64(*alpha);
            for (key, v) in [("center_strehl", &center), ("mean_strehl", &mean), ("epsilon", &eps), ("nnz_rho", &nnz)] {
                let (m, s) = mean_std(v);
                write!(line, ",{},{}", fmt_f64(m), fmt_f64(s)).unwrap();
                series.entry(key).or_default().push((*alpha, m));
            }
            summary += &line;
            summary.push('\n');
            for l in 0..layers {
                let v: Vec<f64> = recs.iter().map(|r| r.rho[l]).collect();
                let (m, s) = mean_std(&v);
                writeln!(rho, "{},{},{},{}", fmt_f64(*alpha), l + 1, fmt_f64(m), fmt_f64(s)).unwrap();
            }
        }
        for key in ["center_strehl", "mean_strehl", "epsilon", "nnz_rho"] {
            writeln!(dat, "# {key}").unwrap();
            for (a, v) in &series[key] {
                writeln!(dat, "{} {}", fmt_f64(*a), fmt_f64(*v)).unwrap();
            }
            dat += "\n\n";
        }
        write_file(dir, "sweep_runs.csv", &runs)?;
        write_file(dir, "sweep_summary.csv", &summary)?;
        write_file(dir, "sweep_rho.csv", &rho)?;
        write_file(dir, "sweep.dat", &dat)?;
        Ok(())
    }
}

/// Runs the configured solver for every `α × seed` pair.
pub fn sweep_alpha(setup: &Setup, alphas: &[f64], seeds: &[u64], threads: usize) -> Result<SweepTable> {
    if alphas.is_empty() || seeds.is_empty() {
        return Err(TomoError::Config("sweep needs at least one alpha and one seed".into()));
    }
    let base = setup.config.solver_config()?;
    let jobs: Vec<(usize, u64)> = (0..alphas.len())
        .flat_map(|a| seeds.iter().map(move |&s| (a, s)))
        .collect();
    let out = par_map(&jobs, threads, |&(a, s)| {
        let solver = SolverConfig {
            alpha: alphas[a],
            ..base.clone()
        };
        setup.run_with(&solver, &setup.partition, s).map(|t| t.record)
    });
    let mut records = vec![Vec::with_capacity(seeds.len()); alphas.len()];
    for ((a, _), r) in jobs.iter().zip(out) {
        records[*a].push(r?);
    }
    Ok(SweepTable {
        hash: setup.hash.clone(),
        seeds: seeds.to_vec(),
        alphas: alphas.to_vec(),
        records,
    })
}

/// Several solvers on identical atmospheres.
#[derive(Debug, Clone)]
pub struct CompareTable {
    pub hash: String,
    pub seeds: Vec<u64>,
    pub names: Vec<String>,
    /// `records[k][s]` for solver `k` and seed index `s`.
    pub records: Vec<Vec<RunRecord>>,
    /// Radial Strehl curve per solver, averaged over seeds.
    pub radial: Vec<Vec<(f64, f64)>>,
}

impl CompareTable {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let pre = table_preamble(&self.hash, &self.seeds);
        let layers = self.records[0][0].rho.len();
        let stars = self.records[0][0].star_errors.len();
        let mut runs = pre.clone() + &RunRecord::header(layers, stars) + "\n";
        for recs in &self.records {
            for r in recs {
                runs += &r.row();
                runs.push('\n');
            }
        }
        let mut radial = pre.clone() + "solver,separation_arcmin,strehl_mean\n";
        let mut dat = pre.clone() + "# separation_arcmin strehl_mean, one block per solver\n";
        for (name, curve) in self.names.iter().zip(&self.radial) {
            writeln!(dat, "# {name}").unwrap();
            for (r, s) in curve {
                writeln!(radial, "{name},{},{}", fmt_f64(*r), fmt_f64(*s)).unwrap();
                writeln!(dat, "{} {}", fmt_f64(*r), fmt_f64(*s)).unwrap();
            }
            dat += "\n\n";
        }
        write_file(dir, "compare_runs.csv", &runs)?;
        write_file(dir, "compare_radial.csv", &radial)?;
        write_file(dir, "compare_radial.dat", &dat)?;
        Ok(())
    }
}

pub fn compare_solvers(setup: &Setup, seeds: &[u64], threads: usize) -> Result<CompareTable> {
    let cfg = &setup.config;
    if cfg.compare.len() < 2 {
        return Err(TomoError::Config(
            "compare needs at least two [[compare]] entries".into(),
        ));
    }
    let mut entries = Vec::new();
    for e in &cfg.compare {
        let solver = solver_from_table(&merged(&cfg.solver, &e.solver))?;
        let partition = match &e.clusters {
            Some(c) => cfg.partition_from(c, &setup.profile)?,
            None => setup.partition.clone(),
        };
        entries.push((e.name.clone(), solver, partition));
    }
    let per_seed = par_map(seeds, threads, |&seed| -> Result<Vec<Trial>> {
        let wrap = |e| TomoError::InRun { seed, source: Box::new(e) };
        let (truth, data) = setup.simulate(seed).map_err(wrap)?;
        entries
            .iter()
            .map(|(name, solver, partition)| {
                setup
                    .trial(&setup.problem, &truth, &data, partition, solver, seed, name)
                    .map_err(wrap)
            })
            .collect()
    });
    let mut records = vec![Vec::new(); entries.len()];
    let mut curves: Vec<Vec<Vec<(f64, f64)>>> = vec![Vec::new(); entries.len()];
    for trials in per_seed {
        for (k, t) in trials?.into_iter().enumerate() {
            curves[k].push(t.report.radial.clone());
            records[k].push(t.record);
        }
    }
    let radial = curves
        .iter()
        .map(|cs| {
            (0..cs[0].len())
                .map(|b| (cs[0][b].0, cs.iter().map(|c| c[b].1).sum::<f64>() / cs.len() as f64))
                .collect()
        })
        .collect();
    Ok(CompareTable {
        hash: setup.hash.clone(),
        seeds: seeds.to_vec(),
        names: entries.into_iter().map(|e| e.0).collect(),
        records,
        radial,
    })
}

/// Per-seed outcome of the layer-selection study.
#[derive(Debug, Clone)]
pub struct LayerSelectRow {
    pub seed: u64,
    /// Layer of the studied cluster that the sparse solver kept (largest
    /// weight), if any.
    pub survivor: Option<usize>,
    /// Surviving layers of every cluster.
    pub survivors: Vec<usize>,
    /// Baseline records, one per candidate.
    pub baselines: Vec<RunRecord>,
}

impl LayerSelectRow {
    /// Candidate with the highest field-mean Strehl.
    pub fn best_candidate(&self, candidates: &[usize]) -> usize {
        let mut best = 0;
        for (k, r) in self.baselines.iter().enumerate() {
            if r.mean_strehl > self.baselines[best].mean_strehl {
                best = k;
            }
        }
        candidates[best]
    }

    pub fn survivor_is_best(&self, candidates: &[usize]) -> bool {
        self.survivor == Some(self.best_candidate(candidates))
    }
}

#[derive(Debug, Clone)]
pub struct LayerSelectTable {
    pub hash: String,
    pub seeds: Vec<u64>,
    /// Candidate layers, counting from 0.
    pub candidates: Vec<usize>,
    pub rows: Vec<LayerSelectRow>,
}

impl LayerSelectTable {
    /// Fraction of seeds where the survivor is the best candidate.
    pub fn hit_rate(&self) -> f64 {
        let hits = self.rows.iter().filter(|r| r.survivor_is_best(&self.candidates)).count();
        hits as f64 / self.rows.len() as f64
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let pre = table_preamble(&self.hash, &self.seeds);
        let label = |l: Option<usize>| l.map_or("none".to_string(), |l| (l + 1).to_string());
        let mut runs = pre.clone()
            + "seed,survivor,candidate,center_strehl,mean_strehl,epsilon_mean,residual_norm_error_mean,is_survivor,is_best\n";
        for row in &self.rows {
            let best = row.best_candidate(&self.candidates);
            for (c, r) in self.candidates.iter().zip(&row.baselines) {
                let n = r.star_errors.len() as f64;
                writeln!(
                    runs,
                    "{},{},{},{},{},{},{},{},{}",
                    row.seed,
                    label(row.survivor),
                    c + 1,
                    fmt_f64(r.center_strehl),
                    fmt_f64(r.mean_strehl),
                    fmt_f64(r.star_errors.iter().sum::<f64>() / n),
                    fmt_f64(r.star_residual_errors.iter().sum::<f64>() / n),
                    row.survivor == Some(*c),
                    *c == best
                )
                .unwrap();
            }
        }
        let mut summary = pre.clone() + "candidate,mean_strehl_mean,center_strehl_mean,times_survivor,times_best\n";
        let mut dat = pre.clone() + "# candidate_layer mean_strehl_mean\n";
        for (k, c) in self.candidates.iter().enumerate() {
            let ms: Vec<f64> = self.rows.iter().map(|r| r.baselines[k].mean_strehl).collect();
            let cs: Vec<f64> = self.rows.iter().map(|r| r.baselines[k].center_strehl).collect();
            let surv = self.rows.iter().filter(|r| r.survivor == Some(*c)).count();
            let best = self.rows.iter().filter(|r| r.best_candidate(&self.candidates) == *c).count();
            writeln!(
                summary,
                "{},{},{},{surv},{best}",
                c + 1,
                fmt_f64(mean_std(&ms).0),
                fmt_f64(mean_std(&cs).0)
            )
            .unwrap();
            writeln!(dat, "{} {}", c + 1, fmt_f64(mean_std(&ms).0)).unwrap();
        }
        writeln!(summary, "# survivor_is_best_rate={}", fmt_f64(self.hit_rate())).unwrap();
        write_file(dir, "layer_select.csv", &runs)?;
        write_file(dir, "layer_select_summary.csv", &summary)?;
        write_file(dir, "layer_select.dat", &dat)?;
        Ok(())
    }
}

/// Runs the sparse solver to pick one layer per cluster, then scores every
/// candidate of the studied cluster with a fixed-weight baseline on the
/// reduced layer set.
pub fn layer_selection_study(setup: &Setup, seeds: &[u64], threads: usize) -> Result<LayerSelectTable> {
    let cfg = &setup.config;
    let ls = cfg
        .layer_select
        .as_ref()
        .ok_or_else(|| config_err("config has no [layer_select] block"))?;
    let plan = cfg.layer_select_plan(ls, &setup.profile)?;
    let selector = cfg.solver_config()?;
    let selector_problem = setup.problem.with_noise(plan.selector_noise)?;
    let energy_of = |l: usize| {
        let k = setup
            .partition
            .clusters()
            .iter()
            .position(|c| c.contains(&l))
            .expect("partition covers every layer");
        setup.partition.energies()[k]
    };
    let mut subproblems = Vec::new();
    for &c in &plan.candidates {
        let mut keep = plan.fixed.clone();
        keep.push(c);
        keep.sort_unstable();
        let weights: Vec<f64> = keep.iter().map(|&l| energy_of(l)).collect();
        let sub = setup.problem.select_layers(&keep)?;
        let partition = ClusterPartition::single(keep.len())?;
        let solver = SolverConfig {
            rho_init: RhoInit::Explicit(weights),
            update_rho: false,
            ..plan.baseline.clone()
        };
        subproblems.push((sub, partition, solver));
    }
    let rows = par_map(seeds, threads, |&seed| -> Result<LayerSelectRow> {
        let wrap = |e| TomoError::InRun { seed, source: Box::new(e) };
        let (truth, data) = setup.simulate(seed).map_err(wrap)?;
        let sel = reconstruct(&selector_problem, &data, &setup.partition, &selector).map_err(wrap)?;
        let survivors: Vec<usize> = (0..sel.rho.len()).filter(|&l| sel.rho[l] > 0.0).collect();
        let survivor = setup.partition.clusters()[plan.cluster]
            .iter()
            .copied()
            .filter(|&l| sel.rho[l] > 0.0)
            .max_by(|&a, &b| sel.rho[a].total_cmp(&sel.rho[b]).then(b.cmp(&a)));
        let baselines = subproblems
            .iter()
            .zip(&plan.candidates)
            .map(|((sub, part, solver), c)| {
                setup
                    .trial(sub, &truth, &data, part, solver, seed, &format!("layer_{}", c + 1))
                    .map(|t| t.record)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(wrap)?;
        Ok(LayerSelectRow {
            seed,
            survivor,
            survivors,
            baselines,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(LayerSelectTable {
        hash: setup.hash.clone(),
        seeds: seeds.to_vec(),
        candidates: plan.candidates,
        rows,
    })
}

/// Per-iteration flop counts for a full and a reduced layer set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostRow {
    pub stars: u64,
    pub full_layers: u64,
    pub reduced_layers: u64,
    /// Coefficients of `n`.
    pub full_cost: i64,
    pub reduced_cost: i64,
    /// Ratio rounded to one decimal.
    pub speedup: f64,
}

pub fn cost_report(stars: u64, full_layers: u64, reduced_layers: u64) -> Result<CostRow> {
    if stars == 0 || full_layers == 0 || reduced_layers == 0 {
        return Err(TomoError::Config("cost report needs positive counts".into()));
    }
    let full_cost = flop_cost(stars, full_layers, 1);
    let reduced_cost = flop_cost(stars, reduced_layers, 1);
    let speedup = (10.0 * full_cost as f64 / reduced_cost as f64).round() / 10.0;
    Ok(CostRow {
        stars,
        full_layers,
        reduced_layers,
        full_cost,
        reduced_cost,
        speedup,
    })
}

pub fn write_cost(rows: &[CostRow], dir: &Path) -> Result<PathBuf> {
    let mut s = String::from("stars,full_layers,reduced_layers,full_cost_per_n,reduced_cost_per_n,speedup\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.1}",
            r.stars, r.full_layers, r.reduced_layers, r.full_cost, r.reduced_cost, r.speedup
        )
        .unwrap();
    }
    write_file(dir, "cost.csv", &s)
}
