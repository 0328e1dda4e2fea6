//! Joint reconstruction of layers and their strength profile: the MAP
//! functionals, the closed-form weight update, the clustered proximal
//! threshold, and the alternating, dense and shrinkage-thresholding solvers.

use std::sync::OnceLock;

use faer::linalg::solvers::Solve;
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::operator::{
    estimate_spectral_norm, estimate_whitened_spectral_norm, NoiseModel, SpectralEstimate,
    TomographyOperator, WavefrontSet,
};
use crate::turbulence::{dot, LayerCovariance, LayerStack};

/// Disjoint groups of layers with prescribed cumulative strengths.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterPartition {
    clusters: Vec<Vec<usize>>,
    energies: Vec<f64>,
    num_layers: usize,
}

impl ClusterPartition {
    pub fn new(clusters: Vec<Vec<usize>>, energies: Vec<f64>, num_layers: usize) -> Result<Self> {
        if clusters.is_empty() || clusters.len() != energies.len() {
            return Err(TomoError::InvalidPartition(format!(
                "{} clusters but {} energies",
                clusters.len(),
                energies.len()
            )));
        }
        let mut seen = vec![false; num_layers];
        for cluster in &clusters {
            if cluster.is_empty() {
                return Err(TomoError::InvalidPartition("empty cluster".into()));
            }
            for &l in cluster {
                if l >= num_layers {
                    return Err(TomoError::InvalidPartition(format!(
                        "layer {l} out of range for {num_layers} layers"
                    )));
                }
                if std::mem::replace(&mut seen[l], true) {
                    return Err(TomoError::InvalidPartition(format!(
                        "layer {l} belongs to more than one cluster"
                    )));
                }
            }
        }
        if let Some(l) = seen.iter().position(|s| !s) {
            return Err(TomoError::InvalidPartition(format!(
                "layer {l} is not in any cluster"
            )));
        }
        if energies.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(TomoError::InvalidPartition(
                "cluster energies must be positive".into(),
            ));
        }
        let total: f64 = energies.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(TomoError::InvalidPartition(format!(
                "cluster energies sum to {total}, not 1"
            )));
        }
        Ok(Self {
            clusters,
            energies,
            num_layers,
        })
    }

    /// One cluster holding every layer with energy 1.
    pub fn single(num_layers: usize) -> Result<Self> {
        Self::new(vec![(0..num_layers).collect()], vec![1.0], num_layers)
    }

    /// Cluster energies taken as the per-cluster sums of a profile.
    pub fn from_profile(clusters: Vec<Vec<usize>>, rho: &[f64]) -> Result<Self> {
        let mut energies = Vec::with_capacity(clusters.len());
        for c in &clusters {
            let mut d = 0.0;
            for &l in c {
                d += *rho.get(l).ok_or_else(|| {
                    TomoError::InvalidPartition(format!("layer {l} out of range"))
                })?;
            }
            energies.push(d);
        }
        let total: f64 = energies.iter().sum();
        if total > 0.0 {
            energies.iter_mut().for_each(|d| *d /= total);
        }
        Self::new(clusters, energies, rho.len())
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Whether `rho` is nonnegative with cluster sums matching within `tol`.
    pub fn admits(&self, rho: &[f64], tol: f64) -> bool {
        rho.len() == self.num_layers
            && rho.iter().all(|r| *r >= 0.0)
            && self
                .clusters
                .iter()
                .zip(&self.energies)
                .all(|(c, d)| (c.iter().map(|&l| rho[l]).sum::<f64>() - d).abs() <= tol)
    }

    /// Rescales nonnegative weights so every cluster sums to its energy.
    /// Clusters with zero total receive uniform weights.
    pub fn project_weights(&self, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != self.num_layers || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(TomoError::Config(format!(
                "initial weights must be {} nonnegative numbers",
                self.num_layers
            )));
        }
        let mut out = vec![0.0; self.num_layers];
        for (c, &d) in self.clusters.iter().zip(&self.energies) {
            let s: f64 = c.iter().map(|&l| weights[l]).sum();
            for &l in c {
                out[l] = if s > 0.0 {
                    d * weights[l] / s
                } else {
                    d / c.len() as f64
                };
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[serde(alias = "AM")]
    Am,
    #[serde(alias = "AM-direct")]
    AmDirect,
    #[serde(alias = "ISTA")]
    Ista,
    #[serde(alias = "FISTA")]
    Fista,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Am => "am",
            Variant::AmDirect => "am-direct",
            Variant::Ista => "ista",
            Variant::Fista => "fista",
        }
    }
}

/// Denominator `λ` of the gradient step `1/λ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord", into = "NumberOrWord")]
pub enum StepBound {
    /// 1.05 times the power-iteration estimate of the relevant Lipschitz scale.
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepsizeRule {
    Constant,
    SteepestDescent,
}

/// Starting weights, rescaled onto the cluster constraint before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NumberOrWord", into = "NumberOrWord")]
pub enum RhoInit {
    /// Half the energy on the ground layer, the rest spread evenly.
    GroundHeavy,
    Uniform,
    Explicit(Vec<f64>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum NumberOrWord {
    Number(f64),
    Word(String),
    List(Vec<f64>),
}

impl TryFrom<NumberOrWord> for StepBound {
    type Error = String;
    fn try_from(v: NumberOrWord) -> std::result::Result<Self, String> {
        match v {
            NumberOrWord::Number(x) if x > 0.0 && x.is_finite() => Ok(StepBound::Fixed(x)),
            NumberOrWord::Word(w) if w == "auto" => Ok(StepBound::Auto),
            other => Err(format!("lambda must be \"auto\" or a positive number, got {other:?}")),
        }
    }
}

impl From<StepBound> for NumberOrWord {
    fn from(v: StepBound) -> Self {
        match v {
            StepBound::Auto => NumberOrWord::Word("auto".into()),
            StepBound::Fixed(x) => NumberOrWord::Number(x),
        }
    }
}

impl TryFrom<NumberOrWord> for RhoInit {
    type Error = String;
    fn try_from(v: NumberOrWord) -> std::result::Result<Self, String> {
        match v {
            NumberOrWord::Word(w) if w == "ground-heavy" => Ok(RhoInit::GroundHeavy),
            NumberOrWord::Word(w) if w == "uniform" => Ok(RhoInit::Uniform),
            NumberOrWord::List(xs) => Ok(RhoInit::Explicit(xs)),
            other => Err(format!(
                "rho_init must be \"ground-heavy\", \"uniform\" or a list, got {other:?}"
            )),
        }
    }
}

impl From<RhoInit> for NumberOrWord {
    fn from(v: RhoInit) -> Self {
        match v {
            RhoInit::GroundHeavy => NumberOrWord::Word("ground-heavy".into()),
            RhoInit::Uniform => NumberOrWord::Word("uniform".into()),
            RhoInit::Explicit(xs) => NumberOrWord::List(xs),
        }
    }
}

impl RhoInit {
    pub fn weights(&self, num_layers: usize) -> Vec<f64> {
        match self {
            RhoInit::GroundHeavy if num_layers == 1 => vec![1.0],
            RhoInit::GroundHeavy => {
                let mut w = vec![0.5 / (num_layers - 1) as f64; num_layers];
                w[0] = 0.5;
                w
            }
            RhoInit::Uniform => vec![1.0 / num_layers as f64; num_layers],
            RhoInit::Explicit(xs) => xs.clone(),
        }
    }
}

pub const DEFAULT_TOLERANCE: f64 = 1e-9;
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Largest data dimension the dense solver will factor.
pub const DEFAULT_DENSE_CAP: usize = 6000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub variant: Variant,
    pub alpha: f64,
    /// Floor added to the weights in the penalty; variant default if absent.
    pub epsilon: Option<f64>,
    pub inner: usize,
    pub outer: usize,
    /// Variant default if absent: auto for the alternating solvers, 4 for
    /// shrinkage-thresholding.
    pub lambda: Option<StepBound>,
    pub stepsize_rule: StepsizeRule,
    pub rho_init: RhoInit,
    /// Frozen weights turn the alternating solver into a plain gradient method.
    pub update_rho: bool,
    pub tolerance: f64,
    pub dense_cap: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Am,
            alpha: 0.1,
            epsilon: None,
            inner: 10,
            outer: 100,
            lambda: None,
            stepsize_rule: StepsizeRule::Constant,
            rho_init: RhoInit::GroundHeavy,
            update_rho: true,
            tolerance: DEFAULT_TOLERANCE,
            dense_cap: DEFAULT_DENSE_CAP,
        }
    }
}

impl SolverConfig {
    pub fn ista() -> Self {
        Self {
            variant: Variant::Ista,
            outer: 10,
            ..Self::default()
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(match self.variant {
            Variant::AmDirect => 1e-10,
            _ => 1e-6,
        })
    }

    pub fn lambda(&self) -> StepBound {
        self.lambda.unwrap_or(match self.variant {
            Variant::Ista | Variant::Fista => StepBound::Fixed(4.0),
            _ => StepBound::Auto,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TomoError::Config(m));
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.epsilon() >= 0.0) {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon()));
        }
        if self.variant == Variant::Am && !(self.epsilon() > 0.0) {
            return bad("the iterative alternating solver needs epsilon > 0".into());
        }
        if self.inner == 0 || self.outer == 0 {
            return bad("inner and outer iteration counts must be at least 1".into());
        }
        if !(self.tolerance >= 0.0) {
            return bad("tolerance must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub phi: LayerStack,
    pub rho: Vec<f64>,
    /// Monitored functional after every outer iteration.
    pub objective_trace: Vec<f64>,
    /// Thresholds per cluster after every outer iteration (shrinkage solvers).
    pub gamma_trace: Vec<Vec<f64>>,
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
    /// Step length in effect when the run ended.
    pub step: f64,
}

impl ReconstructionResult {
    pub fn nonzero_weights(&self) -> usize {
        self.rho.iter().filter(|r| **r > 0.0).count()
    }
}

/// Operator, layer priors and noise model shared by every solver run.
#[derive(Debug)]
pub struct Problem {
    pub op: TomographyOperator,
    pub covs: Vec<LayerCovariance>,
    pub noise: NoiseModel,
    precision: f64,
    plain_norm: OnceLock<SpectralEstimate>,
    whitened_norm: OnceLock<SpectralEstimate>,
}

impl Problem {
    pub fn new(op: TomographyOperator, covs: Vec<LayerCovariance>, noise: NoiseModel) -> Result<Self> {
        if covs.len() != op.num_layers() {
            return Err(TomoError::DimensionMismatch(format!(
                "{} layers but {} covariances",
                op.num_layers(),
                covs.len()
            )));
        }
        for (l, (c, g)) in covs.iter().zip(&op.layers).enumerate() {
            if c.len() != g.len() {
                return Err(TomoError::DimensionMismatch(format!(
                    "covariance of layer {l} does not match its grid"
                )));
            }
        }
        let precision = noise.precision()?;
        Ok(Self {
            op,
            covs,
            noise,
            precision,
            plain_norm: OnceLock::new(),
            whitened_norm: OnceLock::new(),
        })
    }

    pub fn num_layers(&self) -> usize {
        self.op.num_layers()
    }

    /// `1/σ²`
    pub fn precision(&self) -> f64 {
        self.precision
    }

    /// Sub-problem on a subset of layers.
    pub fn select_layers(&self, keep: &[usize]) -> Result<Self> {
        let op = self.op.select_layers(keep)?;
        let covs = keep.iter().map(|&l| self.covs[l].clone()).collect();
        Self::new(op, covs, self.noise)
    }

    /// Same operator and priors under a different noise model. The
    /// covariance factors are shared, not copied.
    pub fn with_noise(&self, noise: NoiseModel) -> Result<Self> {
        Self::new(self.op.clone(), self.covs.clone(), noise)
    }

    /// `λ_max(Aᵀ C_η⁻¹ A)`, cached.
    pub fn data_norm(&self) -> SpectralEstimate {
        *self.plain_norm.get_or_init(|| {
            estimate_spectral_norm(&self.op, &self.noise).expect("precision checked at construction")
        })
    }

    /// `λ_max(Lᵀ Aᵀ C_η⁻¹ A L)`, cached.
    pub fn whitened_data_norm(&self) -> SpectralEstimate {
        *self.whitened_norm.get_or_init(|| {
            estimate_whitened_spectral_norm(&self.op, &self.covs, &self.noise)
                .expect("dimensions checked at construction")
        })
    }

    /// `data − AΦ`
    pub fn residual(&self, phi: &LayerStack, data: &WavefrontSet) -> WavefrontSet {
        let mut r = data.clone();
        r.axpy(-1.0, &self.op.forward(phi));
        r
    }

    /// `‖C_η^{-1/2}(AΦ − data)‖²`
    pub fn misfit(&self, phi: &LayerStack, data: &WavefrontSet) -> f64 {
        let r = self.residual(phi, data);
        self.precision * r.dot(&r)
    }

    /// `‖C_Φ^{-1/2} Φ⁽ˡ⁾‖` for every layer.
    pub fn layer_norms(&self, phi: &LayerStack) -> Vec<f64> {
        self.layer_quadratics(phi).into_iter().map(f64::sqrt).collect()
    }

    fn layer_quadratics(&self, phi: &LayerStack) -> Vec<f64> {
        phi.layers
            .iter()
            .zip(&self.covs)
            .map(|(f, c)| c.inv_cov_quadratic(f))
            .collect()
    }

    fn apply_inv_cov(&self, phi: &LayerStack) -> LayerStack {
        LayerStack {
            layers: phi
                .layers
                .iter()
                .zip(&self.covs)
                .map(|(f, c)| c.apply_inv_cov(f))
                .collect(),
        }
    }

    fn apply_cov(&self, phi: &LayerStack) -> LayerStack {
        LayerStack {
            layers: phi
                .layers
                .iter()
                .zip(&self.covs)
                .map(|(f, c)| c.apply_cov(f))
                .collect(),
        }
    }

    /// `Aᵀ C_η⁻¹ r`
    fn back_project(&self, r: &WavefrontSet) -> LayerStack {
        let mut g = self.op.adjoint(r);
        g.scale(self.precision);
        g
    }
}

fn check_rho(problem: &Problem, rho: &[f64]) -> Result<()> {
    if rho.len() != problem.num_layers() {
        return Err(TomoError::DimensionMismatch(format!(
            "{} weights for {} layers",
            rho.len(),
            problem.num_layers()
        )));
    }
    if rho.iter().any(|r| !(*r >= 0.0)) {
        return Err(TomoError::Domain("weights must be nonnegative".into()));
    }
    Ok(())
}

/// `‖C_η^{-1/2}(A W_ρ Ψ − φ)‖² + α Σ Ψ⁽ˡ⁾ᵀ C_Φ⁻¹ Ψ⁽ˡ⁾`
pub fn objective_k(
    problem: &Problem,
    data: &WavefrontSet,
    psi: &LayerStack,
    rho: &[f64],
    alpha: f64,
) -> Result<f64> {
    check_rho(problem, rho)?;
    let weighted = LayerStack {
        layers: psi
            .layers
            .iter()
            .zip(rho)
            .map(|(f, r)| f.iter().map(|v| r.sqrt() * v).collect())
            .collect(),
    };
    let penalty: f64 = problem.layer_quadratics(psi).iter().sum();
    Ok(problem.misfit(&weighted, data) + alpha * penalty)
}

/// Data fit plus `α Σ_{ρ_l>0} Φ⁽ˡ⁾ᵀ C_Φ⁻¹ Φ⁽ˡ⁾ / ρ_l`. A nonzero layer with
/// zero weight lies outside the domain.
pub fn objective_f(
    problem: &Problem,
    data: &WavefrontSet,
    phi: &LayerStack,
    rho: &[f64],
    alpha: f64,
) -> Result<f64> {
    check_rho(problem, rho)?;
    let mut penalty = 0.0;
    for (l, (q, r)) in problem.layer_quadratics(phi).iter().zip(rho).enumerate() {
        if *r > 0.0 {
            penalty += q / r;
        } else if phi.layers[l].iter().any(|v| *v != 0.0) {
            return Err(TomoError::ConstraintViolation { layer: l });
        }
    }
    Ok(problem.misfit(phi, data) + alpha * penalty)
}

/// The functional with weights floored to `ρ_l + ε`, as iterated by the
/// alternating solvers.
pub fn objective_f_eps(
    problem: &Problem,
    data: &WavefrontSet,
    phi: &LayerStack,
    rho: &[f64],
    alpha: f64,
    epsilon: f64,
) -> Result<f64> {
    check_rho(problem, rho)?;
    let penalty: f64 = problem
        .layer_quadratics(phi)
        .iter()
        .zip(rho)
        .map(|(q, r)| if *q == 0.0 { 0.0 } else { q / (r + epsilon) })
        .sum();
    Ok(problem.misfit(phi, data) + alpha * penalty)
}

/// Clustered penalty `Σ_i (1/d_i)(Σ_{l∈B_i} n_l)²` of the layer norms.
pub fn clustered_penalty(norms: &[f64], partition: &ClusterPartition) -> f64 {
    partition
        .clusters()
        .iter()
        .zip(partition.energies())
        .map(|(c, d)| {
            let s: f64 = c.iter().map(|&l| norms[l]).sum();
            s * s / d
        })
        .sum()
}

/// Data fit plus `α Σ_i (1/d_i)(Σ_{l∈B_i} ‖C_Φ^{-1/2}Φ⁽ˡ⁾‖)²`.
pub fn objective_g(
    problem: &Problem,
    data: &WavefrontSet,
    phi: &LayerStack,
    partition: &ClusterPartition,
    alpha: f64,
) -> f64 {
    let norms = problem.layer_norms(phi);
    problem.misfit(phi, data) + alpha * clustered_penalty(&norms, partition)
}

/// Minimizer of `Σ n_l²/ρ_l` over the cluster constraint set.
pub fn weights_from_norms(norms: &[f64], partition: &ClusterPartition) -> Vec<f64> {
    let mut rho = vec![0.0; partition.num_layers()];
    for (c, &d) in partition.clusters().iter().zip(partition.energies()) {
        let s: f64 = c.iter().map(|&l| norms[l]).sum();
        for &l in c {
            rho[l] = if s > 0.0 {
                d * norms[l] / s
            } else {
                d / c.len() as f64
            };
        }
    }
    rho
}

/// Closed-form optimal weights for fixed layers.
pub fn rho_update(problem: &Problem, phi: &LayerStack, partition: &ClusterPartition) -> Vec<f64> {
    weights_from_norms(&problem.layer_norms(phi), partition)
}

/// Thresholds of the clustered proximal map for given layer norms: the prox
/// of `α Σ (1/d_i)(Σ n_l)²` with quadratic weight `λ/2`.
pub fn thresholds_from_norms(
    norms: &[f64],
    partition: &ClusterPartition,
    alpha: f64,
    lambda: f64,
) -> Vec<f64> {
    partition
        .clusters()
        .iter()
        .zip(partition.energies())
        .map(|(c, &d)| {
            let mut sorted: Vec<(usize, f64)> = c.iter().map(|&l| (l, norms[l])).collect();
            sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            if sorted[0].1 <= 0.0 {
                return 0.0;
            }
            let kappa = 2.0 * alpha / (lambda * d);
            let mut partial = 0.0;
            let mut gamma = 0.0;
            for (k, &(_, n)) in sorted.iter().enumerate() {
                partial += n;
                let candidate = kappa / (1.0 + (k + 1) as f64 * kappa) * partial;
                if n - candidate > 0.0 {
                    gamma = candidate;
                }
            }
            gamma
        })
        .collect()
}

pub fn prox_thresholds(
    problem: &Problem,
    phi: &LayerStack,
    partition: &ClusterPartition,
    alpha: f64,
    lambda: f64,
) -> Vec<f64> {
    thresholds_from_norms(&problem.layer_norms(phi), partition, alpha, lambda)
}

/// Radial shrinkage of every layer by its cluster threshold, given the norms.
pub fn shrink_with_norms(
    phi: &LayerStack,
    norms: &[f64],
    gammas: &[f64],
    partition: &ClusterPartition,
) -> LayerStack {
    let mut out = phi.clone();
    for (c, &gamma) in partition.clusters().iter().zip(gammas) {
        for &l in c {
            let n = norms[l];
            let factor = if n > gamma { (n - gamma) / n } else { 0.0 };
            if factor == 0.0 {
                out.layers[l].iter_mut().for_each(|v| *v = 0.0);
            } else {
                out.layers[l].iter_mut().for_each(|v| *v *= factor);
            }
        }
    }
    out
}

pub fn shrink(
    problem: &Problem,
    phi: &LayerStack,
    gammas: &[f64],
    partition: &ClusterPartition,
) -> LayerStack {
    shrink_with_norms(phi, &problem.layer_norms(phi), gammas, partition)
}

fn check_inputs(
    problem: &Problem,
    data: &WavefrontSet,
    partition: &ClusterPartition,
    config: &SolverConfig,
) -> Result<()> {
    config.validate()?;
    if partition.num_layers() != problem.num_layers() {
        return Err(TomoError::DimensionMismatch(format!(
            "partition covers {} layers, problem has {}",
            partition.num_layers(),
            problem.num_layers()
        )));
    }
    let expected = problem.op.zero_data();
    if data.fields.len() != expected.fields.len()
        || data
            .fields
            .iter()
            .zip(&expected.fields)
            .any(|(a, b)| a.len() != b.len())
    {
        return Err(TomoError::DimensionMismatch(
            "data does not match the operator's stars and aperture".into(),
        ));
    }
    Ok(())
}

/// Outer-loop bookkeeping shared by all solvers.
struct Monitor {
    reference: f64,
    tolerance: f64,
    trace: Vec<f64>,
    converged: bool,
    diverged: bool,
}

impl Monitor {
    fn new(reference: f64, tolerance: f64) -> Self {
        Self {
            reference,
            tolerance,
            trace: Vec::new(),
            converged: false,
            diverged: false,
        }
    }

    /// Records a value; returns true when the loop should stop.
    fn record(&mut self, value: f64) -> bool {
        let previous = self.trace.last().copied();
        self.trace.push(value);
        if !value.is_finite() || value > DIVERGENCE_FACTOR * self.reference.max(f64::MIN_POSITIVE) {
            self.diverged = true;
            return true;
        }
        if let Some(p) = previous {
            if p - value <= self.tolerance * p.abs() && value <= p * (1.0 + 1e-12) {
                self.converged = true;
                return true;
            }
        }
        if value == 0.0 {
            self.converged = true;
            return true;
        }
        false
    }
}

/// Alternating minimization: gradient steps on the layers with the weights
/// floored by `ε`, then the closed-form weight update.
pub fn am_reconstruct(
    problem: &Problem,
    data: &WavefrontSet,
    partition: &ClusterPartition,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    check_inputs(problem, data, partition, config)?;
    if config.variant == Variant::AmDirect {
        return am_direct_solve(problem, data, partition, config);
    }
    let eps = config.epsilon();
    let alpha = config.alpha;
    let mut rho = partition.project_weights(&config.rho_init.weights(problem.num_layers()))?;
    let mut phi = problem.op.zero_stack();
    let reference = problem.misfit(&phi, data);
    let mut monitor = Monitor::new(reference, config.tolerance);
    let mut step = 0.0;
    let mut iterations = 0;

    for _ in 0..config.outer {
        iterations += 1;
        let penalty_weights: Vec<f64> = rho.iter().map(|r| alpha / (r + eps)).collect();
        let fixed_step = match config.stepsize_rule {
            StepsizeRule::SteepestDescent => None,
            StepsizeRule::Constant => Some(match config.lambda() {
                StepBound::Fixed(l) => 1.0 / l,
                StepBound::Auto => {
                    let prior = penalty_weights
                        .iter()
                        .zip(&problem.covs)
                        .map(|(w, c)| w * c.inv_spectral_radius())
                        .fold(0.0, f64::max);
                    1.0 / (1.05 * (problem.data_norm().value + prior))
                }
            }),
        };
        let mut residual = problem.residual(&phi, data);
        let mut inv_cov_phi = problem.apply_inv_cov(&phi);
        for _ in 0..config.inner {
            let mut direction = problem.back_project(&residual);
            for ((d, c), w) in direction.layers.iter_mut().zip(&inv_cov_phi.layers).zip(&penalty_weights) {
                crate::turbulence::axpy(d, -w, c);
            }
            let g2 = direction.dot(&direction);
            if g2 == 0.0 {
                break;
            }
            let a_dir = problem.op.forward(&direction);
            let inv_cov_dir = problem.apply_inv_cov(&direction);
            let tau = match fixed_step {
                Some(t) => t,
                None => {
                    let curvature = problem.precision() * a_dir.dot(&a_dir)
                        + direction
                            .layers
                            .iter()
                            .zip(&inv_cov_dir.layers)
                            .zip(&penalty_weights)
                            .map(|((d, c), w)| w * dot(d, c))
                            .sum::<f64>();
                    if !(curvature > 0.0) {
                        break;
                    }
                    g2 / curvature
                }
            };
            step = tau;
            phi.axpy(tau, &direction);
            residual.axpy(-tau, &a_dir);
            inv_cov_phi.axpy(tau, &inv_cov_dir);
        }
        if config.update_rho {
            rho = rho_update(problem, &phi, partition);
        }
        if monitor.record(objective_f_eps(problem, data, &phi, &rho, alpha, eps)?) {
            break;
        }
    }
    if monitor.diverged {
        log::warn!("alternating minimization diverged with step {step:e}");
    }
    Ok(ReconstructionResult {
        phi,
        rho,
        objective_trace: monitor.trace,
        gamma_trace: Vec::new(),
        converged: monitor.converged,
        diverged: monitor.diverged,
        iterations,
        step,
    })
}

/// `A_l C_l A_lᵀ` for every layer, as dense symmetric matrices over the data.
fn projected_covariances(problem: &Problem) -> Vec<Mat<f64>> {
    let op = &problem.op;
    let (stars, nodes) = (op.num_stars(), op.aperture.len());
    let m = stars * nodes;
    (0..op.num_layers())
        .map(|l| {
            let cov = problem.covs[l].matrix();
            let stencils: Vec<_> = (0..stars).flat_map(|g| op.stencils(g, l).iter()).collect();
            let mut k = Mat::<f64>::zeros(m, m);
            for j in 0..m {
                let sj = stencils[j];
                for i in j..m {
                    let si = stencils[i];
                    let mut v = 0.0;
                    for a in 0..4 {
                        for b in 0..4 {
                            v += si.weights[a] * sj.weights[b] * cov[(si.nodes[a], sj.nodes[b])];
                        }
                    }
                    k[(i, j)] = v;
                    k[(j, i)] = v;
                }
            }
            k
        })
        .collect()
}

/// Exact minimizer over the layers for fixed weights,
/// `(AᵀC_η⁻¹A + α P⁻¹ C_Φ⁻¹) Φ = AᵀC_η⁻¹ φ` with `P = diag(ρ_l + ε)`,
/// solved in data space as `Φ_l = w_l C_l A_lᵀ (σ²I + Σ w_l A_l C_l A_lᵀ)⁻¹ φ`
/// with `w_l = (ρ_l + ε)/α`.
fn dense_layer_solve(
    problem: &Problem,
    projected: &[Mat<f64>],
    data: &WavefrontSet,
    rho: &[f64],
    alpha: f64,
    eps: f64,
) -> Result<LayerStack> {
    let m = projected[0].nrows();
    let weights: Vec<f64> = rho.iter().map(|r| (r + eps) / alpha).collect();
    let noise_var = 1.0 / problem.precision();
    let system = Mat::from_fn(m, m, |i, j| {
        let mut v: f64 = projected.iter().zip(&weights).map(|(k, w)| w * k[(i, j)]).sum();
        if i == j {
            v += noise_var;
        }
        v
    });
    let rhs = Mat::from_fn(m, 1, |i, _| {
        let nodes = problem.op.aperture.len();
        data.fields[i / nodes][i % nodes]
    });
    let llt = system
        .llt(Side::Lower)
        .map_err(|e| TomoError::Solver(format!("data-space system is not positive definite: {e:?}")))?;
    let y = llt.solve(rhs);
    let dual = WavefrontSet {
        fields: data
            .fields
            .iter()
            .enumerate()
            .map(|(g, f)| (0..f.len()).map(|k| y[(g * f.len() + k, 0)]).collect())
            .collect(),
    };
    let back = problem.op.adjoint(&dual);
    let mut phi = problem.apply_cov(&back);
    for (layer, w) in phi.layers.iter_mut().zip(&weights) {
        layer.iter_mut().for_each(|v| *v *= w);
    }
    Ok(phi)
}

/// Alternating minimization with an exact dense solve for the layers.
pub fn am_direct_solve(
    problem: &Problem,
    data: &WavefrontSet,
    partition: &ClusterPartition,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    check_inputs(problem, data, partition, config)?;
    let m = problem.op.num_stars() * problem.op.aperture.len();
    if m > config.dense_cap {
        return Err(TomoError::TooLarge {
            nodes: m,
            cap: config.dense_cap,
        });
    }
    let eps = config.epsilon();
    let alpha = config.alpha;
    let projected = projected_covariances(problem);
    let mut rho = partition.project_weights(&config.rho_init.weights(problem.num_layers()))?;
    let mut phi = problem.op.zero_stack();
    let mut monitor = Monitor::new(problem.misfit(&phi, data), config.tolerance);
    let mut iterations = 0;
    for _ in 0..config.outer {
        iterations += 1;
        phi = dense_layer_solve(problem, &projected, data, &rho, alpha, eps)?;
        if config.update_rho {
            rho = rho_update(problem, &phi, partition);
        }
        if monitor.record(objective_f_eps(problem, data, &phi, &rho, alpha, eps)?) {
            break;
        }
    }
    Ok(ReconstructionResult {
        phi,
        rho,
        objective_trace: monitor.trace,
        gamma_trace: Vec::new(),
        converged: monitor.converged,
        diverged: monitor.diverged,
        iterations,
        step: 0.0,
    })
}

/// Step denominator for the shrinkage solvers.
fn shrinkage_lambda(problem: &Problem, config: &SolverConfig) -> f64 {
    match config.lambda() {
        StepBound::Fixed(l) => l,
        StepBound::Auto => 1.05 * problem.whitened_data_norm().value,
    }
}

/// `Φ + (1/λ) C_Φ Aᵀ C_η⁻¹ (φ − AΦ)`
fn prior_gradient_step(problem: &Problem, phi: &LayerStack, data: &WavefrontSet, lambda: f64) -> LayerStack {
    let mut out = phi.clone();
    let g = problem.apply_cov(&problem.back_project(&problem.residual(phi, data)));
    out.axpy(1.0 / lambda, &g);
    out
}

/// Proximal step for `G`. The gradient step above moves by half the
/// gradient of the data fit, so the matching prox weight is `2λ`.
fn prox_step(
    problem: &Problem,
    phi: &LayerStack,
    partition: &ClusterPartition,
    alpha: f64,
    lambda: f64,
) -> (LayerStack, Vec<f64>) {
    let norms = problem.layer_norms(phi);
    let gammas = thresholds_from_norms(&norms, partition, alpha, 2.0 * lambda);
    (shrink_with_norms(phi, &norms, &gammas, partition), gammas)
}

pub fn ista_reconstruct(
    problem: &Problem,
    data: &WavefrontSet,
    partition: &ClusterPartition,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    ista_reconstruct_from(problem, data, partition, config, problem.op.zero_stack())
}

/// ISTA started from a given layer stack.
pub fn ista_reconstruct_from(
    problem: &Problem,
    data: &WavefrontSet,
    partition: &ClusterPartition,
    config: &SolverConfig,
    initial: LayerStack,
) -> Result<ReconstructionResult> {
    check_inputs(problem, data, partition, config)?;
    if initial.sizes() != problem.op.layer_sizes() {
        return Err(TomoError::DimensionMismatch("initial stack does not match the layer grids".into()));
    }
    let lambda = shrinkage_lambda(problem, config);
    let alpha = config.alpha;
    let mut phi = initial;
    let reference = objective_g(problem, data, &phi, partition, alpha);
    let mut monitor = Monitor::new(reference, config.tolerance);
    let mut gamma_trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.outer {
        iterations += 1;
        for _ in 0..config.inner {
            phi = prior_gradient_step(problem, &phi, data, lambda);
        }
        let (next, gammas) = prox_step(problem, &phi, partition, alpha, lambda);
        phi = next;
        gamma_trace.push(gammas);
        if monitor.record(objective_g(problem, data, &phi, partition, alpha)) {
            break;
        }
    }
    if monitor.diverged {
        log::warn!("ISTA diverged with step 1/{lambda:e}");
    }
    Ok(ReconstructionResult {
        rho: rho_update(problem, &phi, partition),
        phi,
        objective_trace: monitor.trace,
        gamma_trace,
        converged: monitor.converged,
        diverged: monitor.diverged,
        iterations,
        step: 1.0 / lambda,
    })
}

/// Accelerated ISTA with the standard momentum sequence, one gradient step
/// per prox. The inner count is not used.
pub fn fista_reconstruct(
    problem: &Problem,
    data: &WavefrontSet,
    partition: &ClusterPartition,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    check_inputs(problem, data, partition, config)?;
    let lambda = shrinkage_lambda(problem, config);
    let alpha = config.alpha;
    let mut previous = problem.op.zero_stack();
    let mut extrapolated = previous.clone();
    let mut t = 1.0_f64;
    let reference = objective_g(problem, data, &previous, partition, alpha);
    let mut monitor = Monitor::new(reference, config.tolerance);
    let mut gamma_trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..config.outer {
        iterations += 1;
        let stepped = prior_gradient_step(problem, &extrapolated, data, lambda);
        let (current, gammas) = prox_step(problem, &stepped, partition, alpha, lambda);
        gamma_trace.push(gammas);
        let t_next = (1.0 + (1.0 + 4.0 * t * t).sqrt()) / 2.0;
        let momentum = (t - 1.0) / t_next;
        extrapolated = current.scaled(1.0 + momentum);
        extrapolated.axpy(-momentum, &previous);
        previous = current;
        t = t_next;
        if monitor.record(objective_g(problem, data, &previous, partition, alpha)) {
            break;
        }
    }
    Ok(ReconstructionResult {
        rho: rho_update(problem, &previous, partition),
        phi: previous,
        objective_trace: monitor.trace,
        gamma_trace,
        converged: monitor.converged,
        diverged: monitor.diverged,
        iterations,
        step: 1.0 / lambda,
    })
}

/// Dispatches on the configured variant.
pub fn reconstruct(
    problem: &Problem,
    data: &WavefrontSet,
    partition: &ClusterPartition,
    config: &SolverConfig,
) -> Result<ReconstructionResult> {
    match config.variant {
        Variant::Am => am_reconstruct(problem, data, partition, config),
        Variant::AmDirect => am_direct_solve(problem, data, partition, config),
        Variant::Ista => ista_reconstruct(problem, data, partition, config),
        Variant::Fista => fista_reconstruct(problem, data, partition, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Aperture, ApertureGrid, GuideStar, LayerGrid, ARCMIN};
    use crate::operator::add_noise;
    use crate::turbulence::{build_covariances, sample_atmosphere, AtmosphereProfile, TurbulenceStatistics};

    fn stats() -> TurbulenceStatistics {
        TurbulenceStatistics::new(1.0, 3.0).unwrap()
    }

    /// Two stars, three layers on 5×5 grids.
    fn tiny_problem() -> Problem {
        let ap = ApertureGrid::new(Aperture::circular(2.0).unwrap(), 5).unwrap();
        let stars = vec![
            GuideStar::ngs([0.2 * ARCMIN, 0.0]),
            GuideStar::ngs([-0.2 * ARCMIN, 0.1 * ARCMIN]),
        ];
        let grids: Vec<_> = [0.0, 1000.0, 3000.0]
            .iter()
            .map(|&h| LayerGrid::new(h, [-1.2, -1.2], 0.6, 5, 5).unwrap())
            .collect();
        let covs = build_covariances(&grids, &stats(), 64).unwrap();
        let op = TomographyOperator::new(ap, stars, grids).unwrap();
        Problem::new(op, covs, NoiseModel::new(0.3, 0).unwrap()).unwrap()
    }

    fn tiny_data(problem: &Problem, seed: u64) -> (LayerStack, WavefrontSet) {
        let profile = AtmosphereProfile::new(vec![0.0, 1000.0, 3000.0], vec![0.6, 0.3, 0.1], stats()).unwrap();
        let phi = sample_atmosphere(&profile, &problem.covs, seed).unwrap();
        let clean = problem.op.forward(&phi);
        (phi, add_noise(&clean, &NoiseModel::new(0.3, seed + 1000).unwrap()))
    }

    fn rel_diff(a: &LayerStack, b: &LayerStack) -> f64 {
        let mut d = a.clone();
        d.axpy(-1.0, b);
        d.norm() / b.norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn partition_validation() {
        assert!(ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.5, 0.5], 3).is_ok());
        assert!(ClusterPartition::new(vec![vec![0, 1], vec![1, 2]], vec![0.5, 0.5], 3).is_err());
        assert!(ClusterPartition::new(vec![vec![0], vec![2]], vec![0.5, 0.5], 3).is_err());
        assert!(ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.5, 0.6], 3).is_err());
        assert!(ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![1.0, 0.0], 3).is_err());
        let p = ClusterPartition::from_profile(vec![vec![0], vec![1, 2]], &[0.5, 0.2, 0.3]).unwrap();
        assert_eq!(p.energies(), &[0.5, 0.5]);
        assert_eq!(ClusterPartition::single(4).unwrap().energies(), &[1.0]);
    }

    #[test]
    fn weight_initialization_lands_on_constraint_set() {
        let p = ClusterPartition::new(vec![vec![0], vec![1, 2, 3]], vec![0.4, 0.6], 4).unwrap();
        let rho = p.project_weights(&RhoInit::GroundHeavy.weights(4)).unwrap();
        assert!(p.admits(&rho, 1e-15));
        for (r, e) in rho.iter().zip([0.4, 0.2, 0.2, 0.2]) {
            assert!((r - e).abs() < 1e-15);
        }
        let single = ClusterPartition::single(9).unwrap();
        let rho = single.project_weights(&RhoInit::GroundHeavy.weights(9)).unwrap();
        assert_eq!(rho[0], 0.5);
        assert!((rho[5] - 0.5 / 8.0).abs() < 1e-16);
    }

    #[test]
    fn weight_update_examples() {
        let p = ClusterPartition::new(vec![vec![0, 1, 2], vec![3, 4]], vec![0.6, 0.4], 5).unwrap();
        let rho = weights_from_norms(&[2.0, 2.0, 2.0, 0.0, 5.0], &p);
        for r in &rho[..3] {
            assert!((r - 0.2).abs() < 1e-15);
        }
        assert_eq!(&rho[3..], &[0.0, 0.4]);
        let rho = weights_from_norms(&[0.0; 5], &p);
        assert!((rho[0] - 0.2).abs() < 1e-15 && rho[3] == 0.2);
        assert!(p.admits(&rho, 1e-12));
    }

    #[test]
    fn threshold_examples() {
        let p = ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.3, 0.7], 3).unwrap();
        let g = thresholds_from_norms(&[1.5, 0.0, 0.0], &p, 0.8, 2.0);
        let kappa = 2.0 * 0.8 / (2.0 * 0.3);
        assert!((g[0] - kappa / (1.0 + kappa) * 1.5).abs() < 1e-15);
        assert_eq!(g[1], 0.0);
    }

    #[test]
    fn shrink_examples() {
        let p = ClusterPartition::single(2).unwrap();
        let phi = LayerStack {
            layers: vec![vec![3.0, 4.0], vec![0.0, 2.0]],
        };
        let norms = [5.0, 2.0];
        assert_eq!(shrink_with_norms(&phi, &norms, &[0.0], &p), phi);
        assert!(shrink_with_norms(&phi, &norms, &[5.0], &p).is_zero());
        let half = shrink_with_norms(&phi, &norms, &[2.5], &p);
        assert_eq!(half.layers[0], vec![1.5, 2.0]);
        assert!(half.layers[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn objective_identities() {
        let problem = tiny_problem();
        let (truth, data) = tiny_data(&problem, 3);
        let zero = problem.op.zero_stack();
        let rho = vec![0.5, 0.3, 0.2];
        let fit0 = problem.misfit(&zero, &data);
        assert_eq!(objective_k(&problem, &data, &zero, &rho, 0.7).unwrap(), fit0);
        assert_eq!(objective_f(&problem, &data, &zero, &rho, 0.7).unwrap(), fit0);
        let p = ClusterPartition::single(3).unwrap();
        assert_eq!(objective_g(&problem, &data, &zero, &p, 0.7), fit0);

        // K(Ψ, ρ) = F(W_ρ Ψ, ρ)
        let psi = truth.clone();
        let phi = LayerStack {
            layers: psi.layers.iter().zip(&rho).map(|(f, r)| f.iter().map(|v| r.sqrt() * v).collect()).collect(),
        };
        let k = objective_k(&problem, &data, &psi, &rho, 0.7).unwrap();
        let f = objective_f(&problem, &data, &phi, &rho, 0.7).unwrap();
        assert!((k - f).abs() <= 1e-10 * k);

        // Halving every weight doubles the penalty.
        let half: Vec<f64> = rho.iter().map(|r| r / 2.0).collect();
        let fit = problem.misfit(&truth, &data);
        let pen = objective_f(&problem, &data, &truth, &rho, 1.0).unwrap() - fit;
        let pen_half = objective_f(&problem, &data, &truth, &half, 1.0).unwrap() - fit;
        assert!((pen_half - 2.0 * pen).abs() <= 1e-10 * pen);

        assert!(matches!(
            objective_f(&problem, &data, &truth, &[1.0, 0.0, 0.0], 1.0),
            Err(TomoError::ConstraintViolation { layer: 1 })
        ));

        // G(Φ) = F(Φ, ρ*(Φ))
        let p = ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.6, 0.4], 3).unwrap();
        let star = rho_update(&problem, &truth, &p);
        let g = objective_g(&problem, &data, &truth, &p, 0.7);
        let f = objective_f(&problem, &data, &truth, &star, 0.7).unwrap();
        assert!((g - f).abs() <= 1e-10 * g);
    }

    #[test]
    fn alternating_solver_on_zero_data() {
        let problem = tiny_problem();
        let data = problem.op.zero_data();
        let p = ClusterPartition::single(3).unwrap();
        let res = am_reconstruct(&problem, &data, &p, &SolverConfig::default()).unwrap();
        assert!(res.phi.is_zero());
        assert!(res.objective_trace.iter().all(|v| *v == 0.0));
        assert!(p.admits(&res.rho, 1e-10));
    }

    #[test]
    fn alternating_solver_fits_exact_data_for_tiny_alpha() {
        let ap = ApertureGrid::new(Aperture::circular(2.0).unwrap(), 5).unwrap();
        let grid = LayerGrid::new(0.0, [-1.0, -1.0], 0.5, 5, 5).unwrap();
        let covs = build_covariances(&[grid.clone()], &stats(), 64).unwrap();
        let op = TomographyOperator::new(ap, vec![GuideStar::on_axis()], vec![grid]).unwrap();
        let problem = Problem::new(op, covs, NoiseModel::unit()).unwrap();
        let truth = LayerStack {
            layers: vec![(0..25).map(|i| ((i * 7) % 5) as f64 - 2.0).collect()],
        };
        let data = problem.op.forward(&truth);
        let config = SolverConfig {
            alpha: 1e-12,
            outer: 50,
            inner: 20,
            tolerance: 0.0,
            ..SolverConfig::default()
        };
        let p = ClusterPartition::single(1).unwrap();
        let res = am_reconstruct(&problem, &data, &p, &config).unwrap();
        let rec = problem.op.forward(&res.phi);
        for (a, b) in rec.fields[0].iter().zip(&data.fields[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn direct_solve_satisfies_normal_equations() {
        let problem = tiny_problem();
        let (_, data) = tiny_data(&problem, 5);
        let p = ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.6, 0.4], 3).unwrap();
        let config = SolverConfig {
            variant: Variant::AmDirect,
            outer: 1,
            update_rho: false,
            rho_init: RhoInit::Explicit(vec![0.6, 0.1, 0.3]),
            ..SolverConfig::default()
        };
        let res = am_direct_solve(&problem, &data, &p, &config).unwrap();
        let eps = config.epsilon();
        let mut lhs = problem.back_project(&problem.op.forward(&res.phi));
        let prior = problem.apply_inv_cov(&res.phi);
        for (l, (out, c)) in lhs.layers.iter_mut().zip(&prior.layers).enumerate() {
            crate::turbulence::axpy(out, config.alpha / (res.rho[l] + eps), c);
        }
        let rhs = problem.back_project(&data);
        assert!(rel_diff(&lhs, &rhs) <= 1e-8);
    }

    #[test]
    fn iterative_and_direct_alternating_solvers_agree() {
        let problem = tiny_problem();
        let (_, data) = tiny_data(&problem, 6);
        let p = ClusterPartition::single(3).unwrap();
        let base = SolverConfig {
            alpha: 0.5,
            epsilon: Some(1e-6),
            outer: 1,
            update_rho: false,
            ..SolverConfig::default()
        };
        let direct = am_direct_solve(&problem, &data, &p, &SolverConfig { variant: Variant::AmDirect, ..base.clone() }).unwrap();
        let iter = am_reconstruct(
            &problem,
            &data,
            &p,
            &SolverConfig { inner: 5000, stepsize_rule: StepsizeRule::SteepestDescent, ..base },
        )
        .unwrap();
        assert!(rel_diff(&iter.phi, &direct.phi) <= 1e-4, "{}", rel_diff(&iter.phi, &direct.phi));
    }

    #[test]
    fn shrinkage_solvers_on_zero_data() {
        let problem = tiny_problem();
        let data = problem.op.zero_data();
        let p = ClusterPartition::single(3).unwrap();
        for variant in [Variant::Ista, Variant::Fista] {
            let config = SolverConfig { variant, outer: 1, lambda: Some(StepBound::Auto), ..SolverConfig::ista() };
            let res = reconstruct(&problem, &data, &p, &config).unwrap();
            assert!(res.phi.is_zero());
        }
    }

    #[test]
    fn fista_first_step_is_ista() {
        let problem = tiny_problem();
        let (_, data) = tiny_data(&problem, 7);
        let p = ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.6, 0.4], 3).unwrap();
        let config = SolverConfig { outer: 1, inner: 1, lambda: Some(StepBound::Auto), ..SolverConfig::ista() };
        let a = ista_reconstruct(&problem, &data, &p, &config).unwrap();
        let b = fista_reconstruct(&problem, &data, &p, &config).unwrap();
        assert_eq!(a.phi, b.phi);
        assert_eq!(a.gamma_trace, b.gamma_trace);
    }

    #[test]
    fn fista_is_at_least_as_fast_as_ista() {
        let problem = tiny_problem();
        let p = ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.6, 0.4], 3).unwrap();
        for seed in 0..4 {
            let (_, data) = tiny_data(&problem, 20 + seed);
            let config = SolverConfig {
                alpha: 0.05,
                outer: 50,
                inner: 1,
                tolerance: 0.0,
                lambda: Some(StepBound::Auto),
                ..SolverConfig::ista()
            };
            let target = *ista_reconstruct(&problem, &data, &p, &config).unwrap().objective_trace.last().unwrap();
            let fast = fista_reconstruct(&problem, &data, &p, &SolverConfig { variant: Variant::Fista, ..config }).unwrap();
            assert!(fast.objective_trace.iter().any(|v| *v <= target * (1.0 + 1e-12)));
        }
    }

    #[test]
    fn shrinkage_fixed_point_is_unique() {
        let problem = tiny_problem();
        let (truth, data) = tiny_data(&problem, 9);
        let p = ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.6, 0.4], 3).unwrap();
        let config = SolverConfig {
            alpha: 2.0,
            outer: 3000,
            inner: 1,
            tolerance: 1e-15,
            lambda: Some(StepBound::Auto),
            ..SolverConfig::ista()
        };
        let a = ista_reconstruct(&problem, &data, &p, &config).unwrap();
        let b = ista_reconstruct_from(&problem, &data, &p, &config, truth.scaled(3.0)).unwrap();
        let f = fista_reconstruct(&problem, &data, &p, &SolverConfig { variant: Variant::Fista, ..config }).unwrap();
        assert!(rel_diff(&b.phi, &a.phi) <= 1e-4, "{}", rel_diff(&b.phi, &a.phi));
        assert!(rel_diff(&f.phi, &a.phi) <= 1e-5, "{}", rel_diff(&f.phi, &a.phi));

        // Reduced functional consistency at the output.
        let star = rho_update(&problem, &a.phi, &p);
        let g = objective_g(&problem, &data, &a.phi, &p, config.alpha);
        let f = objective_f(&problem, &data, &a.phi, &star, config.alpha).unwrap();
        assert!((g - f).abs() <= 1e-10 * g);
    }

    #[test]
    fn config_parsing() {
        let c: SolverConfig = toml::from_str(
            "variant = \"ista\"\nalpha = 0.5\nlambda = \"auto\"\nrho_init = [1.0, 2.0]\nstepsize_rule = \"steepest-descent\"",
        )
        .unwrap();
        assert_eq!(c.variant, Variant::Ista);
        assert_eq!(c.lambda(), StepBound::Auto);
        assert_eq!(c.rho_init, RhoInit::Explicit(vec![1.0, 2.0]));
        let c: SolverConfig = toml::from_str("variant = \"ista\"\nlambda = 4").unwrap();
        assert_eq!(c.lambda(), StepBound::Fixed(4.0));
        assert!(toml::from_str::<SolverConfig>("lambda = \"fast\"").is_err());
        assert!(toml::from_str::<SolverConfig>("rho_init = \"heavy\"").is_err());
        assert_eq!(SolverConfig::default().epsilon(), 1e-6);
        let direct = SolverConfig { variant: Variant::AmDirect, ..SolverConfig::default() };
        assert_eq!(direct.epsilon(), 1e-10);
        assert_eq!(SolverConfig::ista().lambda(), StepBound::Fixed(4.0));
    }
}
