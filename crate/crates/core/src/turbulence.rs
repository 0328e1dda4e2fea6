//! von Karman turbulence statistics, dense layer covariances and prior sampling.

use std::sync::{Arc, OnceLock};

use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::{
    solve_lower_triangular_in_place, solve_upper_triangular_in_place,
};
use faer::{Accum, ColMut, ColRef, Mat, MatRef, Par, Side};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma;

use crate::error::{Result, TomoError};
use crate::geometry::LayerGrid;

/// Default cap on the node count of a single dense layer covariance.
pub const DEFAULT_MAX_NODES: usize = 64 * 64;

const JITTER_STEPS: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TurbulenceStatistics {
    /// Fried parameter, meters.
    pub r0: f64,
    /// Outer scale, meters.
    pub outer_scale: f64,
}

impl Default for TurbulenceStatistics {
    fn default() -> Self {
        Self {
            r0: 0.15,
            outer_scale: 25.0,
        }
    }
}

impl TurbulenceStatistics {
    pub fn new(r0: f64, outer_scale: f64) -> Result<Self> {
        if !(r0 > 0.0 && outer_scale > 0.0) || !r0.is_finite() || !outer_scale.is_finite() {
            return Err(TomoError::InvalidProfile(format!(
                "need r0 > 0 and L0 > 0, got r0 = {r0}, L0 = {outer_scale}"
            )));
        }
        Ok(Self { r0, outer_scale })
    }
}

/// The constant `c` of the von Karman phase covariance.
pub fn von_karman_constant() -> f64 {
    2f64.powf(1.0 / 6.0) * gamma(11.0 / 6.0) / std::f64::consts::PI.powf(8.0 / 3.0)
        * (24.0 / 5.0 * gamma(6.0 / 5.0)).powf(5.0 / 6.0)
}

/// Modified Bessel function of the second kind `K_ν(x)` for `x > 0`.
///
/// Trapezoidal rule on `∫₀^∞ exp(−x cosh t) cosh(νt) dt`; the integrand is
/// analytic in a strip around the real axis so the rule converges
/// geometrically in the step size.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    const H: f64 = 0.05;
    let mut sum = 0.5;
    let mut k = 1usize;
    loop {
        let t = k as f64 * H;
        // exp(-x) is factored out of every term.
        let decay = x * (t.cosh() - 1.0);
        let term = (-decay).exp() * (nu * t).cosh();
        sum += term;
        if decay - nu * t > 60.0 {
            break;
        }
        k += 1;
    }
    (-x).exp() * sum * H
}

/// Phase covariance at separation `delta_x` meters, in rad².
pub fn von_karman_covariance(delta_x: f64, stats: &TurbulenceStatistics) -> Result<f64> {
    if !(delta_x >= 0.0) {
        return Err(TomoError::Domain(format!(
            "separation must be nonnegative, got {delta_x}"
        )));
    }
    let prefactor = (stats.outer_scale / stats.r0).powf(5.0 / 3.0) * von_karman_constant() / 2.0;
    if delta_x == 0.0 {
        // z^ν K_ν(z) → Γ(ν) 2^(ν−1) as z → 0, with ν = 5/6.
        return Ok(prefactor * gamma(5.0 / 6.0) * 2f64.powf(-1.0 / 6.0));
    }
    let z = 2.0 * std::f64::consts::PI * delta_x / stats.outer_scale;
    Ok(prefactor * z.powf(5.0 / 6.0) * bessel_k(5.0 / 6.0, z))
}

/// Rescales nonnegative weights to sum to one.
pub fn normalize_profile(rho: &[f64]) -> Result<Vec<f64>> {
    if rho.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
        return Err(TomoError::InvalidProfile(
            "turbulence weights must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = rho.iter().sum();
    if !(total > 0.0) {
        return Err(TomoError::InvalidProfile(
            "turbulence weights must not all be zero".into(),
        ));
    }
    Ok(rho.iter().map(|r| r / total).collect())
}

/// Layer altitudes with normalized relative strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtmosphereProfile {
    pub altitudes: Vec<f64>,
    pub rho: Vec<f64>,
    pub stats: TurbulenceStatistics,
}

impl AtmosphereProfile {
    /// Validates the altitudes and normalizes `rho`, warning when the input
    /// was noticeably off the simplex.
    pub fn new(altitudes: Vec<f64>, rho: Vec<f64>, stats: TurbulenceStatistics) -> Result<Self> {
        if altitudes.is_empty() || altitudes.len() != rho.len() {
            return Err(TomoError::InvalidProfile(format!(
                "{} altitudes but {} weights",
                altitudes.len(),
                rho.len()
            )));
        }
        if !(altitudes[0] >= 0.0) || altitudes.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(TomoError::InvalidProfile(
                "altitudes must be nonnegative and strictly increasing".into(),
            ));
        }
        let normalized = normalize_profile(&rho)?;
        let shift: f64 = rho
            .iter()
            .zip(&normalized)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        if shift > 1e-9 {
            log::warn!("turbulence weights renormalized (max adjustment {shift:.3e})");
        }
        Ok(Self {
            altitudes,
            rho: normalized,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.altitudes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.altitudes.is_empty()
    }
}

/// One field per layer, each a flat row-major array over its layer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    pub layers: Vec<Vec<f64>>,
}

impl LayerStack {
    pub fn zeros(sizes: impl IntoIterator<Item = usize>) -> Self {
        Self {
            layers: sizes.into_iter().map(|n| vec![0.0; n]).collect(),
        }
    }

    pub fn zeros_like(other: &LayerStack) -> Self {
        Self::zeros(other.layers.iter().map(Vec::len))
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.layers.iter().map(Vec::len).collect()
    }

    pub fn dot(&self, other: &LayerStack) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| dot(a, b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += a·x`
    pub fn axpy(&mut self, a: f64, x: &LayerStack) {
        for (s, xl) in self.layers.iter_mut().zip(&x.layers) {
            axpy(s, a, xl);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for v in self.layers.iter_mut().flatten() {
            *v *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> LayerStack {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().flatten().all(|v| *v == 0.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dense von Karman covariance of one layer grid with its Cholesky factor.
/// Clones share the matrix and its factor.
#[derive(Debug, Clone)]
pub struct LayerCovariance {
    pub grid: LayerGrid,
    /// Covariance including any diagonal jitter; equals `factor·factorᵀ`.
    matrix: Arc<Mat<f64>>,
    factor: Arc<Mat<f64>>,
    /// Absolute diagonal jitter that was needed for the factorization.
    pub jitter: f64,
    /// Point variance `c_Φ(0)`.
    pub variance: f64,
    inv_spectral_radius: OnceLock<f64>,
}

impl LayerCovariance {
    pub fn build(grid: &LayerGrid, stats: &TurbulenceStatistics) -> Result<Self> {
        Self::build_capped(grid, stats, DEFAULT_MAX_NODES)
    }

    pub fn build_capped(grid: &LayerGrid, stats: &TurbulenceStatistics, cap: usize) -> Result<Self> {
        let n = grid.len();
        if n > cap {
            return Err(TomoError::TooLarge { nodes: n, cap });
        }
        // Stationarity: the entry only depends on the index offset, so the
        // kernel is tabulated once per (|di|, |dj|).
        let (nx, ny) = (grid.nx, grid.ny);
        let mut table = vec![0.0; nx * ny];
        for dj in 0..ny {
            for di in 0..nx {
                let dist = grid.spacing * (di as f64).hypot(dj as f64);
                table[dj * nx + di] = von_karman_covariance(dist, stats)?;
            }
        }
        let variance = table[0];
        let mut matrix = Mat::from_fn(n, n, |p, q| {
            let di = (p % nx).abs_diff(q % nx);
            let dj = (p / nx).abs_diff(q / nx);
            table[dj * nx + di]
        });

        let mut jitter = 0.0;
        let mut steps = JITTER_STEPS.iter();
        let factor = loop {
            match matrix.llt(Side::Lower) {
                Ok(llt) => break llt.L().to_owned(),
                Err(_) => {
                    let Some(rel) = steps.next() else {
                        return Err(TomoError::IllConditionedCovariance { nodes: n, jitter });
                    };
                    let next = rel * variance;
                    for p in 0..n {
                        matrix[(p, p)] += next - jitter;
                    }
                    jitter = next;
                }
            }
        };
        if jitter > 0.0 {
            log::warn!(
                "covariance of {}x{} grid at {} m needed diagonal jitter {:.1e}",
                nx,
                ny,
                grid.altitude,
                jitter
            );
        }
        Ok(Self {
            grid: grid.clone(),
            matrix: Arc::new(matrix),
            factor: Arc::new(factor),
            jitter,
            variance,
            inv_spectral_radius: OnceLock::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn matrix(&self) -> MatRef<'_, f64> {
        (*self.matrix).as_ref()
    }

    /// Lower-triangular factor `L` with `C = L Lᵀ`.
    pub fn factor(&self) -> MatRef<'_, f64> {
        (*self.factor).as_ref()
    }

    fn check(&self, field: &[f64]) {
        assert_eq!(
            field.len(),
            self.len(),
            "field length does not match covariance grid"
        );
    }

    /// `C f`
    pub fn apply_cov(&self, field: &[f64]) -> Vec<f64> {
        self.check(field);
        matvec((*self.matrix).as_ref(), field)
    }

    /// `C⁻¹ f` through two triangular solves.
    pub fn apply_inv_cov(&self, field: &[f64]) -> Vec<f64> {
        let mut x = self.whiten(field);
        solve_upper_triangular_in_place(
            (*self.factor).as_ref().transpose(),
            ColMut::from_slice_mut(&mut x).as_mat_mut(),
            Par::Seq,
        );
        x
    }

    /// `L⁻¹ f`, so that `‖L⁻¹ f‖² = fᵀ C⁻¹ f`.
    pub fn whiten(&self, field: &[f64]) -> Vec<f64> {
        self.check(field);
        let mut x = field.to_vec();
        solve_lower_triangular_in_place(
            (*self.factor).as_ref(),
            ColMut::from_slice_mut(&mut x).as_mat_mut(),
            Par::Seq,
        );
        x
    }

    /// `L w`, mapping white noise to a field with covariance `C`.
    pub fn color(&self, white: &[f64]) -> Vec<f64> {
        self.check(white);
        matvec((*self.factor).as_ref(), white)
    }

    /// `Lᵀ f`
    pub fn color_transpose(&self, field: &[f64]) -> Vec<f64> {
        self.check(field);
        matvec((*self.factor).as_ref().transpose(), field)
    }

    /// `fᵀ C⁻¹ f`
    pub fn inv_cov_quadratic(&self, field: &[f64]) -> f64 {
        let w = self.whiten(field);
        dot(&w, &w)
    }

    /// `‖C^{-1/2} f‖`
    pub fn inv_cov_norm(&self, field: &[f64]) -> f64 {
        self.inv_cov_quadratic(field).sqrt()
    }

    /// Largest eigenvalue of `C⁻¹`, i.e. `1/λ_min(C)`, estimated once by
    /// power iteration and cached.
    pub fn inv_spectral_radius(&self) -> f64 {
        *self.inv_spectral_radius.get_or_init(|| {
            let n = self.len();
            let mut x: Vec<f64> = (0..n)
                .map(|i| if i % 2 == 0 { 1.0 } else { -1.0 } + 1e-3 * (i as f64).sin())
                .collect();
            let mut estimate = 0.0;
            for _ in 0..300 {
                let nrm = dot(&x, &x).sqrt();
                x.iter_mut().for_each(|v| *v /= nrm);
                let y = self.apply_inv_cov(&x);
                let next = dot(&x, &y);
                x = y;
                if (next - estimate).abs() <= 1e-6 * next {
                    estimate = next;
                    break;
                }
                estimate = next;
            }
            estimate
        })
    }
}

pub(crate) fn matvec(m: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.nrows()];
    matmul(
        ColMut::from_slice_mut(&mut out).as_mat_mut(),
        Accum::Replace,
        m,
        ColRef::from_slice(x).as_mat(),
        1.0,
        Par::Seq,
    );
    out
}

/// Builds one covariance per layer grid.
pub fn build_covariances(
    grids: &[LayerGrid],
    stats: &TurbulenceStatistics,
    cap: usize,
) -> Result<Vec<LayerCovariance>> {
    grids
        .iter()
        .map(|g| LayerCovariance::build_capped(g, stats, cap))
        .collect()
}

/// Draws `Φ = W_ρ Ψ` with `Ψ⁽ˡ⁾ ~ N(0, C_Φ)` independently per layer.
pub fn sample_atmosphere(
    profile: &AtmosphereProfile,
    covariances: &[LayerCovariance],
    seed: u64,
) -> Result<LayerStack> {
    if profile.len() != covariances.len() {
        return Err(TomoError::DimensionMismatch(format!(
            "profile has {} layers but {} covariances were given",
            profile.len(),
            covariances.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = covariances
        .iter()
        .zip(&profile.rho)
        .map(|(cov, rho)| {
            let white: Vec<f64> = (0..cov.len())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let mut field = cov.color(&white);
            let s = rho.sqrt();
            field.iter_mut().for_each(|v| *v *= s);
            field
        })
        .collect();
    Ok(LayerStack { layers })
}
