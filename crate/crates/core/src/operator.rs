//! Discrete tomography operator: bilinear interpolation of every layer along
//! every guide-star beam, its exact transpose, and the spectral-norm and
//! flop-count estimates used to pick step sizes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};
use crate::geometry::{project_point, visible_domain, ApertureGrid, GuideStar, LayerGrid, Vec2};
use crate::turbulence::{axpy, dot, LayerCovariance, LayerStack};

/// Four grid nodes and their bilinear weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
}

impl Stencil {
    #[inline]
    fn gather(&self, field: &[f64]) -> f64 {
        self.weights[0] * field[self.nodes[0]]
            + self.weights[1] * field[self.nodes[1]]
            + self.weights[2] * field[self.nodes[2]]
            + self.weights[3] * field[self.nodes[3]]
    }

    #[inline]
    fn scatter(&self, value: f64, field: &mut [f64]) {
        for k in 0..4 {
            field[self.nodes[k]] += self.weights[k] * value;
        }
    }
}

/// Bilinear stencil of `point` on `grid`, or `None` if it lies outside.
pub fn bilinear_stencil(grid: &LayerGrid, point: Vec2) -> Option<Stencil> {
    const TOL: f64 = 1e-9;
    let fx = (point[0] - grid.origin[0]) / grid.spacing;
    let fy = (point[1] - grid.origin[1]) / grid.spacing;
    let (mx, my) = ((grid.nx - 1) as f64, (grid.ny - 1) as f64);
    if !(fx >= -TOL && fy >= -TOL && fx <= mx + TOL && fy <= my + TOL) {
        return None;
    }
    let i = (fx.floor().max(0.0) as usize).min(grid.nx - 2);
    let j = (fy.floor().max(0.0) as usize).min(grid.ny - 2);
    let tx = (fx - i as f64).clamp(0.0, 1.0);
    let ty = (fy - j as f64).clamp(0.0, 1.0);
    let base = j * grid.nx + i;
    Some(Stencil {
        nodes: [base, base + 1, base + grid.nx, base + grid.nx + 1],
        weights: [
            (1.0 - tx) * (1.0 - ty),
            tx * (1.0 - ty),
            (1.0 - tx) * ty,
            tx * ty,
        ],
    })
}

/// One aperture field (in-pupil nodes only) per guide star.
#[derive(Debug, Clone, PartialEq)]
pub struct WavefrontSet {
    pub fields: Vec<Vec<f64>>,
}

impl WavefrontSet {
    pub fn zeros(stars: usize, nodes: usize) -> Self {
        Self {
            fields: vec![vec![0.0; nodes]; stars],
        }
    }

    pub fn dot(&self, other: &WavefrontSet) -> f64 {
        self.fields
            .iter()
            .zip(&other.fields)
            .map(|(a, b)| dot(a, b))
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += a·x`
    pub fn axpy(&mut self, a: f64, x: &WavefrontSet) {
        for (s, xf) in self.fields.iter_mut().zip(&x.fields) {
            axpy(s, a, xf);
        }
    }

    pub fn scale(&mut self, a: f64) {
        for v in self.fields.iter_mut().flatten() {
            *v *= a;
        }
    }
}

/// Scalar measurement noise `C_η = σ² I`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn new(sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(TomoError::Config(format!(
                "noise sigma must be finite and nonnegative, got {sigma}"
            )));
        }
        Ok(Self { sigma, seed })
    }

    /// Unit covariance, `C_η = I`.
    pub fn unit() -> Self {
        Self {
            sigma: 1.0,
            seed: 0,
        }
    }

    /// `1/σ²`, the scalar `C_η⁻¹`.
    pub fn precision(&self) -> Result<f64> {
        if self.sigma > 0.0 {
            Ok(1.0 / (self.sigma * self.sigma))
        } else {
            Err(TomoError::Domain(
                "a zero-variance noise model has no inverse covariance".into(),
            ))
        }
    }
}

/// Adds i.i.d. Gaussian noise of standard deviation `σ` to every node.
pub fn add_noise(data: &WavefrontSet, noise: &NoiseModel) -> WavefrontSet {
    if noise.sigma == 0.0 {
        return data.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let mut out = data.clone();
    for v in out.fields.iter_mut().flatten() {
        let e: f64 = StandardNormal.sample(&mut rng);
        *v += noise.sigma * e;
    }
    out
}

/// Tomography operator `A` for a fixed asterism and set of layer grids.
#[derive(Debug, Clone)]
pub struct TomographyOperator {
    pub aperture: ApertureGrid,
    pub stars: Vec<GuideStar>,
    pub layers: Vec<LayerGrid>,
    /// Stencils for star `g` and layer `l` at index `g·L + l`, one per pupil node.
    stencils: Vec<Vec<Stencil>>,
}

/// Builds the stencils of every pupil node for one beam through one layer.
fn beam_stencils(
    aperture: &ApertureGrid,
    star: &GuideStar,
    grid: &LayerGrid,
    star_idx: usize,
    layer_idx: usize,
) -> Result<Vec<Stencil>> {
    aperture
        .nodes
        .iter()
        .map(|&r| {
            let p = project_point(r, grid.altitude, star)?;
            bilinear_stencil(grid, p).ok_or(TomoError::GridCoverage {
                star: star_idx,
                layer: layer_idx,
            })
        })
        .collect()
}

impl TomographyOperator {
    pub fn new(aperture: ApertureGrid, stars: Vec<GuideStar>, layers: Vec<LayerGrid>) -> Result<Self> {
        if stars.is_empty() || layers.is_empty() {
            return Err(TomoError::InvalidGeometry(
                "operator needs at least one star and one layer".into(),
            ));
        }
        let mut stencils = Vec::with_capacity(stars.len() * layers.len());
        for (g, star) in stars.iter().enumerate() {
            for (l, grid) in layers.iter().enumerate() {
                stencils.push(beam_stencils(&aperture, star, grid, g, l)?);
            }
        }
        Ok(Self {
            aperture,
            stars,
            layers,
            stencils,
        })
    }

    pub fn num_stars(&self) -> usize {
        self.stars.len()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        self.layers.iter().map(LayerGrid::len).collect()
    }

    pub fn zero_stack(&self) -> LayerStack {
        LayerStack::zeros(self.layer_sizes())
    }

    pub fn zero_data(&self) -> WavefrontSet {
        WavefrontSet::zeros(self.num_stars(), self.aperture.len())
    }

    pub fn stencils(&self, star: usize, layer: usize) -> &[Stencil] {
        &self.stencils[star * self.layers.len() + layer]
    }

    fn check_stack(&self, phi: &LayerStack) {
        assert_eq!(phi.layers.len(), self.layers.len(), "layer count mismatch");
        for (f, g) in phi.layers.iter().zip(&self.layers) {
            assert_eq!(f.len(), g.len(), "layer field does not match its grid");
        }
    }

    /// `A Φ`
    pub fn forward(&self, phi: &LayerStack) -> WavefrontSet {
        self.check_stack(phi);
        let n = self.aperture.len();
        let fields = (0..self.num_stars())
            .map(|g| {
                let mut out = vec![0.0; n];
                for (l, field) in phi.layers.iter().enumerate() {
                    for (o, s) in out.iter_mut().zip(self.stencils(g, l)) {
                        *o += s.gather(field);
                    }
                }
                out
            })
            .collect();
        WavefrontSet { fields }
    }

    /// `Aᵀ φ`, accumulated star by star, layer by layer, in node order.
    pub fn adjoint(&self, data: &WavefrontSet) -> LayerStack {
        assert_eq!(data.fields.len(), self.num_stars(), "star count mismatch");
        let mut out = self.zero_stack();
        for (g, field) in data.fields.iter().enumerate() {
            assert_eq!(field.len(), self.aperture.len(), "wavefront length mismatch");
            for (l, layer) in out.layers.iter_mut().enumerate() {
                for (&v, s) in field.iter().zip(self.stencils(g, l)) {
                    s.scatter(v, layer);
                }
            }
        }
        out
    }

    /// Propagates `phi` onto the aperture along an arbitrary direction.
    pub fn project(&self, phi: &LayerStack, star: &GuideStar) -> Result<Vec<f64>> {
        self.check_stack(phi);
        let mut out = vec![0.0; self.aperture.len()];
        for (l, (grid, field)) in self.layers.iter().zip(&phi.layers).enumerate() {
            let st = beam_stencils(&self.aperture, star, grid, usize::MAX, l)?;
            for (o, s) in out.iter_mut().zip(&st) {
                *o += s.gather(field);
            }
        }
        Ok(out)
    }

    /// Operator restricted to a subset of its layers.
    pub fn select_layers(&self, keep: &[usize]) -> Result<Self> {
        let layers = keep
            .iter()
            .map(|&l| {
                self.layers.get(l).cloned().ok_or_else(|| {
                    TomoError::InvalidGeometry(format!("layer index {l} out of range"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.aperture.clone(), self.stars.clone(), layers)
    }
}

/// Layer grids on the aperture lattice covering every beam of `stars` and
/// of the extra `directions` (e.g. evaluation directions).
pub fn covering_layer_grids(
    aperture: &ApertureGrid,
    stars: &[GuideStar],
    directions: &[Vec2],
    altitudes: &[f64],
    spacing: Option<f64>,
) -> Result<Vec<LayerGrid>> {
    let spacing = spacing.unwrap_or(aperture.spacing);
    let mut beams = stars.to_vec();
    beams.extend(directions.iter().map(|&d| GuideStar::ngs(d)));
    altitudes
        .iter()
        .map(|&h| {
            let dom = visible_domain(h, &beams, &aperture.aperture)?;
            LayerGrid::covering(h, &dom, spacing, aperture.origin())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralEstimate {
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

const POWER_TOL: f64 = 1e-6;
const POWER_MAX_ITER: usize = 500;

fn power_iteration(
    sizes: &[usize],
    apply: impl Fn(&LayerStack) -> LayerStack,
) -> SpectralEstimate {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut x = LayerStack {
        layers: sizes
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        1.0 + 0.1 * e
                    })
                    .collect()
            })
            .collect(),
    };
    let mut estimate = 0.0;
    for it in 1..=POWER_MAX_ITER {
        let nrm = x.norm();
        if nrm == 0.0 {
            return SpectralEstimate {
                value: 0.0,
                iterations: it,
                converged: true,
            };
        }
        x.scale(1.0 / nrm);
        let y = apply(&x);
        let next = x.dot(&y);
        let change = (next - estimate).abs();
        estimate = next;
        x = y;
        if change <= POWER_TOL * next.abs() {
            return SpectralEstimate {
                value: estimate,
                iterations: it,
                converged: true,
            };
        }
    }
    log::warn!("power iteration did not converge in {POWER_MAX_ITER} steps");
    SpectralEstimate {
        value: estimate,
        iterations: POWER_MAX_ITER,
        converged: false,
    }
}

/// `λ_max(Aᵀ C_η⁻¹ A)` by power iteration.
pub fn estimate_spectral_norm(op: &TomographyOperator, noise: &NoiseModel) -> Result<SpectralEstimate> {
    let precision = noise.precision()?;
    Ok(power_iteration(&op.layer_sizes(), |x| {
        let mut y = op.adjoint(&op.forward(x));
        y.scale(precision);
        y
    }))
}

/// `λ_max(C_Ψ^{1/2} Aᵀ C_η⁻¹ A C_Ψ^{1/2})`, the Lipschitz scale of the data
/// term in whitened variables. Uses `Lᵀ Aᵀ A L`, which has the same spectrum.
pub fn estimate_whitened_spectral_norm(
    op: &TomographyOperator,
    covs: &[LayerCovariance],
    noise: &NoiseModel,
) -> Result<SpectralEstimate> {
    let precision = noise.precision()?;
    if covs.len() != op.num_layers() {
        return Err(TomoError::DimensionMismatch(
            "one covariance per layer is required".into(),
        ));
    }
    Ok(power_iteration(&op.layer_sizes(), |theta| {
        let colored = LayerStack {
            layers: theta
                .layers
                .iter()
                .zip(covs)
                .map(|(t, c)| c.color(t))
                .collect(),
        };
        let back = op.adjoint(&op.forward(&colored));
        LayerStack {
            layers: back
                .layers
                .iter()
                .zip(covs)
                .map(|(b, c)| {
                    let mut v = c.color_transpose(b);
                    v.iter_mut().for_each(|e| *e *= precision);
                    v
                })
                .collect(),
        }
    }))
}

/// Coefficient of `n` in the per-iteration cost `(16G+3)·n·L + (2−9G)·n`.
pub fn flop_coefficient(stars: u64, layers: u64) -> i64 {
    let g = stars as i64;
    (16 * g + 3) * layers as i64 + (2 - 9 * g)
}

/// Flops of one standard gradient iteration for `n` unknowns per layer.
pub fn flop_cost(stars: u64, layers: u64, n: u64) -> i64 {
    flop_coefficient(stars, layers) * n as i64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{circular_asterism, Aperture, ARCMIN};
    use approx::assert_relative_eq;

    fn ten_metre_aperture() -> ApertureGrid {
        ApertureGrid::new(Aperture::circular(10.0).unwrap(), 21).unwrap()
    }

    /// One ground layer on exactly the aperture nodes, one on-axis star.
    fn identity_operator(stars: usize) -> TomographyOperator {
        let ap = ten_metre_aperture();
        let grid = LayerGrid::new(0.0, [-5.0, -5.0], 0.5, 21, 21).unwrap();
        TomographyOperator::new(ap, vec![GuideStar::on_axis(); stars], vec![grid]).unwrap()
    }

    fn random_stack(op: &TomographyOperator, seed: u64) -> LayerStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        LayerStack {
            layers: op
                .layer_sizes()
                .iter()
                .map(|&n| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect(),
        }
    }

    fn random_data(op: &TomographyOperator, seed: u64) -> WavefrontSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = op.zero_data();
        for v in d.fields.iter_mut().flatten() {
            *v = StandardNormal.sample(&mut rng);
        }
        d
    }

    #[test]
    fn identity_geometry_has_unit_stencils() {
        let op = identity_operator(1);
        for (k, s) in op.stencils(0, 0).iter().enumerate() {
            let hit: Vec<_> = (0..4).filter(|&i| s.weights[i] == 1.0).collect();
            assert_eq!(hit.len(), 1);
            assert_eq!(s.nodes[hit[0]], op.aperture.square_index[k]);
            assert_eq!(s.weights.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn cell_center_gets_quarter_weights() {
        let grid = LayerGrid::new(0.0, [0.0, 0.0], 1.0, 3, 3).unwrap();
        let s = bilinear_stencil(&grid, [0.5, 1.5]).unwrap();
        assert_eq!(s.weights, [0.25; 4]);
        assert_eq!(s.nodes, [3, 4, 6, 7]);
        assert!(bilinear_stencil(&grid, [2.5, 0.0]).is_none());
    }

    #[test]
    fn stencils_form_partition_of_unity() {
        let ap = ten_metre_aperture();
        let stars = circular_asterism(6, 1.5).unwrap();
        let alts = [0.0, 500.0, 4000.0, 12_000.0];
        let grids = covering_layer_grids(&ap, &stars, &[], &alts, None).unwrap();
        let op = TomographyOperator::new(ap, stars, grids).unwrap();
        for g in 0..op.num_stars() {
            for l in 0..op.num_layers() {
                for s in op.stencils(g, l) {
                    assert!(s.weights.iter().all(|w| *w >= 0.0));
                    assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn coverage_error_names_star_and_layer() {
        let ap = ten_metre_aperture();
        let grid = LayerGrid::new(0.0, [-5.0, -5.0], 0.5, 21, 21).unwrap();
        let stars = vec![GuideStar::on_axis(), GuideStar::ngs([1.0 * ARCMIN, 0.0])];
        let high = LayerGrid { altitude: 5000.0, ..grid.clone() };
        let err = TomographyOperator::new(ap, stars, vec![grid, high]).unwrap_err();
        assert!(matches!(err, TomoError::GridCoverage { star: 1, layer: 1 }));
    }

    #[test]
    fn forward_examples() {
        let op = identity_operator(1);
        assert!(op.forward(&op.zero_stack()).fields[0].iter().all(|v| *v == 0.0));
        let phi = random_stack(&op, 1);
        let w = op.forward(&phi);
        for (k, v) in w.fields[0].iter().enumerate() {
            assert_eq!(*v, phi.layers[0][op.aperture.square_index[k]]);
        }

        let ap = ten_metre_aperture();
        let stars = circular_asterism(6, 1.5).unwrap();
        let alts = [0.0, 1000.0, 8000.0];
        let grids = covering_layer_grids(&ap, &stars, &[], &alts, None).unwrap();
        let op = TomographyOperator::new(ap, stars, grids).unwrap();
        let ones = LayerStack {
            layers: op.layer_sizes().iter().map(|&n| vec![1.0; n]).collect(),
        };
        for v in op.forward(&ones).fields.iter().flatten() {
            assert!((v - 3.0).abs() < 1e-13);
        }
    }

    #[test]
    fn adjoint_examples() {
        let op = identity_operator(1);
        assert!(op.adjoint(&op.zero_data()).is_zero());
        let d = random_data(&op, 3);
        let back = op.adjoint(&d);
        let mut expect = vec![0.0; 21 * 21];
        for (k, &idx) in op.aperture.square_index.iter().enumerate() {
            expect[idx] = d.fields[0][k];
        }
        assert_eq!(back.layers[0], expect);
    }

    #[test]
    fn adjoint_identity_and_linearity() {
        let ap = ten_metre_aperture();
        let stars = circular_asterism(6, 1.5).unwrap();
        let alts = [0.0, 300.0, 2000.0, 9000.0];
        let grids = covering_layer_grids(&ap, &stars, &[], &alts, None).unwrap();
        let op = TomographyOperator::new(ap, stars, grids).unwrap();
        for seed in 0..5 {
            let x = random_stack(&op, seed);
            let y = random_data(&op, 100 + seed);
            let ax = op.forward(&x);
            let lhs = ax.dot(&y);
            let rhs = x.dot(&op.adjoint(&y));
            assert!((lhs - rhs).abs() <= 1e-12 * ax.norm() * y.norm());

            let z = random_stack(&op, 50 + seed);
            let mut combo = x.scaled(2.0);
            combo.axpy(-0.5, &z);
            let mut expect = op.forward(&x);
            expect.scale(2.0);
            expect.axpy(-0.5, &op.forward(&z));
            let got = op.forward(&combo);
            let mut diff = got.clone();
            diff.axpy(-1.0, &expect);
            assert!(diff.norm() <= 1e-12 * expect.norm());
        }
    }

    #[test]
    fn spectral_norm_examples() {
        let est = estimate_spectral_norm(&identity_operator(1), &NoiseModel::unit()).unwrap();
        assert!(est.converged);
        assert!((est.value - 1.0).abs() < 1e-6);
        let est = estimate_spectral_norm(&identity_operator(4), &NoiseModel::unit()).unwrap();
        assert!((est.value - 4.0).abs() < 1e-6 * 4.0);
        let half = NoiseModel::new(0.5, 0).unwrap();
        let est = estimate_spectral_norm(&identity_operator(1), &half).unwrap();
        assert!((est.value - 4.0).abs() < 1e-6 * 4.0);
        assert!(NoiseModel::new(0.0, 0).unwrap().precision().is_err());
    }

    #[test]
    fn spectral_norm_bounded_by_stars_times_layers() {
        let ap = ten_metre_aperture();
        let stars = circular_asterism(3, 1.0).unwrap();
        let alts = [0.0, 2000.0, 6000.0];
        let grids = covering_layer_grids(&ap, &stars, &[], &alts, None).unwrap();
        let op = TomographyOperator::new(ap, stars, grids).unwrap();
        let est = estimate_spectral_norm(&op, &NoiseModel::unit()).unwrap();
        assert!(est.value > 0.0 && est.value <= 9.0 + 1e-6);
    }

    #[test]
    fn noise_examples() {
        let op = identity_operator(2);
        let d = random_data(&op, 9);
        assert_eq!(add_noise(&d, &NoiseModel::new(0.0, 4).unwrap()), d);
        let nm = NoiseModel::new(0.3, 4).unwrap();
        assert_eq!(add_noise(&d, &nm), add_noise(&d, &nm));

        let big = WavefrontSet {
            fields: vec![vec![0.0; 100_000]],
        };
        let noisy = add_noise(&big, &NoiseModel::new(0.7, 11).unwrap());
        let v = &noisy.fields[0];
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        assert!((sd - 0.7).abs() < 0.02 * 0.7);
    }

    #[test]
    fn cost_model_table_entries() {
        assert_eq!(flop_coefficient(6, 40), 3908);
        assert_eq!(flop_coefficient(6, 9), 839);
        assert_eq!(flop_coefficient(6, 5), 443);
        assert_eq!(flop_coefficient(6, 3), 245);
        assert_eq!(flop_coefficient(1, 1), 12);
        assert_eq!(flop_cost(6, 40, 1000), 3_908_000);
    }

    #[test]
    fn directional_projection_matches_forward() {
        let ap = ten_metre_aperture();
        let stars = circular_asterism(6, 1.5).unwrap();
        let grids = covering_layer_grids(&ap, &stars, &[], &[0.0, 5000.0], None).unwrap();
        let op = TomographyOperator::new(ap, stars.clone(), grids).unwrap();
        let x = random_stack(&op, 8);
        let all = op.forward(&x);
        for (g, s) in stars.iter().enumerate() {
            assert_eq!(op.project(&x, s).unwrap(), all.fields[g]);
        }
    }

    #[test]
    fn whitened_norm_with_identity_covariance_factor() {
        use crate::turbulence::{LayerCovariance, TurbulenceStatistics};
        let op = identity_operator(1);
        let covs = vec![LayerCovariance::build(&op.layers[0], &TurbulenceStatistics::default()).unwrap()];
        let plain = estimate_spectral_norm(&op, &NoiseModel::unit()).unwrap();
        let white = estimate_whitened_spectral_norm(&op, &covs, &NoiseModel::unit()).unwrap();
        // Whitening by a covariance with large smooth modes inflates the scale.
        assert!(white.value > plain.value);
        assert_relative_eq!(plain.value, 1.0, epsilon = 1e-6);
    }
}
