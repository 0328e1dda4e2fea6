//! Randomized invariants across the library.

use std::sync::OnceLock;

use approx::assert_relative_eq;
use atmotomo::evaluation::{evaluate, relative_error, strehl};
use atmotomo::geometry::{
    circular_asterism, cone_scale, project_point, visible_domain, Aperture, ApertureGrid, EvaluationGrid, GuideStar, LayerGrid, ARCMIN,
};
use atmotomo::operator::{bilinear_stencil, covering_layer_grids, estimate_spectral_norm, NoiseModel, TomographyOperator, WavefrontSet};
use atmotomo::solvers::{
    objective_f, objective_g, rho_update, shrink_with_norms, thresholds_from_norms, weights_from_norms,
    ClusterPartition, Problem,
};
use atmotomo::turbulence::{build_covariances, LayerCovariance, LayerStack, TurbulenceStatistics};
use proptest::prelude::*;

fn stats() -> TurbulenceStatistics {
    TurbulenceStatistics::new(1.0, 3.0).unwrap()
}

fn small_problem() -> &'static Problem {
    static PROBLEM: OnceLock<Problem> = OnceLock::new();
    PROBLEM.get_or_init(|| {
        let ap = ApertureGrid::new(Aperture::circular(2.0).unwrap(), 5).unwrap();
        let stars = vec![
            GuideStar::ngs([0.2 * ARCMIN, 0.0]),
            GuideStar::ngs([-0.2 * ARCMIN, 0.1 * ARCMIN]),
            GuideStar::lgs([0.0, 0.2 * ARCMIN], 90_000.0).unwrap(),
        ];
        let grids: Vec<_> = [0.0, 1000.0, 3000.0]
            .iter()
            .map(|&h| LayerGrid::new(h, [-1.2, -1.2], 0.6, 5, 5).unwrap())
            .collect();
        let covs = build_covariances(&grids, &stats(), 64).unwrap();
        let op = TomographyOperator::new(ap, stars, grids).unwrap();
        Problem::new(op, covs, NoiseModel::new(0.3, 0).unwrap()).unwrap()
    })
}

fn stack_strategy() -> impl Strategy<Value = LayerStack> {
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 25), 3).prop_map(|layers| LayerStack { layers })
}

fn data_strategy() -> impl Strategy<Value = WavefrontSet> {
    let nodes = small_problem().op.aperture.len();
    prop::collection::vec(prop::collection::vec(-3.0..3.0f64, nodes), 3).prop_map(|fields| WavefrontSet { fields })
}

fn partition() -> ClusterPartition {
    ClusterPartition::new(vec![vec![0], vec![1, 2]], vec![0.6, 0.4], 3).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cone_scale_decreases_with_altitude(h1 in 0.0..40_000.0f64, dh in 1.0..40_000.0f64, beacon in 85_000.0..95_000.0f64) {
        let star = GuideStar::lgs([0.0, 0.0], beacon).unwrap();
        prop_assert!(cone_scale(h1 + dh, &star).unwrap() < cone_scale(h1, &star).unwrap());
    }

    #[test]
    fn projection_is_affine(
        r1 in prop::array::uniform2(-5.0..5.0f64),
        r2 in prop::array::uniform2(-5.0..5.0f64),
        t in 0.0..1.0f64,
        h in 0.0..20_000.0f64,
        dir in prop::array::uniform2(-1e-3..1e-3f64),
    ) {
        for star in [GuideStar::ngs(dir), GuideStar::lgs(dir, 90_000.0).unwrap()] {
            let mix = [t * r1[0] + (1.0 - t) * r2[0], t * r1[1] + (1.0 - t) * r2[1]];
            let (a, b, m) = (
                project_point(r1, h, &star).unwrap(),
                project_point(r2, h, &star).unwrap(),
                project_point(mix, h, &star).unwrap(),
            );
            for k in 0..2 {
                prop_assert!((m[k] - (t * a[k] + (1.0 - t) * b[k])).abs() <= 1e-12 * (1.0 + m[k].abs()));
            }
        }
        let p = project_point(r1, h, &GuideStar::ngs(dir)).unwrap();
        prop_assert!((p[0] - (r1[0] + h * dir[0])).abs() <= 1e-12);
        prop_assert!((p[1] - (r1[1] + h * dir[1])).abs() <= 1e-12);
    }

    #[test]
    fn ngs_domains_grow_with_altitude(
        dirs in prop::collection::vec(prop::array::uniform2(-1e-3..1e-3f64), 1..6),
        h in 0.0..20_000.0f64,
        dh in 0.0..20_000.0f64,
    ) {
        let ap = Aperture::circular(8.0).unwrap();
        // Growth needs the origin inside the hull of the directions, as for
        // any asterism around the science axis.
        let mut stars: Vec<_> = dirs.into_iter().map(GuideStar::ngs).collect();
        stars.push(GuideStar::on_axis());
        let ground = visible_domain(0.0, &stars, &ap).unwrap();
        prop_assert_eq!(ground, ap.bounding_box());
        let low = visible_domain(h, &stars, &ap).unwrap();
        let high = visible_domain(h + dh, &stars, &ap).unwrap();
        prop_assert!(high.contains_rect(&low, 1e-12));
    }

    #[test]
    fn stencils_partition_unity(x in -1.2..1.2f64, y in -1.2..1.2f64) {
        let grid = LayerGrid::new(0.0, [-1.2, -1.2], 0.6, 5, 5).unwrap();
        let s = bilinear_stencil(&grid, [x, y]).unwrap();
        prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        prop_assert!(s.weights.iter().all(|w| *w >= -1e-15));
    }

    #[test]
    fn forward_is_linear(x in stack_strategy(), y in stack_strategy(), a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let op = &small_problem().op;
        let mut combo = x.scaled(a);
        combo.axpy(b, &y);
        let lhs = op.forward(&combo);
        let mut rhs = op.forward(&x);
        rhs.scale(a);
        rhs.axpy(b, &op.forward(&y));
        let mut diff = lhs.clone();
        diff.axpy(-1.0, &rhs);
        prop_assert!(diff.norm() <= 1e-12 * (1.0 + lhs.norm()));
    }

    #[test]
    fn adjoint_identity(x in stack_strategy(), y in data_strategy()) {
        let op = &small_problem().op;
        let ax = op.forward(&x);
        let gap = (ax.dot(&y) - x.dot(&op.adjoint(&y))).abs();
        prop_assert!(gap <= 1e-12 * (ax.norm() * y.norm()).max(1e-300));
    }

    #[test]
    fn inverse_covariance_quadratic_is_positive(f in prop::collection::vec(-3.0..3.0f64, 25)) {
        let cov = &small_problem().covs[1];
        let q = cov.inv_cov_quadratic(&f);
        let positive = if f.iter().all(|v| *v == 0.0) { q == 0.0 } else { q > 0.0 };
        prop_assert!(positive);
    }

    #[test]
    fn weights_lie_on_the_clustered_simplex(norms in prop::collection::vec(0.0..5.0f64, 3)) {
        let p = partition();
        let rho = weights_from_norms(&norms, &p);
        prop_assert!(rho.iter().all(|r| *r >= 0.0));
        prop_assert!(p.admits(&rho, 1e-10));
    }

    #[test]
    fn reduced_functional_matches_joint_at_optimal_weights(x in stack_strategy(), y in data_strategy(), alpha in 0.01..5.0f64) {
        let problem = small_problem();
        let p = partition();
        let rho = rho_update(problem, &x, &p);
        let g = objective_g(problem, &y, &x, &p, alpha);
        let f = objective_f(problem, &y, &x, &rho, alpha).unwrap();
        prop_assert!((g - f).abs() <= 1e-10 * g);
    }

    #[test]
    fn shrink_satisfies_prox_optimality(
        u in prop::collection::vec(prop::collection::vec(-3.0..3.0f64, 1..6), 1..5),
        alpha in 0.01..5.0f64,
        lambda in 0.1..10.0f64,
    ) {
        let n = u.len();
        let p = ClusterPartition::single(n).unwrap();
        let u = LayerStack { layers: u };
        let norms: Vec<f64> = u.layers.iter().map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        let gammas = thresholds_from_norms(&norms, &p, alpha, lambda);
        let v = shrink_with_norms(&u, &norms, &gammas, &p);
        let vn: Vec<f64> = v.layers.iter().map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
        // Subdifferential of α(Σ‖v_l‖)²: 2αS·v_l/‖v_l‖, or the 2αS-ball at v_l = 0.
        let radius = 2.0 * alpha * vn.iter().sum::<f64>();
        for l in 0..n {
            if vn[l] > 0.0 {
                for (vi, ui) in v.layers[l].iter().zip(&u.layers[l]) {
                    prop_assert!((lambda * (vi - ui) + radius * vi / vn[l]).abs() <= 1e-8);
                }
            } else {
                prop_assert!(lambda * norms[l] <= radius + 1e-8);
            }
        }
    }

    #[test]
    fn strehl_bounds_and_piston(r in prop::collection::vec(-2.0..2.0f64, 2..50), c in -10.0..10.0f64) {
        let s = strehl(&r);
        prop_assert!(s > 0.0 && s <= 1.0);
        let shifted: Vec<f64> = r.iter().map(|v| v + c).collect();
        prop_assert!((strehl(&shifted) - s).abs() <= 1e-12);
        if r.iter().all(|v| *v == r[0]) {
            prop_assert_eq!(s, 1.0);
        }
        if s == 1.0 {
            prop_assert!(r.iter().all(|v| (v - r[0]).abs() < 1e-7));
        }
    }

    #[test]
    fn relative_error_identities(x in stack_strategy()) {
        let problem = small_problem();
        let star = &problem.op.stars[0];
        prop_assume!(problem.op.project(&x, star).unwrap().iter().any(|v| *v != 0.0));
        prop_assert_eq!(relative_error(&x, &x, star, &problem.op).unwrap(), 0.0);
        prop_assert_eq!(relative_error(&x, &LayerStack::zeros_like(&x), star, &problem.op).unwrap(), 1.0);
    }

    #[test]
    fn strehl_follows_directions_under_relabeling(x in stack_strategy(), y in stack_strategy(), shift in 0usize..9) {
        let op = &small_problem().op;
        let grid = EvaluationGrid::square(3, 0.2).unwrap();
        let mut dirs = grid.directions.clone();
        dirs.rotate_left(shift);
        let permuted = EvaluationGrid::new(dirs).unwrap();
        let a = evaluate(&x, &y.scaled(0.1), op, &grid).unwrap();
        let b = evaluate(&x, &y.scaled(0.1), op, &permuted).unwrap();
        let mut rotated = a.strehl.clone();
        rotated.rotate_left(shift);
        prop_assert_eq!(rotated, b.strehl);
        assert_relative_eq!(a.mean_strehl, b.mean_strehl, max_relative = 1e-12);
    }
}

#[test]
fn covariance_is_stationary() {
    let grid = LayerGrid::new(0.0, [0.0, 0.0], 0.5, 6, 6).unwrap();
    let cov = LayerCovariance::build(&grid, &stats()).unwrap();
    let m = cov.matrix();
    let n = grid.len();
    let mut seen: Vec<(i64, i64, f64)> = Vec::new();
    for p in 0..n {
        for q in 0..n {
            let (a, b) = (grid.node(p), grid.node(q));
            let off = (((a[0] - b[0]) / 0.5).round() as i64, ((a[1] - b[1]) / 0.5).round() as i64);
            let key = (off.0.abs().max(off.1.abs()), off.0.abs().min(off.1.abs()));
            let v = m[(p, q)] - if p == q { cov.jitter } else { 0.0 };
            match seen.iter().find(|s| (s.0, s.1) == key) {
                Some(s) => assert!((s.2 - v).abs() <= 1e-12 * s.2.abs().max(1.0), "offset {key:?}"),
                None => seen.push((key.0, key.1, v)),
            }
        }
    }
}

/// Holds when layers are sampled at the aperture spacing, so that no layer
/// node collects more than unit weight from one star.
#[test]
fn spectral_norm_is_bounded_by_stars_times_layers() {
    let ap = ApertureGrid::new(Aperture::circular(4.0).unwrap(), 9).unwrap();
    let stars = circular_asterism(4, 0.5).unwrap();
    let altitudes = [0.0, 2000.0, 6000.0, 12000.0];
    let grids = covering_layer_grids(&ap, &stars, &[], &altitudes, None).unwrap();
    let op = TomographyOperator::new(ap, stars, grids).unwrap();
    let est = estimate_spectral_norm(&op, &NoiseModel::unit()).unwrap();
    let bound = (op.num_stars() * op.num_layers()) as f64;
    assert!(est.value <= bound + 1e-9, "{} > {bound}", est.value);
}
