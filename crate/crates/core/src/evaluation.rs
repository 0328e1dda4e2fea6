//! Correction quality: ground-conjugated DM shape, Marechal Strehl over the
//! field, directional relative errors and radial averages.

use std::io::Write;

use crate::error::{Result, TomoError};
use crate::geometry::{EvaluationGrid, GuideStar, Vec2, ARCMIN};
use crate::operator::TomographyOperator;
use crate::turbulence::{dot, LayerStack};

/// Shape of a single ground-conjugated mirror: the stack seen on axis.
pub fn dm_shape(phi: &LayerStack, op: &TomographyOperator) -> Result<Vec<f64>> {
    op.project(phi, &GuideStar::on_axis())
}

/// Truth propagated along `direction` minus the mirror shape.
pub fn residual(
    truth: &LayerStack,
    dm: &[f64],
    direction: Vec2,
    op: &TomographyOperator,
) -> Result<Vec<f64>> {
    let mut r = op.project(truth, &GuideStar::ngs(direction))?;
    if r.len() != dm.len() {
        return Err(TomoError::DimensionMismatch(
            "mirror shape does not match the aperture grid".into(),
        ));
    }
    r.iter_mut().zip(dm).for_each(|(a, b)| *a -= b);
    Ok(r)
}

/// `exp(−σ²)` with `σ²` the piston-removed pupil variance of the residual.
/// Nodes are equal-area, so the discrete variance is a plain mean.
pub fn strehl(residual: &[f64]) -> f64 {
    if residual.is_empty() {
        return 1.0;
    }
    let n = residual.len() as f64;
    let mean = residual.iter().sum::<f64>() / n;
    let var = residual.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (-var).exp()
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `(‖A_g Φ_true‖ − ‖A_g Φ_rec‖) / ‖A_g Φ_true‖`. Signed; a difference of
/// norms, not the norm of a difference.
pub fn relative_error(
    truth: &LayerStack,
    recon: &LayerStack,
    star: &GuideStar,
    op: &TomographyOperator,
) -> Result<f64> {
    let t = norm(&op.project(truth, star)?);
    if t == 0.0 {
        return Err(TomoError::UndefinedMetric(
            "true wavefront has zero norm in this direction".into(),
        ));
    }
    Ok((t - norm(&op.project(recon, star)?)) / t)
}

/// `‖A_g(Φ_true − Φ_rec)‖ / ‖A_g Φ_true‖`
pub fn relative_residual_norm(
    truth: &LayerStack,
    recon: &LayerStack,
    star: &GuideStar,
    op: &TomographyOperator,
) -> Result<f64> {
    let t = op.project(truth, star)?;
    let r = op.project(recon, star)?;
    let nt = norm(&t);
    if nt == 0.0 {
        return Err(TomoError::UndefinedMetric(
            "true wavefront has zero norm in this direction".into(),
        ));
    }
    let diff: Vec<f64> = t.iter().zip(&r).map(|(a, b)| a - b).collect();
    Ok(norm(&diff) / nt)
}

/// Mean Strehl per distinct off-axis distance in arcmin, sorted by distance.
pub fn radial_average(directions: &[Vec2], strehls: &[f64]) -> Vec<(f64, f64)> {
    let mut bins: Vec<(i64, f64, usize)> = Vec::new();
    for (d, s) in directions.iter().zip(strehls) {
        let key = (d[0].hypot(d[1]) / ARCMIN * 1e6).round() as i64;
        match bins.iter_mut().find(|b| b.0 == key) {
            Some(b) => {
                b.1 += s;
                b.2 += 1;
            }
            None => bins.push((key, *s, 1)),
        }
    }
    bins.sort_by_key(|b| b.0);
    bins.into_iter()
        .map(|(k, sum, count)| (k as f64 * 1e-6, sum / count as f64))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct QualityReport {
    pub directions: Vec<Vec2>,
    pub strehl: Vec<f64>,
    pub center_strehl: f64,
    pub mean_strehl: f64,
    pub radial: Vec<(f64, f64)>,
    /// Norm-difference error per guide star.
    pub star_errors: Vec<f64>,
    /// Residual-norm error per guide star.
    pub star_residual_errors: Vec<f64>,
}

/// Evaluates a reconstruction against the truth over `grid` and the
/// operator's guide stars.
pub fn evaluate(
    truth: &LayerStack,
    recon: &LayerStack,
    op: &TomographyOperator,
    grid: &EvaluationGrid,
) -> Result<QualityReport> {
    evaluate_reduced(truth, op, recon, op, grid)
}

/// As [`evaluate`], with the reconstruction living on its own (typically
/// fewer) layers.
pub fn evaluate_reduced(
    truth: &LayerStack,
    truth_op: &TomographyOperator,
    recon: &LayerStack,
    recon_op: &TomographyOperator,
    grid: &EvaluationGrid,
) -> Result<QualityReport> {
    let dm = dm_shape(recon, recon_op)?;
    let strehls = grid
        .directions
        .iter()
        .map(|&d| residual(truth, &dm, d, truth_op).map(|r| strehl(&r)))
        .collect::<Result<Vec<_>>>()?;
    let center_strehl = strehl(&residual(truth, &dm, [0.0, 0.0], truth_op)?);
    let mean_strehl = strehls.iter().sum::<f64>() / strehls.len() as f64;
    let mut star_errors = Vec::with_capacity(truth_op.stars.len());
    let mut star_residual_errors = Vec::with_capacity(truth_op.stars.len());
    for star in &truth_op.stars {
        let t = truth_op.project(truth, star)?;
        let r = recon_op.project(recon, star)?;
        let nt = norm(&t);
        if nt == 0.0 {
            return Err(TomoError::UndefinedMetric(
                "true wavefront has zero norm in this direction".into(),
            ));
        }
        star_errors.push((nt - norm(&r)) / nt);
        let diff: Vec<f64> = t.iter().zip(&r).map(|(a, b)| a - b).collect();
        star_residual_errors.push(norm(&diff) / nt);
    }
    Ok(QualityReport {
        radial: radial_average(&grid.directions, &strehls),
        directions: grid.directions.clone(),
        strehl: strehls,
        center_strehl,
        mean_strehl,
        star_errors,
        star_residual_errors,
    })
}

/// Float formatting used in every emitted table: 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl QualityReport {
    /// Per-direction rows followed by summary rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "theta_x_arcmin,theta_y_arcmin,strehl")?;
        for (d, s) in self.directions.iter().zip(&self.strehl) {
            writeln!(
                w,
                "{},{},{}",
                fmt_f64(d[0] / ARCMIN),
                fmt_f64(d[1] / ARCMIN),
                fmt_f64(*s)
            )?;
        }
        writeln!(w)?;
        writeln!(w, "summary,value,residual_norm_error")?;
        writeln!(w, "center_strehl,{},", fmt_f64(self.center_strehl))?;
        writeln!(w, "mean_strehl,{},", fmt_f64(self.mean_strehl))?;
        for (g, (e, r)) in self.star_errors.iter().zip(&self.star_residual_errors).enumerate() {
            writeln!(w, "epsilon_star_{g},{},{}", fmt_f64(*e), fmt_f64(*r))?;
        }
        Ok(())
    }
}
