//! Telescope aperture, guide-star asterisms and layer grids.
//!
//! Coordinates on the aperture and on the layers are in meters; guide-star
//! directions are small angles in radians, so that a layer at altitude `h`
//! sees the beam of star `α` shifted by `h·α` meters.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TomoError};

/// Radians per arcminute.
pub const ARCMIN: f64 = std::f64::consts::PI / (180.0 * 60.0);

pub type Vec2 = [f64; 2];

/// Annular telescope pupil `{r : d ≤ |r| ≤ D}` with radii in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aperture {
    inner_radius: f64,
    outer_radius: f64,
}

impl Aperture {
    pub fn new(inner_radius: f64, outer_radius: f64) -> Result<Self> {
        if !(outer_radius > inner_radius && inner_radius >= 0.0) || !outer_radius.is_finite() {
            return Err(TomoError::InvalidGeometry(format!(
                "aperture needs D > d >= 0, got d = {inner_radius}, D = {outer_radius}"
            )));
        }
        Ok(Self {
            inner_radius,
            outer_radius,
        })
    }

    /// Filled circular pupil of the given diameter.
    pub fn circular(diameter: f64) -> Result<Self> {
        Self::new(0.0, diameter / 2.0)
    }

    pub fn inner_radius(&self) -> f64 {
        self.inner_radius
    }

    pub fn outer_radius(&self) -> f64 {
        self.outer_radius
    }

    pub fn contains(&self, r: Vec2) -> bool {
        // Nodes sitting exactly on the rim count as inside.
        let tol = 1e-9 * self.outer_radius;
        let rr = r[0].hypot(r[1]);
        rr >= self.inner_radius - tol && rr <= self.outer_radius + tol
    }

    pub fn bounding_box(&self) -> Rect {
        let r = self.outer_radius;
        Rect {
            min: [-r, -r],
            max: [r, r],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum StarKind {
    Ngs,
    Lgs { altitude: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuideStar {
    /// Transverse direction components in radians.
    pub direction: Vec2,
    pub kind: StarKind,
}

impl GuideStar {
    pub fn ngs(direction: Vec2) -> Self {
        Self {
            direction,
            kind: StarKind::Ngs,
        }
    }

    pub fn lgs(direction: Vec2, altitude: f64) -> Result<Self> {
        if !(altitude > 0.0) {
            return Err(TomoError::InvalidGeometry(format!(
                "laser guide star altitude must be positive, got {altitude}"
            )));
        }
        Ok(Self {
            direction,
            kind: StarKind::Lgs { altitude },
        })
    }

    pub fn on_axis() -> Self {
        Self::ngs([0.0, 0.0])
    }

    /// Direction expressed in arcminutes.
    pub fn direction_arcmin(&self) -> Vec2 {
        [self.direction[0] / ARCMIN, self.direction[1] / ARCMIN]
    }
}

/// Footprint compression factor `c_l` of a layer at `altitude` for `star`.
pub fn cone_scale(altitude: f64, star: &GuideStar) -> Result<f64> {
    match star.kind {
        StarKind::Ngs => Ok(1.0),
        StarKind::Lgs { altitude: beacon } => {
            if altitude >= beacon {
                Err(TomoError::LayerAboveBeacon { altitude, beacon })
            } else {
                Ok(1.0 - altitude / beacon)
            }
        }
    }
}

/// Maps aperture point `r` to the layer at `altitude` along `star`: `c_l·r + h_l·α`.
pub fn project_point(r: Vec2, altitude: f64, star: &GuideStar) -> Result<Vec2> {
    let c = cone_scale(altitude, star)?;
    Ok([
        c * r[0] + altitude * star.direction[0],
        c * r[1] + altitude * star.direction[1],
    ])
}

/// Axis-aligned rectangle in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn union(&self, other: &Rect) -> Rect {
        Rect {
            min: [self.min[0].min(other.min[0]), self.min[1].min(other.min[1])],
            max: [self.max[0].max(other.max[0]), self.max[1].max(other.max[1])],
        }
    }

    pub fn contains_rect(&self, other: &Rect, tol: f64) -> bool {
        other.min[0] >= self.min[0] - tol
            && other.min[1] >= self.min[1] - tol
            && other.max[0] <= self.max[0] + tol
            && other.max[1] <= self.max[1] + tol
    }

    pub fn width(&self) -> f64 {
        self.max[0] - self.min[0]
    }

    pub fn height(&self) -> f64 {
        self.max[1] - self.min[1]
    }
}

/// Bounding box of the union of the beam footprints at `altitude`.
pub fn visible_domain(altitude: f64, stars: &[GuideStar], aperture: &Aperture) -> Result<Rect> {
    let mut out: Option<Rect> = None;
    for star in stars {
        let c = cone_scale(altitude, star)?;
        let center = [altitude * star.direction[0], altitude * star.direction[1]];
        let half = c * aperture.outer_radius();
        let disk = Rect {
            min: [center[0] - half, center[1] - half],
            max: [center[0] + half, center[1] + half],
        };
        out = Some(match out {
            Some(r) => r.union(&disk),
            None => disk,
        });
    }
    out.ok_or_else(|| TomoError::InvalidGeometry("visible domain needs at least one star".into()))
}

/// `n` natural guide stars equally spaced on a circle of `radius_arcmin`,
/// the first one on the positive x axis.
pub fn circular_asterism(n: usize, radius_arcmin: f64) -> Result<Vec<GuideStar>> {
    if n == 0 || !(radius_arcmin >= 0.0) {
        return Err(TomoError::InvalidGeometry(format!(
            "asterism needs n >= 1 and radius >= 0, got n = {n}, radius = {radius_arcmin}"
        )));
    }
    let radius = radius_arcmin * ARCMIN;
    Ok((0..n)
        .map(|k| {
            let angle = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            GuideStar::ngs([radius * angle.cos(), radius * angle.sin()])
        })
        .collect())
}

/// Square Cartesian sampling of the aperture, keeping the in-pupil nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct ApertureGrid {
    pub aperture: Aperture,
    /// Nodes per side of the full square.
    pub n: usize,
    pub spacing: f64,
    /// Coordinates of the in-pupil nodes, in row-major order of the square.
    pub nodes: Vec<Vec2>,
    /// Square index `j·n + i` of each in-pupil node.
    pub square_index: Vec<usize>,
}

impl ApertureGrid {
    /// `n` nodes across the outer diameter, rim nodes included.
    pub fn new(aperture: Aperture, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(TomoError::InvalidGeometry(format!(
                "aperture sampling needs at least 2 nodes per side, got {n}"
            )));
        }
        let r = aperture.outer_radius();
        let spacing = 2.0 * r / (n - 1) as f64;
        let mut nodes = Vec::new();
        let mut square_index = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let p = [-r + i as f64 * spacing, -r + j as f64 * spacing];
                if aperture.contains(p) {
                    nodes.push(p);
                    square_index.push(j * n + i);
                }
            }
        }
        Ok(Self {
            aperture,
            n,
            spacing,
            nodes,
            square_index,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Lower-left corner of the square sampling.
    pub fn origin(&self) -> Vec2 {
        let r = self.aperture.outer_radius();
        [-r, -r]
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing * self.spacing
    }
}

/// Regular rectangular grid of nodes on one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGrid {
    pub altitude: f64,
    pub origin: Vec2,
    pub spacing: f64,
    pub nx: usize,
    pub ny: usize,
}

impl LayerGrid {
    pub fn new(altitude: f64, origin: Vec2, spacing: f64, nx: usize, ny: usize) -> Result<Self> {
        if !(spacing > 0.0) || nx < 2 || ny < 2 {
            return Err(TomoError::InvalidGeometry(format!(
                "layer grid needs spacing > 0 and at least 2x2 nodes, got {spacing}, {nx}x{ny}"
            )));
        }
        Ok(Self {
            altitude,
            origin,
            spacing,
            nx,
            ny,
        })
    }

    /// Smallest grid on the lattice `anchor + k·spacing` that contains
    /// `domain`, padded by one cell on every side.
    pub fn covering(altitude: f64, domain: &Rect, spacing: f64, anchor: Vec2) -> Result<Self> {
        if !(spacing > 0.0) {
            return Err(TomoError::InvalidGeometry(format!(
                "layer spacing must be positive, got {spacing}"
            )));
        }
        let tol = 1e-9;
        let lo = |v: f64, a: f64| ((v - a) / spacing + tol).floor() as i64 - 1;
        let hi = |v: f64, a: f64| ((v - a) / spacing - tol).ceil() as i64 + 1;
        let (i0, i1) = (lo(domain.min[0], anchor[0]), hi(domain.max[0], anchor[0]));
        let (j0, j1) = (lo(domain.min[1], anchor[1]), hi(domain.max[1], anchor[1]));
        Self::new(
            altitude,
            [
                anchor[0] + i0 as f64 * spacing,
                anchor[1] + j0 as f64 * spacing,
            ],
            spacing,
            (i1 - i0 + 1) as usize,
            (j1 - j0 + 1) as usize,
        )
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, idx: usize) -> Vec2 {
        let (i, j) = (idx % self.nx, idx / self.nx);
        [
            self.origin[0] + i as f64 * self.spacing,
            self.origin[1] + j as f64 * self.spacing,
        ]
    }

    pub fn extent(&self) -> Rect {
        Rect {
            min: self.origin,
            max: [
                self.origin[0] + (self.nx - 1) as f64 * self.spacing,
                self.origin[1] + (self.ny - 1) as f64 * self.spacing,
            ],
        }
    }
}

/// Science directions in which the correction is evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationGrid {
    pub directions: Vec<Vec2>,
}

impl EvaluationGrid {
    pub fn new(directions: Vec<Vec2>) -> Result<Self> {
        if directions.is_empty() {
            return Err(TomoError::InvalidGeometry(
                "evaluation grid must contain at least one direction".into(),
            ));
        }
        Ok(Self { directions })
    }

    /// `k×k` Cartesian grid spanning a square field of `fov_arcmin` side.
    pub fn square(k: usize, fov_arcmin: f64) -> Result<Self> {
        if k == 0 {
            return Self::new(Vec::new());
        }
        let half = 0.5 * fov_arcmin * ARCMIN;
        let step = if k > 1 { 2.0 * half / (k - 1) as f64 } else { 0.0 };
        let start = if k > 1 { -half } else { 0.0 };
        let mut directions = Vec::with_capacity(k * k);
        for j in 0..k {
            for i in 0..k {
                directions.push([start + i as f64 * step, start + j as f64 * step]);
            }
        }
        Self::new(directions)
    }
}
