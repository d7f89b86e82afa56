//! Positions, fixes and the farm boundary.
//!
//! Geofence math runs on the flat (latitude, longitude) plane in degrees.
//! At farm scale the curvature error is far below GPS noise.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Cross products smaller than this (degrees squared) count as collinear.
const COLLINEAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub const fn new(lat: f64, lon: f64) -> Self {
        LatLon { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }
}

impl From<(f64, f64)> for LatLon {
    fn from((lat, lon): (f64, f64)) -> Self {
        LatLon { lat, lon }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FixQuality {
    NoFix,
    StandardFix,
    DifferentialFix,
}

/// A GPS fix. `position` is `None` exactly when `quality` is `NoFix`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoFix {
    pub position: Option<LatLon>,
    /// Meters above mean sea level, when the source sentence carries it.
    pub altitude: Option<f64>,
    pub quality: FixQuality,
    /// UTC seconds.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FixError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("a position fix cannot have quality NoFix")]
    QualityWithoutPosition,
}

impl GeoFix {
    pub fn new(
        lat: f64,
        lon: f64,
        altitude: Option<f64>,
        quality: FixQuality,
        timestamp: u64,
    ) -> Result<Self, FixError> {
        if !(lat.is_finite() && (-90.0..=90.0).contains(&lat)) {
            return Err(FixError::Latitude(lat));
        }
        if !(lon.is_finite() && (-180.0..=180.0).contains(&lon)) {
            return Err(FixError::Longitude(lon));
        }
        if quality == FixQuality::NoFix {
            return Err(FixError::QualityWithoutPosition);
        }
        Ok(GeoFix {
            position: Some(LatLon::new(lat, lon)),
            altitude,
            quality,
            timestamp,
        })
    }

    pub fn no_fix(timestamp: u64) -> Self {
        GeoFix {
            position: None,
            altitude: None,
            quality: FixQuality::NoFix,
            timestamp,
        }
    }

    /// Only fixes with a position are ever rule-evaluated.
    pub fn is_valid(&self) -> bool {
        self.quality != FixQuality::NoFix && self.position.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FenceError {
    #[error("fence needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("vertex {0} is not a valid coordinate")]
    InvalidVertex(usize),
    #[error("vertices {0} and {1} are consecutive duplicates")]
    DuplicateVertex(usize, usize),
    #[error("edges {0} and {1} intersect; polygon is not simple")]
    SelfIntersection(usize, usize),
}

/// Farm boundary polygon, validated simple at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoFence {
    vertices: Vec<LatLon>,
}

impl<'de> Deserialize<'de> for GeoFence {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = Vec::<(f64, f64)>::deserialize(deserializer)?;
        GeoFence::new(raw.into_iter().map(LatLon::from).collect()).map_err(serde::de::Error::custom)
    }
}

impl Serialize for GeoFence {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_pairs().serialize(serializer)
    }
}

impl GeoFence {
    pub fn new(vertices: Vec<LatLon>) -> Result<Self, FenceError> {
        let n = vertices.len();
        if n < 3 {
            return Err(FenceError::TooFewVertices(n));
        }
        if let Some(i) = vertices.iter().position(|v| !v.is_valid()) {
            return Err(FenceError::InvalidVertex(i));
        }
        for i in 0..n {
            let j = (i + 1) % n;
            if vertices[i] == vertices[j] {
                return Err(FenceError::DuplicateVertex(i, j));
            }
        }
        check_simple(&vertices)?;
        Ok(GeoFence { vertices })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self, FenceError> {
        GeoFence::new(pairs.iter().copied().map(LatLon::from).collect())
    }

    pub fn vertices(&self) -> &[LatLon] {
        &self.vertices
    }

    /// Vertex list as `[lat, lon]` pairs, the wire form of a fence.
    pub fn to_pairs(&self) -> Vec<(f64, f64)> {
        self.vertices.iter().map(|v| (v.lat, v.lon)).collect()
    }

    fn edges(&self) -> impl Iterator<Item = (LatLon, LatLon)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    /// Bounding box as `(min, max)` corners.
    pub fn bounds(&self) -> (LatLon, LatLon) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices[1..] {
            lo.lat = lo.lat.min(v.lat);
            lo.lon = lo.lon.min(v.lon);
            hi.lat = hi.lat.max(v.lat);
            hi.lon = hi.lon.max(v.lon);
        }
        (lo, hi)
    }

    /// True when the point lies inside the fence or on its boundary.
    ///
    /// Boundary points are detected explicitly; interior points by winding
    /// number, which makes the result independent of vertex order and
    /// winding direction.
    pub fn contains(&self, point: LatLon) -> bool {
        if self.edges().any(|(a, b)| on_segment(a, b, point)) {
            return true;
        }
        winding_number(&self.vertices, point) != 0
    }
}

/// Free-function form of [`GeoFence::contains`].
pub fn contains(fence: &GeoFence, point: LatLon) -> bool {
    fence.contains(point)
}

// Positive when c is left of a->b (lon as x, lat as y).
fn cross(a: LatLon, b: LatLon, c: LatLon) -> f64 {
    (b.lon - a.lon) * (c.lat - a.lat) - (b.lat - a.lat) * (c.lon - a.lon)
}

fn on_segment(a: LatLon, b: LatLon, p: LatLon) -> bool {
    cross(a, b, p).abs() <= COLLINEAR_EPS
        && p.lat >= a.lat.min(b.lat)
        && p.lat <= a.lat.max(b.lat)
        && p.lon >= a.lon.min(b.lon)
        && p.lon <= a.lon.max(b.lon)
}

fn winding_number(vertices: &[LatLon], p: LatLon) -> i32 {
    let n = vertices.len();
    let mut wn = 0;
    for i in 0..n {
        let a = vertices[i];
        let b = vertices[(i + 1) % n];
        if a.lat <= p.lat {
            if b.lat > p.lat && cross(a, b, p) > 0.0 {
                wn += 1;
            }
        } else if b.lat <= p.lat && cross(a, b, p) < 0.0 {
            wn -= 1;
        }
    }
    wn
}

fn segments_intersect(a: LatLon, b: LatLon, c: LatLon, d: LatLon) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    let straddle = |x: f64, y: f64| (x > COLLINEAR_EPS && y < -COLLINEAR_EPS) || (x < -COLLINEAR_EPS && y > COLLINEAR_EPS);
    if straddle(d1, d2) && straddle(d3, d4) {
        return true;
    }
    on_segment(c, d, a) || on_segment(c, d, b) || on_segment(a, b, c) || on_segment(a, b, d)
}

fn check_simple(v: &[LatLon]) -> Result<(), FenceError> {
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        for j in (i + 1)..n {
            let (c, d) = (v[j], v[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Shared vertex is fine; folding back along the same line is not.
                let (shared, other_ab, other_cd) = if j == i + 1 { (b, a, d) } else { (a, b, c) };
                if cross(other_ab, shared, other_cd).abs() <= COLLINEAR_EPS {
                    let dot = (other_ab.lat - shared.lat) * (other_cd.lat - shared.lat)
                        + (other_ab.lon - shared.lon) * (other_cd.lon - shared.lon);
                    if dot > 0.0 {
                        return Err(FenceError::SelfIntersection(i, j));
                    }
                }
                continue;
            }
            if segments_intersect(a, b, c, d) {
                return Err(FenceError::SelfIntersection(i, j));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> GeoFence {
        GeoFence::from_pairs(&[(0.0, 0.0), (0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]).unwrap()
    }

    #[test]
    fn interior_exterior_and_boundary() {
        let sq = unit_square();
        assert!(sq.contains(LatLon::new(0.5, 0.5)));
        assert!(!sq.contains(LatLon::new(2.0, 2.0)));
        assert!(sq.contains(LatLon::new(0.0, 0.5)));
        assert!(sq.contains(LatLon::new(1.0, 1.0)));
        assert!(!sq.contains(LatLon::new(1.0 + 1e-9, 0.5)));
    }

    #[test]
    fn rejects_bad_fences() {
        assert_eq!(
            GeoFence::from_pairs(&[(0.0, 0.0), (1.0, 1.0)]),
            Err(FenceError::TooFewVertices(2))
        );
        assert!(matches!(
            GeoFence::from_pairs(&[(0.0, 0.0), (0.0, 0.0), (1.0, 1.0), (1.0, 0.0)]),
            Err(FenceError::DuplicateVertex(0, 1))
        ));
        // bow tie
        assert!(matches!(
            GeoFence::from_pairs(&[(0.0, 0.0), (1.0, 1.0), (1.0, 0.0), (0.0, 1.0)]),
            Err(FenceError::SelfIntersection(_, _))
        ));
        assert!(matches!(
            GeoFence::from_pairs(&[(0.0, 0.0), (95.0, 1.0), (1.0, 0.0)]),
            Err(FenceError::InvalidVertex(1))
        ));
        // spike folding back on itself
        assert!(GeoFence::from_pairs(&[(0.0, 0.0), (0.0, 2.0), (0.0, 1.0), (1.0, 1.0)]).is_err());
    }

    #[test]
    fn concave_fence() {
        // U shape opening north
        let u = GeoFence::from_pairs(&[
            (0.0, 0.0),
            (0.0, 3.0),
            (3.0, 3.0),
            (3.0, 2.0),
            (1.0, 2.0),
            (1.0, 1.0),
            (3.0, 1.0),
            (3.0, 0.0),
        ])
        .unwrap();
        assert!(u.contains(LatLon::new(2.0, 0.5)));
        assert!(!u.contains(LatLon::new(2.0, 1.5)));
        assert!(u.contains(LatLon::new(1.0, 1.5)));
    }

    #[test]
    fn serde_as_pairs() {
        let sq = unit_square();
        let json = serde_json::to_string(&sq).unwrap();
        let back: GeoFence = serde_json::from_str(&json).unwrap();
        assert_eq!(back, sq);
        assert!(serde_json::from_str::<GeoFence>("[[0,0],[1,1]]").is_err());
    }

    #[test]
    fn fix_invariants() {
        assert!(GeoFix::new(91.0, 0.0, None, FixQuality::StandardFix, 0).is_err());
        assert!(GeoFix::new(0.0, 0.0, None, FixQuality::NoFix, 0).is_err());
        assert!(!GeoFix::no_fix(5).is_valid());
    }
}
