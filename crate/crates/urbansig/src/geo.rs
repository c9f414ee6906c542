//! Shared geometry kernel: great-circle distance, the local planar
//! projection used for areas and parcel distances, ring predicates.
//!
//! All polygon math runs on a per-polygon local projection
//! `x = lon * cos(lat0)`, `y = lat`, scaled by [`KM_PER_DEG`], where `lat0`
//! is the latitude of the polygon's exterior-ring centroid. At city scale
//! the deviation from geodesic values is negligible and the arithmetic is
//! deterministic.

use serde::{Deserialize, Serialize};

/// Mean Earth radius in kilometers (IUGG value).
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Kilometers per degree of latitude under the local planar projection.
pub const KM_PER_DEG: f64 = 111.195;

/// A longitude/latitude point in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub lon: f64,
    pub lat: f64,
}

impl Point {
    pub fn new(lon: f64, lat: f64) -> Self {
        Point { lon, lat }
    }
}

/// Great-circle distance between two points in kilometers.
pub fn haversine_km(a: Point, b: Point) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();

    let s = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * s.sqrt().min(1.0).asin()
}

/// Axis-aligned rectangle in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min_lon: f64,
    pub min_lat: f64,
    pub max_lon: f64,
    pub max_lat: f64,
}

impl Rect {
    /// Empty rectangle, identity for [`Rect::expand`].
    pub fn empty() -> Self {
        Rect {
            min_lon: f64::INFINITY,
            min_lat: f64::INFINITY,
            max_lon: f64::NEG_INFINITY,
            max_lat: f64::NEG_INFINITY,
        }
    }

    pub fn of_points(points: &[Point]) -> Self {
        let mut r = Rect::empty();
        for p in points {
            r.expand_point(*p);
        }
        r
    }

    pub fn expand_point(&mut self, p: Point) {
        self.min_lon = self.min_lon.min(p.lon);
        self.min_lat = self.min_lat.min(p.lat);
        self.max_lon = self.max_lon.max(p.lon);
        self.max_lat = self.max_lat.max(p.lat);
    }

    pub fn expand(&mut self, other: &Rect) {
        self.min_lon = self.min_lon.min(other.min_lon);
        self.min_lat = self.min_lat.min(other.min_lat);
        self.max_lon = self.max_lon.max(other.max_lon);
        self.max_lat = self.max_lat.max(other.max_lat);
    }

    pub fn contains(&self, p: Point) -> bool {
        p.lon >= self.min_lon && p.lon <= self.max_lon && p.lat >= self.min_lat && p.lat <= self.max_lat
    }

    /// Separation from `p` along each axis in degrees; zero inside.
    pub fn gap_deg(&self, p: Point) -> (f64, f64) {
        let dx = (self.min_lon - p.lon).max(p.lon - self.max_lon).max(0.0);
        let dy = (self.min_lat - p.lat).max(p.lat - self.max_lat).max(0.0);
        (dx, dy)
    }
}

/// A closed ring of lon/lat vertices. First vertex equals the last.
pub type Ring = Vec<Point>;

/// True when the ring is closed and has at least four vertices.
pub fn ring_is_valid(ring: &Ring) -> bool {
    ring.len() >= 4 && ring.first() == ring.last()
}

/// Signed shoelace area of a ring in the coordinates given by `project`.
fn shoelace<F: Fn(Point) -> (f64, f64)>(ring: &Ring, project: &F) -> f64 {
    let mut acc = 0.0;
    for w in ring.windows(2) {
        let (x1, y1) = project(w[0]);
        let (x2, y2) = project(w[1]);
        acc += x1 * y2 - x2 * y1;
    }
    acc / 2.0
}

/// Centroid of a ring by the shoelace formula, in raw degrees.
///
/// Falls back to the vertex mean when the ring area vanishes.
pub fn ring_centroid(ring: &Ring) -> Point {
    let area2: f64 = ring
        .windows(2)
        .map(|w| w[0].lon * w[1].lat - w[1].lon * w[0].lat)
        .sum();
    if area2.abs() < 1e-30 {
        let n = (ring.len() - 1) as f64;
        let lon = ring[..ring.len() - 1].iter().map(|p| p.lon).sum::<f64>() / n;
        let lat = ring[..ring.len() - 1].iter().map(|p| p.lat).sum::<f64>() / n;
        return Point::new(lon, lat);
    }
    let mut cx = 0.0;
    let mut cy = 0.0;
    for w in ring.windows(2) {
        let cross = w[0].lon * w[1].lat - w[1].lon * w[0].lat;
        cx += (w[0].lon + w[1].lon) * cross;
        cy += (w[0].lat + w[1].lat) * cross;
    }
    Point::new(cx / (3.0 * area2), cy / (3.0 * area2))
}

/// Local planar projection anchored at latitude `lat0`.
#[derive(Debug, Clone, Copy)]
pub struct LocalProjection {
    cos_lat0: f64,
}

impl LocalProjection {
    pub fn at_latitude(lat0: f64) -> Self {
        LocalProjection {
            cos_lat0: lat0.to_radians().cos(),
        }
    }

    pub fn cos_factor(&self) -> f64 {
        self.cos_lat0
    }

    /// Project to kilometers: `x = lon * cos(lat0) * 111.195`, `y = lat * 111.195`.
    pub fn to_km(&self, p: Point) -> (f64, f64) {
        (p.lon * self.cos_lat0 * KM_PER_DEG, p.lat * KM_PER_DEG)
    }
}

/// Unsigned ring area in km² under `proj`.
pub fn ring_area_km2(ring: &Ring, proj: &LocalProjection) -> f64 {
    shoelace(ring, &|p| proj.to_km(p)).abs()
}

/// Even-odd ray-casting containment test in raw degrees.
///
/// Points exactly on an edge may land on either side; callers that need
/// boundary points treated as inside combine this with a zero boundary
/// distance check.
pub fn point_in_ring(p: Point, ring: &Ring) -> bool {
    let mut inside = false;
    for w in ring.windows(2) {
        let (a, b) = (w[0], w[1]);
        if (a.lat > p.lat) != (b.lat > p.lat) {
            let t = (p.lat - a.lat) / (b.lat - a.lat);
            let x_cross = a.lon + t * (b.lon - a.lon);
            if p.lon < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// A polygon with one exterior ring and optional interior rings (holes).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub exterior: Ring,
    pub holes: Vec<Ring>,
}

impl Polygon {
    pub fn new(exterior: Ring, holes: Vec<Ring>) -> Self {
        Polygon { exterior, holes }
    }

    pub fn rings_are_valid(&self) -> bool {
        ring_is_valid(&self.exterior) && self.holes.iter().all(ring_is_valid)
    }

    pub fn bbox(&self) -> Rect {
        Rect::of_points(&self.exterior)
    }

    /// Containment by even-odd ray casting: inside the exterior ring and not
    /// inside any hole. Boundary points are resolved by the caller through a
    /// zero boundary distance.
    pub fn contains(&self, p: Point) -> bool {
        point_in_ring(p, &self.exterior) && !self.holes.iter().any(|h| point_in_ring(p, h))
    }

    /// Minimum distance in km from `p` to any boundary segment under `proj`.
    pub fn boundary_distance_km(&self, p: Point, proj: &LocalProjection) -> f64 {
        let mut d = point_ring_km(p, &self.exterior, proj);
        for hole in &self.holes {
            d = d.min(point_ring_km(p, hole, proj));
        }
        d
    }

    /// Zero if `p` lies inside or on the boundary, otherwise the boundary
    /// distance under `proj`.
    pub fn distance_km(&self, p: Point, proj: &LocalProjection) -> f64 {
        if self.contains(p) {
            0.0
        } else {
            self.boundary_distance_km(p, proj)
        }
    }
}

/// Distance in km from `p` to the nearest point of segment `(a, b)` under `proj`.
pub fn point_segment_km(p: Point, a: Point, b: Point, proj: &LocalProjection) -> f64 {
    let (px, py) = proj.to_km(p);
    let (ax, ay) = proj.to_km(a);
    let (bx, by) = proj.to_km(b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (nx, ny) = (ax + t * dx, ay + t * dy);
    ((px - nx).powi(2) + (py - ny).powi(2)).sqrt()
}

/// Minimum distance in km from `p` to any segment of `ring` under `proj`.
pub fn point_ring_km(p: Point, ring: &Ring, proj: &LocalProjection) -> f64 {
    ring.windows(2)
        .map(|w| point_segment_km(p, w[0], w[1], proj))
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_square(lon0: f64, lat0: f64) -> Ring {
        vec![
            Point::new(lon0, lat0),
            Point::new(lon0 + 1.0, lat0),
            Point::new(lon0 + 1.0, lat0 + 1.0),
            Point::new(lon0, lat0 + 1.0),
            Point::new(lon0, lat0),
        ]
    }

    #[test]
    fn haversine_zero_for_identical_points() {
        let p = Point::new(-87.62, 41.88);
        assert_eq!(haversine_km(p, p), 0.0);
    }

    #[test]
    fn haversine_one_degree_meridian() {
        // 1° of meridian arc = 2*pi*R/360.
        let expect = 2.0 * std::f64::consts::PI * EARTH_RADIUS_KM / 360.0;
        let d = haversine_km(Point::new(0.0, 0.0), Point::new(0.0, 1.0));
        assert_relative_eq!(d, expect, max_relative = 1e-12);
    }

    #[test]
    fn haversine_symmetric() {
        let a = Point::new(-87.62, 41.88);
        let b = Point::new(-117.16, 32.72);
        assert_eq!(haversine_km(a, b), haversine_km(b, a));
    }

    #[test]
    fn shoelace_square_at_equator() {
        let proj = LocalProjection::at_latitude(0.5);
        let ring = unit_square(0.0, 0.0);
        let area = ring_area_km2(&ring, &proj);
        let expect = KM_PER_DEG * KM_PER_DEG * (0.5f64).to_radians().cos();
        assert_relative_eq!(area, expect, max_relative = 1e-12);
    }

    #[test]
    fn area_invariant_under_rotation_and_reversal() {
        let proj = LocalProjection::at_latitude(41.0);
        let ring = unit_square(-87.0, 41.0);
        let base = ring_area_km2(&ring, &proj);

        // rotate the vertex cycle
        let mut rotated: Ring = ring[1..].to_vec();
        rotated.push(ring[1]);
        assert_relative_eq!(ring_area_km2(&rotated, &proj), base, max_relative = 1e-12);

        let reversed: Ring = ring.iter().rev().cloned().collect();
        assert_relative_eq!(ring_area_km2(&reversed, &proj), base, max_relative = 1e-12);
    }

    #[test]
    fn ray_casting_basics() {
        let ring = unit_square(0.0, 0.0);
        assert!(point_in_ring(Point::new(0.5, 0.5), &ring));
        assert!(!point_in_ring(Point::new(1.5, 0.5), &ring));
        assert!(!point_in_ring(Point::new(-0.5, -0.5), &ring));
    }

    #[test]
    fn segment_distance_clamps_to_endpoints() {
        let proj = LocalProjection::at_latitude(0.0);
        let a = Point::new(0.0, 0.0);
        let b = Point::new(1.0, 0.0);
        // beyond b: nearest point is b itself
        let d = point_segment_km(Point::new(2.0, 0.0), a, b, &proj);
        assert_relative_eq!(d, KM_PER_DEG, max_relative = 1e-12);
        // perpendicular foot inside the segment
        let d = point_segment_km(Point::new(0.5, 1.0), a, b, &proj);
        assert_relative_eq!(d, KM_PER_DEG, max_relative = 1e-12);
    }

    #[test]
    fn ring_centroid_of_square() {
        let c = ring_centroid(&unit_square(2.0, 40.0));
        assert_relative_eq!(c.lon, 2.5, max_relative = 1e-12);
        assert_relative_eq!(c.lat, 40.5, max_relative = 1e-12);
    }
}
