//! Convex obstacle-free regions built from 2D point clouds, plus the polygon
//! queries used by action decoding, MPC constraints, and the observation.
//!
//! Conventions
//! - Polygons are convex and stored with vertices in clockwise order.
//! - Interior test for clockwise order: for every edge (a, b), the point q
//!   satisfies cross(a - q, b - q) <= 0, equivalently n·q <= c with the
//!   outward normal n = (-(b-a).y, (b-a).x) and c = n·a.
//! - Geometric predicates use a 1e-9 distance tolerance.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};
use thiserror::Error;

/// Distance tolerance for geometric predicates.
pub const GEOM_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeomError {
    #[error("ray start lies outside the region")]
    StartOutsideRegion,
}

/// 2D point / vector in meters. Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(into = "(f64, f64)", from = "(f64, f64)")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Point2 { x, y }
    }
}

impl From<Point2> for (f64, f64) {
    fn from(p: Point2) -> Self {
        (p.x, p.y)
    }
}

impl Point2 {
    pub const ZERO: Point2 = Point2 { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z-component of the 3D cross product of two planar vectors.
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, other: Point2) -> f64 {
        (self - other).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn from_polar(radius: f64, angle: f64) -> Self {
        Point2::new(radius * angle.cos(), radius * angle.sin())
    }
}

impl Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, s: f64) -> Point2 {
        Point2::new(self.x * s, self.y * s)
    }
}

impl Neg for Point2 {
    type Output = Point2;
    fn neg(self) -> Point2 {
        Point2::new(-self.x, -self.y)
    }
}

/// Half-plane `n·p <= c` with outward normal `n` (not necessarily unit).
#[derive(Clone, Copy, Debug)]
pub struct HalfPlane {
    pub normal: Point2,
    pub offset: f64,
}

impl HalfPlane {
    /// Signed distance of `q` from the boundary, positive outside.
    pub fn signed_distance(&self, q: Point2) -> f64 {
        let len = self.normal.norm();
        if len == 0.0 {
            return 0.0;
        }
        (self.normal.dot(q) - self.offset) / len
    }
}

/// Convex polygon of obstacle-free space, vertices in clockwise order,
/// guaranteed to contain `origin` (the robot position at build time).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexRegion {
    pub origin: Point2,
    pub vertices: Vec<Point2>,
}

impl ConvexRegion {
    /// Regular `sides`-gon of given circumradius centered at `origin`,
    /// clockwise ordered.
    pub fn regular(origin: Point2, circumradius: f64, sides: usize) -> Self {
        assert!(sides >= 3);
        let vertices = (0..sides)
            .map(|k| {
                let angle = -2.0 * std::f64::consts::PI * k as f64 / sides as f64;
                origin + Point2::from_polar(circumradius, angle)
            })
            .collect();
        ConvexRegion {
            origin,
            vertices: dedup_vertices(vertices),
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Edges as half-planes `n·p <= c`, one per edge including the closing
    /// edge (last vertex back to the first).
    pub fn half_planes(&self) -> impl Iterator<Item = HalfPlane> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |j| {
            let a = self.vertices[j];
            let b = self.vertices[(j + 1) % n];
            let e = b - a;
            let normal = Point2::new(-e.y, e.x);
            HalfPlane {
                normal,
                offset: normal.dot(a),
            }
        })
    }

    pub fn centroid(&self) -> Point2 {
        let n = self.vertices.len() as f64;
        let sum = self
            .vertices
            .iter()
            .fold(Point2::ZERO, |acc, &v| acc + v);
        Point2::new(sum.x / n, sum.y / n)
    }

    /// Polygon area (positive for clockwise order as stored).
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut twice = 0.0;
        for j in 0..n {
            let a = self.vertices[j];
            let b = self.vertices[(j + 1) % n];
            twice += a.cross(b);
        }
        // clockwise order makes the shoelace sum negative
        (twice * 0.5).abs()
    }

    /// True when all consecutive vertex triples turn consistently clockwise.
    pub fn is_convex_clockwise(&self) -> bool {
        let n = self.vertices.len();
        if n < 3 {
            return false;
        }
        (0..n).all(|j| {
            let a = self.vertices[j];
            let b = self.vertices[(j + 1) % n];
            let c = self.vertices[(j + 2) % n];
            (b - a).cross(c - b) <= GEOM_EPS
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("region serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

fn dedup_vertices(vertices: Vec<Point2>) -> Vec<Point2> {
    let mut out: Vec<Point2> = Vec::with_capacity(vertices.len());
    for v in vertices {
        if out.last().map_or(true, |&p| p.distance(v) > 1e-12) {
            out.push(v);
        }
    }
    if out.len() >= 2 && out[0].distance(*out.last().unwrap()) <= 1e-12 {
        out.pop();
    }
    out
}

/// Clip a clockwise convex polygon by the half-plane `n·p <= c`
/// (Sutherland-Hodgman against a single plane, order preserving).
fn clip_half_plane(vertices: &[Point2], hp: HalfPlane) -> Vec<Point2> {
    let n = vertices.len();
    let mut out = Vec::with_capacity(n + 1);
    for j in 0..n {
        let a = vertices[j];
        let b = vertices[(j + 1) % n];
        let da = hp.normal.dot(a) - hp.offset;
        let db = hp.normal.dot(b) - hp.offset;
        if da <= 0.0 {
            out.push(a);
        }
        if (da < 0.0 && db > 0.0) || (da > 0.0 && db < 0.0) {
            let t = da / (da - db);
            out.push(a + (b - a) * t);
        }
    }
    dedup_vertices(out)
}

/// Build the convex obstacle-free region around `origin` from a point cloud.
///
/// Seeds a regular `seed_sides`-gon circumscribing `disc(origin, max_range)`,
/// then visits cloud points by increasing distance from the origin and clips
/// the polygon with the half-plane through each point whose normal is
/// origin->point (a no-op when the plane misses the polygon). The result
/// contains the origin, excludes every cloud point from its strict interior,
/// and never grows when points are added to the cloud.
pub fn build_convex_region(
    cloud: &[Point2],
    origin: Point2,
    max_range: f64,
    seed_sides: usize,
) -> ConvexRegion {
    assert!(max_range > 0.0);
    assert!(seed_sides >= 8);
    let mut region = ConvexRegion::regular(origin, max_range, seed_sides);
    let mut points: Vec<Point2> = cloud.to_vec();
    points.sort_by(|a, b| {
        a.distance(origin)
            .partial_cmp(&b.distance(origin))
            .expect("non-finite cloud point")
    });
    for p in points {
        let dir = p - origin;
        let dist = dir.norm();
        debug_assert!(dist > 0.0, "cloud point coincides with origin");
        if dist == 0.0 || dist >= max_range {
            continue;
        }
        let normal = dir * (1.0 / dist);
        let hp = HalfPlane {
            normal,
            offset: normal.dot(p),
        };
        let clipped = clip_half_plane(&region.vertices, hp);
        if clipped.len() >= 3 {
            region.vertices = clipped;
        }
    }
    region
}

/// Inside-or-on-boundary test via edge cross products, 1e-9 tolerance.
pub fn point_in_convex(region: &ConvexRegion, q: Point2) -> bool {
    region.half_planes().all(|hp| hp.signed_distance(q) <= GEOM_EPS)
}

/// Resample the region to exactly `rnum_v` vertices.
///
/// Too few: split the longest edge at its midpoint (shape preserving).
/// Too many: drop the vertex whose removal loses the least area (shrink only).
pub fn normalize_vertex_count(region: &ConvexRegion, rnum_v: usize) -> ConvexRegion {
    assert!(rnum_v >= 3);
    let mut vertices = region.vertices.clone();
    while vertices.len() < rnum_v {
        let n = vertices.len();
        let (j, _) = (0..n)
            .map(|j| (j, vertices[j].distance(vertices[(j + 1) % n])))
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            .unwrap();
        let mid = (vertices[j] + vertices[(j + 1) % n]) * 0.5;
        vertices.insert(j + 1, mid);
    }
    while vertices.len() > rnum_v {
        let n = vertices.len();
        // removing vertex j cuts the corner triangle (prev, j, next); the
        // origin must stay inside, i.e. on the inner side of the new chord
        let keeps_origin = |j: usize| {
            let u = vertices[(j + n - 1) % n];
            let w = vertices[(j + 1) % n];
            // clockwise polygon: interior is to the right of u -> w
            (w - u).cross(region.origin - u) <= GEOM_EPS
        };
        let area_loss = |j: usize| {
            let u = vertices[(j + n - 1) % n];
            let v = vertices[j];
            let w = vertices[(j + 1) % n];
            (v - u).cross(w - u).abs() * 0.5
        };
        let j = (0..n)
            .filter(|&j| keeps_origin(j))
            .map(|j| (j, area_loss(j)))
            .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            // degenerate slivers may have no origin-preserving cut; fall
            // back to min area loss and let the caller's inside check react
            .or_else(|| {
                (0..n)
                    .map(|j| (j, area_loss(j)))
                    .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
            })
            .unwrap()
            .0;
        vertices.remove(j);
    }
    ConvexRegion {
        origin: region.origin,
        vertices,
    }
}

/// Distance from `start` along direction `theta` to the region boundary.
///
/// Returns the boundary hit point and the (nonnegative) distance. `start`
/// must be inside the region; a start on the boundary pointing outward
/// yields distance 0.
pub fn ray_polygon_distance(
    region: &ConvexRegion,
    start: Point2,
    theta: f64,
) -> Result<(Point2, f64), GeomError> {
    if !point_in_convex(region, start) {
        return Err(GeomError::StartOutsideRegion);
    }
    let dir = Point2::new(theta.cos(), theta.sin());
    let mut t_exit = f64::INFINITY;
    for hp in region.half_planes() {
        let denom = hp.normal.dot(dir);
        if denom > 1e-15 {
            let t = (hp.offset - hp.normal.dot(start)) / denom;
            t_exit = t_exit.min(t.max(0.0));
        }
    }
    debug_assert!(t_exit.is_finite(), "bounded polygon must stop the ray");
    let dist = t_exit;
    Ok((start + dir * dist, dist))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unit_square() -> ConvexRegion {
        // clockwise around (0,0), half-width 0.5
        ConvexRegion {
            origin: Point2::ZERO,
            vertices: vec![
                Point2::new(-0.5, -0.5),
                Point2::new(-0.5, 0.5),
                Point2::new(0.5, 0.5),
                Point2::new(0.5, -0.5),
            ],
        }
    }

    /// Brute-force interior test independent of `point_in_convex`: checks q
    /// against every edge line using explicit two-point line sides.
    fn brute_force_inside(region: &ConvexRegion, q: Point2, tol: f64) -> bool {
        let n = region.vertices.len();
        (0..n).all(|j| {
            let a = region.vertices[j];
            let b = region.vertices[(j + 1) % n];
            let cross = (a - q).cross(b - q);
            let len = (b - a).norm();
            if len == 0.0 {
                return true;
            }
            cross / len <= tol
        })
    }

    #[test]
    fn empty_cloud_gives_regular_seed_polygon() {
        let region = build_convex_region(&[], Point2::ZERO, 5.0, 16);
        assert_eq!(region.num_vertices(), 16);
        for v in &region.vertices {
            assert!((v.norm() - 5.0).abs() < 1e-12);
        }
        assert!(region.is_convex_clockwise());
        assert!(point_in_convex(&region, Point2::ZERO));
    }

    #[test]
    fn single_point_clips_half_plane() {
        let cloud = [Point2::new(2.0, 0.0)];
        let region = build_convex_region(&cloud, Point2::ZERO, 5.0, 16);
        // all vertices satisfy x <= 2
        for v in &region.vertices {
            assert!(v.x <= 2.0 + GEOM_EPS);
        }
        assert!(point_in_convex(&region, Point2::ZERO));
        assert!(!brute_force_inside(&region, cloud[0], -GEOM_EPS));
        assert!(region.is_convex_clockwise());
    }

    #[test]
    fn random_clouds_satisfy_exclusion_and_containment() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..120);
            let cloud: Vec<Point2> = (0..n)
                .map(|_| {
                    let r = rng.gen_range(0.5..6.0);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    Point2::from_polar(r, a)
                })
                .collect();
            let region = build_convex_region(&cloud, Point2::ZERO, 8.0, 24);
            assert!(region.is_convex_clockwise());
            assert!(point_in_convex(&region, Point2::ZERO));
            for &p in &cloud {
                assert!(
                    !brute_force_inside(&region, p, -GEOM_EPS),
                    "cloud point {p:?} strictly inside region"
                );
            }
        }
    }

    #[test]
    fn monotone_clipping_never_enlarges() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(2..40);
            let cloud: Vec<Point2> = (0..n)
                .map(|_| {
                    let r = rng.gen_range(0.5..6.0);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    Point2::from_polar(r, a)
                })
                .collect();
            let without = build_convex_region(&cloud[1..], Point2::ZERO, 8.0, 24);
            let with = build_convex_region(&cloud, Point2::ZERO, 8.0, 24);
            for v in &with.vertices {
                assert!(
                    brute_force_inside(&without, *v, 1e-7),
                    "extra point enlarged the region"
                );
            }
        }
    }

    #[test]
    fn normalize_grows_square_preserving_area() {
        let square = unit_square();
        let grown = normalize_vertex_count(&square, 8);
        assert_eq!(grown.num_vertices(), 8);
        assert!((grown.area() - square.area()).abs() < 1e-9);
        assert!(grown.is_convex_clockwise());
    }

    #[test]
    fn normalize_shrinks_into_input() {
        let big = ConvexRegion::regular(Point2::new(1.0, -2.0), 3.0, 20);
        let small = normalize_vertex_count(&big, 16);
        assert_eq!(small.num_vertices(), 16);
        assert!(small.is_convex_clockwise());
        for v in &small.vertices {
            assert!(point_in_convex(&big, *v));
        }
    }

    #[test]
    fn normalize_identity_when_counts_match() {
        let square = unit_square();
        let same = normalize_vertex_count(&square, 4);
        assert_eq!(same.vertices, square.vertices);
    }

    #[test]
    fn normalize_shrink_preserves_exclusion() {
        let mut rng = StdRng::seed_from_u64(23);
        for _ in 0..50 {
            let cloud: Vec<Point2> = (0..60)
                .map(|_| {
                    let r = rng.gen_range(0.5..6.0);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    Point2::from_polar(r, a)
                })
                .collect();
            let region = build_convex_region(&cloud, Point2::ZERO, 8.0, 24);
            if region.num_vertices() <= 8 {
                continue;
            }
            let small = normalize_vertex_count(&region, 8);
            for &p in &cloud {
                assert!(!brute_force_inside(&small, p, -GEOM_EPS));
            }
        }
    }

    #[test]
    fn point_in_convex_centroid_vertices_outside() {
        let region = ConvexRegion::regular(Point2::new(0.3, -0.7), 2.0, 9);
        assert!(point_in_convex(&region, region.centroid()));
        for v in &region.vertices {
            assert!(point_in_convex(&region, *v));
        }
        assert!(!point_in_convex(
            &region,
            region.origin + Point2::new(4.0, 0.0)
        ));
    }

    #[test]
    fn point_in_convex_matches_brute_force() {
        let mut rng = StdRng::seed_from_u64(3);
        let cloud: Vec<Point2> = (0..40)
            .map(|_| {
                let r = rng.gen_range(0.5..6.0);
                let a = rng.gen_range(0.0..std::f64::consts::TAU);
                Point2::from_polar(r, a)
            })
            .collect();
        let region = build_convex_region(&cloud, Point2::ZERO, 8.0, 24);
        for _ in 0..10_000 {
            let q = Point2::new(rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0));
            assert_eq!(
                point_in_convex(&region, q),
                brute_force_inside(&region, q, GEOM_EPS)
            );
        }
    }

    #[test]
    fn ray_distance_axis_and_diagonal() {
        let square = unit_square();
        let (hit, dist) = ray_polygon_distance(&square, Point2::ZERO, 0.0).unwrap();
        assert!((dist - 0.5).abs() < 1e-12);
        assert!(hit.distance(Point2::new(0.5, 0.0)) < 1e-12);
        let (hit, dist) =
            ray_polygon_distance(&square, Point2::ZERO, std::f64::consts::FRAC_PI_4).unwrap();
        assert!((dist - std::f64::consts::SQRT_2 / 2.0).abs() < 1e-12);
        assert!(hit.distance(Point2::new(0.5, 0.5)) < 1e-12);
    }

    #[test]
    fn ray_distance_rejects_outside_start() {
        let square = unit_square();
        let err = ray_polygon_distance(&square, Point2::new(3.0, 0.0), 0.0).unwrap_err();
        assert_eq!(err, GeomError::StartOutsideRegion);
    }

    /// Bisection oracle: march along the ray to bracket the boundary, then
    /// bisect on `point_in_convex`.
    fn bisection_ray_distance(region: &ConvexRegion, start: Point2, theta: f64) -> f64 {
        let dir = Point2::new(theta.cos(), theta.sin());
        let mut hi = 1e-3;
        while point_in_convex(region, start + dir * hi) {
            hi *= 2.0;
            if hi > 1e6 {
                panic!("ray never exits");
            }
        }
        let mut lo = 0.0;
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if point_in_convex(region, start + dir * mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn ray_distance_matches_bisection_oracle() {
        let mut rng = StdRng::seed_from_u64(42);
        for _ in 0..500 {
            let cloud: Vec<Point2> = (0..rng.gen_range(0..30))
                .map(|_| {
                    let r = rng.gen_range(0.5..6.0);
                    let a = rng.gen_range(0.0..std::f64::consts::TAU);
                    Point2::from_polar(r, a)
                })
                .collect();
            let region = build_convex_region(&cloud, Point2::ZERO, 8.0, 24);
            let c = region.centroid();
            // start somewhere between origin and centroid, strictly inside
            let start = Point2::new(c.x * 0.5, c.y * 0.5);
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let (hit, dist) = ray_polygon_distance(&region, start, theta).unwrap();
            let oracle = bisection_ray_distance(&region, start, theta);
            assert!(
                (dist - oracle).abs() < 1e-6,
                "dist {dist} vs oracle {oracle}"
            );
            assert!(hit.distance(start + Point2::from_polar(dist, theta)) < 1e-9);
        }
    }

    #[test]
    fn json_round_trip_matches_schema() {
        let region = unit_square();
        let json = region.to_json();
        assert!(json.contains("\"origin\""));
        assert!(json.contains("\"vertices\""));
        let parsed = ConvexRegion::from_json(&json).unwrap();
        assert_eq!(parsed.vertices, region.vertices);
        assert_eq!(parsed.origin, region.origin);
    }
}
