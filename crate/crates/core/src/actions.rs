//! Decode raw policy outputs (four sigmoid-squashed scalars) into short-term
//! and long-term reference points inside the intersection of the convex
//! region and the kinematic reach discs.

use crate::geom::{point_in_convex, ray_polygon_distance, ConvexRegion, GeomError, Point2};
use crate::mpc::MpcParams;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Raw policy output after sigmoid activation, each component in (0, 1).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RawAction {
    pub alpha_s: f64,
    pub beta_s: f64,
    pub alpha_l: f64,
    pub beta_l: f64,
}

/// Decoded reference points in world coordinates, with the intermediate
/// polar parameters kept for observation and trace export.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ReferencePoints {
    pub q_short: Point2,
    pub q_long: Point2,
    pub theta_s: f64,
    pub theta_l: f64,
    pub d_s: f64,
    pub d_l: f64,
    /// Set by `goal_shortcut` when the goal replaced `q_long`.
    pub goal_in_convex: bool,
}

/// Reachable position offsets within one control period and one horizon,
/// for the current speed: `r = min(v_max, |v| + a_max * t) * t`, a
/// conservative overestimate clipped by the velocity cap.
pub fn reach_radii(speed: f64, params: &MpcParams) -> (f64, f64) {
    let lim = &params.limits;
    let reach = |t: f64| lim.v_max.min(speed + lim.a_max * t) * t;
    (reach(params.t_c), reach(params.horizon_seconds()))
}

/// Decode `(alpha, beta)` pairs into reference points.
///
/// The short-term ray from the robot position is capped by the region
/// boundary and the disc of radius `r_s`; the long-term ray starts at the
/// short-term point and is capped by the region boundary and the disc of
/// radius `r_l` centered on the robot position.
pub fn decode(
    raw: &RawAction,
    region: &ConvexRegion,
    origin: Point2,
    r_s: f64,
    r_l: f64,
) -> Result<ReferencePoints, GeomError> {
    let theta_s = raw.alpha_s * TAU;
    let (_, boundary_s) = ray_polygon_distance(region, origin, theta_s)?;
    let d_theta_s = boundary_s.min(r_s);
    let d_s = raw.beta_s * d_theta_s;
    let q_short = origin + Point2::from_polar(d_s, theta_s);

    let theta_l = theta_s + raw.alpha_l * TAU;
    let (_, boundary_l) = ray_polygon_distance(region, q_short, theta_l)?;
    let disc_cap = ray_circle_exit(q_short, theta_l, origin, r_l);
    let d_theta_l = boundary_l.min(disc_cap);
    let d_l = raw.beta_l * d_theta_l;
    let q_long = q_short + Point2::from_polar(d_l, theta_l);

    Ok(ReferencePoints {
        q_short,
        q_long,
        theta_s,
        theta_l,
        d_s,
        d_l,
        goal_in_convex: false,
    })
}

/// When the goal lies inside the region (boundary included), use it directly
/// as the long-term reference point and flag the MPC stop cost.
pub fn goal_shortcut(
    region: &ConvexRegion,
    goal: Point2,
    decoded: &ReferencePoints,
) -> ReferencePoints {
    if point_in_convex(region, goal) {
        ReferencePoints {
            q_long: goal,
            goal_in_convex: true,
            ..*decoded
        }
    } else {
        *decoded
    }
}

/// Distance along the ray from `start` in direction `theta` to the circle
/// of radius `r` around `center`. Returns 0 when the start is on or outside
/// the circle heading outward.
fn ray_circle_exit(start: Point2, theta: f64, center: Point2, r: f64) -> f64 {
    let dir = Point2::new(theta.cos(), theta.sin());
    let rel = start - center;
    // |rel + t dir|^2 = r^2, take the larger root
    let b = rel.dot(dir);
    let c = rel.dot(rel) - r * r;
    let disc = b * b - c;
    if disc <= 0.0 {
        return 0.0;
    }
    (-b + disc.sqrt()).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::Limits;
    use crate::geom::build_convex_region;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn square(half: f64) -> ConvexRegion {
        ConvexRegion {
            origin: Point2::ZERO,
            vertices: vec![
                Point2::new(-half, -half),
                Point2::new(-half, half),
                Point2::new(half, half),
                Point2::new(half, -half),
            ],
        }
    }

    fn default_params() -> MpcParams {
        MpcParams {
            limits: Limits {
                v_max: 3.0,
                a_max: 3.0,
                j_max: 10.0,
            },
            t_c: 0.2,
            n: 10,
            ..Default::default()
        }
    }

    #[test]
    fn reach_radii_formula() {
        let params = default_params();
        let (r_s, r_l) = reach_radii(0.0, &params);
        assert!((r_s - 0.12).abs() < 1e-12); // min(3, 0.6) * 0.2
        assert!((r_l - 6.0).abs() < 1e-12); // min(3, 6) * 2
        let (r_s_fast, _) = reach_radii(3.0, &params);
        assert!((r_s_fast - 0.6).abs() < 1e-12); // cap active
    }

    #[test]
    fn disc_caps_short_term_ray() {
        let region = square(2.0);
        let raw = RawAction {
            alpha_s: 0.0,
            beta_s: 1.0 - 1e-12,
            alpha_l: 0.0,
            beta_l: 0.5,
        };
        let refs = decode(&raw, &region, Point2::ZERO, 0.5, 3.0).unwrap();
        // ray along +x capped by disc radius 0.5, not by the wall at 2
        assert!(refs.q_short.distance(Point2::new(0.5, 0.0)) < 1e-9);
    }

    #[test]
    fn zero_betas_collapse_to_origin() {
        let region = square(2.0);
        let raw = RawAction {
            alpha_s: 0.3,
            beta_s: 1e-12,
            alpha_l: 0.7,
            beta_l: 1e-12,
        };
        let refs = decode(&raw, &region, Point2::ZERO, 0.5, 3.0).unwrap();
        assert!(refs.q_short.distance(Point2::ZERO) < 1e-9);
        assert!(refs.q_long.distance(Point2::ZERO) < 1e-9);
    }

    #[test]
    fn decoded_points_always_contained() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..200 {
            let cloud: Vec<Point2> = (0..rng.gen_range(0..50))
                .map(|_| {
                    let r = rng.gen_range(0.5..6.0);
                    let a = rng.gen_range(0.0..TAU);
                    Point2::from_polar(r, a)
                })
                .collect();
            let region = build_convex_region(&cloud, Point2::ZERO, 8.0, 24);
            let r_s = rng.gen_range(0.05..1.0);
            let r_l = rng.gen_range(1.0..7.0);
            for _ in 0..50 {
                let raw = RawAction {
                    alpha_s: rng.gen_range(1e-6..1.0),
                    beta_s: rng.gen_range(1e-6..1.0),
                    alpha_l: rng.gen_range(1e-6..1.0),
                    beta_l: rng.gen_range(1e-6..1.0),
                };
                let refs = decode(&raw, &region, Point2::ZERO, r_s, r_l).unwrap();
                assert!(point_in_convex(&region, refs.q_short));
                assert!(point_in_convex(&region, refs.q_long));
                assert!(refs.q_short.norm() <= r_s + 1e-9);
                assert!(refs.q_long.norm() <= r_l + 1e-9);
            }
        }
    }

    #[test]
    fn short_point_has_polar_angle_theta_s() {
        let region = square(3.0);
        let origin = Point2::new(0.4, -0.3);
        let mut shifted = region.clone();
        shifted.origin = origin;
        let raw = RawAction {
            alpha_s: 0.125,
            beta_s: 0.8,
            alpha_l: 0.5,
            beta_l: 0.5,
        };
        let refs = decode(&raw, &shifted, origin, 0.5, 3.0).unwrap();
        let rel = refs.q_short - origin;
        let angle = rel.y.atan2(rel.x);
        assert!((angle - refs.theta_s).abs() < 1e-9);
    }

    #[test]
    fn goal_shortcut_replaces_long_point_only_when_inside() {
        let region = square(2.0);
        let raw = RawAction {
            alpha_s: 0.1,
            beta_s: 0.5,
            alpha_l: 0.2,
            beta_l: 0.5,
        };
        let decoded = decode(&raw, &region, Point2::ZERO, 0.5, 3.0).unwrap();

        let outside = goal_shortcut(&region, Point2::new(10.0, 0.0), &decoded);
        assert_eq!(outside.q_long, decoded.q_long);
        assert!(!outside.goal_in_convex);

        let centroid = region.centroid();
        let inside = goal_shortcut(&region, centroid, &decoded);
        assert_eq!(inside.q_long, centroid);
        assert!(inside.goal_in_convex);

        // boundary vertex counts as inside
        let vertex = region.vertices[0];
        let on_boundary = goal_shortcut(&region, vertex, &decoded);
        assert_eq!(on_boundary.q_long, vertex);
        assert!(on_boundary.goal_in_convex);
    }

    #[test]
    fn decode_outside_origin_errors() {
        let region = square(1.0);
        let raw = RawAction {
            alpha_s: 0.5,
            beta_s: 0.5,
            alpha_l: 0.5,
            beta_l: 0.5,
        };
        assert!(decode(&raw, &region, Point2::new(5.0, 0.0), 0.5, 3.0).is_err());
    }
}
