//! Rigid 2D frame arithmetic.
//!
//! Every node in the scene graph owns a reference frame (origin +
//! orientation). Points, velocities, and headings are expressed in those
//! local frames, and frame-to-frame transforms are summarized by a
//! [`DeltaPose`]. All math here is f64; narrowing to the model precision
//! happens at the encoder boundary.

use std::f64::consts::{PI, TAU};

/// Wrap an angle into (-pi, pi].
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a % TAU;
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

/// A 2D reference frame: origin (x, y) in meters and orientation theta
/// in radians, always wrapped into (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    theta: f64,
}

impl Pose2 {
    #[inline]
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    #[inline]
    pub fn origin() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    #[inline]
    pub fn theta(&self) -> f64 {
        self.theta
    }
}

/// Transform between two reference frames: translation in global axes
/// plus the cos/sin of the heading difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeltaPose {
    pub dx: f64,
    pub dy: f64,
    pub cos_dtheta: f64,
    pub sin_dtheta: f64,
}

impl DeltaPose {
    #[inline]
    pub fn identity() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            cos_dtheta: 1.0,
            sin_dtheta: 0.0,
        }
    }

    /// The 4-vector layout consumed by edge MLPs.
    #[inline]
    pub fn as_array(&self) -> [f64; 4] {
        [self.dx, self.dy, self.cos_dtheta, self.sin_dtheta]
    }
}

/// Express a global point in the local frame of `reference`:
/// subtract the origin, then rotate by -theta.
#[inline]
pub fn to_local_point(p: [f64; 2], reference: &Pose2) -> [f64; 2] {
    let dx = p[0] - reference.x;
    let dy = p[1] - reference.y;
    let (s, c) = reference.theta.sin_cos();
    [c * dx + s * dy, -s * dx + c * dy]
}

/// Invert [`to_local_point`]: local frame coordinates back to global.
#[inline]
pub fn from_local_point(q: [f64; 2], reference: &Pose2) -> [f64; 2] {
    let (s, c) = reference.theta.sin_cos();
    [
        c * q[0] - s * q[1] + reference.x,
        s * q[0] + c * q[1] + reference.y,
    ]
}

/// Rotate a free vector (velocity) into the local frame; no translation.
#[inline]
pub fn rotate_local_vector(v: [f64; 2], reference: &Pose2) -> [f64; 2] {
    let (s, c) = reference.theta.sin_cos();
    [c * v[0] + s * v[1], -s * v[0] + c * v[1]]
}

/// Express a global heading in the local frame: subtract theta and wrap.
#[inline]
pub fn local_heading(h: f64, reference: &Pose2) -> f64 {
    wrap_angle(h - reference.theta)
}

/// Transform information from frame `u` to frame `v`:
/// (x_v - x_u, y_v - y_u, cos(theta_v - theta_u), sin(theta_v - theta_u)),
/// with the translation left in global axes.
#[inline]
pub fn delta_pose(ref_u: &Pose2, ref_v: &Pose2) -> DeltaPose {
    let dt = ref_v.theta - ref_u.theta;
    DeltaPose {
        dx: ref_v.x - ref_u.x,
        dy: ref_v.y - ref_u.y,
        cos_dtheta: dt.cos(),
        sin_dtheta: dt.sin(),
    }
}

/// [`delta_pose`] with the translation rotated into `v`'s frame, which
/// makes the 4-vector invariant under global rigid motions of the scene.
#[inline]
pub fn delta_pose_rotated(ref_u: &Pose2, ref_v: &Pose2) -> DeltaPose {
    let d = delta_pose(ref_u, ref_v);
    let t = rotate_local_vector([d.dx, d.dy], ref_v);
    DeltaPose {
        dx: t[0],
        dy: t[1],
        cos_dtheta: d.cos_dtheta,
        sin_dtheta: d.sin_dtheta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn local_point_translation_only() {
        let r = Pose2::new(1.0, 1.0, 0.0);
        assert_eq!(to_local_point([3.0, 4.0], &r), [2.0, 3.0]);
    }

    #[test]
    fn local_point_quarter_turn() {
        let r = Pose2::new(0.0, 0.0, FRAC_PI_2);
        let q = to_local_point([1.0, 0.0], &r);
        assert!(close(q[0], 0.0, 1e-15) && close(q[1], -1.0, 1e-15));
    }

    #[test]
    fn local_point_origin_maps_to_zero() {
        let r = Pose2::new(-3.5, 7.25, 2.1);
        let q = to_local_point([r.x, r.y], &r);
        assert!(close(q[0], 0.0, 1e-15) && close(q[1], 0.0, 1e-15));
    }

    #[test]
    fn rotate_vector_cases() {
        let id = Pose2::new(0.0, 0.0, 0.0);
        assert_eq!(rotate_local_vector([1.0, 0.0], &id), [1.0, 0.0]);
        let half = Pose2::new(0.0, 0.0, PI);
        let v = rotate_local_vector([1.0, 0.0], &half);
        assert!(close(v[0], -1.0, 1e-15) && close(v[1], 0.0, 1e-15));
        let quarter = Pose2::new(0.0, 0.0, FRAC_PI_2);
        let w = rotate_local_vector([0.0, 2.0], &quarter);
        assert!(close(w[0], 2.0, 1e-15) && close(w[1], 0.0, 1e-15));
    }

    #[test]
    fn local_heading_cases() {
        let r = Pose2::new(0.0, 0.0, FRAC_PI_2);
        assert!(close(local_heading(FRAC_PI_2, &r), 0.0, 1e-15));
        // -3pi/4 - pi/2 = -5pi/4 wraps to +3pi/4
        assert!(close(
            local_heading(-3.0 * PI / 4.0, &r),
            3.0 * PI / 4.0,
            1e-12
        ));
        let r0 = Pose2::new(0.0, 0.0, 0.1);
        assert!(close(local_heading(0.3, &r0), 0.2, 1e-15));
    }

    #[test]
    fn delta_pose_direct_substitution() {
        let u = Pose2::new(0.0, 0.0, 0.0);
        let v = Pose2::new(1.0, 2.0, FRAC_PI_2);
        let d = delta_pose(&u, &v);
        assert!(close(d.dx, 1.0, 1e-15));
        assert!(close(d.dy, 2.0, 1e-15));
        assert!(close(d.cos_dtheta, 0.0, 1e-15));
        assert!(close(d.sin_dtheta, 1.0, 1e-15));
    }

    #[test]
    fn delta_pose_identity_case() {
        let p = Pose2::new(4.0, -2.0, 0.7);
        let d = delta_pose(&p, &p);
        assert_eq!(
            (d.dx, d.dy, d.cos_dtheta, d.sin_dtheta),
            (0.0, 0.0, 1.0, 0.0)
        );
    }

    #[test]
    fn delta_pose_pure_rotation() {
        let u = Pose2::new(1.0, 1.0, PI / 4.0);
        let v = Pose2::new(1.0, 1.0, -PI / 4.0);
        let d = delta_pose(&u, &v);
        assert!(close(d.dx, 0.0, 1e-15));
        assert!(close(d.dy, 0.0, 1e-15));
        assert!(close(d.cos_dtheta, 0.0, 1e-15));
        assert!(close(d.sin_dtheta, -1.0, 1e-15));
    }

    #[test]
    fn wrap_maps_pi_plus_eps_below() {
        let eps = 1e-6;
        assert!(close(wrap_angle(PI + eps), -PI + eps, 1e-12));
        assert!(close(wrap_angle(PI), PI, 0.0));
    }

    #[test]
    fn delta_pose_rotated_is_rigid_motion_invariant() {
        let u = Pose2::new(3.0, -1.0, 0.4);
        let v = Pose2::new(-2.0, 5.0, -1.3);
        let d0 = delta_pose_rotated(&u, &v);
        let (alpha, tx, ty) = (1.9f64, 321.0, -77.0);
        let (s, c) = alpha.sin_cos();
        let mov = |p: &Pose2| {
            Pose2::new(
                c * p.x - s * p.y + tx,
                s * p.x + c * p.y + ty,
                p.theta() + alpha,
            )
        };
        let d1 = delta_pose_rotated(&mov(&u), &mov(&v));
        assert!(close(d0.dx, d1.dx, 1e-9));
        assert!(close(d0.dy, d1.dy, 1e-9));
        assert!(close(d0.cos_dtheta, d1.cos_dtheta, 1e-9));
        assert!(close(d0.sin_dtheta, d1.sin_dtheta, 1e-9));
    }

    proptest! {
        #[test]
        fn round_trip_recovers_point(
            px in -1e3f64..1e3, py in -1e3f64..1e3,
            rx in -1e3f64..1e3, ry in -1e3f64..1e3, rt in -10.0f64..10.0,
        ) {
            let r = Pose2::new(rx, ry, rt);
            let q = to_local_point([px, py], &r);
            let back = from_local_point(q, &r);
            prop_assert!(close(back[0], px, 1e-9) && close(back[1], py, 1e-9));
        }

        #[test]
        fn rotation_preserves_norm(
            vx in -1e3f64..1e3, vy in -1e3f64..1e3, rt in -10.0f64..10.0,
        ) {
            let r = Pose2::new(0.0, 0.0, rt);
            let w = rotate_local_vector([vx, vy], &r);
            let n0 = (vx * vx + vy * vy).sqrt();
            let n1 = (w[0] * w[0] + w[1] * w[1]).sqrt();
            prop_assert!(close(n0, n1, 1e-9));
        }

        #[test]
        fn local_coordinates_are_equivariant(
            px in -1e2f64..1e2, py in -1e2f64..1e2,
            rx in -1e2f64..1e2, ry in -1e2f64..1e2, rt in -6.0f64..6.0,
            alpha in -6.0f64..6.0, tx in -1e3f64..1e3, ty in -1e3f64..1e3,
        ) {
            let r = Pose2::new(rx, ry, rt);
            let q0 = to_local_point([px, py], &r);
            let (s, c) = alpha.sin_cos();
            let gp = [c * px - s * py + tx, s * px + c * py + ty];
            let gr = Pose2::new(c * rx - s * ry + tx, s * rx + c * ry + ty, rt + alpha);
            let q1 = to_local_point(gp, &gr);
            prop_assert!(close(q0[0], q1[0], 1e-8) && close(q0[1], q1[1], 1e-8));
        }

        #[test]
        fn delta_pose_angle_antisymmetry(
            ax in -1e2f64..1e2, ay in -1e2f64..1e2, at in -6.0f64..6.0,
            bx in -1e2f64..1e2, by in -1e2f64..1e2, bt in -6.0f64..6.0,
        ) {
            let a = Pose2::new(ax, ay, at);
            let b = Pose2::new(bx, by, bt);
            let ab = delta_pose(&a, &b);
            let ba = delta_pose(&b, &a);
            prop_assert!(close(ab.cos_dtheta, ba.cos_dtheta, 1e-12));
            prop_assert!(close(ab.sin_dtheta, -ba.sin_dtheta, 1e-12));
            prop_assert!(close(ab.cos_dtheta.hypot(ab.sin_dtheta), 1.0, 1e-9));
        }

        #[test]
        fn wrap_is_idempotent(a in -1e4f64..1e4) {
            let w = wrap_angle(a);
            prop_assert!(w > -PI && w <= PI);
            prop_assert!(close(wrap_angle(w), w, 0.0));
        }
    }
}
