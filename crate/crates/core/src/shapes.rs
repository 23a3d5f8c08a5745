//! Analytic test shapes: dumbbells, L-shapes, sphere clusters and boxes with bumps.
//!
//! Each shape is a signed distance (exact or a conservative bound) on the
//! normalized cube, negative inside.

use nalgebra::{UnitQuaternion, Vector3};

use crate::grid::TsdfGrid;

pub type Sdf = Box<dyn Fn(&Vector3<f64>) -> f64 + Send + Sync>;

pub struct Shape {
    pub name: &'static str,
    pub sdf: Sdf,
}

impl Shape {
    pub fn grid(&self, resolution: usize) -> TsdfGrid {
        TsdfGrid::from_sdf(resolution, 1.0, &self.sdf)
    }
}

pub fn sphere(c: Vector3<f64>, r: f64) -> impl Fn(&Vector3<f64>) -> f64 + Copy {
    move |p| (p - c).norm() - r
}

/// Axis-aligned box with the given center and half extents.
pub fn cuboid(c: Vector3<f64>, half: Vector3<f64>) -> impl Fn(&Vector3<f64>) -> f64 + Copy {
    move |p| {
        let q = (p - c).abs() - half;
        let outside = q.sup(&Vector3::zeros()).norm();
        outside + q.max().min(0.0)
    }
}

/// Capsule between `a` and `b`.
pub fn capsule(a: Vector3<f64>, b: Vector3<f64>, r: f64) -> impl Fn(&Vector3<f64>) -> f64 + Copy {
    move |p| {
        let ab = b - a;
        let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
        (p - (a + ab * t)).norm() - r
    }
}

/// `f` seen through a rotation about the origin.
pub fn rotated<F>(rot: UnitQuaternion<f64>, f: F) -> impl Fn(&Vector3<f64>) -> f64
where
    F: Fn(&Vector3<f64>) -> f64,
{
    move |p| f(&rot.inverse_transform_vector(p))
}

fn union2<A, B>(a: A, b: B) -> impl Fn(&Vector3<f64>) -> f64 + Copy
where
    A: Fn(&Vector3<f64>) -> f64 + Copy,
    B: Fn(&Vector3<f64>) -> f64 + Copy,
{
    move |p| a(p).min(b(p))
}

fn union_of(parts: Vec<Sdf>) -> Sdf {
    Box::new(move |p| parts.iter().map(|f| f(p)).fold(f64::INFINITY, f64::min))
}

fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
    Vector3::new(x, y, z)
}

/// Two spheres at `±sep` on x joined by a rod.
pub fn dumbbell(sep: f64, r: f64, neck: f64) -> impl Fn(&Vector3<f64>) -> f64 + Copy {
    union2(
        union2(sphere(v(-sep, 0.0, 0.0), r), sphere(v(sep, 0.0, 0.0), r)),
        capsule(v(-sep, 0.0, 0.0), v(sep, 0.0, 0.0), neck),
    )
}

/// Two boxes meeting at a right angle in the xy plane.
pub fn l_shape(long: f64, thick: f64, depth: f64) -> impl Fn(&Vector3<f64>) -> f64 + Copy {
    let base = cuboid(v(0.0, -long + thick, 0.0), v(long, thick, depth));
    let upright = cuboid(v(-long + thick, 0.0, 0.0), v(thick, long, depth));
    union2(base, upright)
}

/// The ten shapes used for the overlap, weight and pruning studies.
pub fn suite() -> Vec<Shape> {
    let tilt = UnitQuaternion::from_euler_angles(0.3, -0.2, 0.5);
    vec![
        Shape {
            name: "dumbbell",
            sdf: Box::new(dumbbell(0.45, 0.35, 0.12)),
        },
        Shape {
            name: "dumbbell-tilted",
            sdf: Box::new(rotated(tilt, union2(
                union2(sphere(v(-0.5, 0.0, 0.0), 0.3), sphere(v(0.45, 0.0, 0.0), 0.4)),
                capsule(v(-0.5, 0.0, 0.0), v(0.45, 0.0, 0.0), 0.1),
            ))),
        },
        Shape {
            name: "l-shape",
            sdf: Box::new(l_shape(0.8, 0.2, 0.25)),
        },
        Shape {
            name: "l-shape-flat",
            sdf: Box::new(l_shape(0.75, 0.15, 0.4)),
        },
        Shape {
            name: "l-shape-tilted",
            sdf: Box::new(rotated(UnitQuaternion::from_euler_angles(0.0, 0.0, 0.4), l_shape(0.65, 0.18, 0.2))),
        },
        Shape {
            name: "sphere-pair",
            sdf: Box::new(union2(sphere(v(-0.3, 0.0, 0.0), 0.4), sphere(v(0.35, 0.1, 0.0), 0.35))),
        },
        Shape {
            name: "sphere-triple",
            sdf: union_of(vec![
                Box::new(sphere(v(-0.4, -0.25, 0.0), 0.33)),
                Box::new(sphere(v(0.4, -0.25, 0.0), 0.33)),
                Box::new(sphere(v(0.0, 0.42, 0.0), 0.33)),
            ]),
        },
        Shape {
            name: "sphere-tetra",
            sdf: union_of(vec![
                Box::new(sphere(v(0.35, 0.35, 0.35), 0.3)),
                Box::new(sphere(v(0.35, -0.35, -0.35), 0.3)),
                Box::new(sphere(v(-0.35, 0.35, -0.35), 0.3)),
                Box::new(sphere(v(-0.35, -0.35, 0.35), 0.3)),
            ]),
        },
        Shape {
            name: "box-bump",
            sdf: Box::new(union2(cuboid(v(0.0, -0.15, 0.0), v(0.6, 0.35, 0.45)), sphere(v(0.0, 0.2, 0.0), 0.3))),
        },
        Shape {
            name: "box-two-bumps",
            sdf: union_of(vec![
                Box::new(cuboid(v(0.0, 0.0, 0.0), v(0.5, 0.3, 0.5))),
                Box::new(sphere(v(0.0, 0.0, 0.55), 0.25)),
                Box::new(sphere(v(0.55, 0.0, 0.0), 0.2)),
            ]),
        },
    ]
}
