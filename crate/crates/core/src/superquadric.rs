//! The superquadric primitive.
//!
//! A superquadric is described by two shape exponents `eps = [e1, e2]`, three
//! positive semi-axis scales and a rigid pose. In its local frame the inside-outside
//! function is
//!
//! ```text
//! f(x) = ((|x/ax|^(2/e2) + |y/ay|^(2/e2))^(e2/e1) + |z/az|^(2/e1)
//! ```
//!
//! with `f < 1` inside and `f > 1` outside. `f` is homogeneous of degree `2/e1`,
//! so along the ray from the local origin through `x` the surface sits at radius
//! `rho(d) = f(d)^(-e1/2)` where `d = x/|x|`. The signed radial distance is then
//! `|x| - rho(d)`, which is what [`Superquadric::srdf`] evaluates. Everything is
//! done in log space so that sharp exponents (`e -> 0.1`) neither overflow nor
//! underflow.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::mesh::TriMesh;

pub const EPS_MIN: f64 = 0.1;
pub const EPS_MAX: f64 = 1.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Superquadric {
    pub eps: [f64; 2],
    pub scale: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

/// World-space axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: Vector3<f64>,
    pub max: Vector3<f64>,
}

impl Aabb {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn center(&self) -> Vector3<f64> {
        (self.min + self.max) * 0.5
    }

    pub fn half_extents(&self) -> Vector3<f64> {
        (self.max - self.min) * 0.5
    }
}

impl Superquadric {
    pub fn new(
        eps: [f64; 2],
        scale: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        translation: Vector3<f64>,
    ) -> Self {
        Self {
            eps,
            scale,
            rotation,
            translation,
        }
    }

    pub fn sphere(center: Vector3<f64>, radius: f64) -> Self {
        Self::new(
            [1.0, 1.0],
            Vector3::repeat(radius),
            UnitQuaternion::identity(),
            center,
        )
    }

    /// Checks the exponent bounds, positive scales and quaternion norm.
    pub fn is_valid(&self) -> bool {
        let eps_ok = self
            .eps
            .iter()
            .all(|e| (EPS_MIN - 1e-12..=EPS_MAX + 1e-12).contains(e));
        let scale_ok = self.scale.iter().all(|a| a.is_finite() && *a > 0.0);
        let quat_ok = (self.rotation.quaternion().norm() - 1.0).abs() < 1e-9;
        eps_ok && scale_ok && quat_ok && self.translation.iter().all(|t| t.is_finite())
    }

    #[inline]
    pub fn to_local(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(x - self.translation))
    }

    #[inline]
    pub fn to_world(&self, local: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transform_vector(local) + self.translation
    }

    /// Inside-outside function evaluated at a world point.
    pub fn implicit(&self, x: &Vector3<f64>) -> f64 {
        let local = self.to_local(x);
        let r = local.norm();
        if r == 0.0 {
            return 0.0;
        }
        let log_f_dir = self.log_implicit_dir(&(local / r));
        ((2.0 / self.eps[0]) * r.ln() + log_f_dir).exp()
    }

    /// Signed radial distance: negative inside, positive outside.
    ///
    /// At the local origin the radial construction degenerates; the value there is
    /// `-min(a)`.
    #[inline]
    pub fn srdf(&self, x: &Vector3<f64>) -> f64 {
        self.srdf_local(&self.to_local(x))
    }

    #[inline]
    pub fn srdf_local(&self, local: &Vector3<f64>) -> f64 {
        let r = local.norm();
        if r == 0.0 {
            return -self.scale.min();
        }
        r - self.surface_radius(&(local / r))
    }

    #[inline]
    pub fn srdf_truncated(&self, x: &Vector3<f64>, tau: f64) -> f64 {
        self.srdf(x).clamp(-tau, tau)
    }

    /// Distance from the local origin to the surface along the unit direction `dir`.
    #[inline]
    pub fn surface_radius(&self, dir: &Vector3<f64>) -> f64 {
        (-0.5 * self.eps[0] * self.log_implicit_dir(dir)).exp()
    }

    /// `ln f(d)` for a local unit direction.
    #[inline]
    fn log_implicit_dir(&self, d: &Vector3<f64>) -> f64 {
        let [e1, e2] = self.eps;
        let lx = (d.x / self.scale.x).abs().ln();
        let ly = (d.y / self.scale.y).abs().ln();
        let lz = (d.z / self.scale.z).abs().ln();
        let xy = log_add_exp((2.0 / e2) * lx, (2.0 / e2) * ly);
        log_add_exp((e2 / e1) * xy, (2.0 / e1) * lz)
    }

    /// Half-width `c` such that the local box `[-c*a, c*a]` lies inside the
    /// superquadric. The corner `(c ax, c ay, c az)` is on the surface, and `f` is
    /// monotone in each `|coordinate|`.
    pub fn inner_box_factor(&self) -> f64 {
        let [e1, e2] = self.eps;
        (2f64.powf(e2 / e1) + 1.0).powf(-0.5 * e1)
    }

    /// Axis-aligned world box containing every point with `f <= 1`, grown by `margin`.
    pub fn world_aabb(&self, margin: f64) -> Aabb {
        let rot: Matrix3<f64> = self.rotation.to_rotation_matrix().into_inner();
        let half = rot.abs() * self.scale + Vector3::repeat(margin);
        Aabb {
            min: self.translation - half,
            max: self.translation + half,
        }
    }

    /// Euler angles (roll about x, pitch about y, yaw about z) of the rotation.
    pub fn euler_xyz(&self) -> [f64; 3] {
        let (r, p, y) = self.rotation.euler_angles();
        [r, p, y]
    }

    pub fn volume(&self) -> f64 {
        // Closed form: 2 ax ay az e1 e2 B(e1/2 + 1, e1) B(e2/2, e2/2).
        let [e1, e2] = self.eps;
        2.0 * self.scale.x
            * self.scale.y
            * self.scale.z
            * e1
            * e2
            * beta(e1 / 2.0 + 1.0, e1)
            * beta(e2 / 2.0, e2 / 2.0)
    }

    /// Triangulates the surface with the parametric form
    /// `x = ax c(eta)^e1 c(w)^e2, y = ay c(eta)^e1 s(w)^e2, z = az s(eta)^e1`
    /// using sign-preserving powers. `subdivisions` rings per quarter turn; the two
    /// poles are single vertices so the mesh is a closed genus-0 surface.
    pub fn tessellate(&self, subdivisions: usize) -> TriMesh {
        let s = subdivisions.max(2);
        let n_eta = 2 * s;
        let n_omega = 4 * s;
        let [e1, e2] = self.eps;
        let local_point = |eta: f64, omega: f64| -> Vector3<f64> {
            let ce = signed_pow(eta.cos(), e1);
            Vector3::new(
                self.scale.x * ce * signed_pow(omega.cos(), e2),
                self.scale.y * ce * signed_pow(omega.sin(), e2),
                self.scale.z * signed_pow(eta.sin(), e1),
            )
        };

        let mut vertices = Vec::with_capacity((n_eta - 1) * n_omega + 2);
        let mut triangles = Vec::new();
        let south = 0u32;
        vertices.push(self.to_world(&Vector3::new(0.0, 0.0, -self.scale.z)));
        for i in 1..n_eta {
            let eta = -std::f64::consts::FRAC_PI_2 + std::f64::consts::PI * i as f64 / n_eta as f64;
            for j in 0..n_omega {
                let omega =
                    -std::f64::consts::PI + 2.0 * std::f64::consts::PI * j as f64 / n_omega as f64;
                vertices.push(self.to_world(&local_point(eta, omega)));
            }
        }
        let north = vertices.len() as u32;
        vertices.push(self.to_world(&Vector3::new(0.0, 0.0, self.scale.z)));

        let ring = |i: usize, j: usize| -> u32 { (1 + (i - 1) * n_omega + (j % n_omega)) as u32 };
        for j in 0..n_omega {
            triangles.push([south, ring(1, j + 1), ring(1, j)]);
        }
        for i in 1..n_eta - 1 {
            for j in 0..n_omega {
                let a = ring(i, j);
                let b = ring(i, j + 1);
                let c = ring(i + 1, j + 1);
                let d = ring(i + 1, j);
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
        for j in 0..n_omega {
            triangles.push([north, ring(n_eta - 1, j), ring(n_eta - 1, j + 1)]);
        }
        TriMesh::new(vertices, triangles)
    }

    /// Exponents clamped into bounds and the quaternion renormalized.
    pub fn sanitized(mut self) -> Self {
        for e in self.eps.iter_mut() {
            *e = e.clamp(EPS_MIN, EPS_MAX);
        }
        self.rotation = UnitQuaternion::new_normalize(*self.rotation.quaternion());
        self
    }

    /// The same primitive seen through the rigid map `x -> rot * x + trans`.
    pub fn transformed(&self, rot: &UnitQuaternion<f64>, trans: &Vector3<f64>) -> Self {
        Self {
            eps: self.eps,
            scale: self.scale,
            rotation: rot * self.rotation,
            translation: rot.transform_vector(&self.translation) + trans,
        }
    }

    pub fn rotation_matrix(&self) -> Rotation3<f64> {
        self.rotation.to_rotation_matrix()
    }
}

/// A superquadric with its rotation matrix and exponent constants precomputed,
/// for evaluating the signed radial distance at many points.
#[derive(Clone, Debug)]
pub struct Prepared {
    rt: Matrix3<f64>,
    t: Vector3<f64>,
    ln_a: Vector3<f64>,
    a: Vector3<f64>,
    min_a: f64,
    k_xy: f64,
    k_join: f64,
    k_z: f64,
    half_e1: f64,
    inner: f64,
}

impl Prepared {
    pub fn new(sq: &Superquadric) -> Self {
        let [e1, e2] = sq.eps;
        Self {
            rt: sq.rotation.to_rotation_matrix().into_inner().transpose(),
            t: sq.translation,
            ln_a: sq.scale.map(f64::ln),
            a: sq.scale,
            min_a: sq.scale.min(),
            k_xy: 2.0 / e2,
            k_join: e2 / e1,
            k_z: 2.0 / e1,
            half_e1: 0.5 * e1,
            inner: sq.inner_box_factor(),
        }
    }

    #[inline]
    pub fn local(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rt * (p - self.t)
    }

    #[inline]
    pub fn srdf(&self, p: &Vector3<f64>) -> f64 {
        self.srdf_local(&self.local(p))
    }

    #[inline]
    pub fn srdf_local(&self, l: &Vector3<f64>) -> f64 {
        let r = l.norm();
        if r == 0.0 {
            return -self.min_a;
        }
        let ln_r = r.ln();
        let lx = l.x.abs().ln() - ln_r - self.ln_a.x;
        let ly = l.y.abs().ln() - ln_r - self.ln_a.y;
        let lz = l.z.abs().ln() - ln_r - self.ln_a.z;
        let xy = log_add_exp(self.k_xy * lx, self.k_xy * ly);
        let lf = log_add_exp(self.k_join * xy, self.k_z * lz);
        r - (-self.half_e1 * lf).exp()
    }

    /// `srdf` clamped to `[-tau, tau]`, skipping the evaluation where a box test
    /// already decides saturation. The second value is `false` when a shortcut
    /// was taken (the clamped value is then locally constant).
    #[inline]
    pub fn srdf_truncated_local(&self, l: &Vector3<f64>, tau: f64) -> (f64, bool) {
        let ax = l.x.abs();
        let ay = l.y.abs();
        let az = l.z.abs();
        if ax >= self.a.x + tau || ay >= self.a.y + tau || az >= self.a.z + tau {
            return (tau, false);
        }
        let c = self.inner;
        if ax <= c * self.a.x - tau && ay <= c * self.a.y - tau && az <= c * self.a.z - tau {
            return (-tau, false);
        }
        (self.srdf_local(l).clamp(-tau, tau), true)
    }
}

#[inline]
fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[inline]
pub fn signed_pow(u: f64, p: f64) -> f64 {
    u.signum() * u.abs().powf(p)
}

fn beta(a: f64, b: f64) -> f64 {
    (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)).exp()
}

// Lanczos approximation, g = 7.
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = COEF[0];
    let t = x + 7.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}
