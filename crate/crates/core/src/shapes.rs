//! Analytic signed distance functions and surface point clouds.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Box { center: [f64; 3], half_extents: [f64; 3] },
    /// Axis along world z.
    Cylinder { center: [f64; 3], radius: f64, half_height: f64 },
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

impl Shape {
    pub fn center(&self) -> Vector3<f64> {
        match self {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } | Shape::Cylinder { center, .. } => v3(center),
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        let ok = match self {
            Shape::Sphere { radius, .. } => *radius > 0.0,
            Shape::Box { half_extents, .. } => half_extents.iter().all(|h| *h > 0.0),
            Shape::Cylinder { radius, half_height, .. } => *radius > 0.0 && *half_height > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err("shape dimensions must be positive")
        }
    }

    pub fn translated(&self, d: &Vector3<f64>) -> Shape {
        let mut s = self.clone();
        match &mut s {
            Shape::Sphere { center, .. } | Shape::Box { center, .. } | Shape::Cylinder { center, .. } => {
                for i in 0..3 {
                    center[i] += d[i];
                }
            }
        }
        s
    }

    pub fn sdf(&self, p: &Vector3<f64>) -> f64 {
        match self {
            Shape::Sphere { center, radius } => (p - v3(center)).norm() - radius,
            Shape::Box { center, half_extents } => {
                let q = (p - v3(center)).abs() - v3(half_extents);
                let outside = q.map(|x| x.max(0.0)).norm();
                let inside = q.x.max(q.y).max(q.z).min(0.0);
                outside + inside
            }
            Shape::Cylinder { center, radius, half_height } => {
                let d = p - v3(center);
                let dx = (d.x * d.x + d.y * d.y).sqrt() - radius;
                let dz = d.z.abs() - half_height;
                let outside = (dx.max(0.0).powi(2) + dz.max(0.0).powi(2)).sqrt();
                outside + dx.max(dz).min(0.0)
            }
        }
    }

    /// Gradient of the SDF; unit length away from the medial set.
    pub fn sdf_gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.normal_and_jacobian(p).0
    }

    /// Outward unit normal of the nearest surface point.
    pub fn normal(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.normal_and_jacobian(p).0
    }

    /// Derivative of [`Shape::normal`] with respect to the query point.
    pub fn normal_jacobian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        self.normal_and_jacobian(p).1
    }

    /// Normal and its Jacobian. At points where the normal is undefined (a
    /// sphere's centre, a cylinder's axis) the normal is +z with zero Jacobian.
    pub fn normal_and_jacobian(&self, p: &Vector3<f64>) -> (Vector3<f64>, Matrix3<f64>) {
        let degenerate = (Vector3::z(), Matrix3::zeros());
        let sgn = |x: f64| if x < 0.0 { -1.0 } else { 1.0 };
        match self {
            Shape::Sphere { center, .. } => {
                let d = p - v3(center);
                let r = d.norm();
                if r < 1e-12 {
                    return degenerate;
                }
                let n = d / r;
                (n, (Matrix3::identity() - n * n.transpose()) / r)
            }
            Shape::Box { center, half_extents } => {
                let d = p - v3(center);
                let s = d.map(sgn);
                let q = d.abs() - v3(half_extents);
                let qp = q.map(|x| x.max(0.0));
                let l = qp.norm();
                if l > 0.0 {
                    let u = qp / l;
                    let sm = Matrix3::from_diagonal(&s);
                    let dq = Matrix3::from_diagonal(&Vector3::from_fn(|i, _| if q[i] > 0.0 { s[i] } else { 0.0 }));
                    (sm * u, sm * (Matrix3::identity() - u * u.transpose()) / l * dq)
                } else {
                    let k = q.imax();
                    let mut n = Vector3::zeros();
                    n[k] = s[k];
                    (n, Matrix3::zeros())
                }
            }
            Shape::Cylinder { center, radius, half_height } => {
                let d = p - v3(center);
                let rho = (d.x * d.x + d.y * d.y).sqrt();
                if rho < 1e-12 {
                    return degenerate;
                }
                let radial = Vector3::new(d.x / rho, d.y / rho, 0.0);
                let mut d_radial = Matrix3::zeros();
                d_radial[(0, 0)] = 1.0 - radial.x * radial.x;
                d_radial[(0, 1)] = -radial.x * radial.y;
                d_radial[(1, 0)] = -radial.x * radial.y;
                d_radial[(1, 1)] = 1.0 - radial.y * radial.y;
                d_radial /= rho;
                let sz = sgn(d.z);
                let axial = Vector3::new(0.0, 0.0, sz);
                let dx = rho - radius;
                let dz = d.z.abs() - half_height;
                let w = nalgebra::Vector2::new(dx.max(0.0), dz.max(0.0));
                let l = w.norm();
                if l > 0.0 {
                    let u = w / l;
                    let proj = (nalgebra::Matrix2::identity() - u * u.transpose()) / l;
                    // rows: d w / d p
                    let mut dw = nalgebra::Matrix2x3::zeros();
                    if dx > 0.0 {
                        dw.set_row(0, &radial.transpose());
                    }
                    if dz > 0.0 {
                        dw.set_row(1, &axial.transpose());
                    }
                    let du = proj * dw;
                    let n = radial * u.x + axial * u.y;
                    let j = radial * du.row(0) + d_radial * u.x + axial * du.row(1);
                    (n, j)
                } else if dx > dz {
                    (radial, d_radial)
                } else {
                    (axial, Matrix3::zeros())
                }
            }
        }
    }

    /// Axis-aligned bounds of the shape.
    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let c = self.center();
        let h = match self {
            Shape::Sphere { radius, .. } => Vector3::repeat(*radius),
            Shape::Box { half_extents, .. } => v3(half_extents),
            Shape::Cylinder { radius, half_height, .. } => Vector3::new(*radius, *radius, *half_height),
        };
        (c - h, c + h)
    }

    /// Points drawn uniformly by area on the surface, plus optional isotropic noise.
    pub fn sample_surface<R: Rng + ?Sized>(&self, n: usize, noise: f64, rng: &mut R) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                let p = self.surface_point(rng);
                if noise > 0.0 {
                    let e = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                    p + e * noise
                } else {
                    p
                }
            })
            .collect()
    }

    fn surface_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector3<f64> {
        match self {
            Shape::Sphere { center, radius } => {
                let d = Vector3::new(rng.sample::<f64, _>(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                v3(center) + d.normalize() * *radius
            }
            Shape::Box { center, half_extents } => {
                let h = v3(half_extents);
                let areas = [h.y * h.z, h.x * h.z, h.x * h.y];
                let total: f64 = areas.iter().sum();
                let mut u = rng.random_range(0.0..total);
                let mut axis = 2;
                for (i, a) in areas.iter().enumerate() {
                    if u < *a {
                        axis = i;
                        break;
                    }
                    u -= a;
                }
                let mut p = Vector3::new(rng.random_range(-h.x..h.x), rng.random_range(-h.y..h.y), rng.random_range(-h.z..h.z));
                p[axis] = if rng.random_bool(0.5) { h[axis] } else { -h[axis] };
                v3(center) + p
            }
            Shape::Cylinder { center, radius, half_height } => {
                let side = 2.0 * std::f64::consts::PI * radius * 2.0 * half_height;
                let caps = 2.0 * std::f64::consts::PI * radius * radius;
                let a = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                let p = if rng.random_range(0.0..side + caps) < side {
                    Vector3::new(radius * a.cos(), radius * a.sin(), rng.random_range(-half_height..*half_height))
                } else {
                    let r = radius * rng.random_range(0.0f64..1.0).sqrt();
                    let z = if rng.random_bool(0.5) { *half_height } else { -half_height };
                    Vector3::new(r * a.cos(), r * a.sin(), z)
                };
                v3(center) + p
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sphere_sdf_values() {
        let s = Shape::Sphere { center: [0.0; 3], radius: 1.0 };
        assert_eq!(s.sdf(&Vector3::zeros()), -1.0);
        assert_eq!(s.sdf(&Vector3::new(2.0, 0.0, 0.0)), 1.0);
    }

    #[test]
    fn box_sdf_values() {
        let b = Shape::Box { center: [1.0, 0.0, 0.0], half_extents: [0.5, 0.5, 0.5] };
        assert!((b.sdf(&Vector3::new(1.0, 0.0, 0.0)) + 0.5).abs() < 1e-15);
        assert!((b.sdf(&Vector3::new(2.0, 0.0, 0.0)) - 0.5).abs() < 1e-15);
        assert!((b.sdf(&Vector3::new(2.5, 1.5, 0.0)) - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn cylinder_sdf_values() {
        let c = Shape::Cylinder { center: [0.0; 3], radius: 0.5, half_height: 1.0 };
        assert!((c.sdf(&Vector3::zeros()) + 0.5).abs() < 1e-15);
        assert!((c.sdf(&Vector3::new(0.0, 0.0, 1.5)) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn surface_samples_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for s in [
            Shape::Sphere { center: [0.1, 0.2, 0.3], radius: 0.4 },
            Shape::Box { center: [0.0; 3], half_extents: [0.3, 0.2, 0.1] },
            Shape::Cylinder { center: [0.0; 3], radius: 0.2, half_height: 0.3 },
        ] {
            for p in s.sample_surface(200, 0.0, &mut rng) {
                assert!(s.sdf(&p).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sphere_normal_is_radial() {
        let s = Shape::Sphere { center: [0.0; 3], radius: 1.0 };
        let n = s.normal(&Vector3::new(0.3, 0.0, 0.4));
        assert!((n - Vector3::new(0.6, 0.0, 0.8)).norm() < 1e-8);
    }

    fn fd_normal_jacobian(s: &Shape, p: &Vector3<f64>) -> Matrix3<f64> {
        let h = 1e-6;
        Matrix3::from_fn(|i, j| {
            let mut e = Vector3::zeros();
            e[j] = h;
            (s.normal(&(p + e))[i] - s.normal(&(p - e))[i]) / (2.0 * h)
        })
    }

    fn fd_gradient(s: &Shape, p: &Vector3<f64>) -> Vector3<f64> {
        let h = 1e-7;
        Vector3::from_fn(|i, _| {
            let mut e = Vector3::zeros();
            e[i] = h;
            (s.sdf(&(p + e)) - s.sdf(&(p - e))) / (2.0 * h)
        })
    }

    #[test]
    fn analytic_normals_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shapes = [
            Shape::Sphere { center: [0.1, -0.2, 0.5], radius: 0.3 },
            Shape::Box { center: [0.0, 0.1, 0.4], half_extents: [0.3, 0.2, 0.1] },
            Shape::Cylinder { center: [0.0, 0.0, 0.5], radius: 0.2, half_height: 0.3 },
        ];
        for s in &shapes {
            let mut checked = 0;
            while checked < 300 {
                let p = Vector3::new(rng.random_range(-0.7..0.7), rng.random_range(-0.7..0.7), rng.random_range(-0.2..1.2));
                // stay clear of the kinks where the normal is discontinuous
                let h = 1e-4;
                let n0 = s.normal(&p);
                let smooth = (0..3).all(|k| {
                    let mut e = Vector3::zeros();
                    e[k] = h;
                    (s.normal(&(p + e)) - n0).norm() < 1e-2 && (s.normal(&(p - e)) - n0).norm() < 1e-2
                });
                if !smooth {
                    continue;
                }
                checked += 1;
                assert!((n0.norm() - 1.0).abs() < 1e-12);
                assert!((s.sdf_gradient(&p) - fd_gradient(s, &p)).norm() < 1e-6, "{s:?} at {p}");
                let err = (s.normal_jacobian(&p) - fd_normal_jacobian(s, &p)).abs().max();
                assert!(err < 1e-5, "{s:?} at {p}: {err}");
            }
        }
    }
}
