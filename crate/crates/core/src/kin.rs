//! Forward kinematics for revolute serial chains.
//!
//! Frame `i` of a chain is the frame after joint `i` (frame 0 is the base).
//! The end effector is the last frame composed with the tool offset.

use crate::diff::{Mat, Tape, Var};
use crate::lie::{hat, Pose, Rotation};
use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KinError {
    #[error("joint axis {0} is not unit norm")]
    AxisNotUnit(usize),
    #[error("chain must have at least one joint")]
    NoJoints,
    #[error("expected {expected} joint values, got {got}")]
    WrongDof { expected: usize, got: usize },
    #[error("joint limits: lower must be below upper at index {0}")]
    BadLimits(usize),
    #[error("collision sphere {0}: {1}")]
    BadSphere(usize, &'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub axis: Vector3<f64>,
    pub origin: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub base: Pose,
    pub joints: Vec<Joint>,
    pub tool: Pose,
}

/// Poses of every frame of one chain.
#[derive(Debug, Clone)]
pub struct ChainFk {
    /// `frames[0]` is the base, `frames[i]` the frame after joint `i`.
    pub frames: Vec<Pose>,
    pub ee: Pose,
}

impl ChainSpec {
    pub fn new(base: Pose, joints: Vec<Joint>, tool: Pose) -> Result<Self, KinError> {
        let c = ChainSpec { base, joints, tool };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), KinError> {
        if self.joints.is_empty() {
            return Err(KinError::NoJoints);
        }
        for (i, j) in self.joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-9 {
                return Err(KinError::AxisNotUnit(i));
            }
        }
        Ok(())
    }

    pub fn dof(&self) -> usize {
        self.joints.len()
    }

    /// Planar chain in the base xy-plane with z axes and links along x.
    pub fn planar(base: Pose, lengths: &[f64]) -> Self {
        let mut joints = Vec::with_capacity(lengths.len());
        for i in 0..lengths.len() {
            let off = if i == 0 { 0.0 } else { lengths[i - 1] };
            joints.push(Joint {
                axis: Vector3::z(),
                origin: Pose::from_translation(Vector3::new(off, 0.0, 0.0)),
            });
        }
        let tool = Pose::from_translation(Vector3::new(*lengths.last().unwrap_or(&0.0), 0.0, 0.0));
        ChainSpec { base, joints, tool }
    }

    pub fn fk(&self, q: &[f64]) -> ChainFk {
        assert_eq!(q.len(), self.dof(), "fk: wrong joint count");
        let mut frames = Vec::with_capacity(q.len() + 1);
        let mut t = self.base;
        frames.push(t);
        for (j, &qi) in self.joints.iter().zip(q) {
            t = t * j.origin * Pose::new(Rotation::from_axis_angle(&j.axis, qi), Vector3::zeros());
            frames.push(t);
        }
        let ee = t * self.tool;
        ChainFk { frames, ee }
    }

    /// Geometric Jacobian of the end effector, angular rows over linear rows, world frame.
    pub fn jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let fk = self.fk(q);
        self.point_jacobian_full(&fk, self.dof(), &fk.ee.translation)
    }

    /// 6×d Jacobian of a point rigidly attached to frame `link`; columns past `link` are zero.
    fn point_jacobian_full(&self, fk: &ChainFk, link: usize, p: &Vector3<f64>) -> DMatrix<f64> {
        let d = self.dof();
        let mut j = DMatrix::zeros(6, d);
        for i in 0..link.min(d) {
            let frame = fk.frames[i + 1];
            let z = frame.rotation * self.joints[i].axis;
            let lin = z.cross(&(p - frame.translation));
            for r in 0..3 {
                j[(r, i)] = z[r];
                j[(r + 3, i)] = lin[r];
            }
        }
        j
    }

    /// Jacobian mapping joint rates to the right-perturbation twist of the end effector.
    pub fn body_jacobian(&self, q: &[f64]) -> DMatrix<f64> {
        let fk = self.fk(q);
        let j = self.point_jacobian_full(&fk, self.dof(), &fk.ee.translation);
        let rt = fk.ee.rotation.matrix().transpose();
        let mut b = DMatrix::zeros(6, self.dof());
        for c in 0..self.dof() {
            let w = rt * Vector3::new(j[(0, c)], j[(1, c)], j[(2, c)]);
            let v = rt * Vector3::new(j[(3, c)], j[(4, c)], j[(5, c)]);
            for r in 0..3 {
                b[(r, c)] = w[r];
                b[(r + 3, c)] = v[r];
            }
        }
        b
    }

    /// FK recorded on a tape. `q` is a 1×d row; returns (rotation 3×3, translation 3×1)
    /// for every frame followed by the end effector.
    pub fn fk_tape(&self, tape: &mut Tape, q: Var) -> Vec<(Var, Var)> {
        assert_eq!((q.rows, q.cols), (1, self.dof()), "fk_tape: q must be 1×d");
        let mut out = Vec::with_capacity(self.dof() + 2);
        let mut r = tape.constant(mat3(self.base.rotation.matrix()));
        let mut t = tape.constant(vec3(&self.base.translation));
        out.push((r, t));
        let eye = tape.constant(mat3(&Matrix3::identity()));
        for (i, j) in self.joints.iter().enumerate() {
            let ro = tape.constant(mat3(j.origin.rotation.matrix()));
            let to = tape.constant(vec3(&j.origin.translation));
            let dt = tape.matmul(r, to);
            t = tape.add(t, dt);
            r = tape.matmul(r, ro);
            let qi = tape.slice_cols(q, i, 1);
            let s = tape.sin(qi);
            let c = tape.cos(qi);
            let omc = tape.scale(c, -1.0);
            let omc = tape.add_scalar(omc, 1.0);
            let k = hat(&j.axis);
            let kc = tape.constant(mat3(&k));
            let k2c = tape.constant(mat3(&(k * k)));
            let s3 = tape.broadcast_rows(s, 3);
            let o3 = tape.broadcast_rows(omc, 3);
            let sk = tape.mul_col(kc, s3);
            let ok = tape.mul_col(k2c, o3);
            let rj = tape.add(eye, sk);
            let rj = tape.add(rj, ok);
            r = tape.matmul(r, rj);
            out.push((r, t));
        }
        let rt = tape.constant(mat3(self.tool.rotation.matrix()));
        let tt = tape.constant(vec3(&self.tool.translation));
        let dt = tape.matmul(r, tt);
        let te = tape.add(t, dt);
        let re = tape.matmul(r, rt);
        out.push((re, te));
        out
    }
}

fn mat3(m: &Matrix3<f64>) -> Mat {
    Mat::from_vec(3, 3, (0..9).map(|i| m[(i / 3, i % 3)]).collect())
}

fn vec3(v: &Vector3<f64>) -> Mat {
    Mat::from_vec(3, 1, vec![v.x, v.y, v.z])
}

/// Per-joint bounds with a safety margin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointLimits {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub epsilon: f64,
}

impl JointLimits {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, epsilon: f64) -> Result<Self, KinError> {
        let l = JointLimits { lower, upper, epsilon };
        l.validate()?;
        Ok(l)
    }

    pub fn validate(&self) -> Result<(), KinError> {
        if self.lower.len() != self.upper.len() {
            return Err(KinError::WrongDof { expected: self.lower.len(), got: self.upper.len() });
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if l >= u {
                return Err(KinError::BadLimits(i));
            }
        }
        Ok(())
    }

    pub fn contains(&self, q: &[f64]) -> bool {
        q.iter().zip(self.lower.iter().zip(&self.upper)).all(|(x, (l, u))| x >= l && x <= u)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionSphere {
    pub arm: usize,
    /// Frame index within the arm: 0 is the base, `i` the frame after joint `i`.
    pub link: usize,
    pub offset: Vector3<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CollisionSphereSet {
    pub spheres: Vec<CollisionSphere>,
}

impl CollisionSphereSet {
    pub fn validate(&self, robot: &Robot) -> Result<(), KinError> {
        for (i, s) in self.spheres.iter().enumerate() {
            if !(s.radius > 0.0) {
                return Err(KinError::BadSphere(i, "radius must be positive"));
            }
            if s.arm >= robot.arms.len() {
                return Err(KinError::BadSphere(i, "arm index out of range"));
            }
            if s.link > robot.arms[s.arm].dof() {
                return Err(KinError::BadSphere(i, "link index out of range"));
            }
        }
        Ok(())
    }

    /// Evenly spaced spheres along each link segment of every arm.
    pub fn along_links(robot: &Robot, per_link: usize, radius: f64) -> Self {
        let mut spheres = Vec::new();
        for (a, arm) in robot.arms.iter().enumerate() {
            let d = arm.dof();
            for link in 1..=d {
                let seg = if link < d { arm.joints[link].origin.translation } else { arm.tool.translation };
                for k in 0..per_link {
                    let f = (k as f64 + 0.5) / per_link as f64;
                    spheres.push(CollisionSphere { arm: a, link, offset: seg * f, radius });
                }
            }
        }
        CollisionSphereSet { spheres }
    }
}

/// A set of independent arms sharing one joint vector `[arm0 joints, arm1 joints, ...]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Robot {
    pub arms: Vec<ChainSpec>,
}

/// World-frame data for every arm at one configuration.
#[derive(Debug, Clone)]
pub struct RobotFk {
    pub arms: Vec<ChainFk>,
}

impl RobotFk {
    pub fn ee_poses(&self) -> Vec<Pose> {
        self.arms.iter().map(|a| a.ee).collect()
    }
}

impl Robot {
    pub fn new(arms: Vec<ChainSpec>) -> Result<Self, KinError> {
        for a in &arms {
            a.validate()?;
        }
        Ok(Robot { arms })
    }

    pub fn n_arms(&self) -> usize {
        self.arms.len()
    }

    pub fn dof(&self) -> usize {
        self.arms.iter().map(|a| a.dof()).sum()
    }

    /// Offset of arm `a` within the stacked joint vector.
    pub fn offset(&self, a: usize) -> usize {
        self.arms[..a].iter().map(|c| c.dof()).sum()
    }

    pub fn fk(&self, q: &[f64]) -> RobotFk {
        assert_eq!(q.len(), self.dof(), "robot fk: wrong joint count");
        let mut off = 0;
        let arms = self
            .arms
            .iter()
            .map(|a| {
                let f = a.fk(&q[off..off + a.dof()]);
                off += a.dof();
                f
            })
            .collect();
        RobotFk { arms }
    }

    pub fn ee_poses(&self, q: &[f64]) -> Vec<Pose> {
        self.fk(q).ee_poses()
    }

    /// Body Jacobian of end effector `a` as a 6×dof(robot) block (zero outside arm `a`).
    pub fn body_jacobian(&self, q: &[f64], a: usize) -> DMatrix<f64> {
        let off = self.offset(a);
        let d = self.arms[a].dof();
        let jb = self.arms[a].body_jacobian(&q[off..off + d]);
        let mut j = DMatrix::zeros(6, self.dof());
        j.view_mut((0, off), (6, d)).copy_from(&jb);
        j
    }

    pub fn sphere_positions(&self, fk: &RobotFk, spheres: &CollisionSphereSet) -> Vec<Vector3<f64>> {
        spheres
            .spheres
            .iter()
            .map(|s| fk.arms[s.arm].frames[s.link].transform_point(&s.offset))
            .collect()
    }

    /// 3×dof Jacobian of every sphere centre.
    pub fn sphere_jacobians(&self, fk: &RobotFk, spheres: &CollisionSphereSet) -> Vec<DMatrix<f64>> {
        let n = self.dof();
        spheres
            .spheres
            .iter()
            .map(|s| {
                let arm = &self.arms[s.arm];
                let f = &fk.arms[s.arm];
                let p = f.frames[s.link].transform_point(&s.offset);
                let off = self.offset(s.arm);
                let mut j = DMatrix::zeros(3, n);
                for i in 0..s.link {
                    let frame = f.frames[i + 1];
                    let z = frame.rotation * arm.joints[i].axis;
                    let lin = z.cross(&(p - frame.translation));
                    for r in 0..3 {
                        j[(r, off + i)] = lin[r];
                    }
                }
                j
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::{expmap, logmap, Twist};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn spatial_chain() -> ChainSpec {
        let joints = vec![
            Joint { axis: Vector3::z(), origin: Pose::from_translation(Vector3::new(0.0, 0.0, 0.3)) },
            Joint { axis: Vector3::y(), origin: Pose::from_translation(Vector3::new(0.1, 0.0, 0.2)) },
            Joint {
                axis: Vector3::new(1.0, 1.0, 0.0).normalize(),
                origin: expmap(&Twist::new(Vector3::new(0.2, -0.1, 0.3), Vector3::new(0.0, 0.3, 0.1))),
            },
            Joint { axis: Vector3::x(), origin: Pose::from_translation(Vector3::new(0.25, 0.0, 0.0)) },
        ];
        let base = expmap(&Twist::new(Vector3::new(0.0, 0.0, 0.4), Vector3::new(0.5, -0.2, 0.0)));
        ChainSpec::new(base, joints, Pose::from_translation(Vector3::new(0.1, 0.05, 0.0))).unwrap()
    }

    fn random_q(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.random_range(-3.0..3.0)).collect()
    }

    #[test]
    fn planar_two_link_examples() {
        let c = ChainSpec::planar(Pose::identity(), &[1.0, 1.0]);
        assert_relative_eq!(c.fk(&[0.0, 0.0]).ee.translation, Vector3::new(2.0, 0.0, 0.0), epsilon = 1e-15);
        assert_relative_eq!(c.fk(&[FRAC_PI_2, 0.0]).ee.translation, Vector3::new(0.0, 2.0, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn one_link_jacobian_is_lever_arm() {
        let c = ChainSpec::planar(Pose::identity(), &[0.7]);
        let j = c.jacobian(&[0.0]);
        assert_relative_eq!(j.column(0).into_owned(), nalgebra::DVector::from_vec(vec![0.0, 0.0, 1.0, 0.0, 0.7, 0.0]), epsilon = 1e-15);
    }

    #[test]
    fn joint_at_tool_point_has_no_linear_effect() {
        let joints = vec![
            Joint { axis: Vector3::z(), origin: Pose::identity() },
            Joint { axis: Vector3::x(), origin: Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)) },
        ];
        let c = ChainSpec::new(Pose::identity(), joints, Pose::identity()).unwrap();
        let j = c.jacobian(&[0.3, 0.0]);
        for r in 3..6 {
            assert_eq!(j[(r, 1)], 0.0);
        }
    }

    #[test]
    fn geometric_jacobian_matches_finite_differences() {
        let c = spatial_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let h = 1e-6;
        for _ in 0..100 {
            let q = random_q(&mut rng, c.dof());
            let j = c.jacobian(&q);
            let p0 = c.fk(&q).ee;
            for i in 0..c.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let pp = c.fk(&qp).ee;
                let pm = c.fk(&qm).ee;
                let lin = (pp.translation - pm.translation) / (2.0 * h);
                // world-frame angular rate: log(R(q+h) R(q-h)^T) / 2h
                let dr = Pose::new(pp.rotation * pm.rotation.transpose(), Vector3::zeros());
                let ang = logmap(&dr).unwrap().omega / (2.0 * h);
                for r in 0..3 {
                    assert!((j[(r, i)] - ang[r]).abs() < 1e-5);
                    assert!((j[(r + 3, i)] - lin[r]).abs() < 1e-5);
                }
                let _ = p0;
            }
        }
    }

    #[test]
    fn body_jacobian_matches_right_perturbation() {
        let c = spatial_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        for _ in 0..50 {
            let q = random_q(&mut rng, c.dof());
            let jb = c.body_jacobian(&q);
            let p0 = c.fk(&q).ee;
            for i in 0..c.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let xp = logmap(&(p0.inverse() * c.fk(&qp).ee)).unwrap().to_vector6();
                let xm = logmap(&(p0.inverse() * c.fk(&qm).ee)).unwrap().to_vector6();
                let col = (xp - xm) / (2.0 * h);
                for r in 0..6 {
                    assert!((jb[(r, i)] - col[r]).abs() < 1e-5);
                }
            }
        }
    }

    fn dual() -> Robot {
        let a = spatial_chain();
        let mut b = spatial_chain();
        b.base = Pose::from_translation(Vector3::new(-1.0, 0.0, 0.0));
        Robot::new(vec![a, b]).unwrap()
    }

    #[test]
    fn arms_are_independent() {
        let r = dual();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_q(&mut rng, r.dof());
        let fk = r.fk(&q);
        let d = r.arms[0].dof();
        assert_eq!(fk.arms[0].ee, r.arms[0].fk(&q[..d]).ee);
        assert_eq!(fk.arms[1].ee, r.arms[1].fk(&q[d..]).ee);
    }

    #[test]
    fn sphere_positions_at_zero_offset_are_frame_origins() {
        let r = dual();
        let spheres = CollisionSphereSet {
            spheres: (0..=4).map(|l| CollisionSphere { arm: 1, link: l, offset: Vector3::zeros(), radius: 0.1 }).collect(),
        };
        let q = vec![0.3; r.dof()];
        let fk = r.fk(&q);
        let p = r.sphere_positions(&fk, &spheres);
        for (l, pl) in p.iter().enumerate() {
            assert_eq!(*pl, fk.arms[1].frames[l].translation);
        }
        let other = r.fk(&vec![-1.0; r.dof()]);
        assert_eq!(r.sphere_positions(&other, &spheres)[0], p[0]);
    }

    #[test]
    fn sphere_jacobians_match_finite_differences() {
        let r = dual();
        let spheres = CollisionSphereSet::along_links(&r, 2, 0.05);
        spheres.validate(&r).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = 1e-6;
        for _ in 0..20 {
            let q = random_q(&mut rng, r.dof());
            let fk = r.fk(&q);
            let js = r.sphere_jacobians(&fk, &spheres);
            for i in 0..r.dof() {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let pp = r.sphere_positions(&r.fk(&qp), &spheres);
                let pm = r.sphere_positions(&r.fk(&qm), &spheres);
                for (s, j) in js.iter().enumerate() {
                    let col = (pp[s] - pm[s]) / (2.0 * h);
                    for k in 0..3 {
                        assert!((j[(k, i)] - col[k]).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn tape_fk_matches_and_products_agree_with_jacobian() {
        let c = spatial_chain();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let q = random_q(&mut rng, c.dof());
            let mut t = Tape::new();
            let qv = t.leaf(Mat::from_vec(1, c.dof(), q.clone()));
            let frames = c.fk_tape(&mut t, qv);
            let (re, te) = *frames.last().unwrap();
            let fk = c.fk(&q);
            for i in 0..3 {
                assert!((t.value(te).data[i] - fk.ee.translation[i]).abs() < 1e-12);
                for k in 0..3 {
                    assert!((t.value(re).get(i, k) - fk.ee.rotation.matrix()[(i, k)]).abs() < 1e-12);
                }
            }
            let wp: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wr: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let wpc = t.constant(Mat::from_vec(3, 1, wp.clone()));
            let wrc = t.constant(Mat::from_vec(3, 3, wr.clone()));
            let a = t.mul(te, wpc);
            let b = t.mul(re, wrc);
            let sa = t.sum_all(a);
            let sb = t.sum_all(b);
            let s = t.add(sa, sb);
            let g = t.backward(s).unwrap().get(qv);
            let v: Vec<f64> = (0..c.dof()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let j = c.jacobian(&q);
            let jv = &j * nalgebra::DVector::from_vec(v.clone());
            let w = Vector3::new(jv[0], jv[1], jv[2]);
            let pdot = Vector3::new(jv[3], jv[4], jv[5]);
            let rdot = hat(&w) * fk.ee.rotation.matrix();
            let expect: f64 = (0..3).map(|i| wp[i] * pdot[i]).sum::<f64>()
                + (0..9).map(|i| wr[i] * rdot[(i / 3, i % 3)]).sum::<f64>();
            let got: f64 = g.data.iter().zip(&v).map(|(a, b)| a * b).sum();
            assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
        }
    }
}
