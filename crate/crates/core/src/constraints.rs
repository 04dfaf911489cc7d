//! Typed constraints, their feature maps, analytic costs and slack.
//!
//! Pose-level constraints expose a feature vector of the end-effector poses
//! together with its Jacobian with respect to the stacked body-frame twists
//! `[δ_0, δ_1, ...]` of every end effector. Joint-level constraints (obstacle,
//! joint limits, self collision) are costs on `q` with analytic gradients.

use crate::kin::{CollisionSphereSet, JointLimits, Robot};
use crate::lie::{
    hat, logmap_clamped, se3_right_jacobian_inv, so3_log_clamped, so3_right_jacobian_inv, LieError, Pose, Rotation,
};
use crate::shapes::Shape;
use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ConstraintError {
    #[error("constraint expects {expected} end-effector poses, got {got}")]
    WrongArity { expected: usize, got: usize },
    #[error("constraint `{0}` is defined on joint angles, not poses")]
    NotPoseLevel(&'static str),
    #[error("shape index {0} is not defined in the scene")]
    MissingShape(usize),
    #[error("end-effector index {0} out of range")]
    BadEndEffector(usize),
    #[error("constraint set must contain a fundamental pose-level constraint at index 0")]
    MissingFundamental,
    #[error("constraint set has {got} entries, more than the maximum {max}")]
    TooMany { got: usize, max: usize },
    #[error("invalid constraint parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Pose given as a unit quaternion `wxyz` and a translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSpec {
    pub quat: [f64; 4],
    pub trans: [f64; 3],
}

impl PoseSpec {
    pub fn to_pose(&self) -> Pose {
        let a = self.to_array7();
        Pose::from_array7(&a)
    }

    pub fn from_pose(p: &Pose) -> Self {
        let a = p.to_array7();
        PoseSpec { quat: [a[0], a[1], a[2], a[3]], trans: [a[4], a[5], a[6]] }
    }

    fn to_array7(self) -> [f64; 7] {
        let q = self.quat;
        let t = self.trans;
        [q[0], q[1], q[2], q[3], t[0], t[1], t[2]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Equality,
    Inequality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Constraint {
    /// `H_a⁻¹ H_b = target`.
    RelativePose {
        target: PoseSpec,
        #[serde(default)]
        a: usize,
        #[serde(default = "one")]
        b: usize,
    },
    AbsolutePose { ee: usize, goal: PoseSpec },
    /// Midpoint of the first two end effectors equals `target`.
    MidpointEq { target: [f64; 3] },
    /// Midpoint inside the axis-aligned box `[c1, c2]`.
    MidpointBox { c1: [f64; 3], c2: [f64; 3] },
    /// Midpoint inside the region bounded by a scene shape (`sdf <= 0`).
    MidpointOnSurface { shape: usize },
    /// `(R · body_axis) · world_axis = 1`.
    OrientationAxis { ee: usize, body_axis: [f64; 3], world_axis: [f64; 3] },
    OrientationFull { ee: usize, goal_quat: [f64; 4] },
    ObstacleSphere { center: [f64; 3], radius: f64 },
    JointLimit { lower: Vec<f64>, upper: Vec<f64>, epsilon: f64 },
    SelfCollision,
    /// `body_axis` of end effector `ee` anti-parallel to the outward surface
    /// normal at the midpoint.
    SurfaceNormalOrientation { shape: usize, ee: usize, body_axis: [f64; 3] },
}

fn one() -> usize {
    1
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Kinematic and geometric context for evaluating constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub robot: Robot,
    #[serde(default)]
    pub shapes: Vec<Shape>,
    #[serde(default)]
    pub spheres: CollisionSphereSet,
}

impl Scene {
    pub fn shape(&self, i: usize) -> Result<&Shape, ConstraintError> {
        self.shapes.get(i).ok_or(ConstraintError::MissingShape(i))
    }
}

/// Stable ordering of constraint kinds, used for network keys and embeddings.
pub const KIND_TAGS: [&str; 11] = [
    "relative_pose",
    "absolute_pose",
    "midpoint_eq",
    "midpoint_box",
    "midpoint_on_surface",
    "orientation_axis",
    "orientation_full",
    "obstacle_sphere",
    "joint_limit",
    "self_collision",
    "surface_normal_orientation",
];

impl Constraint {
    pub fn tag(&self) -> &'static str {
        KIND_TAGS[self.kind_index()]
    }

    pub fn kind_index(&self) -> usize {
        match self {
            Constraint::RelativePose { .. } => 0,
            Constraint::AbsolutePose { .. } => 1,
            Constraint::MidpointEq { .. } => 2,
            Constraint::MidpointBox { .. } => 3,
            Constraint::MidpointOnSurface { .. } => 4,
            Constraint::OrientationAxis { .. } => 5,
            Constraint::OrientationFull { .. } => 6,
            Constraint::ObstacleSphere { .. } => 7,
            Constraint::JointLimit { .. } => 8,
            Constraint::SelfCollision => 9,
            Constraint::SurfaceNormalOrientation { .. } => 10,
        }
    }

    pub fn relation(&self) -> Relation {
        match self {
            Constraint::RelativePose { .. }
            | Constraint::AbsolutePose { .. }
            | Constraint::MidpointEq { .. }
            | Constraint::OrientationAxis { .. }
            | Constraint::OrientationFull { .. }
            | Constraint::SurfaceNormalOrientation { .. } => Relation::Equality,
            _ => Relation::Inequality,
        }
    }

    pub fn is_pose_level(&self) -> bool {
        !matches!(self, Constraint::ObstacleSphere { .. } | Constraint::JointLimit { .. } | Constraint::SelfCollision)
    }

    /// Whether the feature depends on a point-cloud shape.
    pub fn uses_shape(&self) -> Option<usize> {
        match self {
            Constraint::MidpointOnSurface { shape } | Constraint::SurfaceNormalOrientation { shape, .. } => Some(*shape),
            _ => None,
        }
    }

    /// Length of the analytic feature vector (0 for joint-level kinds).
    pub fn feature_dim(&self) -> usize {
        match self {
            Constraint::RelativePose { .. } | Constraint::AbsolutePose { .. } => 6,
            Constraint::MidpointEq { .. } | Constraint::MidpointBox { .. } | Constraint::OrientationFull { .. } => 3,
            Constraint::MidpointOnSurface { .. } | Constraint::OrientationAxis { .. } | Constraint::SurfaceNormalOrientation { .. } => 1,
            _ => 0,
        }
    }

    /// Highest end-effector index referenced, plus one.
    pub fn min_arity(&self) -> usize {
        match self {
            Constraint::RelativePose { a, b, .. } => a.max(b) + 1,
            Constraint::AbsolutePose { ee, .. } | Constraint::OrientationAxis { ee, .. } | Constraint::OrientationFull { ee, .. } => ee + 1,
            Constraint::SurfaceNormalOrientation { ee, .. } => (*ee).max(1) + 1,
            Constraint::MidpointEq { .. } | Constraint::MidpointBox { .. } | Constraint::MidpointOnSurface { .. } => 2,
            _ => 0,
        }
    }

    pub fn validate(&self, scene: &Scene) -> Result<(), ConstraintError> {
        let n = scene.robot.n_arms();
        if self.min_arity() > n {
            return Err(ConstraintError::WrongArity { expected: self.min_arity(), got: n });
        }
        let finite = |xs: &[f64]| xs.iter().all(|x| x.is_finite());
        let bad = |m: &str| Err(ConstraintError::Invalid(m.to_string()));
        match self {
            Constraint::RelativePose { target, a, b } => {
                if a == b {
                    return bad("relative pose needs two distinct end effectors");
                }
                check_quat(&target.quat)?;
                if !finite(&target.trans) {
                    return bad("non-finite translation");
                }
            }
            Constraint::AbsolutePose { goal, .. } => check_quat(&goal.quat)?,
            Constraint::OrientationFull { goal_quat, .. } => check_quat(goal_quat)?,
            Constraint::MidpointEq { target } => {
                if !finite(target) {
                    return bad("non-finite midpoint");
                }
            }
            Constraint::MidpointBox { c1, c2 } => {
                if (0..3).any(|i| !(c1[i] <= c2[i])) {
                    return bad("box corners must satisfy c1 <= c2");
                }
            }
            Constraint::OrientationAxis { body_axis, world_axis, .. } => {
                check_unit(body_axis)?;
                check_unit(world_axis)?;
            }
            Constraint::SurfaceNormalOrientation { shape, body_axis, .. } => {
                check_unit(body_axis)?;
                scene.shape(*shape)?;
            }
            Constraint::MidpointOnSurface { shape } => {
                scene.shape(*shape)?;
            }
            Constraint::ObstacleSphere { center, radius } => {
                if !finite(center) || !(*radius > 0.0) {
                    return bad("obstacle needs a finite centre and positive radius");
                }
            }
            Constraint::JointLimit { lower, upper, epsilon } => {
                if lower.len() != scene.robot.dof() || upper.len() != scene.robot.dof() {
                    return bad("joint limits must cover every joint");
                }
                JointLimits::new(lower.clone(), upper.clone(), *epsilon).map_err(|e| ConstraintError::Invalid(e.to_string()))?;
            }
            Constraint::SelfCollision => {}
        }
        Ok(())
    }
}

fn check_quat(q: &[f64; 4]) -> Result<(), ConstraintError> {
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > 1e-6 {
        return Err(ConstraintError::Invalid(format!("quaternion norm {n} is not 1")));
    }
    Ok(())
}

fn check_unit(a: &[f64; 3]) -> Result<(), ConstraintError> {
    let n = v3(a).norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(ConstraintError::Invalid(format!("axis norm {n} is not 1")));
    }
    Ok(())
}

/// Ordered constraints; index 0 is the fundamental constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConstraintSet {
    pub constraints: Vec<Constraint>,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<Constraint>) -> Self {
        ConstraintSet { constraints }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn validate(&self, scene: &Scene, n_max: usize) -> Result<(), ConstraintError> {
        match self.constraints.first() {
            Some(c) if c.is_pose_level() => {}
            _ => return Err(ConstraintError::MissingFundamental),
        }
        let learned = self.pose_level_indices().len();
        if learned > n_max {
            return Err(ConstraintError::TooMany { got: learned, max: n_max });
        }
        for c in &self.constraints {
            c.validate(scene)?;
        }
        Ok(())
    }

    /// Indices of constraints handled by learned energies.
    pub fn pose_level_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.constraints[i].is_pose_level()).collect()
    }

    pub fn joint_level_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.constraints[i].is_pose_level()).collect()
    }
}

/// Feature value and Jacobian with respect to stacked end-effector twists.
#[derive(Debug, Clone)]
pub struct FeatureJet {
    pub value: Vec<f64>,
    /// `value.len()` × `6 n`.
    pub jac: DMatrix<f64>,
}

fn midpoint(poses: &[Pose]) -> Vector3<f64> {
    (poses[0].translation + poses[1].translation) * 0.5
}

/// d(midpoint)/d(twists): 3 × 6n.
fn midpoint_jac(poses: &[Pose]) -> DMatrix<f64> {
    let n = poses.len();
    let mut j = DMatrix::zeros(3, 6 * n);
    for e in 0..2 {
        let r = poses[e].rotation.matrix() * 0.5;
        j.view_mut((0, 6 * e + 3), (3, 3)).copy_from(&r);
    }
    j
}

fn check_arity(c: &Constraint, poses: &[Pose]) -> Result<(), ConstraintError> {
    if poses.len() < c.min_arity() {
        return Err(ConstraintError::WrongArity { expected: c.min_arity(), got: poses.len() });
    }
    Ok(())
}

/// Feature value without derivatives.
pub fn feature(c: &Constraint, poses: &[Pose], scene: &Scene) -> Result<Vec<f64>, ConstraintError> {
    Ok(feature_jet(c, poses, scene, None)?.value)
}

/// Feature and its twist Jacobian. `normal_override` replaces the analytic
/// surface normal (used when the normal comes from a learned SDF); the
/// override is treated as locally constant.
pub fn feature_jet(
    c: &Constraint,
    poses: &[Pose],
    scene: &Scene,
    normal_override: Option<Vector3<f64>>,
) -> Result<FeatureJet, ConstraintError> {
    check_arity(c, poses)?;
    let n = poses.len();
    let six = 6 * n;
    match c {
        Constraint::RelativePose { target, a, b } => {
            let t = target.to_pose();
            let y = poses[*a].inverse() * poses[*b];
            let x = t.inverse() * y;
            let f = logmap_clamped(&x);
            let jinv = se3_right_jacobian_inv(&f);
            let mut jac = DMatrix::zeros(6, six);
            jac.view_mut((0, 6 * b), (6, 6)).copy_from(&jinv);
            let ja = -(jinv * y.inverse().adjoint());
            jac.view_mut((0, 6 * a), (6, 6)).copy_from(&ja);
            Ok(FeatureJet { value: f.to_vector6().iter().copied().collect(), jac })
        }
        Constraint::AbsolutePose { ee, goal } => {
            let x = goal.to_pose().inverse() * poses[*ee];
            let f = logmap_clamped(&x);
            let mut jac = DMatrix::zeros(6, six);
            jac.view_mut((0, 6 * ee), (6, 6)).copy_from(&se3_right_jacobian_inv(&f));
            Ok(FeatureJet { value: f.to_vector6().iter().copied().collect(), jac })
        }
        Constraint::MidpointEq { target } => {
            let f = midpoint(poses) - v3(target);
            Ok(FeatureJet { value: f.iter().copied().collect(), jac: midpoint_jac(poses) })
        }
        Constraint::MidpointBox { c1, c2 } => {
            let m = midpoint(poses);
            let mj = midpoint_jac(poses);
            let mut value = vec![0.0; 3];
            let mut jac = DMatrix::zeros(3, six);
            for k in 0..3 {
                let lo = c1[k] - m[k];
                let hi = m[k] - c2[k];
                if lo > 0.0 && lo >= hi {
                    value[k] = lo;
                    jac.row_mut(k).copy_from(&(-mj.row(k)));
                } else if hi > 0.0 {
                    value[k] = hi;
                    jac.row_mut(k).copy_from(&mj.row(k));
                }
            }
            Ok(FeatureJet { value, jac })
        }
        Constraint::MidpointOnSurface { shape } => {
            let s = scene.shape(*shape)?;
            let m = midpoint(poses);
            let g = s.sdf_gradient(&m);
            let jac = DMatrix::from_row_slice(1, 3, g.as_slice()) * midpoint_jac(poses);
            Ok(FeatureJet { value: vec![s.sdf(&m)], jac })
        }
        Constraint::OrientationAxis { ee, body_axis, world_axis } => {
            Ok(axis_jet(&poses[*ee].rotation, &v3(body_axis), &v3(world_axis), *ee, six, -1.0))
        }
        Constraint::OrientationFull { ee, goal_quat } => {
            let g = Rotation::from_quaternion_wxyz(*goal_quat);
            let x = g.transpose() * poses[*ee].rotation;
            let f = so3_log_clamped(&x);
            let mut jac = DMatrix::zeros(3, six);
            jac.view_mut((0, 6 * ee), (3, 3)).copy_from(&so3_right_jacobian_inv(&f));
            Ok(FeatureJet { value: f.iter().copied().collect(), jac })
        }
        Constraint::SurfaceNormalOrientation { shape, ee, body_axis } => {
            let s = scene.shape(*shape)?;
            let m = midpoint(poses);
            let a = v3(body_axis);
            let r = poses[*ee].rotation;
            match normal_override {
                Some(nrm) => Ok(axis_jet(&r, &a, &nrm, *ee, six, 1.0)),
                None => {
                    let nrm = s.normal(&m);
                    let mut jet = axis_jet(&r, &a, &nrm, *ee, six, 1.0);
                    // d/dm of (R a)·n(m)
                    let ra = r * a;
                    let dn = s.normal_jacobian(&m);
                    let row = DMatrix::from_row_slice(1, 3, (ra.transpose() * dn).as_slice()) * midpoint_jac(poses);
                    jet.jac += row;
                    Ok(jet)
                }
            }
        }
        Constraint::ObstacleSphere { .. } | Constraint::JointLimit { .. } | Constraint::SelfCollision => {
            Err(ConstraintError::NotPoseLevel(c.tag()))
        }
    }
}

/// Feature `(R a)·w + offset` with its rotation Jacobian.
fn axis_jet(r: &Rotation, a: &Vector3<f64>, w: &Vector3<f64>, ee: usize, six: usize, offset: f64) -> FeatureJet {
    let ra = *r * *a;
    let value = ra.dot(w) + offset;
    // d(R a)/dω = -R [a]x
    let g: Matrix3<f64> = -(r.matrix() * hat(a));
    let row = w.transpose() * g;
    let mut jac = DMatrix::zeros(1, six);
    for k in 0..3 {
        jac[(0, 6 * ee + k)] = row[k];
    }
    FeatureJet { value: vec![value], jac }
}

/// Translation squared distance plus rotation log-norm.
pub fn cost_se3(h1: &Pose, h2: &Pose) -> Result<f64, LieError> {
    let dt = (h1.translation - h2.translation).norm_squared();
    let dr = so3_log_clamped(&(h1.rotation.transpose() * h2.rotation)).norm();
    Ok(dt + dr)
}

/// Cost value with gradient in joint space.
#[derive(Debug, Clone)]
pub struct CostJet {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// `Σ [ε_i + r − ‖p_i − c‖]₊` over every collision sphere.
pub fn cost_obstacle(robot: &Robot, q: &[f64], spheres: &CollisionSphereSet, center: &Vector3<f64>, radius: f64) -> CostJet {
    let fk = robot.fk(q);
    let pos = robot.sphere_positions(&fk, spheres);
    let mut value = 0.0;
    let mut grad = vec![0.0; robot.dof()];
    let mut jacs = None;
    for (i, (s, p)) in spheres.spheres.iter().zip(&pos).enumerate() {
        let d = p - center;
        let dist = d.norm();
        let pen = s.radius + radius - dist;
        if pen > 0.0 {
            value += pen;
            if dist > 1e-12 {
                let js = jacs.get_or_insert_with(|| robot.sphere_jacobians(&fk, spheres));
                let u = d / dist;
                let g = js[i].transpose() * u;
                for k in 0..grad.len() {
                    grad[k] -= g[k];
                }
            }
        }
    }
    CostJet { value, grad }
}

/// Squared hinge outside the ε-shrunk joint box.
pub fn cost_joint_limits(q: &[f64], limits: &JointLimits) -> CostJet {
    let mut value = 0.0;
    let mut grad = vec![0.0; q.len()];
    for (k, x) in q.iter().enumerate() {
        let lo = limits.lower[k] + limits.epsilon - x;
        let hi = x - (limits.upper[k] - limits.epsilon);
        if lo > 0.0 {
            value += lo * lo;
            grad[k] -= 2.0 * lo;
        }
        if hi > 0.0 {
            value += hi * hi;
            grad[k] += 2.0 * hi;
        }
    }
    CostJet { value, grad }
}

fn colliding_pairs(spheres: &CollisionSphereSet) -> Vec<(usize, usize)> {
    let s = &spheres.spheres;
    let mut out = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            if (s[i].arm, s[i].link) != (s[j].arm, s[j].link) {
                out.push((i, j));
            }
        }
    }
    out
}

/// `Σ [ε_i + ε_j − ‖p_i − p_j‖]₊` over sphere pairs on distinct links.
pub fn cost_self_collision(robot: &Robot, q: &[f64], spheres: &CollisionSphereSet) -> CostJet {
    let fk = robot.fk(q);
    let pos = robot.sphere_positions(&fk, spheres);
    let mut value = 0.0;
    let mut grad = vec![0.0; robot.dof()];
    let mut jacs = None;
    for (i, j) in colliding_pairs(spheres) {
        let d = pos[i] - pos[j];
        let dist = d.norm();
        let pen = spheres.spheres[i].radius + spheres.spheres[j].radius - dist;
        if pen > 0.0 {
            value += pen;
            if dist > 1e-12 {
                let js = jacs.get_or_insert_with(|| robot.sphere_jacobians(&fk, spheres));
                let u = d / dist;
                let g = (&js[i] - &js[j]).transpose() * u;
                for k in 0..grad.len() {
                    grad[k] -= g[k];
                }
            }
        }
    }
    CostJet { value, grad }
}

/// Joint-level cost of constraint `c`, if it is one.
pub fn joint_cost(c: &Constraint, scene: &Scene, q: &[f64]) -> Option<CostJet> {
    match c {
        Constraint::ObstacleSphere { center, radius } => Some(cost_obstacle(&scene.robot, q, &scene.spheres, &v3(center), *radius)),
        Constraint::JointLimit { lower, upper, epsilon } => {
            let l = JointLimits { lower: lower.clone(), upper: upper.clone(), epsilon: *epsilon };
            Some(cost_joint_limits(q, &l))
        }
        Constraint::SelfCollision => Some(cost_self_collision(&scene.robot, q, &scene.spheres)),
        _ => None,
    }
}

/// Scalar slack of one pose-level feature.
pub fn feature_slack(c: &Constraint, value: &[f64]) -> f64 {
    match c {
        Constraint::MidpointOnSurface { .. } => value[0].max(0.0),
        _ => value.iter().map(|x| x * x).sum::<f64>().sqrt(),
    }
}

/// Per-constraint nonnegative violation at configuration `q`.
pub fn slack(cs: &ConstraintSet, scene: &Scene, q: &[f64]) -> Result<Vec<f64>, ConstraintError> {
    let poses = scene.robot.ee_poses(q);
    cs.constraints
        .iter()
        .map(|c| match joint_cost(c, scene, q) {
            Some(j) => Ok(j.value.max(0.0)),
            None => Ok(feature_slack(c, &feature(c, &poses, scene)?)),
        })
        .collect()
}

pub fn slack_norm(s: &[f64]) -> f64 {
    s.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Residual factorisation used by Gauss-Newton solvers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ResidualMode {
    /// One row per constraint: its scalar slack.
    #[default]
    Slack,
    /// Every feature component (hinged for inequalities) as its own row.
    Stacked,
}

/// Residual vector and its joint-space Jacobian.
pub fn residuals(cs: &ConstraintSet, scene: &Scene, q: &[f64], mode: ResidualMode) -> Result<(Vec<f64>, DMatrix<f64>), ConstraintError> {
    let robot = &scene.robot;
    let dof = robot.dof();
    let poses = robot.ee_poses(q);
    let mut body: Option<DMatrix<f64>> = None;
    let mut rows: Vec<(f64, Vec<f64>)> = Vec::new();
    for c in &cs.constraints {
        if let Some(j) = joint_cost(c, scene, q) {
            rows.push((j.value, j.grad));
            continue;
        }
        let jet = feature_jet(c, &poses, scene, None)?;
        let jb = body.get_or_insert_with(|| stacked_body_jacobian(robot, q));
        let jq = &jet.jac * &*jb;
        match mode {
            ResidualMode::Slack => {
                let s = feature_slack(c, &jet.value);
                let mut g = vec![0.0; dof];
                if s > 0.0 {
                    let w: Vec<f64> = match c {
                        Constraint::MidpointOnSurface { .. } => vec![1.0],
                        _ => jet.value.iter().map(|v| v / s).collect(),
                    };
                    for (r, wr) in w.iter().enumerate() {
                        for k in 0..dof {
                            g[k] += wr * jq[(r, k)];
                        }
                    }
                }
                rows.push((s, g));
            }
            ResidualMode::Stacked => {
                for (r, v) in jet.value.iter().enumerate() {
                    let hinge = matches!(c, Constraint::MidpointOnSurface { .. }) && *v <= 0.0;
                    if hinge {
                        rows.push((0.0, vec![0.0; dof]));
                    } else {
                        rows.push((*v, (0..dof).map(|k| jq[(r, k)]).collect()));
                    }
                }
            }
        }
    }
    let r: Vec<f64> = rows.iter().map(|x| x.0).collect();
    let mut j = DMatrix::zeros(rows.len(), dof);
    for (i, (_, g)) in rows.iter().enumerate() {
        for k in 0..dof {
            j[(i, k)] = g[k];
        }
    }
    Ok((r, j))
}

/// `6n × dof` map from joint rates to stacked end-effector body twists.
pub fn stacked_body_jacobian(robot: &Robot, q: &[f64]) -> DMatrix<f64> {
    let n = robot.n_arms();
    let mut j = DMatrix::zeros(6 * n, robot.dof());
    for a in 0..n {
        let off = robot.offset(a);
        let d = robot.arms[a].dof();
        let jb = robot.arms[a].body_jacobian(&q[off..off + d]);
        j.view_mut((6 * a, off), (6, d)).copy_from(&jb);
    }
    j
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kin::{ChainSpec, CollisionSphere, Joint};
    use crate::lie::{expmap, Twist};
    use nalgebra::Vector6;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn arm(x: f64) -> ChainSpec {
        let joints = vec![
            Joint { axis: Vector3::y(), origin: Pose::identity() },
            Joint { axis: Vector3::y(), origin: Pose::from_translation(Vector3::new(0.0, 0.0, 0.5)) },
            Joint { axis: Vector3::y(), origin: Pose::from_translation(Vector3::new(0.0, 0.0, 0.4)) },
        ];
        ChainSpec::new(Pose::from_translation(Vector3::new(x, 0.0, 0.0)), joints, Pose::from_translation(Vector3::new(0.0, 0.0, 0.2))).unwrap()
    }

    fn scene() -> Scene {
        let robot = Robot::new(vec![arm(-0.5), arm(0.5)]).unwrap();
        let spheres = CollisionSphereSet::along_links(&robot, 2, 0.04);
        Scene { robot, shapes: vec![Shape::Sphere { center: [0.0, 0.0, 0.6], radius: 0.15 }], spheres }
    }

    fn task1_target() -> PoseSpec {
        PoseSpec { quat: [0.0, 0.0, 1.0, 0.0], trans: [0.0, 0.0, 0.7] }
    }

    fn random_poses(rng: &mut ChaCha8Rng) -> Vec<Pose> {
        (0..2)
            .map(|_| {
                let t = Twist::new(
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                    Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
                );
                expmap(&t)
            })
            .collect()
    }

    fn all_pose_constraints() -> Vec<Constraint> {
        vec![
            Constraint::RelativePose { target: task1_target(), a: 0, b: 1 },
            Constraint::AbsolutePose { ee: 1, goal: PoseSpec { quat: [0.9238795325112867, 0.0, 0.3826834323650898, 0.0], trans: [0.1, 0.2, 0.3] } },
            Constraint::MidpointEq { target: [0.0, 0.0, 0.6] },
            Constraint::MidpointBox { c1: [-0.1, -0.05, 0.4], c2: [0.1, 0.05, 0.8] },
            Constraint::MidpointOnSurface { shape: 0 },
            Constraint::OrientationAxis { ee: 0, body_axis: [0.0, 0.0, 1.0], world_axis: [1.0, 0.0, 0.0] },
            Constraint::OrientationFull { ee: 0, goal_quat: [FRAC_PI_2.cos() * 0.0 + (PI / 4.0).cos(), 0.0, (PI / 4.0).sin(), 0.0] },
            Constraint::SurfaceNormalOrientation { shape: 0, ee: 0, body_axis: [0.0, 0.0, 1.0] },
        ]
    }

    #[test]
    fn task1_relative_pose_is_zero_when_satisfied() {
        let h1 = expmap(&Twist::new(Vector3::new(0.0, 0.3, 0.0), Vector3::new(0.1, 0.0, 0.5)));
        let h2 = h1 * task1_target().to_pose();
        let c = Constraint::RelativePose { target: task1_target(), a: 0, b: 1 };
        let f = feature(&c, &[h1, h2], &scene()).unwrap();
        assert!(f.iter().all(|x| x.abs() < 1e-12));
        let t = task1_target().to_pose();
        let expect = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, -1.0);
        assert!((t.rotation.matrix() - expect).abs().max() < 1e-15);
        assert_eq!(t.translation, Vector3::new(0.0, 0.0, 0.7));
    }

    #[test]
    fn midpoint_example() {
        let c = Constraint::MidpointEq { target: [0.5, 0.0, 0.0] };
        let p = [Pose::from_translation(Vector3::new(1.0, 0.0, 0.0)), Pose::identity()];
        assert_eq!(feature(&c, &p, &scene()).unwrap(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn wrong_arity_is_reported() {
        let c = Constraint::MidpointEq { target: [0.5, 0.0, 0.0] };
        assert!(matches!(feature(&c, &[Pose::identity()], &scene()), Err(ConstraintError::WrongArity { .. })));
    }

    #[test]
    fn feature_jacobians_match_finite_differences() {
        let sc = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let h = 1e-6;
        for c in all_pose_constraints() {
            for _ in 0..30 {
                let poses = random_poses(&mut rng);
                let jet = feature_jet(&c, &poses, &sc, None).unwrap();
                for col in 0..12 {
                    let mut e = Vector6::zeros();
                    e[col % 6] = h;
                    let bump = |s: f64| {
                        let mut p = poses.clone();
                        p[col / 6] = p[col / 6] * expmap(&Twist::from_vector6(&(e * s)));
                        feature(&c, &p, &sc).unwrap()
                    };
                    let fp = bump(1.0);
                    let fm = bump(-1.0);
                    for r in 0..jet.value.len() {
                        let fd = (fp[r] - fm[r]) / (2.0 * h);
                        let err = (fd - jet.jac[(r, col)]).abs();
                        assert!(err < 1e-4 * (1.0 + fd.abs()), "{}: row {r} col {col} fd {fd} an {}", c.tag(), jet.jac[(r, col)]);
                    }
                }
            }
        }
    }

    #[test]
    fn cost_se3_examples() {
        let a = Pose::identity();
        assert_eq!(cost_se3(&a, &a).unwrap(), 0.0);
        assert_eq!(cost_se3(&a, &Pose::from_translation(Vector3::new(1.0, 0.0, 0.0))).unwrap(), 1.0);
        let r = Pose::new(Rotation::rotz(FRAC_PI_2), Vector3::zeros());
        assert!((cost_se3(&a, &r).unwrap() - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn obstacle_cost_examples() {
        let sc = scene();
        let q = vec![0.0; 6];
        let far = cost_obstacle(&sc.robot, &q, &sc.spheres, &Vector3::new(10.0, 10.0, 10.0), 0.1);
        assert_eq!(far.value, 0.0);
        let fk = sc.robot.fk(&q);
        let one = CollisionSphereSet { spheres: vec![sc.spheres.spheres[0].clone()] };
        let p = sc.robot.sphere_positions(&fk, &one)[0];
        let hit = cost_obstacle(&sc.robot, &q, &one, &p, 0.1);
        assert!((hit.value - (0.04 + 0.1)).abs() < 1e-15);
    }

    fn fd_grad(f: &dyn Fn(&[f64]) -> f64, q: &[f64]) -> Vec<f64> {
        let h = 1e-6;
        (0..q.len())
            .map(|k| {
                let mut a = q.to_vec();
                let mut b = q.to_vec();
                a[k] += h;
                b[k] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_grad_close(an: &[f64], fd: &[f64]) {
        for (a, b) in an.iter().zip(fd) {
            assert!((a - b).abs() <= 1e-4 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn joint_cost_gradients_match_finite_differences() {
        let sc = scene();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let center = Vector3::new(-0.4, 0.0, 0.5);
        let limits = JointLimits::new(vec![-1.0; 6], vec![1.0; 6], 0.05).unwrap();
        for _ in 0..100 {
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            let o = cost_obstacle(&sc.robot, &q, &sc.spheres, &center, 0.3);
            assert_grad_close(&o.grad, &fd_grad(&|x| cost_obstacle(&sc.robot, x, &sc.spheres, &center, 0.3).value, &q));
            let l = cost_joint_limits(&q, &limits);
            assert_grad_close(&l.grad, &fd_grad(&|x| cost_joint_limits(x, &limits).value, &q));
            let s = cost_self_collision(&sc.robot, &q, &sc.spheres);
            assert_grad_close(&s.grad, &fd_grad(&|x| cost_self_collision(&sc.robot, x, &sc.spheres).value, &q));
        }
    }

    #[test]
    fn joint_limit_examples() {
        let limits = JointLimits::new(vec![-1.0, -1.0], vec![1.0, 1.0], 0.05).unwrap();
        assert_eq!(cost_joint_limits(&[0.0, 0.0], &limits).value, 0.0);
        let v = cost_joint_limits(&[0.0, 1.0 - 0.05 + 0.1], &limits).value;
        assert!((v - 0.01).abs() < 1e-12);
    }

    #[test]
    fn self_collision_examples() {
        let robot = Robot::new(vec![arm(-0.5), arm(0.5)]).unwrap();
        let apart = CollisionSphereSet::along_links(&robot, 2, 0.04);
        let q = [-FRAC_PI_2, 0.0, 0.0, FRAC_PI_2, 0.0, 0.0];
        assert_eq!(cost_self_collision(&robot, &q, &apart).value, 0.0);
        let coincident = CollisionSphereSet {
            spheres: vec![
                CollisionSphere { arm: 0, link: 0, offset: Vector3::new(0.5, 0.0, 0.0), radius: 1.0 },
                CollisionSphere { arm: 1, link: 0, offset: Vector3::new(-0.5, 0.0, 0.0), radius: 1.0 },
            ],
        };
        assert!((cost_self_collision(&robot, &q, &coincident).value - 2.0).abs() < 1e-15);
        // mirror configuration about the x = 0 plane swaps the arms
        let qa = [0.3, -0.4, 0.2, -0.3, 0.4, -0.2];
        let qb = [-0.3, 0.4, -0.2, 0.3, -0.4, 0.2];
        let a = cost_self_collision(&robot, &qa, &apart).value;
        let b = cost_self_collision(&robot, &qb, &apart).value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn slack_examples() {
        let c = Constraint::MidpointOnSurface { shape: 0 };
        assert_eq!(feature_slack(&c, &[-0.5]), 0.0);
        assert_eq!(feature_slack(&c, &[0.3]), 0.3);
        let e = Constraint::MidpointEq { target: [0.0; 3] };
        assert_eq!(feature_slack(&e, &[0.0, 0.0, 0.0]), 0.0);
        assert_eq!(feature_slack(&e, &[3.0, 4.0, 0.0]), 5.0);
    }

    #[test]
    fn residual_jacobians_match_finite_differences() {
        let sc = scene();
        let mut cs: Vec<Constraint> = all_pose_constraints();
        cs.push(Constraint::ObstacleSphere { center: [-0.4, 0.0, 0.5], radius: 0.2 });
        let cs = ConstraintSet::new(cs);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for mode in [ResidualMode::Slack, ResidualMode::Stacked] {
            for _ in 0..20 {
                let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.5..1.5)).collect();
                let (r, j) = residuals(&cs, &sc, &q, mode).unwrap();
                for k in 0..6 {
                    let h = 1e-6;
                    let mut a = q.clone();
                    let mut b = q.clone();
                    a[k] += h;
                    b[k] -= h;
                    let ra = residuals(&cs, &sc, &a, mode).unwrap().0;
                    let rb = residuals(&cs, &sc, &b, mode).unwrap().0;
                    for i in 0..r.len() {
                        let fd = (ra[i] - rb[i]) / (2.0 * h);
                        assert!((fd - j[(i, k)]).abs() < 1e-4 * (1.0 + fd.abs()), "{mode:?} row {i}: {fd} vs {}", j[(i, k)]);
                    }
                }
                if mode == ResidualMode::Slack {
                    let s = slack(&cs, &sc, &q).unwrap();
                    assert_eq!(s, r);
                }
            }
        }
    }

    #[test]
    fn set_validation() {
        let sc = scene();
        let ok = ConstraintSet::new(vec![Constraint::RelativePose { target: task1_target(), a: 0, b: 1 }, Constraint::MidpointEq { target: [0.0, 0.0, 0.6] }]);
        ok.validate(&sc, 6).unwrap();
        let bad = ConstraintSet::new(vec![Constraint::SelfCollision]);
        assert!(matches!(bad.validate(&sc, 6), Err(ConstraintError::MissingFundamental)));
        let many = ConstraintSet::new(vec![Constraint::MidpointEq { target: [0.0; 3] }; 7]);
        assert!(matches!(many.validate(&sc, 6), Err(ConstraintError::TooMany { .. })));
    }
}
