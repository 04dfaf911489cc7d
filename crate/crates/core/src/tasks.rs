//! Desk-scale task analogs: two planar 3-DOF arms facing each other across a desk.
//!
//! Both arms rotate about the world y axis, so every end-effector pose lies in
//! the xz-plane. Tasks 1–3 hold the pair at a fixed midpoint (with an obstacle
//! and an orientation axis added in turn); tasks 4–6 place the midpoint in a
//! region with orientation constraints.

use crate::constraints::{Constraint, ConstraintError, ConstraintSet, PoseSpec, Scene};
use crate::kin::{ChainSpec, CollisionSphereSet, Joint, Robot};
use crate::lie::{Pose, Rotation};
use crate::models::Clouds;
use crate::seeds;
use crate::shapes::Shape;
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

pub const LINKS: [f64; 3] = [0.5, 0.4, 0.2];
pub const BASE_X: f64 = 0.5;
/// Separation of the two end effectors along the first one's z axis.
pub const GRIP_GAP: f64 = 0.7;
pub const MIDPOINT: [f64; 3] = [0.0, 0.0, 0.6];

#[derive(Debug, thiserror::Error)]
pub enum TaskError {
    #[error("unknown task {0} (expected 1-6)")]
    UnknownTask(u8),
    #[error("variant {variant:?} does not apply to task {task}")]
    VariantMismatch { task: u8, variant: Variant },
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl Bounds {
    pub fn contains(&self, p: &Vector3<f64>) -> bool {
        (0..3).all(|i| p[i] >= self.lo[i] && p[i] <= self.hi[i])
    }
}

/// Which point of a sample is binned for coverage statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoveragePoint {
    FirstEndEffector,
    Midpoint,
}

/// Point-cloud observation of the scene shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CloudSpec {
    pub points: usize,
    /// Standard deviation of isotropic Gaussian noise added to every point.
    pub noise: f64,
    pub seed: u64,
}

impl Default for CloudSpec {
    fn default() -> Self {
        CloudSpec { points: 256, noise: 0.0, seed: 0 }
    }
}

/// Out-of-distribution modifications, applied on top of a builtin task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Variant {
    /// Adds `delta` to the relative-pose translation along z.
    ShiftedRelPose { delta: f64 },
    /// Moves the midpoint target of tasks 1–3.
    ShiftedMidpoint { delta: [f64; 3] },
    /// Halves the box extents in x and z (a quarter of the area in the arm plane).
    QuarterBox,
    /// Replaces the box by an inscribed disk in the arm plane.
    CircularRegion,
    /// Translates every scene shape (and therefore its cloud).
    TranslatedCloud { delta: [f64; 3] },
    NoisyCloud { sigma: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: u8,
    pub scene: Scene,
    pub constraints: ConstraintSet,
    pub workspace: Bounds,
    pub coverage_point: CoveragePoint,
    #[serde(default)]
    pub cloud: CloudSpec,
    #[serde(default)]
    pub variants: Vec<Variant>,
}

fn arm(x: f64) -> ChainSpec {
    let joints = vec![
        Joint { axis: Vector3::y(), origin: Pose::identity() },
        Joint { axis: Vector3::y(), origin: Pose::from_translation(Vector3::new(0.0, 0.0, LINKS[0])) },
        Joint { axis: Vector3::y(), origin: Pose::from_translation(Vector3::new(0.0, 0.0, LINKS[1])) },
    ];
    ChainSpec { base: Pose::from_translation(Vector3::new(x, 0.0, 0.0)), joints, tool: Pose::from_translation(Vector3::new(0.0, 0.0, LINKS[2])) }
}

/// The two-arm robot shared by every task.
pub fn desk_robot() -> Robot {
    Robot { arms: vec![arm(-BASE_X), arm(BASE_X)] }
}

fn quat_ry(angle: f64) -> [f64; 4] {
    [(angle / 2.0).cos(), 0.0, (angle / 2.0).sin(), 0.0]
}

/// End effector 1 sits `GRIP_GAP` along end effector 0's z axis, turned to face it.
pub fn facing_pose() -> PoseSpec {
    PoseSpec { quat: quat_ry(std::f64::consts::PI), trans: [0.0, 0.0, GRIP_GAP] }
}

pub const OBSTACLE_CENTER: [f64; 3] = [-0.85, 0.0, 0.4];
pub const OBSTACLE_RADIUS: f64 = 0.08;
pub const BOX_C1: [f64; 3] = [-0.15, -0.05, 0.45];
pub const BOX_C2: [f64; 3] = [0.15, 0.05, 0.75];
pub const SURFACE_CENTER: [f64; 3] = [0.0, 0.0, 0.6];
pub const SURFACE_RADIUS: f64 = 0.15;

impl TaskSpec {
    pub fn builtin(id: u8) -> Result<TaskSpec, TaskError> {
        let robot = desk_robot();
        let spheres = CollisionSphereSet::along_links(&robot, 2, 0.03);
        let rel = Constraint::RelativePose { target: facing_pose(), a: 0, b: 1 };
        let mid = Constraint::MidpointEq { target: MIDPOINT };
        let obstacle = Constraint::ObstacleSphere { center: OBSTACLE_CENTER, radius: OBSTACLE_RADIUS };
        let level = Constraint::OrientationAxis { ee: 0, body_axis: [0.0, 0.0, 1.0], world_axis: [1.0, 0.0, 0.0] };
        let horizontal = Constraint::OrientationFull { ee: 0, goal_quat: quat_ry(std::f64::consts::FRAC_PI_2) };
        let sphere = Shape::Sphere { center: SURFACE_CENTER, radius: SURFACE_RADIUS };
        let pair_box = Bounds { lo: [-0.45, -0.05, 0.2], hi: [0.45, 0.05, 1.0] };
        let (constraints, shapes, workspace, coverage_point) = match id {
            1 => (vec![rel, mid], vec![], pair_box, CoveragePoint::FirstEndEffector),
            2 => (vec![rel, mid, obstacle], vec![], pair_box, CoveragePoint::FirstEndEffector),
            3 => (vec![rel, mid, obstacle, level], vec![], pair_box, CoveragePoint::FirstEndEffector),
            4 => (
                vec![rel, Constraint::MidpointBox { c1: BOX_C1, c2: BOX_C2 }, horizontal],
                vec![],
                Bounds { lo: BOX_C1, hi: BOX_C2 },
                CoveragePoint::Midpoint,
            ),
            5 => (
                vec![rel, Constraint::MidpointOnSurface { shape: 0 }, horizontal],
                vec![sphere.clone()],
                shape_bounds(&sphere),
                CoveragePoint::Midpoint,
            ),
            6 => (
                vec![rel, Constraint::MidpointOnSurface { shape: 0 }, Constraint::SurfaceNormalOrientation { shape: 0, ee: 0, body_axis: [0.0, 0.0, 1.0] }],
                vec![sphere.clone()],
                shape_bounds(&sphere),
                CoveragePoint::Midpoint,
            ),
            other => return Err(TaskError::UnknownTask(other)),
        };
        Ok(TaskSpec {
            id,
            scene: Scene { robot, shapes, spheres },
            constraints: ConstraintSet::new(constraints),
            workspace,
            coverage_point,
            cloud: CloudSpec::default(),
            variants: Vec::new(),
        })
    }

    /// Applies an out-of-distribution modification.
    pub fn with_variant(mut self, v: Variant) -> Result<TaskSpec, TaskError> {
        let mismatch = |t: &TaskSpec| TaskError::VariantMismatch { task: t.id, variant: v };
        match v {
            Variant::ShiftedRelPose { delta } => {
                let mut hit = false;
                for c in &mut self.constraints.constraints {
                    if let Constraint::RelativePose { target, .. } = c {
                        target.trans[2] += delta;
                        hit = true;
                    }
                }
                if !hit {
                    return Err(mismatch(&self));
                }
            }
            Variant::ShiftedMidpoint { delta } => {
                let mut hit = false;
                for c in &mut self.constraints.constraints {
                    if let Constraint::MidpointEq { target } = c {
                        for i in 0..3 {
                            target[i] += delta[i];
                        }
                        hit = true;
                    }
                }
                if !hit {
                    return Err(mismatch(&self));
                }
            }
            Variant::QuarterBox => {
                let mut region = None;
                for c in &mut self.constraints.constraints {
                    if let Constraint::MidpointBox { c1, c2 } = c {
                        for i in [0, 2] {
                            let mid = 0.5 * (c1[i] + c2[i]);
                            let half = 0.25 * (c2[i] - c1[i]);
                            c1[i] = mid - half;
                            c2[i] = mid + half;
                        }
                        region = Some(Bounds { lo: *c1, hi: *c2 });
                    }
                }
                self.workspace = region.ok_or_else(|| mismatch(&self))?;
            }
            Variant::CircularRegion => {
                let pos = self.constraints.constraints.iter().position(|c| matches!(c, Constraint::MidpointBox { .. }));
                let Some(i) = pos else { return Err(mismatch(&self)) };
                let Constraint::MidpointBox { c1, c2 } = self.constraints.constraints[i].clone() else { unreachable!() };
                let center = [0.5 * (c1[0] + c2[0]), 0.5 * (c1[1] + c2[1]), 0.5 * (c1[2] + c2[2])];
                // a disk in the arm plane, inscribed in the box
                let radius = 0.5 * (c2[0] - c1[0]).min(c2[2] - c1[2]);
                self.scene.shapes.push(Shape::Sphere { center, radius });
                self.constraints.constraints[i] = Constraint::MidpointOnSurface { shape: self.scene.shapes.len() - 1 };
            }
            Variant::TranslatedCloud { delta } => {
                if self.scene.shapes.is_empty() {
                    return Err(mismatch(&self));
                }
                let d = Vector3::new(delta[0], delta[1], delta[2]);
                self.scene.shapes = self.scene.shapes.iter().map(|s| s.translated(&d)).collect();
                for i in 0..3 {
                    self.workspace.lo[i] += delta[i];
                    self.workspace.hi[i] += delta[i];
                }
            }
            Variant::NoisyCloud { sigma } => {
                if self.scene.shapes.is_empty() {
                    return Err(mismatch(&self));
                }
                self.cloud.noise = sigma;
            }
        }
        self.variants.push(v);
        Ok(self)
    }

    pub fn validate(&self, n_max: usize) -> Result<(), TaskError> {
        self.constraints.validate(&self.scene, n_max)?;
        Ok(())
    }

    /// Observed point clouds, one per scene shape.
    pub fn clouds(&self) -> Clouds {
        let pts: Vec<Vec<Vector3<f64>>> = self
            .scene
            .shapes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = seeds::stream(self.cloud.seed, &format!("cloud{i}"));
                s.sample_surface(self.cloud.points, self.cloud.noise, &mut rng)
            })
            .collect();
        Clouds::from_points(&pts)
    }

    /// Point binned for coverage statistics.
    pub fn coverage_point_of(&self, poses: &[Pose]) -> Vector3<f64> {
        match self.coverage_point {
            CoveragePoint::FirstEndEffector => poses[0].translation,
            CoveragePoint::Midpoint => (poses[0].translation + poses[1].translation) * 0.5,
        }
    }

    /// A configuration meeting the task exactly, used as a reference in tests.
    pub fn nominal_pose_pair(&self) -> Vec<Pose> {
        let r0 = Rotation::roty(std::f64::consts::FRAC_PI_2);
        let m = Vector3::new(MIDPOINT[0], MIDPOINT[1], MIDPOINT[2]);
        let z = r0 * Vector3::z();
        let p0 = Pose::new(r0, m - z * (GRIP_GAP / 2.0));
        vec![p0, p0 * facing_pose().to_pose()]
    }
}

fn shape_bounds(s: &Shape) -> Bounds {
    let (lo, hi) = s.bounds();
    Bounds { lo: [lo.x, lo.y, lo.z], hi: [hi.x, hi.y, hi.z] }
}
