//! Constraint-error metrics, voxel coverage/uniformity and summary statistics.
//!
//! Quantiles use linear interpolation between order statistics at position
//! `(n − 1) p` (inclusive convention), so Q3 of {1, 2, 3, 4} is 3.25.

use crate::constraints::{Constraint, Scene};
use crate::lie::{Pose, Rotation};
use crate::sample::SampleBatch;
use crate::tasks::{Bounds, TaskSpec};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("grid size must be at least 1")]
    EmptyGrid,
    #[error("bounds are empty along axis {0}")]
    EmptyBounds(usize),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Linear-interpolation quantile of `xs` (inclusive). NaN for empty input.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub q3: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Summary {
        let mean = if xs.is_empty() { f64::NAN } else { xs.iter().sum::<f64>() / xs.len() as f64 };
        Summary { mean, median: quantile(xs, 0.5), q3: quantile(xs, 0.75) }
    }
}

/// Per-sample values of one error column and their summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Column {
    pub values: Vec<f64>,
    pub summary: Summary,
}

impl Column {
    fn new(values: Vec<f64>) -> Column {
        let summary = Summary::of(&values);
        Column { values, summary }
    }
}

/// Error columns of a batch; a column is absent when the task has no such constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    /// Millimetres.
    pub relative_position: Option<Column>,
    /// Millimetres.
    pub midpoint_position: Option<Column>,
    /// Radians.
    pub relative_rotation: Option<Column>,
    /// Radians.
    pub ee_rotation: Option<Column>,
    /// Wall time of the producing run, when it was recorded.
    pub time_s: Option<f64>,
}

pub const METRIC_NAMES: [&str; 4] = ["relative_position_mm", "midpoint_position_mm", "relative_rotation_rad", "ee_rotation_rad"];

impl ErrorReport {
    pub fn columns(&self) -> [(&'static str, Option<&Column>); 4] {
        [
            (METRIC_NAMES[0], self.relative_position.as_ref()),
            (METRIC_NAMES[1], self.midpoint_position.as_ref()),
            (METRIC_NAMES[2], self.relative_rotation.as_ref()),
            (METRIC_NAMES[3], self.ee_rotation.as_ref()),
        ]
    }
}

/// Angle between two directions, robust near 0 and π.
fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

fn v3(a: &[f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn box_distance(p: &Vector3<f64>, c1: &[f64; 3], c2: &[f64; 3]) -> f64 {
    let d = Vector3::from_fn(|i, _| {
        let (lo, hi) = (c1[i].min(c2[i]), c1[i].max(c2[i]));
        (lo - p[i]).max(0.0).max(p[i] - hi)
    });
    d.norm()
}

fn midpoint(poses: &[Pose]) -> Vector3<f64> {
    (poses[0].translation + poses[1].translation) * 0.5
}

/// Midpoint error of one sample in metres, or `None` for tasks without one.
fn midpoint_error(c: &Constraint, poses: &[Pose], scene: &Scene) -> Option<f64> {
    let m = midpoint(poses);
    match c {
        Constraint::MidpointEq { target } => Some((m - v3(target)).norm()),
        Constraint::MidpointBox { c1, c2 } => Some(box_distance(&m, c1, c2)),
        Constraint::MidpointOnSurface { shape } => scene.shapes.get(*shape).map(|s| s.sdf(&m).max(0.0)),
        _ => None,
    }
}

fn ee_rotation_error(c: &Constraint, poses: &[Pose], scene: &Scene) -> Option<f64> {
    match c {
        Constraint::OrientationFull { ee, goal_quat } => {
            let g = Rotation::from_quaternion_wxyz(*goal_quat);
            Some((g.transpose() * poses[*ee].rotation).angle())
        }
        Constraint::OrientationAxis { ee, body_axis, world_axis } => Some(angle_between(&(poses[*ee].rotation * v3(body_axis)), &v3(world_axis))),
        Constraint::SurfaceNormalOrientation { shape, ee, body_axis } => {
            let n = scene.shapes.get(*shape)?.normal(&midpoint(poses));
            Some(angle_between(&(poses[*ee].rotation * v3(body_axis)), &(-n)))
        }
        _ => None,
    }
}

/// Per-sample constraint errors of `batch` under `task`. Each column uses the
/// first constraint of the matching kind.
pub fn constraint_errors(batch: &SampleBatch, task: &TaskSpec, time_s: Option<f64>) -> ErrorReport {
    let cs = &task.constraints.constraints;
    let scene = &task.scene;
    let rel = cs.iter().find_map(|c| match c {
        Constraint::RelativePose { target, a, b } => Some((target.to_pose(), *a, *b)),
        _ => None,
    });
    let (mut rp, mut rr) = (Vec::new(), Vec::new());
    if let Some((t, a, b)) = rel {
        for poses in &batch.poses {
            let r = poses[a].inverse() * poses[b];
            rp.push((r.translation - t.translation).norm() * 1e3);
            rr.push((t.rotation.transpose() * r.rotation).angle());
        }
    }
    let column = |kind: Option<&Constraint>, f: &dyn Fn(&Constraint, &[Pose]) -> Option<f64>, scale: f64| {
        kind.map(|c| Column::new(batch.poses.iter().map(|p| f(c, p).unwrap_or(f64::NAN) * scale).collect()))
    };
    let mid = cs.iter().find(|c| matches!(c, Constraint::MidpointEq { .. } | Constraint::MidpointBox { .. } | Constraint::MidpointOnSurface { .. }));
    let ori = cs.iter().find(|c| matches!(c, Constraint::OrientationFull { .. } | Constraint::OrientationAxis { .. } | Constraint::SurfaceNormalOrientation { .. }));
    let midpoint_position = column(mid, &|c, p| midpoint_error(c, p, scene), 1e3);
    let ee_rotation = column(ori, &|c, p| ee_rotation_error(c, p, scene), 1.0);
    ErrorReport {
        relative_position: rel.map(|_| Column::new(rp)),
        midpoint_position,
        relative_rotation: rel.map(|_| Column::new(rr)),
        ee_rotation,
        time_s,
    }
}

/// Voxel occupancy of a point set over a fixed box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelStats {
    /// Cells per axis.
    pub m: usize,
    /// Counts in x-major order: index `(ix · m + iy) · m + iz`.
    pub counts: Vec<u64>,
    /// `(1/M³) Σ (nᵢ − n̄)²`.
    pub variance: f64,
    /// Fraction of occupied cells.
    pub coverage: f64,
    /// Points outside the box, clamped into the nearest boundary cell.
    pub out_of_bounds: usize,
}

impl Bounds {
    /// Axis-aligned bounding box of `points`.
    pub fn of_points(points: &[Vector3<f64>]) -> Option<Bounds> {
        let first = points.first()?;
        let mut lo = [first.x, first.y, first.z];
        let mut hi = lo;
        for p in points {
            for i in 0..3 {
                lo[i] = lo[i].min(p[i]);
                hi[i] = hi[i].max(p[i]);
            }
        }
        Some(Bounds { lo, hi })
    }
}

/// Bins `points` into an `m³` grid over `bounds`. The upper face belongs to the last cell.
pub fn voxel_stats(points: &[Vector3<f64>], m: usize, bounds: &Bounds) -> Result<VoxelStats, MetricsError> {
    if m == 0 {
        return Err(MetricsError::EmptyGrid);
    }
    for i in 0..3 {
        if !(bounds.hi[i] > bounds.lo[i]) {
            return Err(MetricsError::EmptyBounds(i));
        }
    }
    let mut counts = vec![0u64; m * m * m];
    let mut out_of_bounds = 0;
    for p in points {
        if !bounds.contains(p) {
            out_of_bounds += 1;
        }
        let idx: Vec<usize> = (0..3)
            .map(|i| {
                let t = (p[i] - bounds.lo[i]) / (bounds.hi[i] - bounds.lo[i]) * m as f64;
                if t.is_nan() {
                    0
                } else {
                    (t.floor().max(0.0) as usize).min(m - 1)
                }
            })
            .collect();
        counts[(idx[0] * m + idx[1]) * m + idx[2]] += 1;
    }
    let cells = counts.len() as f64;
    let mean = points.len() as f64 / cells;
    let variance = counts.iter().map(|&n| (n as f64 - mean).powi(2)).sum::<f64>() / cells;
    let coverage = counts.iter().filter(|&&n| n > 0).count() as f64 / cells;
    Ok(VoxelStats { m, counts, variance, coverage, out_of_bounds })
}

/// Which box coverage statistics are computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoverageBounds {
    /// The task's configured workspace box, shared across methods.
    #[default]
    Workspace,
    /// The bounding box of the evaluated points.
    Empirical,
}

/// Coverage statistics of a batch's coverage points.
pub fn batch_voxel_stats(batch: &SampleBatch, task: &TaskSpec, m: usize, which: CoverageBounds) -> Result<VoxelStats, MetricsError> {
    let pts: Vec<Vector3<f64>> = batch.poses.iter().map(|p| task.coverage_point_of(p)).collect();
    let bounds = match which {
        CoverageBounds::Workspace => task.workspace.clone(),
        CoverageBounds::Empirical => {
            let mut b = Bounds::of_points(&pts).unwrap_or(task.workspace.clone());
            for i in 0..3 {
                if !(b.hi[i] > b.lo[i]) {
                    b.lo[i] -= 0.5e-3;
                    b.hi[i] += 0.5e-3;
                }
            }
            b
        }
    };
    voxel_stats(&pts, m, &bounds)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub method: String,
    pub task: u8,
    pub metric: String,
    pub mean: f64,
    pub median: f64,
    pub q3: f64,
    /// Wall time of the producing run, when it was recorded.
    pub time_s: Option<f64>,
}

pub fn write_csv<W: std::io::Write>(rows: &[MetricRow], w: W) -> Result<(), MetricsError> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricRow>, MetricsError> {
    let mut rd = csv::Reader::from_reader(r);
    Ok(rd.deserialize().collect::<Result<_, _>>()?)
}

/// Rows for one method/task: every present error column plus coverage and variance.
pub fn report_rows(method: &str, task: u8, report: &ErrorReport, voxels: Option<&VoxelStats>) -> Vec<MetricRow> {
    let mut rows: Vec<MetricRow> = report
        .columns()
        .into_iter()
        .filter_map(|(name, c)| {
            c.map(|c| MetricRow {
                method: method.to_string(),
                task,
                metric: name.to_string(),
                mean: c.summary.mean,
                median: c.summary.median,
                q3: c.summary.q3,
                time_s: report.time_s,
            })
        })
        .collect();
    if let Some(v) = voxels {
        for (name, x) in [("voxel_coverage", v.coverage), ("voxel_variance", v.variance)] {
            rows.push(MetricRow { method: method.to_string(), task, metric: name.to_string(), mean: x, median: x, q3: x, time_s: report.time_s });
        }
    }
    rows
}

/// Averages rows with the same (method, task, metric) across runs, keeping first-seen order.
pub fn average_rows(runs: &[Vec<MetricRow>]) -> Vec<MetricRow> {
    let mut out: Vec<(MetricRow, usize)> = Vec::new();
    for r in runs.iter().flatten() {
        match out.iter_mut().find(|(o, _)| o.method == r.method && o.task == r.task && o.metric == r.metric) {
            Some((o, n)) => {
                o.mean += r.mean;
                o.median += r.median;
                o.q3 += r.q3;
                o.time_s = o.time_s.zip(r.time_s).map(|(a, b)| a + b);
                *n += 1;
            }
            None => out.push((r.clone(), 1)),
        }
    }
    out.into_iter()
        .map(|(mut o, n)| {
            let k = n as f64;
            o.mean /= k;
            o.median /= k;
            o.q3 /= k;
            o.time_s = o.time_s.map(|t| t / k);
            o
        })
        .collect()
}
