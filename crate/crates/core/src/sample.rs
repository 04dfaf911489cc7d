//! Sequential constrained sampling in joint space: annealed Langevin passes,
//! Gauss-Newton refinement, KDE-weighted replication and post-processing.

use crate::constraints::{joint_cost, residuals, slack, stacked_body_jacobian, ConstraintError, ResidualMode};
use crate::lie::Pose;
use crate::models::{AdcsModel, Clouds, ModelError};
use crate::seeds;
use crate::solve::{damped_solve, gauss_newton_step, SolveError};
use crate::tasks::TaskSpec;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SampleError {
    #[error("invalid sampler configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Solve(#[from] SolveError),
}

/// Replication rule applied between the two passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replication {
    /// Weights inversely proportional to the KDE density.
    Kde,
    /// Equal weights.
    Uniform,
}

/// Right-hand side of the refinement solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnForm {
    /// `(JᵀJ)⁻¹ Jᵀ r` on the constraint residual.
    Residual,
    /// `(JᵀJ)⁻¹ q`, the closest well-typed reading of the line multiplying by `q`.
    Literal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_s: usize,
    pub n_r: usize,
    /// Step rate ε; the Langevin step at level k is `ε σ_k / σ_L`.
    pub step_rate: f64,
    /// Level (1-indexed) used for the refinement energy.
    pub t_f: usize,
    /// Fixed refinement step rate; `None` uses the step of level `t_f`.
    pub alpha_f: Option<f64>,
    /// KDE bandwidth; `None` applies Silverman's rule to the kept set.
    pub bandwidth: Option<f64>,
    /// Total Langevin iterations across all passes.
    pub budget: usize,
    /// Fraction of each pass spent in the refinement phase.
    pub refine_fraction: f64,
    pub sequential: bool,
    /// Level at which passes after the first start annealing; `None` restarts from L.
    pub reanneal_level: Option<usize>,
    pub replication: Replication,
    pub gn_refine: bool,
    /// Hold one positional-encoding draw for the whole refinement phase so it
    /// stays deterministic; otherwise every evaluation redraws.
    pub freeze_refine_pe: bool,
    pub gn_form: GnForm,
    pub residual_mode: ResidualMode,
    /// Standard deviation of the Gaussian initialisation in joint space.
    pub init_std: f64,
    /// Rows per energy evaluation.
    pub chunk: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_s: 500,
            n_r: 250,
            step_rate: 0.5,
            t_f: 1,
            alpha_f: None,
            bandwidth: None,
            budget: 600,
            refine_fraction: 0.5,
            sequential: true,
            reanneal_level: Some(8),
            replication: Replication::Kde,
            gn_refine: true,
            freeze_refine_pe: true,
            gn_form: GnForm::Residual,
            residual_mode: ResidualMode::Slack,
            init_std: 1.0,
            chunk: 128,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        let bad = |m: &str| Err(SampleError::Config(m.to_string()));
        if self.n_r > self.n_s || (self.sequential && self.n_r == 0 && self.n_s > 0) {
            return bad("need 0 < n_r <= n_s");
        }
        if !(self.step_rate > 0.0) {
            return bad("step_rate must be positive");
        }
        if matches!(self.alpha_f, Some(a) if !(a > 0.0)) || matches!(self.bandwidth, Some(h) if !(h > 0.0)) {
            return bad("alpha_f and bandwidth must be positive");
        }
        if !(0.0..=1.0).contains(&self.refine_fraction) {
            return bad("refine_fraction must lie in [0, 1]");
        }
        if self.t_f == 0 || self.chunk == 0 || self.reanneal_level == Some(0) {
            return bad("t_f, chunk and reanneal_level must be positive");
        }
        Ok(())
    }

    /// The fixed-weight single-pass configuration without refinement.
    pub fn plain_almc(&self) -> SamplerConfig {
        SamplerConfig { sequential: false, gn_refine: false, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub configs: Vec<Vec<f64>>,
    pub poses: Vec<Vec<Pose>>,
    pub energies: Vec<f64>,
    /// Per-constraint slack of every sample.
    pub slack: Vec<Vec<f64>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.configs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    /// Recomputes poses and slacks for `configs`; energies are left as given.
    pub fn from_configs(task: &TaskSpec, configs: Vec<Vec<f64>>, energies: Vec<f64>) -> Result<Self, SampleError> {
        let poses = configs.iter().map(|q| task.scene.robot.ee_poses(q)).collect();
        let slack = configs.iter().map(|q| slack(&task.constraints, &task.scene, q)).collect::<Result<_, _>>()?;
        Ok(SampleBatch { configs, poses, energies, slack })
    }
}

/// Per-iteration summary of a pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub pass: usize,
    pub iter: usize,
    pub phase: u8,
    pub sigma: f64,
    pub median_energy: f64,
    pub median_slack: f64,
}

/// Level (1-indexed, L first) of every phase-1 iteration of a pass.
pub fn level_plan(levels: usize, iters: usize) -> Vec<usize> {
    (0..iters).map(|i| levels - (i * levels) / iters.max(1)).collect()
}

/// Iterations of each phase in each pass.
pub fn budget_split(cfg: &SamplerConfig) -> Vec<(usize, usize)> {
    let passes = if cfg.sequential { 2 } else { 1 };
    (0..passes)
        .map(|p| {
            let per = cfg.budget / passes + usize::from(p < cfg.budget % passes);
            let refine = (per as f64 * cfg.refine_fraction).round() as usize;
            (per - refine, refine)
        })
        .collect()
}

/// One Langevin update `q − α²/2 ∇E + α ξ`.
pub fn langevin_update(q: &mut [f64], grad: &[f64], alpha: f64, noise: &[f64]) {
    for i in 0..q.len() {
        q[i] += -0.5 * alpha * alpha * grad[i] + alpha * noise[i];
    }
}

pub fn wrap_angle(x: f64) -> f64 {
    let pi = std::f64::consts::PI;
    let y = (x + pi).rem_euclid(2.0 * pi) - pi;
    if y == -pi {
        pi
    } else {
        y
    }
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Gaussian product-kernel density of every sample under the set itself.
pub fn kde_density(samples: &[Vec<f64>], h: f64) -> Vec<f64> {
    let m = samples.len();
    if m == 0 {
        return Vec::new();
    }
    let d = samples[0].len();
    let norm = (h * (2.0 * std::f64::consts::PI).sqrt()).powi(d as i32);
    samples
        .iter()
        .map(|x| {
            let mut acc = 0.0;
            for y in samples {
                let mut s = 0.0;
                for k in 0..d {
                    let u = (x[k] - y[k]) / h;
                    s += u * u;
                }
                acc += (-0.5 * s).exp();
            }
            acc / (m as f64 * norm)
        })
        .collect()
}

/// Silverman's rule for a shared bandwidth in `d` dimensions.
pub fn silverman_bandwidth(samples: &[Vec<f64>]) -> f64 {
    let m = samples.len();
    if m < 2 {
        return 1.0;
    }
    let d = samples[0].len();
    let mut sd = 0.0;
    for k in 0..d {
        let mean = samples.iter().map(|x| x[k]).sum::<f64>() / m as f64;
        let var = samples.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        sd += var.sqrt();
    }
    sd /= d as f64;
    let h = (4.0 / (d as f64 + 2.0)).powf(1.0 / (d as f64 + 4.0)) * (m as f64).powf(-1.0 / (d as f64 + 4.0)) * sd;
    if h > 0.0 {
        h
    } else {
        1e-3
    }
}

/// Integer counts summing to `total`, proportional to `weights` (largest remainder,
/// ties to the lower index).
pub fn apportion(weights: &[f64], total: usize) -> Vec<usize> {
    let s: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / s * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Indices of kept samples and their replication counts.
#[derive(Debug, Clone, PartialEq)]
pub struct Replicas {
    pub kept: Vec<usize>,
    pub counts: Vec<usize>,
    pub bandwidth: f64,
}

/// Keeps the `n_r` lowest-energy samples and replicates them to `n_s`.
pub fn resample_plan(configs: &[Vec<f64>], energies: &[f64], n_r: usize, n_s: usize, h: Option<f64>, mode: Replication) -> Replicas {
    let mut order: Vec<usize> = (0..configs.len()).collect();
    order.sort_by(|&a, &b| energies[a].total_cmp(&energies[b]).then(a.cmp(&b)));
    let kept: Vec<usize> = order.into_iter().take(n_r).collect();
    let pts: Vec<Vec<f64>> = kept.iter().map(|&i| configs[i].clone()).collect();
    let bandwidth = h.unwrap_or_else(|| silverman_bandwidth(&pts));
    let weights: Vec<f64> = match mode {
        Replication::Kde => kde_density(&pts, bandwidth).iter().map(|r| 1.0 / r).collect(),
        Replication::Uniform => vec![1.0; kept.len()],
    };
    let counts = apportion(&weights, n_s);
    Replicas { kept, counts, bandwidth }
}

/// Applies [`resample_plan`] and returns the replicated configurations.
pub fn resample(configs: &[Vec<f64>], energies: &[f64], n_r: usize, n_s: usize, h: Option<f64>, mode: Replication) -> Vec<Vec<f64>> {
    let plan = resample_plan(configs, energies, n_r, n_s, h, mode);
    let mut out = Vec::with_capacity(n_s);
    for (&i, &c) in plan.kept.iter().zip(&plan.counts) {
        for _ in 0..c {
            out.push(configs[i].clone());
        }
    }
    out
}

/// Sampler bound to a task and (for the learned methods) a model.
pub struct Sampler<'a> {
    pub model: &'a AdcsModel,
    pub task: &'a TaskSpec,
    pub clouds: Clouds,
    pub cfg: SamplerConfig,
}

/// Energies and joint gradients of a batch.
struct JointEnergy {
    energy: Vec<f64>,
    grad: Vec<Vec<f64>>,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a AdcsModel, task: &'a TaskSpec, cfg: SamplerConfig) -> Result<Self, SampleError> {
        cfg.validate()?;
        if cfg.t_f > model.schedule.len() {
            return Err(SampleError::Config(format!("t_f {} exceeds {} levels", cfg.t_f, model.schedule.len())));
        }
        Ok(Sampler { model, task, clouds: task.clouds(), cfg })
    }

    fn levels(&self) -> usize {
        self.model.schedule.len()
    }

    /// Learned composed energy plus `½ s²/σ²` for joint-level constraints.
    fn joint_energy(&self, qs: &[Vec<f64>], sigma: f64, pe_rng: &mut seeds::Rng) -> Result<JointEnergy, SampleError> {
        let robot = &self.task.scene.robot;
        let cs = &self.task.constraints;
        let dof = robot.dof();
        let mut energy = Vec::with_capacity(qs.len());
        let mut grad = Vec::with_capacity(qs.len());
        for chunk in qs.chunks(self.cfg.chunk) {
            let poses: Vec<Vec<Pose>> = chunk.iter().map(|q| robot.ee_poses(q)).collect();
            let ev = self.model.evaluate(cs, &poses, &self.task.scene, &self.clouds, sigma, pe_rng)?;
            for (r, q) in chunk.iter().enumerate() {
                let jb = stacked_body_jacobian(robot, q);
                let gd = DVector::from_row_slice(ev.grad.row(r));
                let gq = jb.transpose() * gd;
                let mut e = ev.energy[r];
                let mut g: Vec<f64> = gq.iter().copied().collect();
                for i in cs.joint_level_indices() {
                    if let Some(j) = joint_cost(&cs.constraints[i], &self.task.scene, q) {
                        let s = j.value.max(0.0);
                        e += 0.5 * s * s / (sigma * sigma);
                        for k in 0..dof {
                            g[k] += s * j.grad[k] / (sigma * sigma);
                        }
                    }
                }
                energy.push(e);
                grad.push(g);
            }
        }
        Ok(JointEnergy { energy, grad })
    }

    fn refinement_step(&self, q: &[f64]) -> Result<Vec<f64>, SampleError> {
        let (r, j) = residuals(&self.task.constraints, &self.task.scene, q, self.cfg.residual_mode)?;
        let step = match self.cfg.gn_form {
            GnForm::Residual => gauss_newton_step(&j, &DVector::from_vec(r))?.step,
            GnForm::Literal => damped_solve(&(j.transpose() * &j), &DVector::from_row_slice(q))?.step,
        };
        Ok(step.iter().copied().collect())
    }

    /// One annealed pass: phase 1 descends the noise levels with Langevin steps,
    /// phase 2 holds level `t_f` without noise and adds Gauss-Newton corrections.
    pub fn almc(&self, qs: &mut [Vec<f64>], pass: usize, split: (usize, usize), noise: &mut seeds::Rng, pe: &mut seeds::Rng, trace: &mut Vec<TraceRecord>) -> Result<Vec<f64>, SampleError> {
        let sched = &self.model.schedule;
        let l = self.levels();
        let sigma_l = sched.sigma_max();
        let dof = self.task.scene.robot.dof();
        let (n1, n2) = split;
        let mut last = vec![0.0; qs.len()];
        let top = if pass == 0 { l } else { self.cfg.reanneal_level.unwrap_or(l).min(l) };
        for (it, k) in level_plan(top, n1).into_iter().enumerate() {
            let sigma = sched.sigma(k);
            let alpha = self.cfg.step_rate * sigma / sigma_l;
            let je = self.joint_energy(qs, sigma, pe)?;
            for (q, g) in qs.iter_mut().zip(&je.grad) {
                let xi: Vec<f64> = (0..dof).map(|_| noise.sample(StandardNormal)).collect();
                langevin_update(q, g, alpha, &xi);
            }
            trace.push(self.trace_record(qs, pass, it, 1, sigma, &je.energy)?);
            last = je.energy;
        }
        let sigma_f = sched.sigma(self.cfg.t_f);
        let alpha_f = self.cfg.alpha_f.unwrap_or(self.cfg.step_rate * sigma_f / sigma_l);
        let refine_pe = self.cfg.freeze_refine_pe.then(|| seeds::stream(self.cfg.seed, &format!("{}/refine{pass}", seeds::PE)));
        for it in 0..n2 {
            let je = match &refine_pe {
                Some(r) => self.joint_energy(qs, sigma_f, &mut r.clone())?,
                None => self.joint_energy(qs, sigma_f, pe)?,
            };
            for (q, g) in qs.iter_mut().zip(&je.grad) {
                let corr = if self.cfg.gn_refine { self.refinement_step(q)? } else { vec![0.0; dof] };
                for k in 0..dof {
                    q[k] += -0.5 * alpha_f * alpha_f * g[k] - corr[k];
                }
            }
            trace.push(self.trace_record(qs, pass, n1 + it, 2, sigma_f, &je.energy)?);
            last = je.energy;
        }
        for q in qs.iter_mut() {
            for x in q.iter_mut() {
                *x = wrap_angle(*x);
            }
        }
        if n1 + n2 > 0 {
            last = match &refine_pe {
                Some(r) => self.joint_energy(qs, sigma_f, &mut r.clone())?,
                None => self.joint_energy(qs, sigma_f, pe)?,
            }
            .energy;
        }
        Ok(last)
    }

    fn trace_record(&self, qs: &[Vec<f64>], pass: usize, iter: usize, phase: u8, sigma: f64, energies: &[f64]) -> Result<TraceRecord, SampleError> {
        let slacks: Vec<f64> = qs
            .iter()
            .map(|q| slack(&self.task.constraints, &self.task.scene, q).map(|s| crate::constraints::slack_norm(&s)))
            .collect::<Result<_, _>>()?;
        Ok(TraceRecord { pass, iter, phase, sigma, median_energy: median(energies), median_slack: median(&slacks) })
    }

    /// Full sampler: Gaussian init, first pass, replication, second pass.
    pub fn run(&self) -> Result<(SampleBatch, Vec<TraceRecord>), SampleError> {
        let dof = self.task.scene.robot.dof();
        let mut init = seeds::stream(self.cfg.seed, seeds::INIT);
        let mut noise = seeds::stream(self.cfg.seed, seeds::NOISE);
        let mut pe = seeds::stream(self.cfg.seed, seeds::PE);
        let mut qs: Vec<Vec<f64>> = (0..self.cfg.n_s)
            .map(|_| (0..dof).map(|_| self.cfg.init_std * init.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let mut trace = Vec::new();
        let split = budget_split(&self.cfg);
        let mut energies = vec![0.0; qs.len()];
        for (pass, &s) in split.iter().enumerate() {
            if pass > 0 {
                qs = resample(&qs, &energies, self.cfg.n_r, self.cfg.n_s, self.cfg.bandwidth, self.cfg.replication);
            }
            energies = self.almc(&mut qs, pass, s, &mut noise, &mut pe, &mut trace)?;
        }
        let batch = SampleBatch::from_configs(self.task, qs, energies)?;
        Ok((batch, trace))
    }
}

/// Thinning, ordering and projection for execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PostprocessConfig {
    /// Minimum task-space distance between kept samples.
    pub thin_radius: f64,
    /// Weight of the continuity residual `√w (q − q_prev)` in the projection.
    pub smooth_weight: f64,
    /// Joint distance above which a step is projected.
    pub jump_threshold: f64,
    pub projection_iters: usize,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig { thin_radius: 0.01, smooth_weight: 0.1, jump_threshold: 1.0, projection_iters: 20 }
    }
}

/// Σ ‖q_n − q_{n−1}‖².
pub fn continuity_cost(qs: &[Vec<f64>]) -> f64 {
    qs.windows(2).map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Greedy nearest-neighbour tour starting at the first element.
pub fn nearest_neighbor_order(qs: &[Vec<f64>]) -> Vec<usize> {
    if qs.is_empty() {
        return Vec::new();
    }
    let mut used = vec![false; qs.len()];
    let mut order = vec![0];
    used[0] = true;
    for _ in 1..qs.len() {
        let cur = *order.last().unwrap();
        let next = (0..qs.len()).filter(|&i| !used[i]).min_by(|&a, &b| dist2(&qs[cur], &qs[a]).total_cmp(&dist2(&qs[cur], &qs[b])).then(a.cmp(&b))).unwrap();
        used[next] = true;
        order.push(next);
    }
    order
}

/// Thins by task-space radius, orders by joint-space proximity and projects large jumps.
pub fn postprocess(task: &TaskSpec, batch: &SampleBatch, cfg: &PostprocessConfig) -> Result<Vec<Vec<f64>>, SampleError> {
    let mut kept: Vec<usize> = Vec::new();
    let pts: Vec<_> = batch.poses.iter().map(|p| task.coverage_point_of(p)).collect();
    for i in 0..batch.len() {
        if kept.iter().all(|&j| (pts[i] - pts[j]).norm() >= cfg.thin_radius) {
            kept.push(i);
        }
    }
    let qs: Vec<Vec<f64>> = kept.iter().map(|&i| batch.configs[i].clone()).collect();
    let order = nearest_neighbor_order(&qs);
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(order.len());
    for &i in &order {
        let mut q = qs[i].clone();
        if let Some(prev) = out.last() {
            if dist2(&q, prev).sqrt() > cfg.jump_threshold {
                q = project(task, &q, prev, cfg)?;
            }
        }
        out.push(q);
    }
    Ok(out)
}

/// Gauss-Newton on `[r(q); √w (q − q_prev)]` starting from `start`.
fn project(task: &TaskSpec, start: &[f64], prev: &[f64], cfg: &PostprocessConfig) -> Result<Vec<f64>, SampleError> {
    let dof = prev.len();
    let sw = cfg.smooth_weight.sqrt();
    let mut q = start.to_vec();
    for _ in 0..cfg.projection_iters {
        let (r, j) = residuals(&task.constraints, &task.scene, &q, ResidualMode::Stacked)?;
        let m = r.len();
        let mut jj = DMatrix::zeros(m + dof, dof);
        let mut rr = DVector::zeros(m + dof);
        jj.view_mut((0, 0), (m, dof)).copy_from(&j);
        for i in 0..m {
            rr[i] = r[i];
        }
        for k in 0..dof {
            jj[(m + k, k)] = sw;
            rr[m + k] = sw * (q[k] - prev[k]);
        }
        let s = gauss_newton_step(&jj, &rr)?;
        for k in 0..dof {
            q[k] -= s.step[k];
        }
    }
    Ok(q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn kde_single_point_scalar_is_kernel_peak() {
        let h = 0.3;
        let r = kde_density(&[vec![1.7]], h);
        assert!((r[0] - 1.0 / (h * (2.0 * std::f64::consts::PI).sqrt())).abs() < 1e-15);
    }

    #[test]
    fn kde_is_shift_invariant() {
        let mut rng = seeds::Rng::seed_from_u64(1);
        let a: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|x| x.iter().map(|v| v + 0.25).collect()).collect();
        for (x, y) in kde_density(&a, 0.4).iter().zip(kde_density(&b, 0.4)) {
            assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn apportionment_hits_total_and_is_symmetric() {
        let c = apportion(&[1.0; 3], 10);
        assert_eq!(c.iter().sum::<usize>(), 10);
        assert_eq!(c, vec![4, 3, 3]);
        let c = apportion(&[0.5, 0.25, 0.25], 7);
        assert_eq!(c.iter().sum::<usize>(), 7);
    }

    #[test]
    fn equal_energies_replicate_evenly() {
        // points on a circle have equal densities
        let qs: Vec<Vec<f64>> = (0..8).map(|i| {
            let a = i as f64 * std::f64::consts::FRAC_PI_4;
            vec![a.cos(), a.sin()]
        }).collect();
        let out = resample_plan(&qs, &[0.0; 8], 4, 10, Some(0.5), Replication::Kde);
        assert_eq!(out.kept, vec![0, 1, 2, 3]);
        assert_eq!(out.counts.iter().sum::<usize>(), 10);
        assert!(out.counts.iter().all(|&c| c == 2 || c == 3));
    }

    #[test]
    fn isolated_sample_gets_most_replicas() {
        let mut qs: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64 * 0.01, 0.0]).collect();
        qs.push(vec![3.0, 3.0]);
        let n = qs.len();
        let plan = resample_plan(&qs, &vec![1.0; n], n, 50, Some(0.2), Replication::Kde);
        let max = *plan.counts.iter().max().unwrap();
        assert_eq!(plan.counts[6], max);
        // hand-computed densities: the cluster points see six near-peak kernels, the outlier one
        // densities: cluster points see six near-peak kernels, the outlier one,
        // so the outlier carries half the weight
        assert!((24..=26).contains(&plan.counts[6]), "{:?}", plan.counts);
        assert!(plan.counts[..6].iter().all(|&c| c <= 5));
    }

    #[test]
    fn resample_keeps_only_input_elements() {
        let qs: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i * i) as f64 * 0.1]).collect();
        let e: Vec<f64> = (0..20).map(|i| ((i * 7) % 5) as f64).collect();
        let out = resample(&qs, &e, 8, 20, None, Replication::Kde);
        assert_eq!(out.len(), 20);
        assert!(out.iter().all(|q| qs.contains(q)));
    }

    #[test]
    fn budget_split_sums_to_budget() {
        let cfg = SamplerConfig::default();
        let s = budget_split(&cfg);
        assert_eq!(s, vec![(150, 150), (150, 150)]);
        let one = budget_split(&SamplerConfig { sequential: false, budget: 601, ..cfg });
        assert_eq!(one.iter().map(|(a, b)| a + b).sum::<usize>(), 601);
        let plan = level_plan(32, 150);
        assert_eq!(plan[0], 32);
        assert_eq!(*plan.last().unwrap(), 1);
        assert!(plan.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn langevin_noise_has_scale_alpha() {
        let mut q = vec![0.0; 3];
        langevin_update(&mut q, &[0.0; 3], 0.25, &[1.0, -2.0, 0.5]);
        assert_eq!(q, vec![0.25, -0.5, 0.125]);
        let mut q = vec![1.0];
        langevin_update(&mut q, &[4.0], 0.5, &[0.0]);
        assert_eq!(q, vec![0.5]);
    }

    #[test]
    fn thinning_and_ordering() {
        let task = TaskSpec::builtin(1).unwrap();
        let qs = vec![vec![0.1; 6], vec![0.1; 6], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.2; 6]];
        let batch = SampleBatch::from_configs(&task, qs.clone(), vec![0.0; 4]).unwrap();
        let none = PostprocessConfig { thin_radius: 0.0, jump_threshold: f64::INFINITY, ..Default::default() };
        assert_eq!(postprocess(&task, &batch, &none).unwrap().len(), 4);
        let thin = PostprocessConfig { thin_radius: 1e-6, jump_threshold: f64::INFINITY, ..Default::default() };
        assert_eq!(postprocess(&task, &batch, &thin).unwrap().len(), 3);
    }

    #[test]
    fn nearest_neighbour_order_reduces_continuity_cost() {
        let mut rng = seeds::Rng::seed_from_u64(5);
        let qs: Vec<Vec<f64>> = (0..40).map(|_| (0..6).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let order = nearest_neighbor_order(&qs);
        let ordered: Vec<Vec<f64>> = order.iter().map(|&i| qs[i].clone()).collect();
        let c = continuity_cost(&ordered);
        for _ in 0..100 {
            let mut idx: Vec<usize> = (0..qs.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let shuffled: Vec<Vec<f64>> = idx.iter().map(|&i| qs[i].clone()).collect();
            assert!(c <= continuity_cost(&shuffled));
        }
    }
}
