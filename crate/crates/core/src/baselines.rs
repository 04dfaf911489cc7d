//! Reference samplers: Gauss-Newton restarts, the NLP-Sampling oracle used to
//! generate training data, and a rejection generator for shape tasks.

use crate::constraints::{residuals, slack, slack_norm, Constraint, ConstraintError, ConstraintSet, ResidualMode};
use crate::sample::{wrap_angle, SampleBatch, SampleError};
use crate::seeds;
use crate::solve::{gauss_newton_step, SolveError};
use crate::tasks::TaskSpec;
use nalgebra::DVector;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum BaselineError {
    #[error("task {0} uses learned shape constraints; the NLP oracle does not support it")]
    UnsupportedTask(u8),
    #[error("sample {index}: no feasible start after {retries} retries")]
    InfeasibleStart { index: usize, retries: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error(transparent)]
    Sample(#[from] SampleError),
}

/// Slack norm below which a sample counts as feasible.
pub const FEASIBILITY_TOL: f64 = 1e-4;
const MAX_HALVINGS: usize = 20;

fn residual_norm(task: &TaskSpec, cs: &ConstraintSet, q: &[f64], mode: ResidualMode) -> Result<f64, ConstraintError> {
    let (r, _) = residuals(cs, &task.scene, q, mode)?;
    Ok(slack_norm(&r))
}

/// One Gauss-Newton iteration with step halving. The point only moves if some
/// halving does not increase the residual norm; returns the new norm.
fn gn_iteration(task: &TaskSpec, cs: &ConstraintSet, q: &mut Vec<f64>, mode: ResidualMode) -> Result<f64, BaselineError> {
    let (r, j) = residuals(cs, &task.scene, q, mode)?;
    let r0 = slack_norm(&r);
    if r0 == 0.0 {
        return Ok(0.0);
    }
    let g = gauss_newton_step(&j, &DVector::from_vec(r))?.step;
    let mut t = 1.0;
    for _ in 0..=MAX_HALVINGS {
        let trial: Vec<f64> = q.iter().zip(g.iter()).map(|(x, s)| x - t * s).collect();
        let r1 = residual_norm(task, cs, &trial, mode)?;
        if r1 <= r0 {
            *q = trial;
            return Ok(r1);
        }
        t *= 0.5;
    }
    Ok(r0)
}

fn gaussian(dof: usize, std: f64, rng: &mut seeds::Rng) -> Vec<f64> {
    (0..dof).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn wrap(q: &mut [f64]) {
    for x in q.iter_mut() {
        *x = wrap_angle(*x);
    }
}

/// Independent damped Gauss-Newton restarts on the slack residual, each run for
/// exactly `iters` iterations from `N(0, init_std²)`. Energies are final slack norms.
pub fn gauss_newton_sample(task: &TaskSpec, n_samples: usize, iters: usize, init_std: f64, seed: u64) -> Result<SampleBatch, BaselineError> {
    let dof = task.scene.robot.dof();
    let mut rng = seeds::stream(seed, seeds::INIT);
    let inits: Vec<Vec<f64>> = (0..n_samples).map(|_| gaussian(dof, init_std, &mut rng)).collect();
    let mut configs = Vec::with_capacity(n_samples);
    let mut energies = Vec::with_capacity(n_samples);
    for mut q in inits {
        let mut e = residual_norm(task, &task.constraints, &q, ResidualMode::Slack)?;
        for _ in 0..iters {
            e = gn_iteration(task, &task.constraints, &mut q, ResidualMode::Slack)?;
        }
        if iters > 0 {
            wrap(&mut q);
        }
        configs.push(q);
        energies.push(e);
    }
    Ok(SampleBatch::from_configs(task, configs, energies)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NlpConfig {
    /// Weight of the task density term `f`, which is identically 0 here.
    pub gamma: f64,
    /// Weight of `‖s(q)‖²`.
    pub mu: f64,
    pub k_down: usize,
    pub k_burn: usize,
    /// Langevin step size of the interior phase.
    pub step: f64,
    pub init_std: f64,
    /// Fresh initialisations tried per sample before giving up.
    pub max_retries: usize,
    /// Gauss-Newton iterations of each projection back onto the feasible set.
    pub projection_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for NlpConfig {
    fn default() -> Self {
        NlpConfig {
            gamma: 0.0,
            mu: 1.0,
            k_down: 50,
            k_burn: 20,
            step: 0.05,
            init_std: 1.0,
            max_retries: 50,
            projection_iters: 20,
            tol: FEASIBILITY_TOL,
            seed: 0,
        }
    }
}

impl NlpConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.gamma >= 0.0 && self.mu >= 0.0) {
            return Err(BaselineError::Config("gamma and mu must be nonnegative".into()));
        }
        if !(self.step >= 0.0 && self.tol > 0.0 && self.init_std > 0.0) {
            return Err(BaselineError::Config("step, tol and init_std must be positive".into()));
        }
        Ok(())
    }
}

/// Whether the oracle can handle `task`: no constraint may depend on a shape.
pub fn nlp_supported(task: &TaskSpec) -> bool {
    task.constraints.constraints.iter().all(|c| c.uses_shape().is_none())
}

/// Gauss-Newton on the stacked residual until feasible or `iters` run out.
fn descend(task: &TaskSpec, cs: &ConstraintSet, q: &mut Vec<f64>, iters: usize, tol: f64) -> Result<f64, BaselineError> {
    let mut e = residual_norm(task, cs, q, ResidualMode::Stacked)?;
    for _ in 0..iters {
        if e < tol * 1e-2 {
            break;
        }
        e = gn_iteration(task, cs, q, ResidualMode::Stacked)?;
    }
    Ok(e)
}

fn slack_of(task: &TaskSpec, q: &[f64]) -> Result<f64, ConstraintError> {
    Ok(slack_norm(&slack(&task.constraints, &task.scene, q)?))
}

/// Langevin step on `F = γ f + μ ‖s‖²` with `f ≡ 0`.
fn interior_step(task: &TaskSpec, cfg: &NlpConfig, q: &mut [f64], rng: &mut seeds::Rng) -> Result<(), ConstraintError> {
    let (r, j) = residuals(&task.constraints, &task.scene, q, ResidualMode::Stacked)?;
    let grad = j.transpose() * DVector::from_vec(r) * (2.0 * cfg.mu);
    let a = cfg.step;
    for (k, x) in q.iter_mut().enumerate() {
        let xi: f64 = rng.sample(StandardNormal);
        *x += -0.5 * a * a * grad[k] + a * xi;
    }
    Ok(())
}

/// One oracle sample drawn from its own stream; `None` if every retry failed.
fn nlp_one(task: &TaskSpec, cfg: &NlpConfig, index: usize) -> Result<Option<Vec<f64>>, BaselineError> {
    let dof = task.scene.robot.dof();
    let mut rng = seeds::stream(cfg.seed, &format!("nlp/{index}"));
    for _ in 0..=cfg.max_retries {
        let mut q = gaussian(dof, cfg.init_std, &mut rng);
        if descend(task, &task.constraints, &mut q, cfg.k_down, cfg.tol)? >= cfg.tol {
            continue;
        }
        let mut last_feasible = q.clone();
        for _ in 0..cfg.k_burn {
            interior_step(task, cfg, &mut q, &mut rng)?;
            if slack_of(task, &q)? >= cfg.tol {
                descend(task, &task.constraints, &mut q, cfg.projection_iters, cfg.tol)?;
            }
            if slack_of(task, &q)? < cfg.tol {
                last_feasible.clone_from(&q);
            } else {
                q.clone_from(&last_feasible);
            }
        }
        let mut q = last_feasible;
        wrap(&mut q);
        if slack_of(task, &q)? < cfg.tol {
            return Ok(Some(q));
        }
    }
    Ok(None)
}

/// NLP-Sampling: descent to feasibility, then interior Langevin exploration with
/// projection. Every emitted sample has slack norm below `cfg.tol`.
pub fn nlp_sample(task: &TaskSpec, cfg: &NlpConfig, n_samples: usize) -> Result<SampleBatch, BaselineError> {
    cfg.validate()?;
    if !nlp_supported(task) {
        return Err(BaselineError::UnsupportedTask(task.id));
    }
    let mut configs = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        match nlp_one(task, cfg, i)? {
            Some(q) => configs.push(q),
            None => return Err(BaselineError::InfeasibleStart { index: i, retries: cfg.max_retries }),
        }
    }
    let energies = configs.iter().map(|q| slack_of(task, q)).collect::<Result<_, _>>()?;
    Ok(SampleBatch::from_configs(task, configs, energies)?)
}

/// Training data for shape tasks: midpoint targets drawn uniformly from the
/// analytic region, then Gauss-Newton inverse kinematics on the task with the
/// region constraint swapped for the drawn point.
pub fn shape_rejection_sample(task: &TaskSpec, cfg: &NlpConfig, n_samples: usize) -> Result<SampleBatch, BaselineError> {
    cfg.validate()?;
    let region = task
        .constraints
        .constraints
        .iter()
        .position(|c| matches!(c, Constraint::MidpointOnSurface { .. }))
        .ok_or_else(|| BaselineError::Config("task has no shape region".into()))?;
    let Constraint::MidpointOnSurface { shape } = task.constraints.constraints[region] else { unreachable!() };
    let shape = task.scene.shape(shape)?.clone();
    let (lo, hi) = shape.bounds();
    let dof = task.scene.robot.dof();
    let mut configs = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let mut rng = seeds::stream(cfg.seed, &format!("rejection/{i}"));
        let mut found = None;
        for _ in 0..=cfg.max_retries {
            let p = loop {
                let p = nalgebra::Vector3::from_fn(|k, _| rng.random_range(lo[k]..=hi[k]));
                if shape.sdf(&p) <= 0.0 {
                    break p;
                }
            };
            let mut cs = task.constraints.clone();
            cs.constraints[region] = Constraint::MidpointEq { target: [p.x, p.y, p.z] };
            let mut q = gaussian(dof, cfg.init_std, &mut rng);
            // the drawn point may be unreachable (off the arms' plane); the least-squares
            // solution is kept whenever it satisfies the original task
            descend(task, &cs, &mut q, cfg.k_down.max(cfg.projection_iters), cfg.tol)?;
            wrap(&mut q);
            if slack_of(task, &q)? < cfg.tol {
                found = Some(q);
                break;
            }
        }
        match found {
            Some(q) => configs.push(q),
            None => return Err(BaselineError::InfeasibleStart { index: i, retries: cfg.max_retries }),
        }
    }
    let energies = configs.iter().map(|q| slack_of(task, q)).collect::<Result<_, _>>()?;
    Ok(SampleBatch::from_configs(task, configs, energies)?)
}

/// Oracle dispatch: NLP-Sampling where supported, rejection sampling otherwise.
pub fn generate(task: &TaskSpec, cfg: &NlpConfig, n_samples: usize) -> Result<SampleBatch, BaselineError> {
    if nlp_supported(task) {
        nlp_sample(task, cfg, n_samples)
    } else {
        shape_rejection_sample(task, cfg, n_samples)
    }
}
