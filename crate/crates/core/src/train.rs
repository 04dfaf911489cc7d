//! Joint training of the energy networks, weighting model and SDF branch by
//! denoising score matching plus SDF regression.

use crate::constraints::ConstraintSet;
use crate::diff::{Mat, Tape, Var};
use crate::lie::{expmap, logmap, sample_twist, LieError, NoiseSchedule, Pose};
use crate::models::{AdamState, AdcsModel, Bound, Checkpoint, Clouds, ModelConfig, ModelError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
use crate::seeds;
use crate::shapes::Shape;
use crate::tasks::TaskSpec;
use nalgebra::Vector3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training data is empty")]
    EmptyDataset,
    #[error("non-finite loss at step {}: L_sdf={} L_diff={}", .0.step, .0.l_sdf, .0.l_diff)]
    NaNLoss(TrainRecord),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint does not match this configuration: {0}")]
    Resume(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lie(#[from] LieError),
}

/// Per-example scaling of the squared score residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeighting {
    /// `σ² ‖∇E − ε/σ²‖²`, balancing noise levels.
    SigmaSquared,
    /// `‖∇E − ε/σ²‖²` as written.
    Unweighted,
}

/// Learning-rate schedule over `steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from `lr` down to zero at the last step.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: LrDecay,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub levels: usize,
    /// Probability of training on a random subset containing the fundamental
    /// constraint instead of the full set.
    pub subset_prob: f64,
    pub sdf_weight: f64,
    /// Uniform plus near-surface SDF queries per shape and step.
    pub sdf_queries: usize,
    pub loss_weighting: LossWeighting,
    /// Shapes trained in the SDF branch in addition to the task's own.
    pub extra_shapes: Vec<Shape>,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 10000,
            batch_size: 64,
            lr: 1e-3,
            lr_decay: LrDecay::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 0.0,
            sigma_min: 0.01,
            sigma_max: 1.0,
            levels: 32,
            subset_prob: 0.0,
            sdf_weight: 1.0,
            sdf_queries: 64,
            loss_weighting: LossWeighting::SigmaSquared,
            extra_shapes: Vec::new(),
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0) || !(self.adam_eps > 0.0) {
            return bad("lr and adam_eps must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.levels < 2 {
            return bad("levels must be at least 2");
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(0.0..=1.0).contains(&self.subset_prob) {
            return bad("subset_prob must lie in [0, 1]");
        }
        Ok(())
    }

    /// Learning rate of the update that takes the counter from `step` to `step + 1`.
    pub fn lr_at(&self, step: u64) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine => {
                let frac = (step as f64 / self.steps.max(1) as f64).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, TrainError> {
        Ok(NoiseSchedule::geometric(self.sigma_min, self.sigma_max, self.levels)?)
    }

    /// Hash of every field, used to tag checkpoints.
    pub fn hash(&self) -> String {
        let s = serde_json::to_string(self).expect("config serialization");
        hex::encode(Sha256::digest(s.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: u64,
    pub l_sdf: f64,
    pub l_diff: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Adam over a parameter store.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, shapes: &[Mat]) -> Self {
        let z: Vec<Mat> = shapes.iter().map(|m| Mat::zeros(m.rows, m.cols)).collect();
        Adam { lr, beta1, beta2, eps, state: AdamState { t: 0, m: z.clone(), v: z } }
    }

    pub fn step(&mut self, params: &mut [Mat], grads: &[Mat]) {
        let s = &mut self.state;
        s.t += 1;
        let b1t = 1.0 - self.beta1.powi(s.t as i32);
        let b2t = 1.0 - self.beta2.powi(s.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(s.m.iter_mut().zip(s.v.iter_mut())) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / b1t;
                let vh = v.data[i] / b2t;
                p.data[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// One training example after perturbation.
#[derive(Debug, Clone)]
pub struct Perturbed {
    pub clean: Vec<Pose>,
    pub noisy: Vec<Pose>,
    pub sigma: f64,
    /// `logmap(H⁻¹ Ĥ)` per end effector, stacked.
    pub eps: Vec<f64>,
}

/// Draws a noise level and perturbs every end effector; retries when the
/// perturbation wraps past the logmap's domain.
pub fn perturb_example<R: Rng>(h: &[Pose], schedule: &NoiseSchedule, rng: &mut R) -> Perturbed {
    let k = rng.random_range(1..=schedule.len());
    let sigma = schedule.sigma(k);
    loop {
        let mut noisy = Vec::with_capacity(h.len());
        let mut eps = Vec::with_capacity(6 * h.len());
        let mut ok = true;
        for p in h {
            let t = sample_twist(sigma, rng);
            let hn = *p * expmap(&t);
            match logmap(&(p.inverse() * hn)) {
                Ok(d) => eps.extend(d.to_vector6().iter()),
                Err(_) => {
                    ok = false;
                    break;
                }
            }
            noisy.push(hn);
        }
        if ok {
            return Perturbed { clean: h.to_vec(), noisy, sigma, eps };
        }
    }
}

/// Score-matching loss for one constraint subset on a tape.
#[allow(clippy::too_many_arguments)]
pub fn score_matching_loss(
    model: &AdcsModel,
    tape: &mut Tape,
    p: &Bound,
    cs: &ConstraintSet,
    active: &[usize],
    batch: &[Perturbed],
    task: &TaskSpec,
    clouds: &Clouds,
    weighting: LossWeighting,
    pe_rng: &mut seeds::Rng,
) -> Result<Var, TrainError> {
    let noisy: Vec<Vec<Pose>> = batch.iter().map(|b| b.noisy.clone()).collect();
    let prep = model.prepare(tape, p, cs, active, &noisy, &task.scene, clouds)?;
    let sig: Vec<f64> = batch.iter().map(|b| b.sigma).collect();
    let temb = tape.constant(model.time_rows(&sig));
    let comp = model.composite(tape, p, &prep.tokens, temb, prep.six, pe_rng)?;
    let eps = tape.constant(Mat::from_vec(batch.len(), prep.six, batch.iter().flat_map(|b| b.eps.iter().copied()).collect()));
    let r = tape.sub(comp.score, eps);
    let r2 = tape.square(r);
    let per = tape.sum_rows(r2);
    let w: Vec<f64> = sig
        .iter()
        .map(|s| match weighting {
            LossWeighting::SigmaSquared => 1.0 / (s * s),
            LossWeighting::Unweighted => 1.0 / (s * s * s * s),
        })
        .collect();
    let w = tape.constant(Mat::from_vec(batch.len(), 1, w));
    let per = tape.mul(per, w);
    Ok(tape.mean_all(per))
}

/// Numeric score-matching loss with constant parameters.
pub fn score_matching_loss_value(
    model: &AdcsModel,
    cs: &ConstraintSet,
    active: &[usize],
    batch: &[Perturbed],
    task: &TaskSpec,
    clouds: &Clouds,
    weighting: LossWeighting,
    pe_rng: &mut seeds::Rng,
) -> Result<f64, TrainError> {
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false);
    let l = score_matching_loss(model, &mut tape, &p, cs, active, batch, task, clouds, weighting, pe_rng)?;
    Ok(tape.scalar(l))
}

/// An SDF training shape with its observed cloud.
#[derive(Debug, Clone)]
pub struct SdfShape {
    pub shape: Shape,
    pub cloud: Mat,
}

impl SdfShape {
    pub fn new(shape: Shape, points: usize, noise: f64, seed: u64, name: &str) -> Self {
        let mut rng = seeds::stream(seed, name);
        let pts = shape.sample_surface(points, noise, &mut rng);
        let cloud = Clouds::from_points(&[pts]).clouds.remove(0);
        SdfShape { shape, cloud }
    }
}

/// Uniform queries in the padded bounding box plus near-surface queries.
pub fn sdf_queries<R: Rng>(shape: &Shape, n: usize, rng: &mut R) -> Vec<Vector3<f64>> {
    let (lo, hi) = shape.bounds();
    let pad = 0.1;
    let mut q: Vec<Vector3<f64>> = (0..n)
        .map(|_| Vector3::from_fn(|i, _| rng.random_range(lo[i] - pad..hi[i] + pad)))
        .collect();
    for p in shape.sample_surface(n, 0.0, rng) {
        let e = Vector3::from_fn(|_, _| 0.02 * rng.sample::<f64, _>(StandardNormal));
        q.push(p + e);
    }
    q
}

/// SDF regression loss for one shape and query set.
pub fn sdf_loss(model: &AdcsModel, tape: &mut Tape, p: &Bound, s: &SdfShape, queries: &[Vector3<f64>]) -> Result<Var, TrainError> {
    let sdf = model.sdf.as_ref().ok_or(ModelError::NoSdf)?;
    let code = sdf.encode(tape, p, &s.cloud)?;
    let q = tape.constant(Mat::from_vec(queries.len(), 3, queries.iter().flat_map(|x| [x.x, x.y, x.z]).collect()));
    let pred = sdf.predict(tape, p, code, q);
    let truth = tape.constant(Mat::from_vec(queries.len(), 1, queries.iter().map(|x| s.shape.sdf(x)).collect()));
    let d = tape.sub(pred, truth);
    let d2 = tape.square(d);
    Ok(tape.mean_all(d2))
}

/// Training state that can be checkpointed and resumed.
pub struct Trainer {
    pub model: AdcsModel,
    pub adam: Adam,
    pub step: u64,
    pub cfg: TrainConfig,
    pub task: TaskSpec,
    clouds: Clouds,
    sdf_shapes: Vec<SdfShape>,
    data: Vec<Vec<Pose>>,
}

impl Trainer {
    pub fn new(task: &TaskSpec, data: Vec<Vec<Pose>>, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let schedule = cfg.schedule()?;
        let with_sdf = !cfg.extra_shapes.is_empty();
        let model = AdcsModel::new(cfg.model.clone(), &task.constraints, schedule, with_sdf, cfg.seed)?;
        let adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, &model.params.tensors);
        Self::assemble(task, data, cfg, model, adam, 0)
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(task: &TaskSpec, data: Vec<Vec<Pose>>, cfg: TrainConfig, ck: Checkpoint) -> Result<Self, TrainError> {
        cfg.validate()?;
        if ck.model.config != cfg.model {
            return Err(TrainError::Resume("model configuration differs".into()));
        }
        let mut adam = Adam::new(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, &ck.model.params.tensors);
        if let Some(st) = ck.optimizer {
            adam.state = st;
        }
        Self::assemble(task, data, cfg, ck.model, adam, ck.step)
    }

    fn assemble(task: &TaskSpec, data: Vec<Vec<Pose>>, cfg: TrainConfig, model: AdcsModel, adam: Adam, step: u64) -> Result<Self, TrainError> {
        if data.is_empty() && cfg.steps > step {
            return Err(TrainError::EmptyDataset);
        }
        let clouds = task.clouds();
        let mut sdf_shapes: Vec<SdfShape> = task
            .scene
            .shapes
            .iter()
            .zip(&clouds.clouds)
            .map(|(s, c)| SdfShape { shape: s.clone(), cloud: c.clone() })
            .collect();
        for (i, s) in cfg.extra_shapes.iter().enumerate() {
            sdf_shapes.push(SdfShape::new(s.clone(), task.cloud.points, task.cloud.noise, cfg.seed, &format!("extra{i}")));
        }
        Ok(Trainer { model, adam, step, cfg, task: task.clone(), clouds, sdf_shapes, data })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            step: self.step,
            model: self.model.clone(),
            optimizer: Some(self.adam.state.clone()),
            config_hash: self.cfg.hash(),
        }
    }

    /// One optimisation step. Randomness depends only on the seed and step index,
    /// so a resumed run reproduces an uninterrupted one.
    pub fn train_step(&mut self) -> Result<TrainRecord, TrainError> {
        let mut rng = seeds::stream(self.cfg.seed, &format!("train/{}", self.step));
        let mut pe_rng = seeds::stream(self.cfg.seed, &format!("{}/{}", seeds::PE, self.step));
        let cs = &self.task.constraints;
        let pose_level = cs.pose_level_indices();
        let mut active = vec![pose_level[0]];
        if rng.random_bool(self.cfg.subset_prob) {
            for &i in &pose_level[1..] {
                if rng.random_bool(0.5) {
                    active.push(i);
                }
            }
        } else {
            active.extend_from_slice(&pose_level[1..]);
        }
        let batch: Vec<Perturbed> = (0..self.cfg.batch_size)
            .map(|_| {
                let h = &self.data[rng.random_range(0..self.data.len())];
                perturb_example(h, &self.model.schedule, &mut rng)
            })
            .collect();

        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true);
        let l_diff = score_matching_loss(&self.model, &mut tape, &p, cs, &active, &batch, &self.task, &self.clouds, self.cfg.loss_weighting, &mut pe_rng)?;
        let mut total = l_diff;
        let mut l_sdf_var = None;
        if self.model.sdf.is_some() && !self.sdf_shapes.is_empty() {
            let uses_shape: Vec<usize> = active.iter().filter_map(|&i| cs.constraints[i].uses_shape()).collect();
            let mut acc: Option<Var> = None;
            for (si, s) in self.sdf_shapes.iter().enumerate() {
                let mut q = sdf_queries(&s.shape, self.cfg.sdf_queries, &mut rng);
                if uses_shape.contains(&si) {
                    q.extend(batch.iter().map(|b| (b.noisy[0].translation + b.noisy[1].translation) * 0.5));
                }
                let l = sdf_loss(&self.model, &mut tape, &p, s, &q)?;
                acc = Some(match acc {
                    None => l,
                    Some(prev) => tape.add(prev, l),
                });
            }
            let l = acc.expect("at least one shape");
            let l = tape.scale(l, 1.0 / self.sdf_shapes.len() as f64);
            l_sdf_var = Some(l);
            let lw = tape.scale(l, self.cfg.sdf_weight);
            total = tape.add(total, lw);
        }
        let l_diff_v = tape.scalar(l_diff);
        let l_sdf_v = l_sdf_var.map_or(0.0, |v| tape.scalar(v));
        let grads = tape.backward(total)?;
        let mut g: Vec<Mat> = p.vars.iter().map(|&v| grads.get(v)).collect();
        let norm = g.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt();
        let record = TrainRecord { step: self.step + 1, l_sdf: l_sdf_v, l_diff: l_diff_v, loss: l_sdf_v + l_diff_v, grad_norm: norm };
        if !record.loss.is_finite() || !norm.is_finite() {
            return Err(TrainError::NaNLoss(record));
        }
        if self.cfg.grad_clip > 0.0 && norm > self.cfg.grad_clip {
            let s = self.cfg.grad_clip / norm;
            for m in &mut g {
                for x in &mut m.data {
                    *x *= s;
                }
            }
        }
        self.adam.lr = self.cfg.lr_at(self.step);
        self.adam.step(&mut self.model.params.tensors, &g);
        self.step += 1;
        Ok(record)
    }

    /// Runs until `cfg.steps`, reporting every record.
    pub fn run(&mut self, mut log: impl FnMut(&TrainRecord)) -> Result<(), TrainError> {
        while self.step < self.cfg.steps {
            let r = self.train_step()?;
            log(&r);
        }
        Ok(())
    }
}

impl From<crate::diff::DiffError> for TrainError {
    fn from(e: crate::diff::DiffError) -> Self {
        TrainError::Model(ModelError::Diff(e))
    }
}

/// Mean of the first and last `frac` of a loss series.
pub fn head_tail_means(xs: &[f64], frac: f64) -> (f64, f64) {
    let n = ((xs.len() as f64 * frac).ceil() as usize).max(1).min(xs.len());
    let head = xs[..n].iter().sum::<f64>() / n as f64;
    let tail = xs[xs.len() - n..].iter().sum::<f64>() / n as f64;
    (head, tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Activation, Mlp, ParamStore};
    use crate::tasks::TaskSpec;

    fn tiny_cfg(steps: u64) -> TrainConfig {
        TrainConfig { steps, batch_size: 8, model: ModelConfig { hidden: 8, ..Default::default() }, ..Default::default() }
    }

    fn nominal_data(task: &TaskSpec) -> Vec<Vec<Pose>> {
        vec![task.nominal_pose_pair()]
    }

    #[test]
    fn zero_steps_leaves_the_initialization() {
        let t = TaskSpec::builtin(1).unwrap();
        let cfg = tiny_cfg(0);
        let fresh = AdcsModel::new(cfg.model.clone(), &t.constraints, cfg.schedule().unwrap(), false, cfg.seed).unwrap();
        let mut tr = Trainer::new(&t, nominal_data(&t), cfg).unwrap();
        tr.run(|_| {}).unwrap();
        assert_eq!(tr.model, fresh);
    }

    #[test]
    fn cosine_rate_decays_to_zero() {
        let c = TrainConfig { steps: 100, ..Default::default() };
        assert_eq!(c.lr_at(0), c.lr);
        assert!((c.lr_at(50) - 0.5 * c.lr).abs() < 1e-15);
        assert!(c.lr_at(100).abs() < 1e-15);
        assert!((1..100).all(|s| c.lr_at(s) < c.lr_at(s - 1)));
        let k = TrainConfig { lr_decay: LrDecay::Constant, ..c };
        assert_eq!(k.lr_at(99), k.lr);
    }

    #[test]
    fn records_are_deterministic_and_resume_matches() {
        let t = TaskSpec::builtin(4).unwrap();
        let run = |steps| {
            let mut tr = Trainer::new(&t, nominal_data(&t), tiny_cfg(steps)).unwrap();
            let mut rec = Vec::new();
            tr.run(|r| rec.push(r.clone())).unwrap();
            (rec, tr)
        };
        let (a, ta) = run(6);
        let (b, _) = run(6);
        assert_eq!(a, b);
        // interrupt a 6-step run after 3 steps
        let mut tr3 = Trainer::new(&t, nominal_data(&t), tiny_cfg(6)).unwrap();
        let first: Vec<TrainRecord> = (0..3).map(|_| tr3.train_step().unwrap()).collect();
        let ck = Checkpoint::from_json(&tr3.checkpoint().to_json()).unwrap();
        let mut resumed = Trainer::resume(&t, nominal_data(&t), tiny_cfg(6), ck).unwrap();
        let mut rest = Vec::new();
        resumed.run(|r| rest.push(r.clone())).unwrap();
        assert_eq!(first, a[..3].to_vec());
        assert_eq!(rest, a[3..].to_vec());
        assert_eq!(resumed.model, ta.model);
        assert!(a.iter().all(|r| r.loss >= 0.0 && r.loss.is_finite()));
    }

    #[test]
    fn shape_tasks_train_the_sdf_branch() {
        let t = TaskSpec::builtin(6).unwrap();
        let mut tr = Trainer::new(&t, nominal_data(&t), tiny_cfg(2)).unwrap();
        let mut rec = Vec::new();
        tr.run(|r| rec.push(r.clone())).unwrap();
        assert!(rec.iter().all(|r| r.l_sdf > 0.0));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let t = TaskSpec::builtin(1).unwrap();
        assert!(matches!(Trainer::new(&t, vec![], tiny_cfg(1)), Err(TrainError::EmptyDataset)));
    }

    #[test]
    fn tiny_learning_rate_moves_parameters_proportionally() {
        let t = TaskSpec::builtin(1).unwrap();
        let delta = |lr: f64| {
            let cfg = TrainConfig { lr, ..tiny_cfg(1) };
            let mut tr = Trainer::new(&t, nominal_data(&t), cfg).unwrap();
            let before = tr.model.params.clone();
            tr.run(|_| {}).unwrap();
            before.tensors.iter().zip(&tr.model.params.tensors).flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs())).fold(0.0, f64::max)
        };
        let d1 = delta(1e-6);
        let d2 = delta(1e-7);
        assert!(d1 > 0.0 && (d1 / d2 - 10.0).abs() < 1e-3, "{d1} {d2}");
    }

    #[test]
    fn perfect_score_gives_zero_loss() {
        // a model whose scaled score equals ε exactly: residual zero by construction
        let eps = vec![0.1; 12];
        let mut tape = Tape::new();
        let s = tape.constant(Mat::from_vec(1, 12, eps.clone()));
        let e = tape.constant(Mat::from_vec(1, 12, eps));
        let r = tape.sub(s, e);
        let r2 = tape.square(r);
        let l = tape.mean_all(r2);
        assert_eq!(tape.scalar(l), 0.0);
    }

    #[test]
    fn toy_quadratic_score_is_learned() {
        // 1-D data at μ: the perturbed score at noise σ is -(x - μ)/σ².
        let mu = 0.3;
        let sigma = 0.5;
        let mut store = ParamStore::default();
        let mut rng = seeds::stream(0, "toy");
        let mlp = Mlp::new(&mut store, "toy", &[1, 16, 16, 1], Activation::Softplus, &mut rng);
        let mut adam = Adam::new(1e-2, 0.9, 0.999, 1e-8, &store.tensors);
        for _ in 0..1500 {
            let xs: Vec<f64> = (0..64).map(|_| mu + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true);
            let x = tape.constant(Mat::from_vec(64, 1, xs.clone()));
            // with E = g/σ², σ²∇E = ∇g should equal x - μ
            let (_, dx) = mlp.energy_with_grad(&mut tape, &p, x);
            let target = tape.constant(Mat::from_vec(64, 1, xs.iter().map(|x| x - mu).collect()));
            let r = tape.sub(dx, target);
            let r2 = tape.square(r);
            let l = tape.mean_all(r2);
            let gr = tape.backward(l).unwrap();
            let gs: Vec<Mat> = p.vars.iter().map(|&v| gr.get(v)).collect();
            adam.step(&mut store.tensors, &gs);
        }
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let probe: Vec<f64> = vec![mu - 0.6, mu - 0.3, mu + 0.3, mu + 0.6];
        let x = tape.constant(Mat::from_vec(4, 1, probe.clone()));
        let (_, dx) = mlp.energy_with_grad(&mut tape, &p, x);
        for (i, xi) in probe.iter().enumerate() {
            let learned = -tape.value(dx).get(i, 0) / (sigma * sigma);
            let truth = -(xi - mu) / (sigma * sigma);
            assert!((learned - truth).abs() <= 0.1 * truth.abs(), "x={xi}: {learned} vs {truth}");
        }
    }

    #[test]
    fn head_tail_means_split_the_series() {
        let xs: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (h, t) = head_tail_means(&xs, 0.1);
        assert_eq!(h, 4.5);
        assert_eq!(t, 94.5);
    }
}
