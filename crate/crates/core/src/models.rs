//! Energy networks, point-cloud encoder, SDF network and weighting models.
//!
//! Every energy network returns `g = ½‖u‖²` for an MLP output `u`, and the
//! energy at noise level σ is `g / σ²`. Gradients of `g` with respect to the
//! network input are built explicitly as forward tape ops, so a single
//! backward pass trains parameters through the score.

use crate::constraints::{feature_jet, Constraint, ConstraintError, ConstraintSet, Scene, KIND_TAGS};
use crate::diff::{DiffError, Mat, Tape, Var};
use crate::lie::{NoiseSchedule, Pose};
use crate::seeds;
use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::rc::Rc;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{got} energy tokens exceed the configured maximum of {max}")]
    TooManyConstraints { got: usize, max: usize },
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("no energy network for `{0}`")]
    MissingNetwork(String),
    #[error("model has no SDF branch but the constraint set references a shape")]
    NoSdf,
    #[error("missing point cloud for shape {0}")]
    MissingCloud(usize),
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingKind {
    Fixed,
    Mlp,
    Cwt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CwtConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn: usize,
    pub pe_scale: f64,
    pub freeze_pe: bool,
    pub pe_seed: u64,
}

impl Default for CwtConfig {
    fn default() -> Self {
        CwtConfig { dim: 32, heads: 2, blocks: 1, ffn: 64, pe_scale: 0.1, freeze_pe: false, pe_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub energy_out: usize,
    pub time_dim: usize,
    pub activation: Activation,
    pub shape_code_dim: usize,
    pub point_hidden: usize,
    pub sdf_hidden: usize,
    pub n_max: usize,
    pub weighting: WeightingKind,
    /// Per-slot weights for the fixed mode; empty means uniform.
    pub fixed_weights: Vec<f64>,
    pub weight_mlp_hidden: usize,
    pub cwt: CwtConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: 32,
            energy_out: 8,
            time_dim: 8,
            activation: Activation::Softplus,
            shape_code_dim: 16,
            point_hidden: 32,
            sdf_hidden: 64,
            n_max: 6,
            weighting: WeightingKind::Cwt,
            fixed_weights: Vec::new(),
            weight_mlp_hidden: 32,
            cwt: CwtConfig::default(),
        }
    }
}

/// Flat parameter storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl ParamStore {
    fn add(&mut self, name: String, m: Mat) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    fn xavier<R: Rng>(&mut self, name: String, fan_in: usize, fan_out: usize, rng: &mut R) -> usize {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        self.add(name, Mat::from_vec(fan_in, fan_out, data))
    }

    fn zeros(&mut self, name: String, r: usize, c: usize) -> usize {
        self.add(name, Mat::zeros(r, c))
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Binds every tensor onto a tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| if trainable { tape.leaf(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        Bound { vars }
    }
}

/// Parameters placed on a specific tape.
pub struct Bound {
    pub vars: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<(usize, usize)>,
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Mlp {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let wi = store.xavier(format!("{name}.w{i}"), w[0], w[1], rng);
                let bi = store.zeros(format!("{name}.b{i}"), 1, w[1]);
                (wi, bi)
            })
            .collect();
        Mlp { layers, activation, in_dim: dims[0], out_dim: *dims.last().unwrap() }
    }

    fn act(&self, tape: &mut Tape, z: Var) -> Var {
        match self.activation {
            Activation::Softplus => tape.softplus(z),
            Activation::Tanh => tape.tanh(z),
        }
    }

    fn act_grad(&self, tape: &mut Tape, z: Var, h: Var) -> Var {
        match self.activation {
            Activation::Softplus => tape.sigmoid(z),
            Activation::Tanh => {
                let h2 = tape.square(h);
                let n = tape.scale(h2, -1.0);
                tape.add_scalar(n, 1.0)
            }
        }
    }

    /// Forward pass returning the pre-activations and activations of every hidden layer.
    fn forward_trace(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Vec<Var>, Vec<Var>, Var) {
        assert_eq!(x.cols, self.in_dim, "mlp input width");
        let mut zs = Vec::new();
        let mut hs = Vec::new();
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, p.vars[w]);
            let z = tape.add_row(z, p.vars[b]);
            if i == last {
                return (zs, hs, z);
            }
            let a = self.act(tape, z);
            zs.push(z);
            hs.push(a);
            h = a;
        }
        unreachable!()
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        self.forward_trace(tape, p, x).2
    }

    /// Backpropagates `seed` (gradient at the output) to the input as tape ops.
    fn input_grad(&self, tape: &mut Tape, p: &Bound, zs: &[Var], hs: &[Var], seed: Var) -> Var {
        let mut delta = seed;
        for i in (0..self.layers.len()).rev() {
            let w = p.vars[self.layers[i].0];
            let d = tape.matmul_bt(delta, w);
            if i == 0 {
                return d;
            }
            let g = self.act_grad(tape, zs[i - 1], hs[i - 1]);
            delta = tape.mul(d, g);
        }
        unreachable!()
    }

    /// `g = ½‖u(x)‖²` per row and its input gradient.
    pub fn energy_with_grad(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Var, Var) {
        let (zs, hs, u) = self.forward_trace(tape, p, x);
        let u2 = tape.square(u);
        let s = tape.sum_rows(u2);
        let g = tape.scale(s, 0.5);
        let dx = self.input_grad(tape, p, &zs, &hs, u);
        (g, dx)
    }

    /// Scalar output per row and its input gradient.
    pub fn scalar_with_grad(&self, tape: &mut Tape, p: &Bound, x: Var) -> (Var, Var) {
        assert_eq!(self.out_dim, 1);
        let (zs, hs, y) = self.forward_trace(tape, p, x);
        let ones = tape.constant(Mat::from_vec(y.rows, 1, vec![1.0; y.rows]));
        let dx = self.input_grad(tape, p, &zs, &hs, ones);
        (y, dx)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdfModel {
    pub encoder: Mlp,
    pub net: Mlp,
}

impl SdfModel {
    /// Shape code: per-point MLP followed by a max over points.
    pub fn encode(&self, tape: &mut Tape, p: &Bound, cloud: &Mat) -> Result<Var, ModelError> {
        if cloud.rows == 0 {
            return Err(ModelError::EmptyCloud);
        }
        let pts = tape.constant(cloud.clone());
        let h = self.encoder.forward(tape, p, pts);
        Ok(tape.max_over_rows(h))
    }

    /// Predicted SDF (B×1) and its gradient with respect to the query (B×3).
    pub fn predict_with_grad(&self, tape: &mut Tape, p: &Bound, code: Var, queries: Var) -> (Var, Var) {
        let zb = tape.broadcast_rows(code, queries.rows);
        let x = tape.concat_cols(&[zb, queries]);
        let (y, dx) = self.net.scalar_with_grad(tape, p, x);
        let gq = tape.slice_cols(dx, code.cols, 3);
        (y, gq)
    }

    pub fn predict(&self, tape: &mut Tape, p: &Bound, code: Var, queries: Var) -> Var {
        let zb = tape.broadcast_rows(code, queries.rows);
        let x = tape.concat_cols(&[zb, queries]);
        self.net.forward(tape, p, x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwtBlock {
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ffn: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CwtParams {
    pub embed_w: usize,
    pub embed_b: usize,
    pub kind_embed: usize,
    pub blocks: Vec<CwtBlock>,
    pub head: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Weighting {
    Fixed(Vec<f64>),
    Mlp(Mlp),
    Cwt(CwtParams),
}

/// Token type for the weighting model: the fundamental energy or a pair with kind `k`.
pub fn kind_slot(kind: usize, unary: bool) -> usize {
    if unary {
        KIND_TAGS.len() + kind
    } else {
        kind
    }
}

/// Number of distinct token types.
pub const KIND_SLOTS: usize = 2 * KIND_TAGS.len();

/// Sinusoidal embedding of a continuous level coordinate in `[0, 1]`.
pub fn time_embedding(frac: f64, dim: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dim);
    for j in 0..dim / 2 {
        let a = frac * std::f64::consts::PI * (1u64 << j) as f64;
        out.push(a.sin());
        out.push(a.cos());
    }
    out
}

/// Network key of the unary fundamental energy or of a pair.
pub fn net_key(c0: &Constraint, ci: Option<&Constraint>) -> String {
    match ci {
        None => c0.tag().to_string(),
        Some(c) => format!("{}+{}", c0.tag(), c.tag()),
    }
}

/// Complete learned model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdcsModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub nets: BTreeMap<String, Mlp>,
    pub sdf: Option<SdfModel>,
    pub weighting: Weighting,
    pub schedule: NoiseSchedule,
}

/// Width of the network input contributed by a constraint.
pub fn input_width(c: &Constraint, cfg: &ModelConfig) -> usize {
    match c {
        Constraint::MidpointOnSurface { .. } => 1 + cfg.shape_code_dim,
        _ => c.feature_dim(),
    }
}

impl AdcsModel {
    /// Fresh model with networks for the pose-level constraints of `cs`.
    pub fn new(cfg: ModelConfig, cs: &ConstraintSet, schedule: NoiseSchedule, with_sdf: bool, seed: u64) -> Result<Self, ModelError> {
        let mut rng = seeds::stream(seed, seeds::INIT);
        let mut params = ParamStore::default();
        let learned = cs.pose_level_indices();
        if learned.len() > cfg.n_max {
            return Err(ModelError::TooManyConstraints { got: learned.len(), max: cfg.n_max });
        }
        let c0 = &cs.constraints[learned[0]];
        let mut nets = BTreeMap::new();
        let h = cfg.hidden;
        let mut add_net = |key: String, in_w: usize, params: &mut ParamStore, rng: &mut seeds::Rng| {
            if !nets.contains_key(&key) {
                let dims = [in_w + cfg.time_dim, h, h, h, h, cfg.energy_out];
                let m = Mlp::new(params, &format!("energy.{key}"), &dims, cfg.activation, rng);
                nets.insert(key, m);
            }
        };
        add_net(net_key(c0, None), input_width(c0, &cfg), &mut params, &mut rng);
        for &i in &learned[1..] {
            let ci = &cs.constraints[i];
            add_net(net_key(c0, Some(ci)), input_width(c0, &cfg) + input_width(ci, &cfg), &mut params, &mut rng);
        }
        let needs_sdf = with_sdf || learned.iter().any(|&i| cs.constraints[i].uses_shape().is_some());
        let sdf = if needs_sdf {
            let ph = cfg.point_hidden;
            let encoder = Mlp::new(&mut params, "pc_encoder", &[3, ph, ph, cfg.shape_code_dim], Activation::Tanh, &mut rng);
            let sh = cfg.sdf_hidden;
            let net = Mlp::new(&mut params, "sdf", &[cfg.shape_code_dim + 3, sh, sh, sh, 1], Activation::Softplus, &mut rng);
            Some(SdfModel { encoder, net })
        } else {
            None
        };
        let weighting = match cfg.weighting {
            WeightingKind::Fixed => {
                let w = if cfg.fixed_weights.is_empty() { vec![1.0; cfg.n_max] } else { cfg.fixed_weights.clone() };
                Weighting::Fixed(w)
            }
            WeightingKind::Mlp => {
                let n = cfg.n_max;
                let wh = cfg.weight_mlp_hidden;
                Weighting::Mlp(Mlp::new(&mut params, "weight_mlp", &[2 * n, wh, wh, n], Activation::Tanh, &mut rng))
            }
            WeightingKind::Cwt => {
                let d = cfg.cwt.dim;
                let embed_w = params.xavier("cwt.embed_w".into(), 1, d, &mut rng);
                let embed_b = params.zeros("cwt.embed_b".into(), 1, d);
                let kind_embed = params.xavier("cwt.kind_embed".into(), KIND_SLOTS, d, &mut rng);
                let blocks = (0..cfg.cwt.blocks)
                    .map(|b| CwtBlock {
                        wq: params.xavier(format!("cwt.b{b}.wq"), d, d, &mut rng),
                        wk: params.xavier(format!("cwt.b{b}.wk"), d, d, &mut rng),
                        wv: params.xavier(format!("cwt.b{b}.wv"), d, d, &mut rng),
                        wo: params.xavier(format!("cwt.b{b}.wo"), d, d, &mut rng),
                        ffn: Mlp::new(&mut params, &format!("cwt.b{b}.ffn"), &[d, cfg.cwt.ffn, d], Activation::Tanh, &mut rng),
                    })
                    .collect();
                let head = Mlp::new(&mut params, "cwt.head", &[d, 1], Activation::Tanh, &mut rng);
                Weighting::Cwt(CwtParams { embed_w, embed_b, kind_embed, blocks, head })
            }
        };
        Ok(AdcsModel { config: cfg, params, nets, sdf, weighting, schedule })
    }

    pub fn time_fraction(&self, sigma: f64) -> f64 {
        self.schedule.level_fraction(sigma)
    }

    /// Normalized weights (B×T) for token energies `g` (each B×1).
    pub fn weights(&self, tape: &mut Tape, p: &Bound, g: &[Var], slots: &[usize], pe_rng: &mut seeds::Rng) -> Result<Var, ModelError> {
        let t = g.len();
        if t > self.config.n_max {
            return Err(ModelError::TooManyConstraints { got: t, max: self.config.n_max });
        }
        let b = g[0].rows;
        match &self.weighting {
            Weighting::Fixed(w) => {
                let active = &w[..t];
                let s: f64 = active.iter().sum();
                let row: Vec<f64> = active.iter().map(|x| x / s).collect();
                let mut data = Vec::with_capacity(b * t);
                for _ in 0..b {
                    data.extend_from_slice(&row);
                }
                Ok(tape.constant(Mat::from_vec(b, t, data)))
            }
            Weighting::Mlp(mlp) => {
                let n = self.config.n_max;
                let feats: Vec<Var> = g.iter().map(|&x| tape.log1p(x)).collect();
                let mut parts = feats.clone();
                if n > t {
                    parts.push(tape.constant(Mat::zeros(b, n - t)));
                }
                let mut mask = vec![0.0; b * n];
                let mut bias = vec![0.0; n];
                for r in 0..b {
                    for j in 0..t {
                        mask[r * n + j] = 1.0;
                    }
                }
                for v in bias.iter_mut().skip(t) {
                    *v = -1e9;
                }
                parts.push(tape.constant(Mat::from_vec(b, n, mask)));
                let x = tape.concat_cols(&parts);
                let logits = mlp.forward(tape, p, x);
                let bias = tape.constant(Mat::from_vec(1, n, bias));
                let logits = tape.add_row(logits, bias);
                let w = tape.softmax_rows(logits);
                Ok(tape.slice_cols(w, 0, t))
            }
            Weighting::Cwt(c) => Ok(self.cwt_weights(tape, p, c, g, slots, pe_rng)),
        }
    }

    fn cwt_weights(&self, tape: &mut Tape, p: &Bound, c: &CwtParams, g: &[Var], slots: &[usize], pe_rng: &mut seeds::Rng) -> Var {
        let cfg = &self.config.cwt;
        let d = cfg.dim;
        let mut frozen;
        let rng: &mut seeds::Rng = if cfg.freeze_pe {
            frozen = seeds::Rng::seed_from_u64(cfg.pe_seed);
            &mut frozen
        } else {
            pe_rng
        };
        let mut x: Vec<Var> = Vec::with_capacity(g.len());
        for (j, &gj) in g.iter().enumerate() {
            let l = tape.log1p(gj);
            let e = tape.matmul(l, p.vars[c.embed_w]);
            let e = tape.add_row(e, p.vars[c.embed_b]);
            let k = tape.gather_rows(p.vars[c.kind_embed], &[slots[j]]);
            let e = tape.add_row(e, k);
            let pe: Vec<f64> = (0..d).map(|_| cfg.pe_scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let pe = tape.constant(Mat::from_vec(1, d, pe));
            x.push(tape.add_row(e, pe));
        }
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for blk in &c.blocks {
            let qs: Vec<Var> = x.iter().map(|&xi| tape.matmul(xi, p.vars[blk.wq])).collect();
            let ks: Vec<Var> = x.iter().map(|&xi| tape.matmul(xi, p.vars[blk.wk])).collect();
            let vs: Vec<Var> = x.iter().map(|&xi| tape.matmul(xi, p.vars[blk.wv])).collect();
            let mut next = Vec::with_capacity(x.len());
            for j in 0..x.len() {
                let mut head_out = Vec::with_capacity(heads);
                for h in 0..heads {
                    let qj = tape.slice_cols(qs[j], h * dh, dh);
                    let mut scores = Vec::with_capacity(x.len());
                    let mut vh = Vec::with_capacity(x.len());
                    for l in 0..x.len() {
                        let kl = tape.slice_cols(ks[l], h * dh, dh);
                        let prod = tape.mul(qj, kl);
                        let s = tape.sum_rows(prod);
                        scores.push(tape.scale(s, scale));
                        vh.push(tape.slice_cols(vs[l], h * dh, dh));
                    }
                    let sc = tape.concat_cols(&scores);
                    let a = tape.softmax_rows(sc);
                    let mut acc: Option<Var> = None;
                    for (l, &v) in vh.iter().enumerate() {
                        let al = tape.slice_cols(a, l, 1);
                        let t = tape.mul_col(v, al);
                        acc = Some(match acc {
                            None => t,
                            Some(prev) => tape.add(prev, t),
                        });
                    }
                    head_out.push(acc.unwrap());
                }
                let o = tape.concat_cols(&head_out);
                let o = tape.matmul(o, p.vars[blk.wo]);
                let r = tape.add(x[j], o);
                let f = blk.ffn.forward(tape, p, r);
                next.push(tape.add(r, f));
            }
            x = next;
        }
        let logits: Vec<Var> = x.iter().map(|&xi| c.head.forward(tape, p, xi)).collect();
        let l = tape.concat_cols(&logits);
        tape.softmax_rows(l)
    }
}

/// How a feature block's input gradient maps to end-effector twists.
#[derive(Clone)]
pub enum GradMap {
    /// Per-row constant `d × 6n` Jacobian.
    Const(Rc<Vec<f64>>),
    /// Learned SDF value: gradient wrt the midpoint (B×3) and the per-row `3 × 6n` midpoint Jacobian.
    Sdf { grad_m: Var, dm: Rc<Vec<f64>> },
    /// Pose-independent input (shape code).
    None,
}

#[derive(Clone)]
pub struct FeatureBlock {
    pub value: Var,
    pub map: GradMap,
}

/// One energy token: the fundamental energy or a pair energy.
pub struct TokenSpec {
    pub key: String,
    pub slot: usize,
    pub blocks: Vec<FeatureBlock>,
}

/// Outputs of the weighted energy composition `σ² E = Σ_j w_j g_j` on a tape.
pub struct Composite {
    /// Token energies `g_j` (B×1), unscaled by σ².
    pub tokens: Vec<Var>,
    /// Weights (B×T).
    pub weights: Var,
    /// `σ² E` per row (B×1).
    pub energy: Var,
    /// `σ² ∇_δ E` per row (B×6n) with weights treated as constants.
    pub score: Var,
}

impl AdcsModel {
    fn token_energy(&self, tape: &mut Tape, p: &Bound, tok: &TokenSpec, temb: Var, six: usize) -> Result<(Var, Var), ModelError> {
        let net = self.nets.get(&tok.key).ok_or_else(|| ModelError::MissingNetwork(tok.key.clone()))?;
        let mut parts: Vec<Var> = tok.blocks.iter().map(|b| b.value).collect();
        parts.push(temb);
        let x = tape.concat_cols(&parts);
        let (g, dx) = net.energy_with_grad(tape, p, x);
        let mut off = 0;
        let mut grad: Option<Var> = None;
        for b in &tok.blocks {
            let w = b.value.cols;
            let contrib = match &b.map {
                GradMap::Const(jac) => {
                    let d = tape.slice_cols(dx, off, w);
                    Some(tape.row_linear(d, jac.clone(), six))
                }
                GradMap::Sdf { grad_m, dm } => {
                    let d = tape.slice_cols(dx, off, w);
                    let gm = tape.mul_col(*grad_m, d);
                    Some(tape.row_linear(gm, dm.clone(), six))
                }
                GradMap::None => None,
            };
            if let Some(c) = contrib {
                grad = Some(match grad {
                    None => c,
                    Some(prev) => tape.add(prev, c),
                });
            }
            off += w;
        }
        let grad = match grad {
            Some(g) => g,
            None => tape.constant(Mat::zeros(g.rows, six)),
        };
        Ok((g, grad))
    }

    /// Builds the composed energy and its twist gradient for prepared tokens.
    pub fn composite(&self, tape: &mut Tape, p: &Bound, tokens: &[TokenSpec], temb: Var, six: usize, pe_rng: &mut seeds::Rng) -> Result<Composite, ModelError> {
        let mut gs = Vec::with_capacity(tokens.len());
        let mut grads = Vec::with_capacity(tokens.len());
        for t in tokens {
            let (g, gr) = self.token_energy(tape, p, t, temb, six)?;
            gs.push(g);
            grads.push(gr);
        }
        let slots: Vec<usize> = tokens.iter().map(|t| t.slot).collect();
        let w = self.weights(tape, p, &gs, &slots, pe_rng)?;
        let n = tokens.len();
        let w0 = tape.slice_cols(w, 0, 1);
        let mut coeff0 = w0;
        let mut energy = tape.mul(w0, gs[0]);
        let mut score: Option<Var> = None;
        for i in 1..n {
            let wi = tape.slice_cols(w, i, 1);
            coeff0 = tape.sub(coeff0, wi);
            let diff = tape.sub(gs[i], gs[0]);
            let term = tape.mul(wi, diff);
            energy = tape.add(energy, term);
            let s = tape.mul_col(grads[i], wi);
            score = Some(match score {
                None => s,
                Some(prev) => tape.add(prev, s),
            });
        }
        let s0 = tape.mul_col(grads[0], coeff0);
        let score = match score {
            None => s0,
            Some(prev) => tape.add(prev, s0),
        };
        Ok(Composite { tokens: gs, weights: w, energy, score })
    }
}

/// Point clouds per scene shape, as n×3 matrices.
#[derive(Debug, Clone, Default)]
pub struct Clouds {
    pub clouds: Vec<Mat>,
}

impl Clouds {
    pub fn from_points(points: &[Vec<Vector3<f64>>]) -> Self {
        Clouds {
            clouds: points
                .iter()
                .map(|pts| Mat::from_vec(pts.len(), 3, pts.iter().flat_map(|p| [p.x, p.y, p.z]).collect()))
                .collect(),
        }
    }

    pub fn get(&self, i: usize) -> Result<&Mat, ModelError> {
        self.clouds.get(i).ok_or(ModelError::MissingCloud(i))
    }
}

/// Numeric midpoint and its twist Jacobian for one pose tuple.
fn midpoint_and_jac(poses: &[Pose]) -> (Vector3<f64>, DMatrix<f64>) {
    let six = 6 * poses.len();
    let m = (poses[0].translation + poses[1].translation) * 0.5;
    let mut j = DMatrix::zeros(3, six);
    for e in 0..2 {
        j.view_mut((0, 6 * e + 3), (3, 3)).copy_from(&(poses[e].rotation.matrix() * 0.5));
    }
    (m, j)
}

fn push_row_major(out: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            out.push(m[(r, c)]);
        }
    }
}

/// Tape-side inputs for a batch of pose tuples under a constraint subset.
pub struct PreparedBatch {
    pub tokens: Vec<TokenSpec>,
    pub six: usize,
}

impl AdcsModel {
    /// Learned outward normals at the midpoints of `poses` (numeric, detached).
    pub fn learned_normals(&self, cloud: &Mat, points: &[Vector3<f64>]) -> Result<Vec<Vector3<f64>>, ModelError> {
        let sdf = self.sdf.as_ref().ok_or(ModelError::NoSdf)?;
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let code = sdf.encode(&mut tape, &p, cloud)?;
        let q = tape.constant(Mat::from_vec(points.len(), 3, points.iter().flat_map(|x| [x.x, x.y, x.z]).collect()));
        let (_, g) = sdf.predict_with_grad(&mut tape, &p, code, q);
        let gv = tape.value(g);
        Ok((0..points.len())
            .map(|r| {
                let v = Vector3::new(gv.get(r, 0), gv.get(r, 1), gv.get(r, 2));
                let n = v.norm();
                if n > 1e-12 {
                    v / n
                } else {
                    Vector3::z()
                }
            })
            .collect())
    }

    /// Prepares tokens for `active` (indices into `cs`, first is the fundamental
    /// constraint). Shape codes are encoded on `tape` with parameters `p`.
    pub fn prepare(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cs: &ConstraintSet,
        active: &[usize],
        poses: &[Vec<Pose>],
        scene: &Scene,
        clouds: &Clouds,
    ) -> Result<PreparedBatch, ModelError> {
        let b = poses.len();
        let n = poses.first().map_or(2, |x| x.len());
        let six = 6 * n;
        let mut codes: BTreeMap<usize, Var> = BTreeMap::new();
        let mut blocks_for = |c: &Constraint, tape: &mut Tape| -> Result<Vec<FeatureBlock>, ModelError> {
            match c {
                Constraint::MidpointOnSurface { shape } => {
                    let sdf = self.sdf.as_ref().ok_or(ModelError::NoSdf)?;
                    let code = match codes.get(shape) {
                        Some(v) => *v,
                        None => {
                            let v = sdf.encode(tape, p, clouds.get(*shape)?)?;
                            codes.insert(*shape, v);
                            v
                        }
                    };
                    let mut ms = Vec::with_capacity(b * 3);
                    let mut dm = Vec::with_capacity(b * 3 * six);
                    for ps in poses {
                        let (m, j) = midpoint_and_jac(ps);
                        ms.extend_from_slice(&[m.x, m.y, m.z]);
                        push_row_major(&mut dm, &j);
                    }
                    let q = tape.constant(Mat::from_vec(b, 3, ms));
                    let (s, gq) = sdf.predict_with_grad(tape, p, code, q);
                    let zb = tape.broadcast_rows(code, b);
                    Ok(vec![FeatureBlock { value: s, map: GradMap::Sdf { grad_m: gq, dm: Rc::new(dm) } }, FeatureBlock { value: zb, map: GradMap::None }])
                }
                _ => {
                    let normals = if let Constraint::SurfaceNormalOrientation { shape, .. } = c {
                        let pts: Vec<Vector3<f64>> = poses.iter().map(|ps| midpoint_and_jac(ps).0).collect();
                        Some(self.learned_normals(clouds.get(*shape)?, &pts)?)
                    } else {
                        None
                    };
                    let d = c.feature_dim();
                    let mut vals = Vec::with_capacity(b * d);
                    let mut jac = Vec::with_capacity(b * d * six);
                    for (r, ps) in poses.iter().enumerate() {
                        let jet = feature_jet(c, ps, scene, normals.as_ref().map(|v| v[r]))?;
                        vals.extend_from_slice(&jet.value);
                        push_row_major(&mut jac, &jet.jac);
                    }
                    Ok(vec![FeatureBlock { value: tape.constant(Mat::from_vec(b, d, vals)), map: GradMap::Const(Rc::new(jac)) }])
                }
            }
        };
        let c0 = &cs.constraints[active[0]];
        let f0 = blocks_for(c0, tape)?;
        let mut tokens = vec![TokenSpec { key: net_key(c0, None), slot: kind_slot(c0.kind_index(), true), blocks: f0.clone() }];
        for &i in &active[1..] {
            let ci = &cs.constraints[i];
            let mut blocks = f0.clone();
            blocks.extend(blocks_for(ci, tape)?);
            tokens.push(TokenSpec { key: net_key(c0, Some(ci)), slot: kind_slot(ci.kind_index(), false), blocks });
        }
        Ok(PreparedBatch { tokens, six })
    }

    /// Time embeddings for per-row noise scales.
    pub fn time_rows(&self, sigmas: &[f64]) -> Mat {
        let d = self.config.time_dim;
        let mut data = Vec::with_capacity(sigmas.len() * d);
        for &s in sigmas {
            data.extend(time_embedding(self.time_fraction(s), d));
        }
        Mat::from_vec(sigmas.len(), d, data)
    }
}

/// Numeric evaluation of the composed model on a batch.
#[derive(Debug, Clone)]
pub struct EnergyEval {
    /// `E` per row (scaled by 1/σ²).
    pub energy: Vec<f64>,
    /// `∇_δ E` per row, stacked twists (B×6n).
    pub grad: Mat,
    pub weights: Mat,
}

impl AdcsModel {
    /// Composed energy of every pose-level constraint of `cs` at noise level `sigma`.
    pub fn evaluate(
        &self,
        cs: &ConstraintSet,
        poses: &[Vec<Pose>],
        scene: &Scene,
        clouds: &Clouds,
        sigma: f64,
        pe_rng: &mut seeds::Rng,
    ) -> Result<EnergyEval, ModelError> {
        let active = cs.pose_level_indices();
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let prep = self.prepare(&mut tape, &p, cs, &active, poses, scene, clouds)?;
        let temb = tape.constant(self.time_rows(&vec![sigma; poses.len()]));
        let comp = self.composite(&mut tape, &p, &prep.tokens, temb, prep.six, pe_rng)?;
        let inv = 1.0 / (sigma * sigma);
        let energy = tape.value(comp.energy).data.iter().map(|x| x * inv).collect();
        let grad = tape.value(comp.score).map(|x| x * inv);
        Ok(EnergyEval { energy, grad, weights: tape.value(comp.weights).clone() })
    }

    /// Weights and weighted total for a plain list of token energies.
    pub fn compose(&self, energies: &[f64], slots: &[usize], pe_rng: &mut seeds::Rng) -> Result<(Vec<f64>, f64), ModelError> {
        if energies.len() > self.config.n_max {
            return Err(ModelError::TooManyConstraints { got: energies.len(), max: self.config.n_max });
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let g: Vec<Var> = energies.iter().map(|&e| tape.constant(Mat::scalar(e))).collect();
        let w = self.weights(&mut tape, &p, &g, slots, pe_rng)?;
        let w = tape.value(w).data.clone();
        let total = w.iter().zip(energies).map(|(a, b)| a * b).sum();
        Ok((w, total))
    }

    /// Predicted signed distance at `query` for the shape described by `cloud`.
    pub fn predict_sdf(&self, cloud: &[Vector3<f64>], query: &[Vector3<f64>]) -> Result<Vec<f64>, ModelError> {
        let sdf = self.sdf.as_ref().ok_or(ModelError::NoSdf)?;
        if cloud.is_empty() {
            return Err(ModelError::EmptyCloud);
        }
        let c = Clouds::from_points(&[cloud.to_vec()]);
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let code = sdf.encode(&mut tape, &p, &c.clouds[0])?;
        let q = tape.constant(Mat::from_vec(query.len(), 3, query.iter().flat_map(|x| [x.x, x.y, x.z]).collect()));
        let s = sdf.predict(&mut tape, &p, code, q);
        Ok(tape.value(s).data.clone())
    }
}

pub const CHECKPOINT_FORMAT: &str = "adcs-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Adam moments for resuming training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub step: u64,
    pub model: AdcsModel,
    pub optimizer: Option<AdamState>,
    /// Hash of the configuration that produced the checkpoint.
    pub config_hash: String,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serialization")
    }

    pub fn from_json(s: &str) -> Result<Self, String> {
        let c: Checkpoint = serde_json::from_str(s).map_err(|e| e.to_string())?;
        if c.format != CHECKPOINT_FORMAT {
            return Err(format!("not a checkpoint: format `{}`", c.format));
        }
        if c.version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {}", c.version));
        }
        Ok(c)
    }
}
