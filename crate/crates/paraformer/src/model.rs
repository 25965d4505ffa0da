//! The fused model: global propagation branch, auxiliary message-passing
//! branch, convex fusion, classification heads and losses.

use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::attention::{AttentionMode, GammaWeights, ScaleMode};
use crate::dataset::{read_matrix_csv, write_matrix_csv, LabelVector};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency_csr, Graph, NormMode};
use crate::linalg::{ensure_row_stochastic, relu as relu_plain, Mat};
use crate::tape::{SparsePair, Tape, VarId};

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

/// Auxiliary branch flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnnVariant {
    /// Two-layer graph convolution.
    Gcn2,
    /// Linear layer followed by a truncated propagation series with its own
    /// learnable hop weights.
    GprGnn,
}

/// Initialization policy for hop weights.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum GammaInitPolicy {
    Ppr { alpha_damp: f64 },
    Uniform,
    Explicit { values: Vec<f64> },
}

impl GammaInitPolicy {
    pub fn build(&self, k_max: usize) -> Result<GammaWeights> {
        match self {
            GammaInitPolicy::Ppr { alpha_damp } => GammaWeights::ppr(k_max, *alpha_damp),
            GammaInitPolicy::Uniform => Ok(GammaWeights::uniform(k_max)),
            GammaInitPolicy::Explicit { values } => {
                if values.len() != k_max + 1 {
                    return Err(Error::InvalidConfig(format!(
                        "explicit gamma needs {} values, got {}",
                        k_max + 1,
                        values.len()
                    )));
                }
                GammaWeights::explicit(values.clone())
            }
        }
    }
}

fn default_k() -> usize {
    10
}
fn default_beta() -> f64 {
    0.5
}
fn default_d_hidden() -> usize {
    64
}
fn default_dropout() -> f64 {
    0.5
}
fn default_gnn_variant() -> GnnVariant {
    GnnVariant::Gcn2
}
fn default_attention_mode() -> AttentionMode {
    AttentionMode::Scalable
}
fn default_scale_mode() -> ScaleMode {
    ScaleMode::InvSqrtD
}
fn default_gamma_init() -> GammaInitPolicy {
    GammaInitPolicy::Ppr { alpha_damp: 0.1 }
}
fn default_gnn_k() -> usize {
    10
}

/// Full model hyper-parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParaFormerConfig {
    /// Propagation depth K of the global branch.
    #[serde(default = "default_k")]
    pub k: usize,
    /// Fusion weight β ∈ [0,1]: 0 = global branch only, 1 = GNN branch only.
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_d_hidden")]
    pub d_hidden: usize,
    /// Dropout rate in [0,1), applied after the input projection and after
    /// fusion, in training mode only.
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    #[serde(default = "default_gnn_variant")]
    pub gnn_variant: GnnVariant,
    #[serde(default = "default_attention_mode")]
    pub attention_mode: AttentionMode,
    /// Logit divisor for the exact attention path (the factorized path
    /// normalizes by softmax axes and never scales).
    #[serde(default = "default_scale_mode")]
    pub scale_mode: ScaleMode,
    #[serde(default = "default_gamma_init")]
    pub gamma_init: GammaInitPolicy,
    /// Combined-propagation formulation: one series over the attention
    /// matrix plus one over the adjacency, sharing V — replaces the β fuse.
    #[serde(default)]
    pub combined_variant: bool,
    /// Propagation depth of the auxiliary branch (gprgnn and combined).
    #[serde(default = "default_gnn_k")]
    pub gnn_k: usize,
    /// Feed the auxiliary branch raw features instead of the projected
    /// hidden state (sensitivity toggle; default follows the projected path).
    #[serde(default)]
    pub gnn_on_raw_features: bool,
}

impl Default for ParaFormerConfig {
    fn default() -> Self {
        ParaFormerConfig {
            k: default_k(),
            beta: default_beta(),
            d_hidden: default_d_hidden(),
            dropout_rate: default_dropout(),
            gnn_variant: default_gnn_variant(),
            attention_mode: default_attention_mode(),
            scale_mode: default_scale_mode(),
            gamma_init: default_gamma_init(),
            combined_variant: false,
            gnn_k: default_gnn_k(),
            gnn_on_raw_features: false,
        }
    }
}

impl ParaFormerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::InvalidConfig(format!(
                "beta must lie in [0,1], got {}",
                self.beta
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must lie in [0,1), got {}",
                self.dropout_rate
            )));
        }
        if self.d_hidden == 0 {
            return Err(Error::InvalidConfig("d_hidden must be positive".into()));
        }
        self.gamma_init.build(self.k)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// parameters
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum GnnParams {
    Gcn2 { w1: Mat, w2: Mat },
    GprGnn { w: Mat, gamma2: Mat },
    Combined { lambda2: Mat },
}

/// All learnable tensors. Hop-weight rows are stored as 1×(K+1) matrices so
/// the optimizer treats every parameter uniformly.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub w_in: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub gamma: Mat,
    pub gnn: GnnParams,
    pub head_w1: Mat,
    pub head_b1: Mat,
    pub head_w2: Mat,
    pub head_b2: Mat,
}

fn uniform_init(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

impl ModelParams {
    /// Fan-in-scaled uniform initialization; biases start at zero; hop
    /// weights follow the configured policy.
    pub fn init(config: &ParaFormerConfig, d_in: usize, c: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.validate()?;
        let h = config.d_hidden;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let w_in = uniform_init(&mut rng, d_in, h);
        let w_q = uniform_init(&mut rng, h, h);
        let w_k = uniform_init(&mut rng, h, h);
        let w_v = uniform_init(&mut rng, h, h);
        let gamma_row = |g: &GammaWeights| {
            Mat::from_shape_vec((1, g.values().len()), g.values().to_vec()).expect("row shape")
        };
        let gamma = gamma_row(&config.gamma_init.build(config.k)?);
        let gnn_in = if config.gnn_on_raw_features { d_in } else { h };
        let gnn = if config.combined_variant {
            GnnParams::Combined {
                lambda2: gamma_row(&config.gamma_init.build(config.gnn_k)?),
            }
        } else {
            match config.gnn_variant {
                GnnVariant::Gcn2 => GnnParams::Gcn2 {
                    w1: uniform_init(&mut rng, gnn_in, h),
                    w2: uniform_init(&mut rng, h, h),
                },
                GnnVariant::GprGnn => GnnParams::GprGnn {
                    w: uniform_init(&mut rng, gnn_in, h),
                    gamma2: gamma_row(&config.gamma_init.build(config.gnn_k)?),
                },
            }
        };
        let head_w1 = uniform_init(&mut rng, h, h);
        let head_w2 = uniform_init(&mut rng, h, c);
        Ok(ModelParams {
            w_in,
            w_q,
            w_k,
            w_v,
            gamma,
            gnn,
            head_w1,
            head_b1: Mat::zeros((1, h)),
            head_w2,
            head_b2: Mat::zeros((1, c)),
        })
    }

    /// Stable (name, tensor) listing; the optimizer and checkpoints rely on
    /// this order.
    pub fn tensors(&self) -> Vec<(&'static str, &Mat)> {
        let mut out = vec![
            ("w_in", &self.w_in),
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("gamma", &self.gamma),
        ];
        match &self.gnn {
            GnnParams::Gcn2 { w1, w2 } => {
                out.push(("gnn_w1", w1));
                out.push(("gnn_w2", w2));
            }
            GnnParams::GprGnn { w, gamma2 } => {
                out.push(("gnn_w", w));
                out.push(("gnn_gamma2", gamma2));
            }
            GnnParams::Combined { lambda2 } => {
                out.push(("lambda2", lambda2));
            }
        }
        out.push(("head_w1", &self.head_w1));
        out.push(("head_b1", &self.head_b1));
        out.push(("head_w2", &self.head_w2));
        out.push(("head_b2", &self.head_b2));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Mat)> {
        let mut out = vec![
            ("w_in", &mut self.w_in),
            ("w_q", &mut self.w_q),
            ("w_k", &mut self.w_k),
            ("w_v", &mut self.w_v),
            ("gamma", &mut self.gamma),
        ];
        match &mut self.gnn {
            GnnParams::Gcn2 { w1, w2 } => {
                out.push(("gnn_w1", w1));
                out.push(("gnn_w2", w2));
            }
            GnnParams::GprGnn { w, gamma2 } => {
                out.push(("gnn_w", w));
                out.push(("gnn_gamma2", gamma2));
            }
            GnnParams::Combined { lambda2 } => {
                out.push(("lambda2", lambda2));
            }
        }
        out.push(("head_w1", &mut self.head_w1));
        out.push(("head_b1", &mut self.head_b1));
        out.push(("head_w2", &mut self.head_w2));
        out.push(("head_b2", &mut self.head_b2));
        out
    }

    /// Hop-weight tensors and biases are exempt from weight decay.
    pub fn decays(name: &str) -> bool {
        !matches!(
            name,
            "gamma" | "gnn_gamma2" | "lambda2" | "head_b1" | "head_b2"
        )
    }

    pub fn gamma_values(&self) -> Vec<f64> {
        self.gamma.row(0).to_vec()
    }
}

// ---------------------------------------------------------------------------
// predictions
// ---------------------------------------------------------------------------

/// Row-stochastic class probabilities (n×c for node tasks, 1×c for graph
/// tasks).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    probs: Mat,
}

impl Prediction {
    pub fn new(probs: Mat) -> Result<Self> {
        ensure_row_stochastic(&probs, 1e-9)?;
        Ok(Prediction { probs })
    }

    pub fn probs(&self) -> &Mat {
        &self.probs
    }

    /// Row-wise argmax; ties resolve to the lower class index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                let mut best_v = f64::NEG_INFINITY;
                for (j, &v) in row.iter().enumerate() {
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// Fraction of masked nodes whose argmax matches the label.
pub fn accuracy(pred: &Prediction, labels: &LabelVector, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let arg = pred.argmax_rows();
    let mut hits = 0usize;
    for &i in mask {
        match labels.label(i) {
            Some(y) if arg[i] == y => hits += 1,
            Some(_) => {}
            None => {
                return Err(Error::InvalidSplit(format!(
                    "node {i} in evaluation mask has no label"
                )))
            }
        }
    }
    Ok(hits as f64 / mask.len() as f64)
}

// ---------------------------------------------------------------------------
// plain library operations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    None,
}

/// H′ = act(Ã_norm · H · W).
pub fn gcn_layer(h: &Mat, adj_norm: &Mat, w: &Mat, activation: Activation) -> Result<Mat> {
    if adj_norm.ncols() != h.nrows() || h.ncols() != w.nrows() {
        return Err(Error::shape(
            "gcn layer",
            format!("adj {0}x{0} · H {0}x{1} · W {1}x*", adj_norm.nrows(), w.nrows()),
            format!("adj {:?}, H {:?}, W {:?}", adj_norm.dim(), h.dim(), w.dim()),
        ));
    }
    let out = adj_norm.dot(h).dot(w);
    Ok(match activation {
        Activation::Relu => relu_plain(&out),
        Activation::None => out,
    })
}

/// H′ = Σ_{k=0}^{K} γ′_k Ã^k H by iterative accumulation; Ã^k is never
/// materialized.
pub fn gpr_propagate(h: &Mat, adj_norm: &Mat, gamma: &GammaWeights) -> Result<Mat> {
    if adj_norm.ncols() != h.nrows() {
        return Err(Error::shape(
            "gpr propagation",
            format!("adj cols == {}", h.nrows()),
            adj_norm.ncols(),
        ));
    }
    let g = gamma.values();
    let mut acc = h * g[0];
    let mut cur = h.clone();
    for &gk in &g[1..] {
        cur = adj_norm.dot(&cur);
        acc = acc + &cur * gk;
    }
    Ok(acc)
}

/// Ẑ = (1 − β)·Z + β·G.
pub fn fuse(z: &Mat, g: &Mat, beta: f64) -> Result<Mat> {
    if z.dim() != g.dim() {
        return Err(Error::shape("fusion", format!("{:?}", z.dim()), format!("{:?}", g.dim())));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidConfig(format!(
            "fusion weight must lie in [0,1], got {beta}"
        )));
    }
    Ok(z * (1.0 - beta) + &(g * beta))
}

/// Two propagation series sharing V: Σ_k λ_k Â^k V + Σ_k λ′_k Ã^k V.
pub fn combined_forward(
    a_like: &Mat,
    adj_norm: &Mat,
    v: &Mat,
    lambda: &GammaWeights,
    lambda2: &GammaWeights,
) -> Result<Mat> {
    let n = v.nrows();
    if a_like.dim() != (n, n) || adj_norm.dim() != (n, n) {
        return Err(Error::shape(
            "combined propagation",
            format!("two {n}x{n} operators"),
            format!("{:?} and {:?}", a_like.dim(), adj_norm.dim()),
        ));
    }
    let mut acc = v * (lambda.values()[0] + lambda2.values()[0]);
    let mut cur_a = v.clone();
    for &lk in &lambda.values()[1..] {
        cur_a = a_like.dot(&cur_a);
        acc = acc + &cur_a * lk;
    }
    let mut cur_t = v.clone();
    for &lk in &lambda2.values()[1..] {
        cur_t = adj_norm.dot(&cur_t);
        acc = acc + &cur_t * lk;
    }
    Ok(acc)
}

/// Mean negative log-likelihood over the masked nodes, with the probability
/// floored at 1e-12 inside the logarithm.
pub fn cross_entropy_loss(probs: &Mat, labels: &LabelVector, mask: &[usize]) -> Result<f64> {
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    let mut acc = 0.0;
    for &i in mask {
        let y = labels.label(i).ok_or_else(|| {
            Error::InvalidSplit(format!("node {i} in loss mask has no label"))
        })?;
        acc -= probs[[i, y]].max(1e-12).ln();
    }
    Ok(acc / mask.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Mean,
    Sum,
    Max,
}

/// Per-column reduction of Ẑ to a 1×d graph representation.
pub fn graph_pool(zhat: &Mat, mode: PoolMode) -> Result<Mat> {
    if zhat.nrows() == 0 || zhat.ncols() == 0 {
        return Err(Error::EmptyMatrix {
            context: "graph pooling".into(),
        });
    }
    let d = zhat.ncols();
    let n = zhat.nrows() as f64;
    let mut out = Mat::zeros((1, d));
    for j in 0..d {
        let col = zhat.column(j);
        out[[0, j]] = match mode {
            PoolMode::Mean => col.sum() / n,
            PoolMode::Sum => col.sum(),
            PoolMode::Max => col.fold(f64::NEG_INFINITY, |a, &b| a.max(b)),
        };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// tape-built forward pass
// ---------------------------------------------------------------------------

/// Graph pieces precomputed once per run.
pub struct PreparedGraph {
    pub adj: Rc<SparsePair>,
    pub n: usize,
}

impl PreparedGraph {
    pub fn new(graph: &Graph) -> Self {
        let adj = SparsePair::new(normalize_adjacency_csr(graph, NormMode::SymSelfloop));
        PreparedGraph { adj, n: graph.n() }
    }
}

/// Handles into a recorded forward pass.
pub struct ForwardPass {
    pub tape: Tape,
    /// Row-stochastic class probabilities.
    pub probs: VarId,
    /// Fused representation, before the post-fusion dropout and head.
    pub zhat: VarId,
    /// Tracked parameter leaves in [`ModelParams::tensors`] order.
    pub param_ids: Vec<(&'static str, VarId)>,
}

fn dropout_mask(rng: &mut ChaCha20Rng, n: usize, d: usize, rate: f64) -> Rc<Mat> {
    let keep = 1.0 - rate;
    Rc::new(Mat::from_shape_fn((n, d), |_| {
        if rng.gen_range(0.0..1.0) < rate {
            0.0
        } else {
            1.0 / keep
        }
    }))
}

/// Records the full forward pass on a fresh tape. `dropout_rng` must be
/// provided iff training with a positive dropout rate.
pub fn build_forward(
    x: &Rc<Mat>,
    prepared: &PreparedGraph,
    params: &ModelParams,
    config: &ParaFormerConfig,
    train_mode: bool,
    mut dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<ForwardPass> {
    config.validate()?;
    let n = x.nrows();
    if n != prepared.n {
        return Err(Error::shape("forward pass", format!("{} nodes", prepared.n), n));
    }
    let h_dim = config.d_hidden;
    let use_dropout = train_mode && config.dropout_rate > 0.0;
    if use_dropout && dropout_rng.is_none() {
        return Err(Error::InvalidConfig(
            "training with dropout requires a dropout rng".into(),
        ));
    }

    let mut tape = Tape::new();
    let mut param_ids = Vec::new();
    let x_id = tape.constant_shared(Rc::clone(x));

    // Register every tracked tensor up front, in canonical order.
    let mut reg = |tape: &mut Tape, name: &'static str, value: &Mat| -> VarId {
        let id = tape.param(value.clone());
        param_ids.push((name, id));
        id
    };
    let w_in = reg(&mut tape, "w_in", &params.w_in);
    let w_q = reg(&mut tape, "w_q", &params.w_q);
    let w_k = reg(&mut tape, "w_k", &params.w_k);
    let w_v = reg(&mut tape, "w_v", &params.w_v);
    let gamma = reg(&mut tape, "gamma", &params.gamma);
    let gnn_ids: Vec<VarId> = match &params.gnn {
        GnnParams::Gcn2 { w1, w2 } => vec![
            reg(&mut tape, "gnn_w1", w1),
            reg(&mut tape, "gnn_w2", w2),
        ],
        GnnParams::GprGnn { w, gamma2 } => vec![
            reg(&mut tape, "gnn_w", w),
            reg(&mut tape, "gnn_gamma2", gamma2),
        ],
        GnnParams::Combined { lambda2 } => vec![reg(&mut tape, "lambda2", lambda2)],
    };
    let head_w1 = reg(&mut tape, "head_w1", &params.head_w1);
    let head_b1 = reg(&mut tape, "head_b1", &params.head_b1);
    let head_w2 = reg(&mut tape, "head_w2", &params.head_w2);
    let head_b2 = reg(&mut tape, "head_b2", &params.head_b2);

    // Input projection and first dropout.
    let h0 = tape.matmul(x_id, w_in);
    let h = if use_dropout {
        let mask = dropout_mask(dropout_rng.as_deref_mut().unwrap(), n, h_dim, config.dropout_rate);
        tape.dropout(h0, mask)
    } else {
        h0
    };

    // Projections shared by the propagation series.
    let v = tape.matmul(h, w_v);

    // Global-branch series accumulated through `add_scaled` so the hop
    // weights receive gradients.
    let series_over_attention = |tape: &mut Tape, coeffs: VarId, k_max: usize| -> Result<VarId> {
        let q = tape.matmul(h, w_q);
        let k = tape.matmul(h, w_k);
        let zero = tape.constant(Mat::zeros((n, h_dim)));
        match config.attention_mode {
            AttentionMode::Exact => {
                let logits = tape.gemm(q, false, k, true);
                let divisor = match config.scale_mode {
                    ScaleMode::InvSqrtD => (h_dim as f64).sqrt(),
                    ScaleMode::InvSqrtN => (n as f64).sqrt(),
                    ScaleMode::None => 1.0,
                };
                let scaled = if divisor != 1.0 {
                    tape.scale_const(logits, 1.0 / divisor)
                } else {
                    logits
                };
                let a_hat = tape.row_softmax(scaled);
                let mut z = tape.add_scaled(zero, v, coeffs, 0);
                let mut cur = v;
                for step in 1..=k_max {
                    cur = tape.matmul(a_hat, cur);
                    z = tape.add_scaled(z, cur, coeffs, step);
                }
                Ok(z)
            }
            AttentionMode::Scalable => {
                let q_hat = tape.row_softmax(q);
                let k_hat = tape.col_softmax(k);
                let mut z = tape.add_scaled(zero, v, coeffs, 0);
                if k_max >= 1 {
                    let mut m = tape.gemm(k_hat, true, v, false);
                    let c = tape.gemm(k_hat, true, q_hat, false);
                    for step in 1..=k_max {
                        let qm = tape.matmul(q_hat, m);
                        z = tape.add_scaled(z, qm, coeffs, step);
                        if step < k_max {
                            m = tape.matmul(c, m);
                        }
                    }
                }
                Ok(z)
            }
        }
    };

    let zhat = if config.combined_variant {
        // Σ_k λ_k Â^k V + Σ_k λ′_k Ã^k V, sharing V.
        let lambda2 = gnn_ids[0];
        let z_att = series_over_attention(&mut tape, gamma, config.k)?;
        let zero = tape.constant(Mat::zeros((n, h_dim)));
        let mut z_adj = tape.add_scaled(zero, v, lambda2, 0);
        let mut cur = v;
        for step in 1..=config.gnn_k {
            cur = tape.spmm(&prepared.adj, cur);
            z_adj = tape.add_scaled(z_adj, cur, lambda2, step);
        }
        tape.add(z_att, z_adj)
    } else {
        let beta = config.beta;
        // Auxiliary input: projected hidden state by default, raw features
        // under the sensitivity toggle.
        let gnn_input = if config.gnn_on_raw_features { x_id } else { h };
        let gnn_out = |tape: &mut Tape| -> VarId {
            match &params.gnn {
                GnnParams::Gcn2 { .. } => {
                    let (w1, w2) = (gnn_ids[0], gnn_ids[1]);
                    let p1 = tape.spmm(&prepared.adj, gnn_input);
                    let l1 = tape.matmul(p1, w1);
                    let h1 = tape.relu(l1);
                    let p2 = tape.spmm(&prepared.adj, h1);
                    tape.matmul(p2, w2)
                }
                GnnParams::GprGnn { .. } => {
                    let (w, gamma2) = (gnn_ids[0], gnn_ids[1]);
                    let hw = tape.matmul(gnn_input, w);
                    let zero = tape.constant(Mat::zeros((n, h_dim)));
                    let mut acc = tape.add_scaled(zero, hw, gamma2, 0);
                    let mut cur = hw;
                    for step in 1..=config.gnn_k {
                        cur = tape.spmm(&prepared.adj, cur);
                        acc = tape.add_scaled(acc, cur, gamma2, step);
                    }
                    acc
                }
                GnnParams::Combined { .. } => unreachable!("handled above"),
            }
        };
        if beta == 0.0 {
            series_over_attention(&mut tape, gamma, config.k)?
        } else if beta == 1.0 {
            gnn_out(&mut tape)
        } else {
            let z = series_over_attention(&mut tape, gamma, config.k)?;
            let g = gnn_out(&mut tape);
            let z_part = tape.scale_const(z, 1.0 - beta);
            let g_part = tape.scale_const(g, beta);
            tape.add(z_part, g_part)
        }
    };

    // Post-fusion dropout and the classification head.
    let zd = if use_dropout {
        let mask = dropout_mask(dropout_rng.unwrap(), n, h_dim, config.dropout_rate);
        tape.dropout(zhat, mask)
    } else {
        zhat
    };
    let t1 = tape.matmul(zd, head_w1);
    let t1b = tape.add_row_bias(t1, head_b1);
    let a1 = tape.relu(t1b);
    let t2 = tape.matmul(a1, head_w2);
    let logits = tape.add_row_bias(t2, head_b2);
    let probs = tape.row_softmax(logits);

    Ok(ForwardPass {
        tape,
        probs,
        zhat,
        param_ids,
    })
}

/// Full forward pass for node classification. Returns the prediction and the
/// fused representation Ẑ. Deterministic when `train_mode` is false; training
/// with dropout draws masks from `dropout_rng`.
pub fn node_forward(
    x: &Mat,
    graph: &Graph,
    params: &ModelParams,
    config: &ParaFormerConfig,
    train_mode: bool,
    dropout_rng: Option<&mut ChaCha20Rng>,
) -> Result<(Prediction, Mat)> {
    let prepared = PreparedGraph::new(graph);
    let x = Rc::new(x.clone());
    let fwd = build_forward(&x, &prepared, params, config, train_mode, dropout_rng)?;
    let pred = Prediction::new(fwd.tape.value(fwd.probs).clone())?;
    let zhat = fwd.tape.value(fwd.zhat).clone();
    Ok((pred, zhat))
}

/// Graph-level prediction: pool the fused representation, then apply the
/// same head. Inference only (no dropout).
pub fn graph_forward(
    x: &Mat,
    graph: &Graph,
    params: &ModelParams,
    config: &ParaFormerConfig,
    pool: PoolMode,
) -> Result<Prediction> {
    let (_, zhat) = node_forward(x, graph, params, config, false, None)?;
    let g = graph_pool(&zhat, pool)?;
    let hidden = relu_plain(&(g.dot(&params.head_w1) + params.head_b1.row(0)));
    let logits = hidden.dot(&params.head_w2) + params.head_b2.row(0);
    Prediction::new(crate::linalg::row_softmax(&logits))
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointMeta {
    config: ParaFormerConfig,
    tensors: Vec<(String, Vec<usize>)>,
    gamma: Vec<f64>,
}

/// Writes `params.json` plus one CSV per tensor.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, config: &ParaFormerConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tensors = params.tensors();
    let meta = CheckpointMeta {
        config: config.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| (name.to_string(), vec![t.nrows(), t.ncols()]))
            .collect(),
        gamma: params.gamma_values(),
    };
    let meta_path = dir.join("params.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).expect("meta serializes") + "\n",
    )
    .map_err(|e| Error::io(&meta_path, e))?;
    for (name, tensor) in tensors {
        write_matrix_csv(&dir.join(format!("{name}.csv")), tensor)?;
    }
    Ok(())
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(ModelParams, ParaFormerConfig)> {
    let meta_path = dir.join("params.json");
    if !meta_path.exists() {
        return Err(Error::MissingFile { path: meta_path });
    }
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Parse {
        file: meta_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let read = |name: &str| -> Result<Mat> {
        let path = dir.join(format!("{name}.csv"));
        let m = read_matrix_csv(&path)?;
        let declared = meta
            .tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} missing from params.json")))?;
        if declared.1 != vec![m.nrows(), m.ncols()] {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: declared shape {:?}, file has {}x{}",
                declared.1,
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(m)
    };
    let gnn = if meta.config.combined_variant {
        GnnParams::Combined {
            lambda2: read("lambda2")?,
        }
    } else {
        match meta.config.gnn_variant {
            GnnVariant::Gcn2 => GnnParams::Gcn2 {
                w1: read("gnn_w1")?,
                w2: read("gnn_w2")?,
            },
            GnnVariant::GprGnn => GnnParams::GprGnn {
                w: read("gnn_w")?,
                gamma2: read("gnn_gamma2")?,
            },
        }
    };
    let params = ModelParams {
        w_in: read("w_in")?,
        w_q: read("w_q")?,
        w_k: read("w_k")?,
        w_v: read("w_v")?,
        gamma: read("gamma")?,
        gnn,
        head_w1: read("head_w1")?,
        head_b1: read("head_b1")?,
        head_w2: read("head_w2")?,
        head_b2: read("head_b2")?,
    };
    Ok((params, meta.config))
}
