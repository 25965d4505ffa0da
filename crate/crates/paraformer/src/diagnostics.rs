//! Over-smoothing and spectral measurements: representation distance and
//! similarity, constant/high-frequency decomposition, smoothing-rate
//! estimators, propagation-series probes, and the depth-sweep experiment
//! driver with its baseline architectures.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{ensure_row_stochastic, frobenius_norm, l1_operator_norm, row_softmax, Mat};
use crate::model::{accuracy, node_forward, ParaFormerConfig, Prediction};
use crate::tape::{Tape, VarId};
use crate::train::{adam_apply, OptimizerState, TrainConfig, TrainReport};

// ---------------------------------------------------------------------------
// representation metrics
// ---------------------------------------------------------------------------

/// Mean L2 distance between representation rows over all ordered pairs
/// i ≠ j. Zero means total collapse.
pub fn pairwise_l2(h: &Mat) -> Result<f64> {
    let n = h.nrows();
    if n < 2 {
        return Err(Error::TooFewRows {
            context: "pairwise distance".into(),
            needed: 2,
            got: n,
        });
    }
    // The distance is symmetric, so summing unordered pairs and doubling
    // equals the ordered-pair sum.
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d2: f64 = h
                .row(i)
                .iter()
                .zip(h.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            acc += d2.sqrt();
        }
    }
    Ok(2.0 * acc / (n * (n - 1)) as f64)
}

/// Mean cosine similarity over ordered pairs of distinct nonzero rows.
/// Returns the mean and the number of zero rows excluded.
pub fn cosine_sim(h: &Mat) -> Result<(f64, usize)> {
    let norms: Vec<f64> = h
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let keep: Vec<usize> = (0..h.nrows()).filter(|&i| norms[i] > 0.0).collect();
    let excluded = h.nrows() - keep.len();
    if keep.is_empty() {
        return Err(Error::AllRowsZero);
    }
    if keep.len() < 2 {
        return Err(Error::TooFewRows {
            context: "cosine similarity".into(),
            needed: 2,
            got: keep.len(),
        });
    }
    let mut acc = 0.0;
    for (a, &i) in keep.iter().enumerate() {
        for &j in &keep[(a + 1)..] {
            let dot: f64 = h
                .row(i)
                .iter()
                .zip(h.row(j).iter())
                .map(|(x, y)| x * y)
                .sum();
            acc += dot / (norms[i] * norms[j]);
        }
    }
    let pairs = (keep.len() * (keep.len() - 1)) as f64;
    Ok((2.0 * acc / pairs, excluded))
}

// ---------------------------------------------------------------------------
// constant / high-frequency decomposition
// ---------------------------------------------------------------------------

/// Split of a representation into its per-column constant part and the
/// zero-mean remainder.
#[derive(Debug, Clone)]
pub struct SpectralSplit {
    /// (1/n)·11ᵀH — every column constant at its mean.
    pub dc: Mat,
    /// H − dc — every column sums to zero.
    pub hc: Mat,
}

/// Projects each column onto the constant vector: dc = (1/n)11ᵀH,
/// hc = H − dc.
pub fn spectral_split(h: &Mat) -> SpectralSplit {
    let n = h.nrows() as f64;
    let mut dc = Mat::zeros(h.dim());
    for j in 0..h.ncols() {
        let mean = h.column(j).sum() / n;
        dc.column_mut(j).fill(mean);
    }
    let hc = h - &dc;
    SpectralSplit { dc, hc }
}

/// ‖HC[H_pre]‖_F / ‖HC[H_post]‖_F: how much high-frequency mass an
/// operation kept. `None` marks the undefined case (a zero HC part on
/// either side).
pub fn hc_energy_ratio(h_pre: &Mat, h_post: &Mat) -> Option<f64> {
    let pre = frobenius_norm(&spectral_split(h_pre).hc);
    let post = frobenius_norm(&spectral_split(h_post).hc);
    if pre == 0.0 || post == 0.0 {
        None
    } else {
        Some(pre / post)
    }
}

// ---------------------------------------------------------------------------
// smoothing-rate estimators
// ---------------------------------------------------------------------------

/// Closed-form smoothing rate of a dense attention layer in terms of the
/// largest absolute logit α_P:
/// √((e^{2α_P} + n − 1) / (n · e^{2α_P} · wv_norm)).
/// Strictly decreasing in α_P for fixed n and wv_norm.
pub fn smoothing_rate_closed_form(alpha_p: f64, n: usize, wv_norm: f64) -> f64 {
    let e2a = (2.0 * alpha_p).exp();
    ((e2a + n as f64 - 1.0) / (n as f64 * e2a * wv_norm)).sqrt()
}

/// Operator-norm smoothing estimate √(‖Softmax(P)‖₁) · wv_norm, where ‖·‖₁
/// is the maximum absolute column sum. Returns (λ, c = ‖Softmax(P)‖₁).
pub fn smoothing_rate_l1(p: &Mat, wv_norm: f64) -> (f64, f64) {
    let c = l1_operator_norm(&row_softmax(p));
    (c.sqrt() * wv_norm, c)
}

// ---------------------------------------------------------------------------
// negative-hop-weight probe
// ---------------------------------------------------------------------------

/// Outcome of the prescribed-initialization inequality check over random
/// logit matrices.
#[derive(Debug, Clone, serde::Serialize)]
pub struct InequalityProbeReport {
    pub trials: usize,
    pub passes: usize,
    /// Instances with c ≤ 1, where the construction is degenerate.
    pub skipped_degenerate: usize,
    /// c − ‖γ₀I − (1/c)·Softmax(P)‖₁ per non-degenerate trial.
    pub margins: Vec<f64>,
}

impl InequalityProbeReport {
    pub fn min_margin(&self) -> Option<f64> {
        self.margins.iter().copied().reduce(f64::min)
    }

    pub fn all_pass(&self) -> bool {
        self.passes == self.trials - self.skipped_degenerate
    }
}

/// Single-instance check: with c = ‖Softmax(P)‖₁ and the prescribed weights
/// γ₀ = (c−1)/2, γ₁ = −1/c, evaluates ‖γ₀I − (1/c)·Softmax(P)‖₁ and the
/// margin to the bound c. Returns `None` when c ≤ 1 (degenerate).
pub fn hop_weight_inequality_check(p: &Mat) -> Option<(f64, f64, f64)> {
    let s = row_softmax(p);
    let c = l1_operator_norm(&s);
    if c <= 1.0 {
        return None;
    }
    let gamma0 = (c - 1.0) / 2.0;
    let n = s.nrows();
    let mut filter = &s * (-1.0 / c);
    for i in 0..n {
        filter[[i, i]] += gamma0;
    }
    let norm = l1_operator_norm(&filter);
    Some((c, norm, c - norm))
}

/// Repeats [`hop_weight_inequality_check`] over `trials` random n×n logit
/// matrices with entries uniform in [-scale, scale].
pub fn theorem2_probe(n: usize, trials: usize, scale: f64, seed: u64) -> InequalityProbeReport {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut report = InequalityProbeReport {
        trials,
        passes: 0,
        skipped_degenerate: 0,
        margins: Vec::new(),
    };
    for _ in 0..trials {
        let p = Mat::from_shape_fn((n, n), |_| {
            if scale > 0.0 {
                rng.gen_range(-scale..scale)
            } else {
                0.0
            }
        });
        match hop_weight_inequality_check(&p) {
            Some((_, _, margin)) => {
                report.margins.push(margin);
                if margin > 0.0 {
                    report.passes += 1;
                }
            }
            None => report.skipped_degenerate += 1,
        }
    }
    report
}

// ---------------------------------------------------------------------------
// high-pass probe
// ---------------------------------------------------------------------------

/// For K = 0..K_max evaluates
/// r(K) = ‖DC[Σ_{k=0}^{K} (−a)^k A^k H]‖_F / ‖DC[H]‖_F
/// on a fixed random H. With alternating-sign weights the constant component
/// shrinks as K grows: the series acts as a high-pass filter.
pub fn highpass_probe(
    a_stochastic: &Mat,
    a: f64,
    k_max: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let n = a_stochastic.nrows();
    ensure_row_stochastic(a_stochastic, 1e-8)?;
    if !(a > 0.0 && a < 1.0 / n as f64) {
        return Err(Error::DecayOutOfRange { a, n });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let h = Mat::from_shape_fn((n, 8), |_| rng.gen_range(-1.0..1.0));
    let dc_h = frobenius_norm(&spectral_split(&h).dc);
    if dc_h == 0.0 {
        return Err(Error::NonFinite {
            context: "high-pass probe baseline has zero constant component".into(),
        });
    }
    let mut curve = Vec::with_capacity(k_max + 1);
    let mut filtered = h.clone();
    let mut cur = h;
    let mut coeff = 1.0;
    curve.push(frobenius_norm(&spectral_split(&filtered).dc) / dc_h);
    for _ in 1..=k_max {
        cur = a_stochastic.dot(&cur);
        coeff *= -a;
        filtered = filtered + &cur * coeff;
        curve.push(frobenius_norm(&spectral_split(&filtered).dc) / dc_h);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// hop-weight report
// ---------------------------------------------------------------------------

/// Distribution summary of the trained hop weights.
#[derive(Debug, Clone, serde::Serialize)]
pub struct GammaReport {
    pub values: Vec<f64>,
    pub abs_values: Vec<f64>,
    /// −1, 0, +1 per weight.
    pub signs: Vec<i8>,
    pub has_negative: bool,
}

impl GammaReport {
    /// Mean |γ_k| over an index range (clamped to the available indices).
    pub fn mean_abs(&self, lo: usize, hi: usize) -> f64 {
        let hi = hi.min(self.abs_values.len() - 1);
        let slice = &self.abs_values[lo..=hi];
        slice.iter().sum::<f64>() / slice.len() as f64
    }
}

/// Summarizes the hop weights of the returned (best-epoch) parameters.
pub fn gamma_report(report: &TrainReport) -> GammaReport {
    GammaReport::from_values(report.gamma_final.clone())
}

impl GammaReport {
    /// Builds the summary from raw hop-weight values (for example read back
    /// from a checkpoint).
    pub fn from_values(values: Vec<f64>) -> GammaReport {
        GammaReport {
            abs_values: values.iter().map(|v| v.abs()).collect(),
            signs: values
                .iter()
                .map(|&v| {
                    if v > 0.0 {
                        1
                    } else if v < 0.0 {
                        -1
                    } else {
                        0
                    }
                })
                .collect(),
            has_negative: values.iter().any(|&v| v < 0.0),
            values,
        }
    }
}

// ---------------------------------------------------------------------------
// depth sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Stacked dense attention blocks with independent weights per layer.
    VanillaTransformer,
    /// Stacked linear-attention layers, each blended 50/50 with its input.
    SgformerLike,
    /// The fused model with propagation depth K = depth.
    Paraformer,
}

/// Per-depth test accuracy and collapse metrics of the final representation.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DepthSweepResult {
    pub model: ModelKind,
    pub depths: Vec<usize>,
    pub test_accuracy: Vec<f64>,
    pub d_l2: Vec<f64>,
    pub s_cos: Vec<f64>,
}

/// Attention-stack baseline: input projection, `depth` attention blocks,
/// then the two-layer head. Tensor order: w_in, per-layer (w_q, w_k, w_v),
/// head_w1, head_b1, head_w2, head_b2.
struct BaselineParams {
    tensors: Vec<Mat>,
    depth: usize,
}

impl BaselineParams {
    fn init(kind: ModelKind, depth: usize, d_in: usize, h: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (rows as f64).sqrt();
            Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        };
        let mut tensors = vec![uniform(d_in, h)];
        for _ in 0..depth {
            tensors.push(uniform(h, h)); // w_q
            tensors.push(uniform(h, h)); // w_k
            tensors.push(uniform(h, h)); // w_v
        }
        tensors.push(uniform(h, h)); // head_w1
        tensors.push(Mat::zeros((1, h))); // head_b1
        tensors.push(uniform(h, c)); // head_w2
        tensors.push(Mat::zeros((1, c))); // head_b2
        debug_assert!(matches!(
            kind,
            ModelKind::VanillaTransformer | ModelKind::SgformerLike
        ));
        BaselineParams { tensors, depth }
    }

    fn decay_flags(&self) -> Vec<bool> {
        let mut flags = vec![true; self.tensors.len()];
        let n = flags.len();
        flags[n - 3] = false; // head_b1
        flags[n - 1] = false; // head_b2
        flags
    }

    /// Records the forward pass; returns (probs id, final representation id,
    /// tracked leaf ids).
    fn forward(&self, tape: &mut Tape, x: &Rc<Mat>, kind: ModelKind, h_dim: usize) -> (VarId, VarId, Vec<VarId>) {
        let x_id = tape.constant_shared(Rc::clone(x));
        let ids: Vec<VarId> = self
            .tensors
            .iter()
            .map(|t| tape.param(t.clone()))
            .collect();
        let mut h = tape.matmul(x_id, ids[0]);
        for l in 0..self.depth {
            let (wq, wk, wv) = (ids[1 + 3 * l], ids[2 + 3 * l], ids[3 + 3 * l]);
            let q = tape.matmul(h, wq);
            let k = tape.matmul(h, wk);
            let v = tape.matmul(h, wv);
            h = match kind {
                ModelKind::VanillaTransformer => {
                    let logits = tape.gemm(q, false, k, true);
                    let scaled = tape.scale_const(logits, 1.0 / (h_dim as f64).sqrt());
                    let attn = tape.row_softmax(scaled);
                    tape.matmul(attn, v)
                }
                ModelKind::SgformerLike => {
                    let q_hat = tape.row_softmax(q);
                    let k_hat = tape.col_softmax(k);
                    let kv = tape.gemm(k_hat, true, v, false);
                    let attn = tape.matmul(q_hat, kv);
                    let half_h = tape.scale_const(h, 0.5);
                    let half_attn = tape.scale_const(attn, 0.5);
                    tape.add(half_h, half_attn)
                }
                ModelKind::Paraformer => unreachable!("paraformer uses the full model"),
            };
        }
        let repr = h;
        let nh = ids.len();
        let t1 = tape.matmul(h, ids[nh - 4]);
        let t1b = tape.add_row_bias(t1, ids[nh - 3]);
        let a1 = tape.relu(t1b);
        let t2 = tape.matmul(a1, ids[nh - 2]);
        let logits = tape.add_row_bias(t2, ids[nh - 1]);
        let probs = tape.row_softmax(logits);
        (probs, repr, ids)
    }
}

/// Trains one attention-stack baseline and returns (test accuracy at the
/// best validation epoch, final representation of the best model).
fn train_baseline(
    dataset: &Dataset,
    kind: ModelKind,
    depth: usize,
    h_dim: usize,
    tc: &TrainConfig,
) -> Result<(f64, Mat)> {
    let x = Rc::new(dataset.features.as_mat().clone());
    let labels = &dataset.labels;
    let splits = &dataset.splits;
    let targets: Vec<usize> = splits
        .train
        .iter()
        .map(|&i| {
            labels
                .label(i)
                .ok_or_else(|| Error::InvalidSplit(format!("node {i} in loss mask has no label")))
        })
        .collect::<Result<_>>()?;
    let targets = Rc::new(targets);
    let mask = Rc::new(splits.train.clone());

    let mut params = BaselineParams::init(
        kind,
        depth,
        dataset.d(),
        h_dim,
        dataset.num_classes(),
        tc.seed,
    );
    let shapes: Vec<(usize, usize)> = params.tensors.iter().map(|t| t.dim()).collect();
    let mut state = OptimizerState::for_shapes(&shapes);
    let decay_flags = params.decay_flags();

    let evaluate = |p: &BaselineParams| -> Result<(Prediction, Mat)> {
        let mut tape = Tape::new();
        let (probs, repr, _) = p.forward(&mut tape, &x, kind, h_dim);
        let pred = Prediction::new(tape.value(probs).clone())?;
        let r = tape.value(repr).clone();
        Ok((pred, r))
    };

    let mut best: Option<(f64, f64, Mat)> = None; // (valid acc, test acc, repr)
    let mut since_improvement = 0usize;
    for epoch in 0..tc.max_epochs {
        let mut tape = Tape::new();
        let (probs, _, ids) = params.forward(&mut tape, &x, kind, h_dim);
        let loss_id = tape.cross_entropy(probs, Rc::clone(&mask), Rc::clone(&targets), 1e-12);
        let loss = tape.value(loss_id)[[0, 0]];
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                dump: format!("{kind:?} baseline at depth {depth}"),
            });
        }
        tape.backward(loss_id);
        let grads: Vec<Mat> = ids
            .iter()
            .zip(&params.tensors)
            .map(|(&id, t)| tape.take_grad(id).unwrap_or_else(|| Mat::zeros(t.dim())))
            .collect();
        let grad_refs: Vec<&Mat> = grads.iter().collect();
        adam_apply(
            params.tensors.iter_mut().collect(),
            &grad_refs,
            &decay_flags,
            &mut state,
            tc.lr,
            tc.weight_decay,
        );

        let (pred, repr) = evaluate(&params)?;
        let acc_valid = accuracy(&pred, labels, &splits.valid)?;
        let improved = best.as_ref().is_none_or(|(b, _, _)| acc_valid > *b);
        if improved {
            let acc_test = accuracy(&pred, labels, &splits.test)?;
            best = Some((acc_valid, acc_test, repr));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= tc.patience {
                break;
            }
        }
    }
    match best {
        Some((_, test, repr)) => Ok((test, repr)),
        None => {
            let (pred, repr) = evaluate(&params)?;
            Ok((accuracy(&pred, labels, &splits.test)?, repr))
        }
    }
}

/// Trains one model per depth and measures test accuracy plus collapse
/// metrics of the final representation. For the fused model, depth is the
/// propagation budget K; for the baselines it is the layer count.
pub fn depth_sweep(
    dataset: &Dataset,
    kind: ModelKind,
    depths: &[usize],
    model_config: &ParaFormerConfig,
    train_config: &TrainConfig,
) -> Result<DepthSweepResult> {
    if depths.is_empty() {
        return Err(Error::InvalidConfig("depth sweep needs at least one depth".into()));
    }
    let mut result = DepthSweepResult {
        model: kind,
        depths: depths.to_vec(),
        test_accuracy: Vec::new(),
        d_l2: Vec::new(),
        s_cos: Vec::new(),
    };
    for &depth in depths {
        let (test_acc, repr) = match kind {
            ModelKind::Paraformer => {
                let config = ParaFormerConfig {
                    k: depth,
                    ..model_config.clone()
                };
                let (params, report) = crate::train::train(dataset, &config, train_config)?;
                let (_, zhat) = node_forward(
                    dataset.features.as_mat(),
                    &dataset.graph,
                    &params,
                    &config,
                    false,
                    None,
                )?;
                (report.final_test_accuracy, zhat)
            }
            ModelKind::VanillaTransformer | ModelKind::SgformerLike => train_baseline(
                dataset,
                kind,
                depth,
                model_config.d_hidden,
                train_config,
            )?,
        };
        result.test_accuracy.push(test_acc);
        result.d_l2.push(pairwise_l2(&repr)?);
        result.s_cos.push(cosine_sim(&repr)?.0);
    }
    Ok(result)
}
