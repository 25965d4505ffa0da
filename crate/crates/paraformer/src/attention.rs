//! Attention mathematics: projections, dense softmax attention, the linear
//! factorization, exact PageRank-weighted attention by repeated dense
//! multiplication, and the linear-complexity accumulation scheme that never
//! materializes an n×n matrix.

use crate::error::{Error, Result};
use crate::linalg::{
    col_softmax, ensure_finite, ensure_row_stochastic, row_softmax, Mat,
};

/// Divisor applied to the attention logits before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Divide logits by √d_hidden (the usual dense-attention convention).
    InvSqrtD,
    /// Divide logits by √n (used by the smoothing-rate analysis).
    InvSqrtN,
    /// No scaling (the propagation series is written unscaled; the linear
    /// factorization always uses this).
    None,
}

impl ScaleMode {
    fn divisor(self, n: usize, d: usize) -> f64 {
        match self {
            ScaleMode::InvSqrtD => (d as f64).sqrt(),
            ScaleMode::InvSqrtN => (n as f64).sqrt(),
            ScaleMode::None => 1.0,
        }
    }
}

/// Projection weights for queries, keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub scale_mode: ScaleMode,
}

impl AttentionParams {
    pub fn new(w_q: Mat, w_k: Mat, w_v: Mat, scale_mode: ScaleMode) -> Result<Self> {
        if w_q.dim() != w_k.dim() || w_q.dim() != w_v.dim() {
            return Err(Error::shape(
                "attention params",
                format!("{:?} for all three projections", w_q.dim()),
                format!("W_K {:?}, W_V {:?}", w_k.dim(), w_v.dim()),
            ));
        }
        for (name, w) in [("W_Q", &w_q), ("W_K", &w_k), ("W_V", &w_v)] {
            ensure_finite(w, name)?;
        }
        Ok(AttentionParams {
            w_q,
            w_k,
            w_v,
            scale_mode,
        })
    }

    pub fn d_in(&self) -> usize {
        self.w_q.nrows()
    }

    pub fn d_hidden(&self) -> usize {
        self.w_q.ncols()
    }
}

/// How the K+1 hop weights γ_0..γ_K were initialized.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "policy")]
pub enum GammaInit {
    /// γ_k = α·(1−α)^k with the final weight absorbing the geometric tail,
    /// so the weights always sum to 1.
    Ppr { alpha_damp: f64 },
    /// γ_k = 1/(K+1).
    Uniform,
    /// Caller-supplied values.
    Explicit,
}

/// Hop weights of the propagation series Z = Σ_k γ_k Â^k V.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GammaWeights {
    gamma: Vec<f64>,
    learnable: bool,
    init_policy: GammaInit,
}

impl GammaWeights {
    /// Personalized-PageRank initialization with damping `alpha_damp ∈ (0,1)`.
    pub fn ppr(k_max: usize, alpha_damp: f64) -> Result<Self> {
        if !(alpha_damp > 0.0 && alpha_damp < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "ppr damping must lie in (0,1), got {alpha_damp}"
            )));
        }
        let mut gamma = Vec::with_capacity(k_max + 1);
        for k in 0..k_max {
            gamma.push(alpha_damp * (1.0 - alpha_damp).powi(k as i32));
        }
        gamma.push((1.0 - alpha_damp).powi(k_max as i32));
        Ok(GammaWeights {
            gamma,
            learnable: true,
            init_policy: GammaInit::Ppr { alpha_damp },
        })
    }

    pub fn uniform(k_max: usize) -> Self {
        GammaWeights {
            gamma: vec![1.0 / (k_max as f64 + 1.0); k_max + 1],
            learnable: true,
            init_policy: GammaInit::Uniform,
        }
    }

    pub fn explicit(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidConfig("gamma weights must be nonempty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "gamma weights".into(),
            });
        }
        Ok(GammaWeights {
            gamma: values,
            learnable: true,
            init_policy: GammaInit::Explicit,
        })
    }

    pub fn with_learnable(mut self, learnable: bool) -> Self {
        self.learnable = learnable;
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.gamma
    }

    /// K: the highest propagation power; `values().len() == K + 1`.
    pub fn k_max(&self) -> usize {
        self.gamma.len() - 1
    }

    pub fn learnable(&self) -> bool {
        self.learnable
    }

    pub fn init_policy(&self) -> &GammaInit {
        &self.init_policy
    }
}

/// Row-normalized query factor and column-normalized key factor. The product
/// Q̂K̂ᵀ is row-stochastic by construction: Q̂·(K̂ᵀ1) = Q̂·1_d = 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionFactors {
    q_hat: Mat,
    k_hat: Mat,
}

impl AttentionFactors {
    pub fn q_hat(&self) -> &Mat {
        &self.q_hat
    }

    pub fn k_hat(&self) -> &Mat {
        &self.k_hat
    }

    /// Explicit n×n product, for oracles and small-scale diagnostics only.
    pub fn materialize(&self) -> Mat {
        self.q_hat.dot(&self.k_hat.t())
    }
}

/// Attention mode selector: true softmax attention or its factorized
/// linear-complexity approximation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionMode {
    Exact,
    Scalable,
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

/// Q = H·W_Q, K = H·W_K, V = H·W_V.
pub fn project(h: &Mat, p: &AttentionParams) -> Result<(Mat, Mat, Mat)> {
    if h.ncols() != p.d_in() {
        return Err(Error::shape(
            "projection",
            format!("h.cols == {}", p.d_in()),
            h.ncols(),
        ));
    }
    Ok((h.dot(&p.w_q), h.dot(&p.w_k), h.dot(&p.w_v)))
}

/// Dense attention: Â = Softmax(QKᵀ / divisor) rows, Ĥ = ÂV.
pub fn dense_attention(q: &Mat, k: &Mat, v: &Mat, scale_mode: ScaleMode) -> Result<(Mat, Mat)> {
    let (n, d) = q.dim();
    if k.dim() != (n, d) || v.nrows() != n {
        return Err(Error::shape(
            "dense attention",
            format!("Q {n}x{d}, K {n}x{d}, V {n}x*"),
            format!("K {:?}, V {:?}", k.dim(), v.dim()),
        ));
    }
    let divisor = scale_mode.divisor(n, d);
    let mut logits = q.dot(&k.t());
    logits.mapv_inplace(|x| x / divisor);
    ensure_finite(&logits, "attention logits")?;
    let a_hat = row_softmax(&logits);
    let h_hat = a_hat.dot(v);
    Ok((a_hat, h_hat))
}

/// Q̂ = row softmax of Q over features; K̂ = column softmax of K over nodes.
pub fn linear_attention_factors(q: &Mat, k: &Mat) -> Result<AttentionFactors> {
    if q.dim() != k.dim() {
        return Err(Error::shape("attention factors", format!("{:?}", q.dim()), format!("{:?}", k.dim())));
    }
    ensure_finite(q, "query matrix")?;
    ensure_finite(k, "key matrix")?;
    Ok(AttentionFactors {
        q_hat: row_softmax(q),
        k_hat: col_softmax(k),
    })
}

/// Z = Σ_{k=0}^{K} γ_k Â^k V by naive repeated n×n multiplication — the
/// O(K·n³) reference path. Rejects inputs whose rows deviate from sum 1 by
/// more than 1e-8; use [`gpa_exact_unchecked`] for diagnostic probes on
/// arbitrary matrices.
pub fn gpa_exact(a_like: &Mat, v: &Mat, gamma: &GammaWeights) -> Result<Mat> {
    ensure_row_stochastic(a_like, 1e-8)?;
    gpa_exact_unchecked(a_like, v, gamma)
}

/// [`gpa_exact`] without the row-stochasticity precondition.
pub fn gpa_exact_unchecked(a_like: &Mat, v: &Mat, gamma: &GammaWeights) -> Result<Mat> {
    let n = a_like.nrows();
    if a_like.ncols() != n || v.nrows() != n {
        return Err(Error::shape(
            "propagation series",
            format!("square {n}x{n} and V with {n} rows"),
            format!("A {:?}, V {:?}", a_like.dim(), v.dim()),
        ));
    }
    let g = gamma.values();
    let mut z = v * g[0];
    if gamma.k_max() >= 1 {
        let mut power = a_like.clone(); // Â^k, starting at k=1
        for (k, &gk) in g.iter().enumerate().skip(1) {
            z = z + power.dot(v) * gk;
            if k < gamma.k_max() {
                power = power.dot(a_like);
            }
        }
    }
    Ok(z)
}

/// Linear-complexity accumulation:
///
/// ```text
/// Z ← γ_0·V;  M ← K̂ᵀV;  C ← K̂ᵀQ̂ (once)
/// for k in 1..=K:  Z += γ_k·(Q̂M);  M ← C·M
/// ```
///
/// Equivalent to [`gpa_exact`] on the materialized product Q̂K̂ᵀ, at
/// O(K·n·d²) cost and without forming any n×n matrix.
pub fn gpa_scalable(f: &AttentionFactors, v: &Mat, gamma: &GammaWeights) -> Result<Mat> {
    let (n, d) = f.q_hat.dim();
    if f.k_hat.dim() != (n, d) || v.nrows() != n {
        return Err(Error::shape(
            "scalable propagation",
            format!("factors {n}x{d}, V with {n} rows"),
            format!("K̂ {:?}, V {:?}", f.k_hat.dim(), v.dim()),
        ));
    }
    let g = gamma.values();
    let mut z = v * g[0];
    if gamma.k_max() >= 1 {
        let mut m = f.k_hat.t().dot(v); // d×d_v
        let c = f.k_hat.t().dot(&f.q_hat); // d×d, computed once
        for (k, &gk) in g.iter().enumerate().skip(1) {
            z = z + f.q_hat.dot(&m) * gk;
            if k < gamma.k_max() {
                m = c.dot(&m);
            }
        }
    }
    Ok(z)
}

/// Projects `h` and runs the propagation series in the requested mode.
pub fn gpa_forward(
    h: &Mat,
    p: &AttentionParams,
    gamma: &GammaWeights,
    mode: AttentionMode,
) -> Result<Mat> {
    let (q, k, v) = project(h, p)?;
    match mode {
        AttentionMode::Exact => {
            let (a_hat, _) = dense_attention(&q, &k, &v, p.scale_mode)?;
            gpa_exact(&a_hat, &v, gamma)
        }
        AttentionMode::Scalable => {
            let f = linear_attention_factors(&q, &k)?;
            gpa_scalable(&f, &v, gamma)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::row_sums;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rand_mat(rng: &mut ChaCha20Rng, n: usize, d: usize, lo: f64, hi: f64) -> Mat {
        Mat::from_shape_fn((n, d), |_| rng.gen_range(lo..hi))
    }

    /// Independent triple-loop matrix multiply (no BLAS-style dot).
    fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
        let (n, k) = a.dim();
        let m = b.ncols();
        let mut out = Mat::zeros((n, m));
        for i in 0..n {
            for j in 0..m {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += a[[i, l]] * b[[l, j]];
                }
                out[[i, j]] = acc;
            }
        }
        out
    }

    fn max_abs_diff(a: &Mat, b: &Mat) -> f64 {
        a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
    }

    fn identity_params(d: usize) -> AttentionParams {
        let eye = Mat::eye(d);
        AttentionParams::new(eye.clone(), eye.clone(), eye, ScaleMode::None).unwrap()
    }

    // ---- project ----------------------------------------------------------

    #[test]
    fn project_identity_weights_passes_input_through() {
        let h = array![[1.0, -2.0], [0.5, 3.0]];
        let (q, k, v) = project(&h, &identity_params(2)).unwrap();
        assert_eq!(q, h);
        assert_eq!(k, h);
        assert_eq!(v, h);
    }

    #[test]
    fn project_scalar_case() {
        let h = array![[2.0]];
        let p = AttentionParams::new(array![[3.0]], array![[1.0]], array![[1.0]], ScaleMode::None)
            .unwrap();
        let (q, _, _) = project(&h, &p).unwrap();
        assert_eq!(q, array![[6.0]]);
    }

    #[test]
    fn project_matches_triple_loop_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let h = rand_mat(&mut rng, 5, 4, -2.0, 2.0);
        let w = rand_mat(&mut rng, 4, 3, -2.0, 2.0);
        let p = AttentionParams::new(w.clone(), w.clone(), w.clone(), ScaleMode::None).unwrap();
        let (q, _, _) = project(&h, &p).unwrap();
        assert!(max_abs_diff(&q, &naive_matmul(&h, &w)) < 1e-12);
    }

    #[test]
    fn project_rejects_wrong_input_width() {
        let h = array![[1.0, 2.0, 3.0]];
        assert!(matches!(
            project(&h, &identity_params(2)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    // ---- dense_attention ---------------------------------------------------

    #[test]
    fn dense_attention_single_node() {
        let q = array![[3.0, -1.0]];
        let v = array![[7.0, 8.0, 9.0]];
        let (a, h) = dense_attention(&q, &q, &v, ScaleMode::InvSqrtD).unwrap();
        assert_eq!(a, array![[1.0]]);
        assert_eq!(h, v);
    }

    #[test]
    fn dense_attention_zero_logits_average_values() {
        let z = Mat::zeros((3, 2));
        let v = array![[3.0, 0.0], [0.0, 6.0], [3.0, 3.0]];
        let (a, h) = dense_attention(&z, &z, &v, ScaleMode::InvSqrtD).unwrap();
        for x in a.iter() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        // Each output row is the column mean of V.
        for row in h.rows() {
            assert!((row[0] - 2.0).abs() < 1e-12);
            assert!((row[1] - 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dense_attention_matches_softmax_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let q = rand_mat(&mut rng, 6, 3, -1.5, 1.5);
        let k = rand_mat(&mut rng, 6, 3, -1.5, 1.5);
        let v = rand_mat(&mut rng, 6, 3, -1.5, 1.5);
        let (a, _) = dense_attention(&q, &k, &v, ScaleMode::InvSqrtD).unwrap();

        // Direct exp/rowsum reference with the same max-subtraction
        // stabilization (cancels exactly in the quotient).
        let logits = naive_matmul(&q, &k.t().to_owned());
        let scale = (3.0_f64).sqrt();
        for i in 0..6 {
            let row: Vec<f64> = (0..6).map(|j| logits[[i, j]] / scale).collect();
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for j in 0..6 {
                assert!((a[[i, j]] - exps[j] / denom).abs() < 1e-12);
            }
        }
        assert!(ensure_row_stochastic(&a, 1e-12).is_ok());
    }

    #[test]
    fn dense_attention_rejects_non_finite_logits() {
        let q = array![[f64::MAX], [f64::MAX]];
        let k = array![[f64::MAX], [f64::MAX]];
        let v = array![[1.0], [1.0]];
        assert!(matches!(
            dense_attention(&q, &k, &v, ScaleMode::None),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn scale_mode_selects_divisor() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let q = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
        let k = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
        let v = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
        let (a_d, _) = dense_attention(&q, &k, &v, ScaleMode::InvSqrtD).unwrap();
        let (a_n, _) = dense_attention(&q, &k, &v, ScaleMode::InvSqrtN).unwrap();
        let (a_1, _) = dense_attention(&q, &k, &v, ScaleMode::None).unwrap();
        // d=2, n=4: all three divisors differ, so the matrices must differ.
        assert!(max_abs_diff(&a_d, &a_n) > 1e-6);
        assert!(max_abs_diff(&a_d, &a_1) > 1e-6);
        // Manual check of the √n divisor on one entry's logits.
        let (a_manual, _) = dense_attention(
            &(q.clone() / 2.0),
            &k,
            &v,
            ScaleMode::None,
        )
        .unwrap();
        assert!(max_abs_diff(&a_n, &a_manual) < 1e-12);
    }

    // ---- linear_attention_factors ------------------------------------------

    #[test]
    fn zero_inputs_give_uniform_factors() {
        let q = Mat::zeros((4, 3));
        let f = linear_attention_factors(&q, &q).unwrap();
        for v in f.q_hat().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for v in f.k_hat().iter() {
            assert!((v - 1.0 / 4.0).abs() < 1e-15);
        }
        let prod = f.materialize();
        for v in prod.iter() {
            assert!((v - 1.0 / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_factor_product_is_one() {
        let q = array![[3.0, -5.0, 0.2]];
        let k = array![[100.0, 2.0, -7.0]];
        let f = linear_attention_factors(&q, &k).unwrap();
        let prod = f.materialize();
        assert!((prod[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn factor_product_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let q = rand_mat(&mut rng, 8, 4, -3.0, 3.0);
        let k = rand_mat(&mut rng, 8, 4, -3.0, 3.0);
        let f = linear_attention_factors(&q, &k).unwrap();
        let prod = f.materialize();
        for s in row_sums(&prod) {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    // ---- gpa_exact ---------------------------------------------------------

    #[test]
    fn gamma_delta_zero_returns_values_unchanged() {
        let a = array![[0.5, 0.5], [0.25, 0.75]];
        let v = array![[1.0, 2.0], [3.0, 4.0]];
        let g = GammaWeights::explicit(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(gpa_exact(&a, &v, &g).unwrap(), v);
    }

    #[test]
    fn gamma_delta_one_reduces_to_dense_attention() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let q = rand_mat(&mut rng, 5, 3, -1.0, 1.0);
        let k = rand_mat(&mut rng, 5, 3, -1.0, 1.0);
        let v = rand_mat(&mut rng, 5, 3, -1.0, 1.0);
        let (a_hat, h_hat) = dense_attention(&q, &k, &v, ScaleMode::InvSqrtD).unwrap();
        let g = GammaWeights::explicit(vec![0.0, 1.0]).unwrap();
        let z = gpa_exact(&a_hat, &v, &g).unwrap();
        assert!(max_abs_diff(&z, &h_hat) < 1e-14);
    }

    #[test]
    fn gpa_exact_matches_horner_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let a = row_softmax(&rand_mat(&mut rng, 4, 4, -1.0, 1.0));
        let v = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
        let g = GammaWeights::ppr(3, 0.1).unwrap();
        let z = gpa_exact(&a, &v, &g).unwrap();

        // Horner evaluation: ((γ_3·A + γ_2·I)·A + γ_1·I)·A + γ_0·I, applied
        // to V — a different association order than the implementation.
        let gs = g.values();
        let eye = Mat::eye(4);
        let mut acc = &a * gs[3] + &eye * gs[2];
        acc = naive_matmul(&acc, &a) + &eye * gs[1];
        acc = naive_matmul(&acc, &a) + &eye * gs[0];
        let want = naive_matmul(&acc, &v);
        assert!(max_abs_diff(&z, &want) < 1e-10);
    }

    #[test]
    fn gpa_exact_rejects_non_stochastic_rows_unless_unchecked() {
        let a = array![[0.7, 0.7], [0.5, 0.5]];
        let v = array![[1.0], [2.0]];
        let g = GammaWeights::ppr(2, 0.1).unwrap();
        assert!(matches!(
            gpa_exact(&a, &v, &g),
            Err(Error::NotRowStochastic { row: 0, .. })
        ));
        assert!(gpa_exact_unchecked(&a, &v, &g).is_ok());
    }

    // ---- gpa_scalable ------------------------------------------------------

    #[test]
    fn k_zero_scales_values_by_gamma_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let q = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
        let f = linear_attention_factors(&q, &q).unwrap();
        let v = rand_mat(&mut rng, 4, 2, -1.0, 1.0);
        let g = GammaWeights::explicit(vec![0.25]).unwrap();
        let z = gpa_scalable(&f, &v, &g).unwrap();
        assert!(max_abs_diff(&z, &(&v * 0.25)) < 1e-15);
    }

    #[test]
    fn scalable_equals_exact_on_materialized_product() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let q = rand_mat(&mut rng, 6, 3, -2.0, 2.0);
        let k = rand_mat(&mut rng, 6, 3, -2.0, 2.0);
        let v = rand_mat(&mut rng, 6, 3, -2.0, 2.0);
        let f = linear_attention_factors(&q, &k).unwrap();
        let g = GammaWeights::ppr(4, 0.1).unwrap();
        let fast = gpa_scalable(&f, &v, &g).unwrap();
        let slow = gpa_exact(&f.materialize(), &v, &g).unwrap();
        let rel = crate::linalg::frobenius_norm(&(&fast - &slow))
            / crate::linalg::frobenius_norm(&slow).max(1e-300);
        assert!(rel <= 1e-10, "relative error {rel}");
    }

    #[test]
    fn single_node_scalable_sums_gamma() {
        let q = array![[0.3, -1.0]];
        let f = linear_attention_factors(&q, &q).unwrap();
        let v = array![[5.0, -2.0]];
        let g = GammaWeights::explicit(vec![0.5, 0.25, 0.125]).unwrap();
        let z = gpa_scalable(&f, &v, &g).unwrap();
        assert!(max_abs_diff(&z, &(&v * 0.875)) < 1e-12);
    }

    // ---- gpa_forward -------------------------------------------------------

    #[test]
    fn forward_k1_exact_is_dense_attention() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let h = rand_mat(&mut rng, 5, 4, -1.0, 1.0);
        let w = rand_mat(&mut rng, 4, 3, -1.0, 1.0);
        let p = AttentionParams::new(
            rand_mat(&mut rng, 4, 3, -1.0, 1.0),
            rand_mat(&mut rng, 4, 3, -1.0, 1.0),
            w,
            ScaleMode::InvSqrtD,
        )
        .unwrap();
        let g = GammaWeights::explicit(vec![0.0, 1.0]).unwrap();
        let z = gpa_forward(&h, &p, &g, AttentionMode::Exact).unwrap();
        let (q, k, v) = project(&h, &p).unwrap();
        let (_, h_hat) = dense_attention(&q, &k, &v, ScaleMode::InvSqrtD).unwrap();
        assert!(max_abs_diff(&z, &h_hat) < 1e-12);
    }

    #[test]
    fn identical_rows_make_both_modes_agree() {
        // With every input row equal, Q and K have identical rows, both
        // attention matrices become uniform, and the two modes coincide.
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = Mat::from_shape_fn((6, 4), |(_, j)| row[j]);
        let p = AttentionParams::new(
            rand_mat(&mut rng, 4, 3, -1.0, 1.0),
            rand_mat(&mut rng, 4, 3, -1.0, 1.0),
            rand_mat(&mut rng, 4, 3, -1.0, 1.0),
            ScaleMode::None,
        )
        .unwrap();
        let g = GammaWeights::ppr(3, 0.1).unwrap();
        let exact = gpa_forward(&h, &p, &g, AttentionMode::Exact).unwrap();
        let scalable = gpa_forward(&h, &p, &g, AttentionMode::Scalable).unwrap();
        assert!(max_abs_diff(&exact, &scalable) < 1e-10);
    }

    #[test]
    fn ppr_outputs_stay_in_value_convex_hull() {
        // With γ ≥ 0 summing to 1, Z = W·V where W = Σ γ_k Â^k. The oracle
        // materializes W by naive powers, certifies it is a convex-weight
        // matrix, and checks Z against it — an explicit convex-combination
        // certificate for every output row.
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let h = rand_mat(&mut rng, 10, 5, -1.0, 1.0);
        let p = AttentionParams::new(
            rand_mat(&mut rng, 5, 5, -1.0, 1.0),
            rand_mat(&mut rng, 5, 5, -1.0, 1.0),
            rand_mat(&mut rng, 5, 5, -1.0, 1.0),
            ScaleMode::InvSqrtD,
        )
        .unwrap();
        let g = GammaWeights::ppr(5, 0.1).unwrap();
        assert!((g.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for mode in [AttentionMode::Exact, AttentionMode::Scalable] {
            let z = gpa_forward(&h, &p, &g, mode).unwrap();
            let (q, k, v) = project(&h, &p).unwrap();
            let a = match mode {
                AttentionMode::Exact => dense_attention(&q, &k, &v, ScaleMode::InvSqrtD)
                    .unwrap()
                    .0,
                AttentionMode::Scalable => {
                    linear_attention_factors(&q, &k).unwrap().materialize()
                }
            };
            let mut weight = Mat::eye(10) * g.values()[0];
            let mut power = Mat::eye(10);
            for &gk in &g.values()[1..] {
                power = naive_matmul(&power, &a);
                weight = weight + &power * gk;
            }
            // Certificate: nonnegative rows summing to 1...
            for s in row_sums(&weight) {
                assert!((s - 1.0).abs() < 1e-9);
            }
            assert!(weight.iter().all(|&w| w >= -1e-12));
            // ...that reproduce Z, so each row of Z is a convex combination
            // of V's rows.
            let want = naive_matmul(&weight, &v);
            assert!(max_abs_diff(&z, &want) < 1e-9);
        }
    }

    // ---- GammaWeights ------------------------------------------------------

    #[test]
    fn ppr_weights_decay_geometrically_and_sum_to_one() {
        let g = GammaWeights::ppr(10, 0.1).unwrap();
        let v = g.values();
        assert_eq!(v.len(), 11);
        assert!((v[0] - 0.1).abs() < 1e-15);
        for k in 1..10 {
            assert!((v[k] / v[k - 1] - 0.9).abs() < 1e-12);
        }
        // Tail absorption: γ_K = (1−α)^K.
        assert!((v[10] - 0.9_f64.powi(10)).abs() < 1e-15);
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn uniform_and_explicit_policies() {
        let g = GammaWeights::uniform(3);
        assert_eq!(g.values(), &[0.25, 0.25, 0.25, 0.25]);
        assert_eq!(g.k_max(), 3);
        assert!(GammaWeights::explicit(vec![]).is_err());
        assert!(GammaWeights::explicit(vec![1.0, f64::NAN]).is_err());
        assert!(GammaWeights::ppr(3, 1.5).is_err());
    }

    // ---- invariants --------------------------------------------------------

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn prop_stochastic_powers_stay_stochastic(seed in 0u64..500, n in 2usize..12) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let a = row_softmax(&rand_mat(&mut rng, n, n, -2.0, 2.0));
            let mut power = Mat::eye(n);
            for _k in 0..=10 {
                for s in row_sums(&power) {
                    prop_assert!((s - 1.0).abs() < 1e-10);
                }
                power = power.dot(&a);
            }
        }

        #[test]
        fn prop_factorization_identity(seed in 0u64..64) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..=16);
            let d = rng.gen_range(1..=8);
            let k_max = rng.gen_range(0..=6);
            let q = rand_mat(&mut rng, n, d, -2.0, 2.0);
            let k = rand_mat(&mut rng, n, d, -2.0, 2.0);
            let v = rand_mat(&mut rng, n, 3, -2.0, 2.0);
            let f = linear_attention_factors(&q, &k).unwrap();
            let g = GammaWeights::ppr(k_max, 0.1).unwrap();
            let fast = gpa_scalable(&f, &v, &g).unwrap();
            let slow = gpa_exact(&f.materialize(), &v, &g).unwrap();
            let rel = crate::linalg::frobenius_norm(&(&fast - &slow))
                / crate::linalg::frobenius_norm(&slow).max(1e-300);
            prop_assert!(rel <= 1e-10);
        }

        #[test]
        fn prop_permutation_equivariance(seed in 0u64..64) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let n = 7;
            let h = rand_mat(&mut rng, n, 4, -1.0, 1.0);
            let p = AttentionParams::new(
                rand_mat(&mut rng, 4, 3, -1.0, 1.0),
                rand_mat(&mut rng, 4, 3, -1.0, 1.0),
                rand_mat(&mut rng, 4, 3, -1.0, 1.0),
                ScaleMode::InvSqrtD,
            ).unwrap();
            let g = GammaWeights::ppr(4, 0.1).unwrap();

            use rand::seq::SliceRandom;
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let mut hp = Mat::zeros((n, 4));
            for (new, &old) in perm.iter().enumerate() {
                hp.row_mut(new).assign(&h.row(old));
            }

            for mode in [AttentionMode::Exact, AttentionMode::Scalable] {
                let z = gpa_forward(&h, &p, &g, mode).unwrap();
                let zp = gpa_forward(&hp, &p, &g, mode).unwrap();
                for (new, &old) in perm.iter().enumerate() {
                    for c in 0..3 {
                        prop_assert!((zp[[new, c]] - z[[old, c]]).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
