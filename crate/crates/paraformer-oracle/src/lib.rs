//! Slow, obviously-correct references for the optimized numerical paths:
//! a literal power-series propagation evaluator, central finite differences,
//! an explicit DFT-matrix constant-component extractor, and the wall-clock
//! scaling benchmark.
//!
//! Nothing here may call into the optimized code it is meant to check; the
//! only shared vocabulary is the matrix type.

use std::time::Instant;

use num_complex::Complex64;
use paraformer::attention::{gpa_exact, gpa_scalable, linear_attention_factors, GammaWeights};
use paraformer::linalg::row_softmax;
use paraformer::{Error, Mat, Result};

// ---------------------------------------------------------------------------
// tolerances
// ---------------------------------------------------------------------------

/// Comparison thresholds for oracle checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleTolerance {
    pub rel_tol: f64,
    pub abs_floor: f64,
}

impl OracleTolerance {
    /// For algebraic identities between two exact formulations.
    pub fn algebraic() -> Self {
        OracleTolerance {
            rel_tol: 1e-10,
            abs_floor: 1e-12,
        }
    }

    /// For analytic-vs-finite-difference gradient comparisons.
    pub fn gradient() -> Self {
        OracleTolerance {
            rel_tol: 1e-4,
            abs_floor: 1e-12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rel_tol > 0.0 && self.abs_floor > 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "tolerances must be positive: rel_tol={}, abs_floor={}",
                self.rel_tol, self.abs_floor
            )))
        }
    }

    /// Relative error with an absolute floor in the denominator.
    pub fn rel_error(&self, got: f64, want: f64) -> f64 {
        (got - want).abs() / got.abs().max(want.abs()).max(self.abs_floor)
    }

    pub fn accepts(&self, got: f64, want: f64) -> bool {
        self.rel_error(got, want) <= self.rel_tol
    }
}

// ---------------------------------------------------------------------------
// literal power-series propagation
// ---------------------------------------------------------------------------

/// Plain triple-loop matrix product — deliberately not the library's matmul.
fn slow_mm(a: &Mat, b: &Mat) -> Mat {
    let (n, m) = a.dim();
    let p = b.ncols();
    assert_eq!(m, b.nrows());
    let mut out = Mat::zeros((n, p));
    for i in 0..n {
        for j in 0..p {
            let mut acc = 0.0;
            for t in 0..m {
                acc += a[[i, t]] * b[[t, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Z = Σ_{k=0}^{K} γ_k A^k V with every A^k materialized by repeated full
/// multiplication — the O(K·n³) evaluation the optimized paths avoid.
pub fn naive_gpa(a: &Mat, v: &Mat, gamma: &[f64]) -> Mat {
    assert!(!gamma.is_empty(), "need at least the k=0 weight");
    assert_eq!(a.nrows(), a.ncols());
    assert_eq!(a.ncols(), v.nrows());
    let mut z = v * gamma[0];
    let mut power = Mat::eye(a.nrows());
    for &g in &gamma[1..] {
        power = slow_mm(&power, a);
        let term = slow_mm(&power, v);
        z = z + &term * g;
    }
    z
}

// ---------------------------------------------------------------------------
// central finite differences
// ---------------------------------------------------------------------------

/// A coordinate inside a list of parameter tensors.
pub type Coord = (usize, usize, usize);

/// Central differences (f(θ+h·e_i) − f(θ−h·e_i)) / 2h over the sampled
/// coordinates. The loss closure receives the full perturbed tensor list and
/// must be deterministic.
pub fn finite_diff_grad(
    loss_fn: &mut dyn FnMut(&[Mat]) -> f64,
    params: &[Mat],
    coords: &[Coord],
    step: f64,
) -> Result<Vec<f64>> {
    let mut estimates = Vec::with_capacity(coords.len());
    for &(tensor, row, col) in coords {
        let mut plus = params.to_vec();
        plus[tensor][[row, col]] += step;
        let f_plus = loss_fn(&plus);
        let mut minus = params.to_vec();
        minus[tensor][[row, col]] -= step;
        let f_minus = loss_fn(&minus);
        if !(f_plus.is_finite() && f_minus.is_finite()) {
            return Err(Error::NonFinite {
                context: format!(
                    "finite difference at coordinate {tensor}:({row},{col}): f(+h)={f_plus}, f(-h)={f_minus}"
                ),
            });
        }
        estimates.push((f_plus - f_minus) / (2.0 * step));
    }
    Ok(estimates)
}

// ---------------------------------------------------------------------------
// DFT constant-component oracle
// ---------------------------------------------------------------------------

/// Extracts the per-column constant component by building the explicit n×n
/// DFT matrix, keeping only frequency bin 0, and inverse-transforming.
/// The imaginary residue of the round trip must stay below 1e-10.
pub fn dft_dc_oracle(h: &Mat) -> Result<Mat> {
    let n = h.nrows();
    let d = h.ncols();
    if n == 0 || d == 0 {
        return Err(Error::EmptyMatrix {
            context: "DFT oracle".into(),
        });
    }
    let nf = n as f64;
    let omega = |j: usize, t: usize, sign: f64| -> Complex64 {
        let angle = sign * 2.0 * std::f64::consts::PI * (j * t % n) as f64 / nf;
        Complex64::new(angle.cos(), angle.sin())
    };
    // Forward transform of each column, all bins.
    let mut bins = vec![vec![Complex64::new(0.0, 0.0); d]; n];
    for (j, bin) in bins.iter_mut().enumerate() {
        for t in 0..n {
            let w = omega(j, t, -1.0);
            for (c, slot) in bin.iter_mut().enumerate() {
                *slot += w * h[[t, c]];
            }
        }
    }
    // Zero every bin except 0, inverse-transform, check the residue.
    let mut out = Mat::zeros((n, d));
    let mut max_imag: f64 = 0.0;
    for t in 0..n {
        let w = omega(0, t, 1.0); // = 1 for bin 0, kept for symmetry
        for c in 0..d {
            let val = w * bins[0][c] / nf;
            max_imag = max_imag.max(val.im.abs());
            out[[t, c]] = val.re;
        }
    }
    if max_imag >= 1e-10 {
        return Err(Error::NonFinite {
            context: format!("DFT round trip left imaginary residue {max_imag:.3e}"),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// scaling benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    /// Dense propagation via materialized attention powers (cubic regime).
    GpaExactDense,
    /// Factorized propagation (linear-in-n regime).
    GpaScalable,
}

impl BenchOp {
    pub fn name(self) -> &'static str {
        match self {
            BenchOp::GpaExactDense => "gpa_exact_dense",
            BenchOp::GpaScalable => "gpa_scalable",
        }
    }
}

/// One timed repetition.
#[derive(Debug, Clone)]
pub struct BenchRecord {
    pub op: &'static str,
    pub n: usize,
    pub d: usize,
    pub k: usize,
    pub repeat: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub records: Vec<BenchRecord>,
    /// (n, median seconds) per size.
    pub medians: Vec<(usize, f64)>,
    /// Least-squares slope of ln(median) against ln(n).
    pub slope: f64,
}

impl BenchResult {
    /// CSV with one row per repetition: op,n,d,k,repeat,seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("op,n,d,k,repeat,seconds\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.op, r.n, r.d, r.k, r.repeat, r.seconds
            ));
        }
        out
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let mid = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[mid]
    } else {
        0.5 * (xs[mid - 1] + xs[mid])
    }
}

fn lstsq_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Deterministic input generator shared by both ops: a row-stochastic
/// attention matrix (for the dense path) or its factor projections (for the
/// factorized path), plus a value matrix.
fn bench_inputs(n: usize, d: usize, seed: u64) -> (Mat, Mat, Mat) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
    let q = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    let k = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    let v = Mat::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
    (q, k, v)
}

/// Times the requested propagation path over a list of problem sizes and
/// fits a log-log slope to the medians. One warm-up run per size is
/// discarded; everything executes sequentially.
pub fn scaling_benchmark(
    op: BenchOp,
    sizes: &[usize],
    d: usize,
    k_max: usize,
    repeats: usize,
    seed: u64,
) -> Result<BenchResult> {
    if sizes.is_empty() || repeats == 0 {
        return Err(Error::InvalidConfig(
            "benchmark needs at least one size and one repeat".into(),
        ));
    }
    let gamma = GammaWeights::ppr(k_max, 0.1)?;
    let mut records = Vec::new();
    let mut medians = Vec::new();
    for &n in sizes {
        let (q, k, v) = bench_inputs(n, d, seed);
        // Setup (projection/normalization) happens outside the timed region:
        // the measurement targets the propagation loop itself.
        enum Prepared {
            Dense(Mat),
            Factors(paraformer::attention::AttentionFactors),
        }
        let prepared = match op {
            BenchOp::GpaExactDense => {
                let scaled = q.dot(&k.t()) / (d as f64).sqrt();
                Prepared::Dense(row_softmax(&scaled))
            }
            BenchOp::GpaScalable => Prepared::Factors(linear_attention_factors(&q, &k)?),
        };
        let run = || -> Result<Mat> {
            match &prepared {
                Prepared::Dense(a_hat) => gpa_exact(a_hat, &v, &gamma),
                Prepared::Factors(f) => gpa_scalable(f, &v, &gamma),
            }
        };
        run()?; // warm-up, discarded
        let mut times = Vec::with_capacity(repeats);
        for repeat in 0..repeats {
            let t0 = Instant::now();
            let out = run()?;
            let seconds = t0.elapsed().as_secs_f64();
            // Keep the optimizer honest: consume the output.
            assert!(out[[0, 0]].is_finite());
            times.push(seconds);
            records.push(BenchRecord {
                op: op.name(),
                n,
                d,
                k: k_max,
                repeat,
                seconds,
            });
        }
        medians.push((n, median(times)));
    }
    let slope = if medians.len() >= 2 {
        let pts: Vec<(f64, f64)> = medians
            .iter()
            .map(|&(n, s)| ((n as f64).ln(), s.max(1e-12).ln()))
            .collect();
        lstsq_slope(&pts)
    } else {
        f64::NAN
    };
    Ok(BenchResult {
        records,
        medians,
        slope,
    })
}
