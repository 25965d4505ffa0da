//! Graph construction, validation and adjacency normalization.

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::linalg::{Csr, Mat};

/// A validated graph. Undirected edges are canonicalized to `u <= v` and
/// stored once; duplicates and self-loops are rejected at construction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(u32, u32)>,
    directed: bool,
}

impl Graph {
    pub fn new(n: usize, edges: Vec<(u32, u32)>, directed: bool) -> Result<Self> {
        let mut canon = Vec::with_capacity(edges.len());
        for &(u, v) in &edges {
            if (u as usize) >= n || (v as usize) >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for n={n}"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            canon.push(if directed || u <= v { (u, v) } else { (v, u) });
        }
        canon.sort_unstable();
        if canon.windows(2).any(|w| w[0] == w[1]) {
            let dup = canon.windows(2).find(|w| w[0] == w[1]).unwrap()[0];
            return Err(Error::InvalidGraph(format!(
                "duplicate edge ({}, {}) after canonicalization",
                dup.0, dup.1
            )));
        }
        Ok(Graph {
            n,
            edges: canon,
            directed,
        })
    }

    /// Like [`Graph::new`] but silently merges duplicate edges, returning the
    /// number of raw pairs that were folded away. Used by the dataset loader,
    /// whose manifests may count either raw or deduplicated edges.
    pub fn new_dedup(n: usize, edges: Vec<(u32, u32)>, directed: bool) -> Result<(Self, usize)> {
        let mut canon = Vec::with_capacity(edges.len());
        for &(u, v) in &edges {
            if (u as usize) >= n || (v as usize) >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({u}, {v}) out of range for n={n}"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!("self-loop at node {u}")));
            }
            canon.push(if directed || u <= v { (u, v) } else { (v, u) });
        }
        let raw = canon.len();
        canon.sort_unstable();
        canon.dedup();
        let merged = raw - canon.len();
        Ok((
            Graph {
                n,
                edges: canon,
                directed,
            },
            merged,
        ))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Edge count after canonicalization.
    pub fn m(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    /// Node degrees counting each undirected edge at both endpoints
    /// (out-degree for directed graphs).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.n];
        for &(u, v) in &self.edges {
            deg[u as usize] += 1;
            if !self.directed {
                deg[v as usize] += 1;
            }
        }
        deg
    }

    /// Dense 0/1 adjacency matrix (symmetric for undirected graphs).
    pub fn adjacency_dense(&self) -> Mat {
        let mut a = Mat::zeros((self.n, self.n));
        for &(u, v) in &self.edges {
            a[[u as usize, v as usize]] = 1.0;
            if !self.directed {
                a[[v as usize, u as usize]] = 1.0;
            }
        }
        a
    }
}

/// Adjacency normalization convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// D̂^{-1/2} (A + I) D̂^{-1/2} with D̂ the degree of A + I.
    SymSelfloop,
    /// Random-walk D^{-1} A; zero-degree rows stay all-zero.
    Rw,
    /// Plain 0/1 adjacency.
    None,
}

/// Dense normalized adjacency.
pub fn normalize_adjacency(g: &Graph, mode: NormMode) -> Mat {
    normalize_adjacency_csr(g, mode).to_dense()
}

/// Sparse normalized adjacency; same values as [`normalize_adjacency`], kept
/// sparse so message passing costs O(nnz · d).
pub fn normalize_adjacency_csr(g: &Graph, mode: NormMode) -> Csr {
    let n = g.n();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    match mode {
        NormMode::None => {
            for &(u, v) in g.edges() {
                triplets.push((u as usize, v as usize, 1.0));
                if !g.directed() {
                    triplets.push((v as usize, u as usize, 1.0));
                }
            }
        }
        NormMode::Rw => {
            let deg = g.degrees();
            let mut push = |u: usize, v: usize| {
                triplets.push((u, v, 1.0 / deg[u] as f64));
            };
            for &(u, v) in g.edges() {
                push(u as usize, v as usize);
                if !g.directed() {
                    push(v as usize, u as usize);
                }
            }
        }
        NormMode::SymSelfloop => {
            // Degree of A + I: every node gains the self-loop.
            let mut deg_hat: Vec<f64> = g.degrees().iter().map(|&d| (d + 1) as f64).collect();
            if g.directed() {
                // Row degree of A + I for directed input.
                deg_hat = {
                    let mut d = vec![1.0; n];
                    for &(u, _) in g.edges() {
                        d[u as usize] += 1.0;
                    }
                    d
                };
            }
            // Entry (u, v) is 1/√(d̂_u · d̂_v); one square root of the product
            // keeps exactly-representable cases (e.g. d̂_u = d̂_v = 2) exact.
            let entry = |u: usize, v: usize| 1.0 / (deg_hat[u] * deg_hat[v]).sqrt();
            for i in 0..n {
                triplets.push((i, i, entry(i, i)));
            }
            for &(u, v) in g.edges() {
                let (u, v) = (u as usize, v as usize);
                triplets.push((u, v, entry(u, v)));
                if !g.directed() {
                    triplets.push((v, u, entry(v, u)));
                }
            }
        }
    }
    Csr::from_triplets(n, n, triplets)
}

/// Distance metric for k-nearest-neighbour graph construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnMetric {
    Euclidean,
    Cosine,
}

/// Builds an undirected graph linking each row of `x` to its `k` nearest
/// distinct rows (self excluded), symmetrized by union. Ties are broken
/// toward the lower node index.
pub fn knn_graph(x: &Mat, k: usize, metric: KnnMetric) -> Result<Graph> {
    let n = x.nrows();
    if k == 0 || k >= n {
        return Err(Error::KnnArity { k, n });
    }
    let norms: Vec<f64> = x
        .rows()
        .into_iter()
        .map(|r| r.dot(&r).sqrt())
        .collect();
    let mut edges: Vec<(u32, u32)> = Vec::new();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        cand.clear();
        let xi = x.row(i);
        for j in 0..n {
            if j == i {
                continue;
            }
            let d = match metric {
                KnnMetric::Euclidean => {
                    let diff = &xi - &x.row(j);
                    diff.dot(&diff)
                }
                KnnMetric::Cosine => {
                    // Zero rows are treated as having similarity 0.
                    let denom = norms[i] * norms[j];
                    let sim = if denom > 0.0 { xi.dot(&x.row(j)) / denom } else { 0.0 };
                    1.0 - sim
                }
            };
            cand.push((d, j));
        }
        cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in cand.iter().take(k) {
            let (u, v) = if i <= j { (i, j) } else { (j, i) };
            edges.push((u as u32, v as u32));
        }
    }
    edges.sort_unstable();
    edges.dedup();
    Graph::new(n, edges, false)
}

/// Disjoint train/valid/test node index sets.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SplitMask {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitMask {
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (name, set) in [
            ("train", &self.train),
            ("valid", &self.valid),
            ("test", &self.test),
        ] {
            for &i in set {
                if i >= n {
                    return Err(Error::InvalidSplit(format!(
                        "{name} index {i} out of range for n={n}"
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidSplit(format!(
                        "node {i} appears in more than one subset"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Seed-deterministic random split. Subset sizes are `floor(f_tr·n)` and
/// `floor(f_va·n)`; the test set receives `floor(n·Σf) − |train| − |valid|`,
/// i.e. the rounding remainder of the covered portion.
pub fn random_split(n: usize, fractions: (f64, f64, f64), seed: u64) -> Result<SplitMask> {
    let (f_tr, f_va, f_te) = fractions;
    let total = f_tr + f_va + f_te;
    if !(f_tr > 0.0 && f_va > 0.0 && f_te > 0.0) || total > 1.0 + 1e-9 {
        return Err(Error::InvalidSplit(format!(
            "fractions must be positive with sum <= 1, got {fractions:?}"
        )));
    }
    let n_tr = (f_tr * n as f64).floor() as usize;
    let n_va = (f_va * n as f64).floor() as usize;
    let covered = (total * n as f64).floor() as usize;
    let n_te = covered.saturating_sub(n_tr + n_va);
    if n_tr == 0 || n_va == 0 || n_te == 0 {
        return Err(Error::DegenerateSplit { n, fractions });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v
    };
    Ok(SplitMask {
        train: sorted(&order[..n_tr]),
        valid: sorted(&order[n_tr..n_tr + n_va]),
        test: sorted(&order[n_tr + n_va..n_tr + n_va + n_te]),
    })
}

/// Spectral radius estimate for a dense symmetric matrix (power iteration).
pub fn spectral_radius_symmetric(a: &Mat) -> f64 {
    let n = a.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..5_000 {
        let w = a.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = &w / norm;
        let l = next.dot(&a.dot(&next));
        if (l - lambda).abs() <= 1e-13 * l.abs().max(1.0) {
            return l.abs();
        }
        lambda = l;
        v = next;
    }
    lambda.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn constructor_canonicalizes_and_rejects_bad_edges() {
        let g = Graph::new(3, vec![(2, 0), (1, 2)], false).unwrap();
        assert_eq!(g.edges(), &[(0, 2), (1, 2)]);
        assert_eq!(g.m(), 2);
        assert!(Graph::new(2, vec![(0, 2)], false).is_err());
        assert!(Graph::new(2, vec![(1, 1)], false).is_err());
        // (0,1) and (1,0) collapse to the same undirected edge.
        assert!(Graph::new(2, vec![(0, 1), (1, 0)], false).is_err());
        let (g, merged) = Graph::new_dedup(2, vec![(0, 1), (1, 0)], false).unwrap();
        assert_eq!((g.m(), merged), (1, 1));
    }

    #[test]
    fn single_node_sym_selfloop_is_identity() {
        let g = Graph::new(1, vec![], false).unwrap();
        let a = normalize_adjacency(&g, NormMode::SymSelfloop);
        assert_eq!(a, array![[1.0]]);
    }

    #[test]
    fn two_node_edge_sym_selfloop_is_all_half() {
        let g = Graph::new(2, vec![(0, 1)], false).unwrap();
        let a = normalize_adjacency(&g, NormMode::SymSelfloop);
        assert_eq!(a, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn path_graph_sym_selfloop_matches_dense_reference() {
        let g = Graph::new(3, vec![(0, 1), (1, 2)], false).unwrap();
        let got = normalize_adjacency(&g, NormMode::SymSelfloop);

        // Independent reference: explicit D̂^{-1/2} (A + I) D̂^{-1/2} product.
        let a_plus_i = array![[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 1.0]];
        let deg_hat = [2.0_f64, 3.0, 2.0];
        let mut d_inv_sqrt = Mat::zeros((3, 3));
        for i in 0..3 {
            d_inv_sqrt[[i, i]] = 1.0 / deg_hat[i].sqrt();
        }
        let want = d_inv_sqrt.dot(&a_plus_i).dot(&d_inv_sqrt);
        for (a, b) in got.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
        // Spot-check the closed-form entries.
        assert!((got[[0, 0]] - 0.5).abs() < 1e-15);
        assert!((got[[1, 1]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((got[[0, 1]] - 1.0 / 6.0_f64.sqrt()).abs() < 1e-15);
        assert_eq!(got[[0, 2]], 0.0);
    }

    #[test]
    fn rw_normalization_leaves_zero_degree_rows_zero() {
        let g = Graph::new(3, vec![(0, 1)], false).unwrap();
        let a = normalize_adjacency(&g, NormMode::Rw);
        assert_eq!(a, array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
    }

    #[test]
    fn csr_and_dense_normalization_agree() {
        let g = Graph::new(5, vec![(0, 1), (1, 2), (2, 3), (3, 4), (0, 4)], false).unwrap();
        for mode in [NormMode::SymSelfloop, NormMode::Rw, NormMode::None] {
            let dense = normalize_adjacency(&g, mode);
            let sparse = normalize_adjacency_csr(&g, mode).to_dense();
            assert_eq!(dense, sparse);
        }
    }

    #[test]
    fn sym_selfloop_spectral_radius_at_most_one() {
        let g = Graph::new(6, vec![(0, 1), (0, 2), (1, 2), (2, 3), (3, 4), (4, 5)], false).unwrap();
        let a = normalize_adjacency(&g, NormMode::SymSelfloop);
        assert!(spectral_radius_symmetric(&a) <= 1.0 + 1e-12);
    }

    #[test]
    fn knn_identical_points_tie_break_to_lowest_index() {
        let x = array![[1.0, 2.0], [1.0, 2.0], [1.0, 2.0]];
        let g = knn_graph(&x, 1, KnnMetric::Euclidean).unwrap();
        // 0→1, 1→0, 2→0; union = {(0,1), (0,2)}.
        assert_eq!(g.edges(), &[(0, 1), (0, 2)]);
    }

    #[test]
    fn knn_line_points_match_exhaustive_oracle() {
        let x = array![[0.0], [1.0], [2.0], [10.0]];
        let g = knn_graph(&x, 1, KnnMetric::Euclidean).unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2), (2, 3)]);
    }

    #[test]
    fn knn_min_degree_is_k_after_union() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let x = Mat::from_shape_fn((50, 8), |_| rng.gen_range(-1.0..1.0));
        let g = knn_graph(&x, 5, KnnMetric::Euclidean).unwrap();
        let deg = g.degrees();
        assert!(deg.iter().all(|&d| d >= 5), "degrees: {deg:?}");

        // Brute-force check: every node's 5 nearest (with tie-break) appear
        // among its neighbours.
        let adj = g.adjacency_dense();
        for i in 0..50 {
            let mut cand: Vec<(f64, usize)> = (0..50)
                .filter(|&j| j != i)
                .map(|j| {
                    let diff = &x.row(i) - &x.row(j);
                    (diff.dot(&diff), j)
                })
                .collect();
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in cand.iter().take(5) {
                assert_eq!(adj[[i, j]], 1.0, "node {i} missing neighbour {j}");
            }
        }
    }

    #[test]
    fn knn_rejects_k_out_of_range() {
        let x = array![[0.0], [1.0]];
        assert!(matches!(
            knn_graph(&x, 2, KnnMetric::Euclidean),
            Err(Error::KnnArity { k: 2, n: 2 })
        ));
        assert!(knn_graph(&x, 0, KnnMetric::Euclidean).is_err());
    }

    #[test]
    fn knn_cosine_ignores_magnitude() {
        let x = array![[1.0, 0.0], [10.0, 0.1], [0.0, 1.0], [0.05, 8.0]];
        let g = knn_graph(&x, 1, KnnMetric::Cosine).unwrap();
        // Directions pair up 0↔1 and 2↔3 regardless of row norms.
        assert_eq!(g.edges(), &[(0, 1), (2, 3)]);
    }

    #[test]
    fn random_split_sizes_follow_floor_rule() {
        let m = random_split(10, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!((m.train.len(), m.valid.len(), m.test.len()), (6, 2, 2));
        m.validate(10).unwrap();

        let m = random_split(2708, (0.6, 0.2, 0.2), 1).unwrap();
        assert_eq!(
            (m.train.len(), m.valid.len(), m.test.len()),
            (1624, 541, 543)
        );
        m.validate(2708).unwrap();
    }

    #[test]
    fn random_split_is_seed_deterministic() {
        let a = random_split(100, (0.6, 0.2, 0.2), 42).unwrap();
        let b = random_split(100, (0.6, 0.2, 0.2), 42).unwrap();
        assert_eq!(a, b);
        let c = random_split(100, (0.6, 0.2, 0.2), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_split_rejects_degenerate_sizes() {
        assert!(matches!(
            random_split(3, (0.6, 0.2, 0.2), 0),
            Err(Error::DegenerateSplit { .. })
        ));
        assert!(random_split(10, (0.8, 0.3, 0.2), 0).is_err());
    }

    proptest! {
        #[test]
        fn prop_knn_commutes_with_node_permutation(seed in 0u64..50) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let n = 12;
            let x = Mat::from_shape_fn((n, 3), |_| rng.gen_range(-1.0..1.0));
            let g = knn_graph(&x, 3, KnnMetric::Euclidean).unwrap();

            // Reverse the node order and rebuild; edges must map through the
            // permutation. Reversal is distance-preserving and, because the
            // coordinates are continuous random draws, ties are absent so the
            // tie-break rule never fires asymmetrically.
            let perm: Vec<usize> = (0..n).rev().collect();
            let mut xp = Mat::zeros((n, 3));
            for (new, &old) in perm.iter().enumerate() {
                xp.row_mut(new).assign(&x.row(old));
            }
            let gp = knn_graph(&xp, 3, KnnMetric::Euclidean).unwrap();
            let mut mapped: Vec<(u32, u32)> = g
                .edges()
                .iter()
                .map(|&(u, v)| {
                    let (a, b) = (n as u32 - 1 - u, n as u32 - 1 - v);
                    if a <= b { (a, b) } else { (b, a) }
                })
                .collect();
            mapped.sort_unstable();
            prop_assert_eq!(mapped, gp.edges().to_vec());
        }

        #[test]
        fn prop_split_partitions_are_disjoint_and_sized(
            n in 10usize..200, seed in 0u64..100
        ) {
            let m = random_split(n, (0.6, 0.2, 0.2), seed).unwrap();
            m.validate(n).unwrap();
            let covered = (n as f64).floor() as usize; // Σf = 1
            prop_assert_eq!(m.train.len() + m.valid.len() + m.test.len(), covered);
            prop_assert_eq!(m.train.len(), (0.6 * n as f64).floor() as usize);
            prop_assert_eq!(m.valid.len(), (0.2 * n as f64).floor() as usize);
        }
    }
}
