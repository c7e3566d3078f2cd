//! Weighted undirected graphs, their Laplacians, and the graph Fourier
//! transform, plus the random graph generators used by the experiment
//! scenarios.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};

/// An undirected graph with nonnegative edge weights, stored densely.
///
/// The weight matrix is validated on construction: square, symmetric,
/// entrywise nonnegative and finite. All downstream code may rely on this.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedGraph {
    n: usize,
    weights: DMatrix<f64>,
}

impl WeightedGraph {
    /// Wraps a weight matrix, rejecting asymmetric or negative input.
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        let (r, c) = weights.shape();
        if r != c {
            return Err(Error::DimensionMismatch {
                expected: r,
                got: c,
                context: "weight matrix must be square",
            });
        }
        for i in 0..r {
            for j in 0..r {
                let w = weights[(i, j)];
                if !w.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "non-finite weight at ({i}, {j})"
                    )));
                }
                if w < 0.0 {
                    return Err(Error::NegativeWeight { i, j, weight: w });
                }
                if j > i && w != weights[(j, i)] {
                    return Err(Error::AsymmetricWeights {
                        i,
                        j,
                        a: w,
                        b: weights[(j, i)],
                    });
                }
            }
        }
        Ok(Self { n: r, weights })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// Edges as (i, j) pairs with i < j and positive weight, in row order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.weights[(i, j)] > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    /// Neighbors of `v` (positive-weight, excluding self loops), ascending.
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        (0..self.n)
            .filter(|&j| j != v && self.weights[(v, j)] > 0.0)
            .collect()
    }

    /// Number of connected components (breadth-first search).
    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.n];
        let mut components = 0;
        let mut queue = Vec::new();
        for start in 0..self.n {
            if seen[start] {
                continue;
            }
            components += 1;
            seen[start] = true;
            queue.push(start);
            while let Some(v) = queue.pop() {
                for j in 0..self.n {
                    if !seen[j] && j != v && self.weights[(v, j)] > 0.0 {
                        seen[j] = true;
                        queue.push(j);
                    }
                }
            }
        }
        components
    }

    pub fn is_connected(&self) -> bool {
        self.n <= 1 || self.component_count() == 1
    }
}

/// Combinatorial Laplacian `L = D - W` with `D` the diagonal of weighted
/// degrees. Symmetric positive semidefinite by construction.
pub fn build_laplacian(g: &WeightedGraph) -> DMatrix<f64> {
    let n = g.n();
    let w = g.weights();
    let mut l = -w.clone();
    for i in 0..n {
        let degree: f64 = (0..n).map(|j| w[(i, j)]).sum();
        l[(i, i)] = degree - w[(i, i)];
    }
    l
}

/// Orthonormal Laplacian eigenbasis with eigenvalues sorted ascending.
///
/// Columns of `eigenvectors` are the graph Fourier modes; `eigenvalues`
/// are the corresponding graph frequencies. The basis is deterministic:
/// each eigenvector is sign-normalized so its largest-magnitude entry is
/// positive (lowest index wins ties), and eigenvectors within a repeated
/// eigenvalue are ordered lexicographically after sign normalization.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    eigenvectors: DMatrix<f64>,
    eigenvalues: DVector<f64>,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvectors(&self) -> &DMatrix<f64> {
        &self.eigenvectors
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// Graph Fourier transform: spectral coefficients `Vᵀ f`.
    pub fn gft(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        if f.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: f.len(),
                context: "gft input",
            });
        }
        Ok(self.eigenvectors.transpose() * f)
    }

    /// Inverse graph Fourier transform: vertex signal `V f̂`.
    pub fn igft(&self, fhat: &DVector<f64>) -> Result<DVector<f64>> {
        if fhat.len() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: self.n(),
                got: fhat.len(),
                context: "igft input",
            });
        }
        Ok(&self.eigenvectors * fhat)
    }

    /// Convenience: Laplacian eigenbasis of a graph.
    pub fn from_graph(g: &WeightedGraph) -> Result<Self> {
        spectral_decompose(&build_laplacian(g))
    }
}

/// Eigendecomposition of a graph Laplacian into a [`SpectralBasis`].
///
/// Fails if the eigensolver does not converge or the result violates the
/// basis guarantees (orthonormality to 1e-9 per entry, reconstruction to
/// 1e-8 relative Frobenius, eigenvalues nonnegative and starting at zero
/// within 1e-9).
pub fn spectral_decompose(laplacian: &DMatrix<f64>) -> Result<SpectralBasis> {
    let (r, c) = laplacian.shape();
    if r != c {
        return Err(Error::DimensionMismatch {
            expected: r,
            got: c,
            context: "laplacian must be square",
        });
    }
    let n = r;
    for i in 0..n {
        for j in (i + 1)..n {
            if (laplacian[(i, j)] - laplacian[(j, i)]).abs() > 1e-12 {
                return Err(Error::AsymmetricWeights {
                    i,
                    j,
                    a: laplacian[(i, j)],
                    b: laplacian[(j, i)],
                });
            }
        }
    }

    let eigen = nalgebra::SymmetricEigen::try_new(laplacian.clone(), f64::EPSILON, 0)
        .ok_or(Error::EigenFailed)?;

    // Ascending eigenvalue order, then the deterministic sign convention.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[a].total_cmp(&eigen.eigenvalues[b]));

    let mut values = DVector::zeros(n);
    let mut vectors = DMatrix::zeros(n, n);
    for (k, &src) in order.iter().enumerate() {
        values[k] = eigen.eigenvalues[src];
        let mut col: DVector<f64> = eigen.eigenvectors.column(src).into_owned();
        let mut lead = 0;
        for i in 1..n {
            if col[i].abs() > col[lead].abs() {
                lead = i;
            }
        }
        if col[lead] < 0.0 {
            col.neg_mut();
        }
        vectors.set_column(k, &col);
    }

    // Within numerically repeated eigenvalues, order columns lexicographically
    // so the basis does not depend on eigensolver internals.
    let scale = values.amax().max(1.0);
    let tie_tol = 1e-9 * scale;
    let mut start = 0;
    while start < n {
        let mut end = start + 1;
        while end < n && values[end] - values[start] <= tie_tol {
            end += 1;
        }
        if end - start > 1 {
            let mut cols: Vec<DVector<f64>> =
                (start..end).map(|k| vectors.column(k).into_owned()).collect();
            cols.sort_by(|a, b| {
                for i in 0..n {
                    match a[i].total_cmp(&b[i]) {
                        std::cmp::Ordering::Equal => continue,
                        other => return other,
                    }
                }
                std::cmp::Ordering::Equal
            });
            for (offset, col) in cols.iter().enumerate() {
                vectors.set_column(start + offset, col);
            }
        }
        start = end;
    }

    let basis = SpectralBasis {
        eigenvectors: vectors,
        eigenvalues: values,
    };
    validate_basis(&basis, laplacian)?;
    Ok(basis)
}

fn validate_basis(basis: &SpectralBasis, laplacian: &DMatrix<f64>) -> Result<()> {
    let n = basis.n();
    let v = &basis.eigenvectors;
    let gram = v.transpose() * v;
    for i in 0..n {
        for j in 0..n {
            let target = if i == j { 1.0 } else { 0.0 };
            if (gram[(i, j)] - target).abs() > 1e-9 {
                return Err(Error::EigenFailed);
            }
        }
    }
    let recon = v * DMatrix::from_diagonal(&basis.eigenvalues) * v.transpose();
    let denom = laplacian.norm().max(1.0);
    if (recon - laplacian).norm() > 1e-8 * denom {
        return Err(Error::EigenFailed);
    }
    if basis.eigenvalues[0].abs() > 1e-9 {
        return Err(Error::EigenFailed);
    }
    for k in 0..n {
        if basis.eigenvalues[k] < -1e-9 {
            return Err(Error::EigenFailed);
        }
        if k > 0 && basis.eigenvalues[k] < basis.eigenvalues[k - 1] {
            return Err(Error::EigenFailed);
        }
    }
    Ok(())
}

/// Random geometric graph on `n` points drawn uniformly in the unit square,
/// with a unit-weight edge between every pair at Euclidean distance at most
/// `radius`.
///
/// Redraws the point set until the graph is connected (at most 100
/// attempts; the last draw is returned if none connects, e.g. for
/// `radius = 0`). Deterministic for a fixed generator state.
pub fn random_geometric_graph<R: Rng + ?Sized>(n: usize, radius: f64, rng: &mut R) -> WeightedGraph {
    assert!(radius >= 0.0, "radius must be nonnegative");
    let r2 = radius * radius;
    let mut graph = None;
    for _ in 0..100 {
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let dx = points[i].0 - points[j].0;
                let dy = points[i].1 - points[j].1;
                if dx * dx + dy * dy <= r2 {
                    w[(i, j)] = 1.0;
                    w[(j, i)] = 1.0;
                }
            }
        }
        let g = WeightedGraph { n, weights: w };
        if g.is_connected() {
            return g;
        }
        graph = Some(g);
    }
    graph.expect("at least one attempt")
}

/// Planted-community graph: unit-weight edges drawn independently with
/// probability `p_intra` inside a community and `p_inter` across.
///
/// Vertices are numbered contiguously by community in the order of `sizes`.
pub fn community_graph<R: Rng + ?Sized>(
    sizes: &[usize],
    p_intra: f64,
    p_inter: f64,
    rng: &mut R,
) -> Result<WeightedGraph> {
    for &p in &[p_intra, p_inter] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidParameter(format!(
                "edge probability {p} outside [0, 1]"
            )));
        }
    }
    if sizes.is_empty() || sizes.iter().sum::<usize>() == 0 {
        return Err(Error::InvalidParameter(
            "community sizes must sum to a positive vertex count".into(),
        ));
    }
    let n: usize = sizes.iter().sum();
    let mut community = vec![0usize; n];
    let mut v = 0;
    for (c, &s) in sizes.iter().enumerate() {
        for _ in 0..s {
            community[v] = c;
            v += 1;
        }
    }
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let p = if community[i] == community[j] {
                p_intra
            } else {
                p_inter
            };
            if rng.random::<f64>() < p {
                w[(i, j)] = 1.0;
                w[(j, i)] = 1.0;
            }
        }
    }
    Ok(WeightedGraph { n, weights: w })
}

/// Random edge sampling: keeps each edge of `g` independently with
/// probability `p` (weights preserved), visiting edges in `(i, j)` row
/// order so the draw is reproducible.
pub fn res_realize<R: Rng + ?Sized>(g: &WeightedGraph, p: f64, rng: &mut R) -> Result<WeightedGraph> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "activation probability {p} outside [0, 1]"
        )));
    }
    let n = g.n();
    let mut w = DMatrix::zeros(n, n);
    for (i, j) in g.edges() {
        if rng.random::<f64>() < p {
            let weight = g.weights()[(i, j)];
            w[(i, j)] = weight;
            w[(j, i)] = weight;
        }
    }
    Ok(WeightedGraph { n, weights: w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn laplacian_single_edge() {
        let g = WeightedGraph::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let l = build_laplacian(&g);
        assert_eq!(l, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    }

    #[test]
    fn laplacian_path_three() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let l = build_laplacian(&WeightedGraph::new(w).unwrap());
        let expected =
            DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(l, expected);
    }

    #[test]
    fn laplacian_rows_sum_to_zero_weighted() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 2.5, 0.5, 2.5, 0.0, 0.0, 0.5, 0.0, 0.0]);
        let l = build_laplacian(&WeightedGraph::new(w).unwrap());
        for i in 0..3 {
            let row_sum: f64 = (0..3).map(|j| l[(i, j)]).sum();
            assert!(row_sum.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_asymmetric_and_negative() {
        let asym = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(matches!(
            WeightedGraph::new(asym),
            Err(Error::AsymmetricWeights { .. })
        ));
        let neg = DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]);
        assert!(matches!(
            WeightedGraph::new(neg),
            Err(Error::NegativeWeight { .. })
        ));
    }

    #[test]
    fn decompose_single_edge() {
        let g = WeightedGraph::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let basis = SpectralBasis::from_graph(&g).unwrap();
        let s = 1.0 / 2.0f64.sqrt();
        assert!((basis.eigenvalues()[0] - 0.0).abs() < 1e-12);
        assert!((basis.eigenvalues()[1] - 2.0).abs() < 1e-12);
        let v = basis.eigenvectors();
        assert!((v[(0, 0)] - s).abs() < 1e-12 && (v[(1, 0)] - s).abs() < 1e-12);
        // Equal-magnitude entries: the lowest index decides the sign, so (+, -).
        assert!((v[(0, 1)] - s).abs() < 1e-12 && (v[(1, 1)] + s).abs() < 1e-12);
    }

    #[test]
    fn decompose_path_three_eigenvalues() {
        let w = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let basis = spectral_decompose(&build_laplacian(&WeightedGraph::new(w).unwrap())).unwrap();
        let expected = [0.0, 1.0, 3.0];
        for (k, e) in expected.iter().enumerate() {
            assert!(
                (basis.eigenvalues()[k] - e).abs() < 1e-9,
                "eigenvalue {k}: {} vs {e}",
                basis.eigenvalues()[k]
            );
        }
    }

    #[test]
    fn decompose_is_deterministic_under_repetition() {
        let mut r = rng(42);
        let g = random_geometric_graph(20, 0.5, &mut r);
        let a = SpectralBasis::from_graph(&g).unwrap();
        let b = SpectralBasis::from_graph(&g).unwrap();
        assert_eq!(a.eigenvectors(), b.eigenvectors());
        assert_eq!(a.eigenvalues(), b.eigenvalues());
    }

    #[test]
    fn gft_roundtrip_and_parseval() {
        let mut r = rng(7);
        let g = random_geometric_graph(15, 0.6, &mut r);
        let basis = SpectralBasis::from_graph(&g).unwrap();
        let f = DVector::from_fn(15, |i, _| (i as f64 * 0.37).sin());
        let fhat = basis.gft(&f).unwrap();
        let back = basis.igft(&fhat).unwrap();
        assert!((&f - &back).norm() < 1e-10);
        assert!((f.norm() - fhat.norm()).abs() < 1e-10);
    }

    #[test]
    fn gft_dimension_checked() {
        let g = WeightedGraph::new(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let basis = SpectralBasis::from_graph(&g).unwrap();
        assert!(basis.gft(&DVector::zeros(3)).is_err());
        assert!(basis.igft(&DVector::zeros(1)).is_err());
    }

    #[test]
    fn geometric_extreme_radii() {
        let mut r = rng(1);
        let complete = random_geometric_graph(10, 1.5, &mut r);
        assert_eq!(complete.edge_count(), 45);
        let empty = random_geometric_graph(4, 0.0, &mut r);
        assert_eq!(empty.edge_count(), 0);
    }

    #[test]
    fn geometric_deterministic_per_seed() {
        let a = random_geometric_graph(30, 0.4, &mut rng(99));
        let b = random_geometric_graph(30, 0.4, &mut rng(99));
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn community_extreme_probabilities() {
        let mut r = rng(3);
        let complete = community_graph(&[3, 3], 1.0, 1.0, &mut r).unwrap();
        assert_eq!(complete.edge_count(), 15);
        let empty = community_graph(&[3, 3], 0.0, 0.0, &mut r).unwrap();
        assert_eq!(empty.edge_count(), 0);
        assert!(community_graph(&[2], 1.5, 0.0, &mut r).is_err());
    }

    #[test]
    fn community_deterministic_per_seed() {
        let a = community_graph(&[5, 5, 5], 0.7, 0.1, &mut rng(11)).unwrap();
        let b = community_graph(&[5, 5, 5], 0.7, 0.1, &mut rng(11)).unwrap();
        assert_eq!(a.weights(), b.weights());
    }

    #[test]
    fn res_extremes_preserve_or_clear() {
        let mut r = rng(5);
        let g = community_graph(&[4, 4], 0.9, 0.3, &mut r).unwrap();
        let kept = res_realize(&g, 1.0, &mut r).unwrap();
        assert_eq!(kept.weights(), g.weights());
        let cleared = res_realize(&g, 0.0, &mut r).unwrap();
        assert_eq!(cleared.edge_count(), 0);
        assert_eq!(cleared.n(), g.n());
    }

    #[test]
    fn res_is_subgraph_with_same_weights() {
        let mut r = rng(6);
        let mut w = DMatrix::zeros(5, 5);
        for (i, j, weight) in [(0, 1, 2.0), (1, 2, 0.5), (2, 3, 1.5), (3, 4, 1.0), (0, 4, 3.0)] {
            w[(i, j)] = weight;
            w[(j, i)] = weight;
        }
        let g = WeightedGraph::new(w).unwrap();
        let sub = res_realize(&g, 0.5, &mut r).unwrap();
        for (i, j) in sub.edges() {
            assert_eq!(sub.weights()[(i, j)], g.weights()[(i, j)]);
        }
        assert!(sub.edge_count() <= g.edge_count());
    }
}
