//! Cluster spectral data of a Zoll manifold.
//!
//! The Laplacian spectrum of a Zoll manifold is organised in clusters
//! `E_k`, the eigenspaces of the corrected operator `K0 = sqrt(Delta) + Q`
//! whose eigenvalues are `lambda_k = k + lambda_shift`. Inside a cluster the
//! Laplacian eigenvalues are `Lambda_{k,j} = lambda_k^2 + eta_{k,j}` with a
//! bounded correction `eta`. Every operator in this crate is expressed in
//! the coordinate frame of these clusters.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One eigenspace `E_k` of `K0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub k: usize,
    pub dim: usize,
    pub lambda: f64,
    /// Laplacian eigenvalues on the cluster, ascending.
    pub laplace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Circle,
    Sphere,
    Synthetic,
}

/// Truncated cluster data `(lambda_k, d_k, Lambda_{k,j})` with the gap
/// constant `c0`. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralModel {
    kind: ModelKind,
    n: usize,
    lambda_shift: f64,
    dim_constant: f64,
    eta_bound: f64,
    c0: f64,
    clusters: Vec<Cluster>,
    #[serde(skip)]
    offsets: Vec<usize>,
}

impl SpectralModel {
    /// Laplacian on the circle: `d_0 = 1`, `d_k = 2`, `Lambda = k^2`.
    pub fn circle(k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::InvalidTruncation("k_max must be at least 1".into()));
        }
        let clusters = (0..=k_max)
            .map(|k| {
                let dim = if k == 0 { 1 } else { 2 };
                let lambda = k as f64;
                Cluster {
                    k,
                    dim,
                    lambda,
                    laplace: vec![lambda * lambda; dim],
                }
            })
            .collect();
        Self::assemble(ModelKind::Circle, 1, 0.0, 2.0, 0.0, clusters)
    }

    /// Laplacian on the round two-sphere: `d_k = 2k + 1`,
    /// `lambda_k = k + 1/2`, `Lambda = k(k + 1)` and `eta = -1/4`.
    pub fn sphere(k_max: usize) -> Result<Self> {
        if k_max == 0 {
            return Err(Error::InvalidTruncation("k_max must be at least 1".into()));
        }
        let clusters = (0..=k_max)
            .map(|k| {
                let dim = 2 * k + 1;
                let kf = k as f64;
                Cluster {
                    k,
                    dim,
                    lambda: kf + 0.5,
                    laplace: vec![kf * (kf + 1.0); dim],
                }
            })
            .collect();
        Self::assemble(ModelKind::Sphere, 2, 0.5, 3.0, 0.25, clusters)
    }

    /// Generic cluster model with dimensions from `dim_profile` and
    /// corrections `eta` drawn uniformly from `[-eta_bar, eta_bar]`.
    ///
    /// Fails when a dimension exceeds `dim_constant * k^(n-1)` or when the
    /// sampled corrections break the gap conditions.
    pub fn synthetic<F>(
        n: usize,
        lambda_shift: f64,
        k_max: usize,
        dim_profile: F,
        dim_constant: f64,
        eta_bar: f64,
        seed: u64,
    ) -> Result<Self>
    where
        F: Fn(usize) -> usize,
    {
        if k_max == 0 {
            return Err(Error::InvalidTruncation("k_max must be at least 1".into()));
        }
        if n == 0 {
            return Err(Error::Model("manifold dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&lambda_shift) {
            return Err(Error::Model(format!("lambda_shift {lambda_shift} not in [0,1)")));
        }
        if !(eta_bar >= 0.0) {
            return Err(Error::Model(format!("eta bound {eta_bar} must be nonnegative")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut clusters = Vec::with_capacity(k_max + 1);
        for k in 0..=k_max {
            let dim = dim_profile(k);
            let cap = dim_constant * (k.max(1) as f64).powi(n as i32 - 1);
            if dim == 0 || dim as f64 > cap {
                return Err(Error::Model(format!(
                    "cluster {k} has dimension {dim}, outside [1, {cap}]"
                )));
            }
            let lambda = k as f64 + lambda_shift;
            let mut laplace: Vec<f64> = (0..dim)
                .map(|_| lambda * lambda + eta_bar * (2.0 * rng.gen::<f64>() - 1.0))
                .collect();
            laplace.sort_by(f64::total_cmp);
            clusters.push(Cluster {
                k,
                dim,
                lambda,
                laplace,
            });
        }
        Self::assemble(
            ModelKind::Synthetic,
            n,
            lambda_shift,
            dim_constant,
            eta_bar,
            clusters,
        )
    }

    /// Builds a model from explicit clusters (labels strictly increasing).
    pub fn from_clusters(
        n: usize,
        lambda_shift: f64,
        dim_constant: f64,
        eta_bound: f64,
        clusters: Vec<Cluster>,
    ) -> Result<Self> {
        Self::assemble(
            ModelKind::Synthetic,
            n,
            lambda_shift,
            dim_constant,
            eta_bound,
            clusters,
        )
    }

    fn assemble(
        kind: ModelKind,
        n: usize,
        lambda_shift: f64,
        dim_constant: f64,
        eta_bound: f64,
        mut clusters: Vec<Cluster>,
    ) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidTruncation("model has no clusters".into()));
        }
        for c in clusters.iter_mut() {
            if c.dim == 0 || c.laplace.len() != c.dim {
                return Err(Error::Model(format!(
                    "cluster {} lists {} eigenvalues for dimension {}",
                    c.k,
                    c.laplace.len(),
                    c.dim
                )));
            }
            c.laplace.sort_by(f64::total_cmp);
        }
        if clusters.windows(2).any(|w| w[1].k <= w[0].k) {
            return Err(Error::Model("cluster labels must increase strictly".into()));
        }
        for c in &clusters {
            let expected = c.k as f64 + lambda_shift;
            if c.lambda != expected {
                return Err(Error::Model(format!(
                    "cluster {} has lambda {} but k + shift = {}",
                    c.k, c.lambda, expected
                )));
            }
            for &l in &c.laplace {
                let eta = l - c.lambda * c.lambda;
                if eta.abs() > eta_bound + 1e-12 {
                    return Err(Error::Model(format!(
                        "cluster {}: correction {eta} exceeds bound {eta_bound}",
                        c.k
                    )));
                }
            }
        }
        let mut model = SpectralModel {
            kind,
            n,
            lambda_shift,
            dim_constant,
            eta_bound,
            c0: 0.0,
            clusters,
            offsets: Vec::new(),
        };
        model.rebuild_offsets();
        model.c0 = model.verify_gaps()?;
        Ok(model)
    }

    /// Recomputes the flattened offsets; needed after deserialization.
    pub fn rebuild_offsets(&mut self) {
        let mut acc = 0;
        self.offsets = self
            .clusters
            .iter()
            .map(|c| {
                let o = acc;
                acc += c.dim;
                o
            })
            .chain(std::iter::once(0))
            .collect();
        let last = self.offsets.len() - 1;
        self.offsets[last] = acc;
    }

    /// Largest `c0` with `Lambda_{k,j} >= c0 k^2` for `k >= 1` and
    /// `|Lambda_{k,j} - Lambda_{k',j'}| >= c0 (k + k')` for `k != k'`,
    /// evaluated on the realised spectrum.
    pub fn verify_gaps(&self) -> Result<f64> {
        if self.clusters.is_empty() {
            return Err(Error::InvalidTruncation("model has no clusters".into()));
        }
        let mut c0 = f64::INFINITY;
        let mut bad = Vec::new();
        for c in &self.clusters {
            if c.k == 0 {
                continue;
            }
            let k2 = (c.k * c.k) as f64;
            for (j, &l) in c.laplace.iter().enumerate() {
                let r = l / k2;
                if r <= 0.0 {
                    bad.push((c.k, j, c.k, j));
                }
                c0 = c0.min(r);
            }
        }
        for (a, ca) in self.clusters.iter().enumerate() {
            for cb in &self.clusters[a + 1..] {
                let denom = (ca.k + cb.k) as f64;
                for (j, &la) in ca.laplace.iter().enumerate() {
                    for (j2, &lb) in cb.laplace.iter().enumerate() {
                        let r = (la - lb).abs() / denom;
                        if r <= 0.0 {
                            bad.push((ca.k, j, cb.k, j2));
                        }
                        c0 = c0.min(r);
                    }
                }
            }
        }
        if !bad.is_empty() {
            return Err(Error::GapViolation { pairs: bad });
        }
        if !c0.is_finite() {
            return Err(Error::InvalidTruncation(
                "no constraint determines c0 (only the k = 0 cluster)".into(),
            ));
        }
        Ok(c0)
    }

    /// Gap constant guaranteed for every spectrum `lambda_k^2 + eta` with
    /// `|eta| <= eta_bound`, independent of the realised corrections.
    pub fn certified_gap(&self) -> f64 {
        let e = self.eta_bound;
        let mut c0 = f64::INFINITY;
        for c in self.clusters.iter().filter(|c| c.k > 0) {
            c0 = c0.min((c.lambda * c.lambda - e) / (c.k * c.k) as f64);
        }
        for (a, ca) in self.clusters.iter().enumerate() {
            for cb in &self.clusters[a + 1..] {
                let gap = (ca.lambda * ca.lambda - cb.lambda * cb.lambda).abs() - 2.0 * e;
                c0 = c0.min(gap / (ca.k + cb.k) as f64);
            }
        }
        c0
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lambda_shift(&self) -> f64 {
        self.lambda_shift
    }

    pub fn dim_constant(&self) -> f64 {
        self.dim_constant
    }

    pub fn eta_bound(&self) -> f64 {
        self.eta_bound
    }

    pub fn c0(&self) -> f64 {
        self.c0
    }

    pub fn k_max(&self) -> usize {
        self.clusters.last().map_or(0, |c| c.k)
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Cluster at position `p` (not label).
    pub fn cluster(&self, p: usize) -> &Cluster {
        &self.clusters[p]
    }

    /// Size of the flattened spatial space, `sum d_k`.
    pub fn total_dim(&self) -> usize {
        self.offsets[self.clusters.len()]
    }

    /// Flattened index range of the cluster at position `p`.
    pub fn range(&self, p: usize) -> Range<usize> {
        self.offsets[p]..self.offsets[p + 1]
    }

    /// `lambda_k - lambda_k'` as an exact integer.
    pub fn lambda_diff(&self, p: usize, q: usize) -> f64 {
        (self.clusters[p].k as i64 - self.clusters[q].k as i64) as f64
    }

    /// Cluster distance `|k - k'|` between positions.
    pub fn label_distance(&self, p: usize, q: usize) -> usize {
        self.clusters[p].k.abs_diff(self.clusters[q].k)
    }

    /// Regularised weight `max(lambda_k, 1/2)`, the entry of the diagonal
    /// operator `D` used by the smoothing norms and by `K0^{-1}`.
    pub fn weight(&self, p: usize) -> f64 {
        self.clusters[p].lambda.max(0.5)
    }

    /// Sobolev bracket `<k> = sqrt(1 + k^2)`.
    pub fn bracket(&self, p: usize) -> f64 {
        let k = self.clusters[p].k as f64;
        (1.0 + k * k).sqrt()
    }

    /// Cluster position of every flattened index.
    pub fn cluster_of_index(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.total_dim());
        for (p, c) in self.clusters.iter().enumerate() {
            out.extend(std::iter::repeat(p).take(c.dim));
        }
        out
    }

    /// Diagonal of the Laplacian in the flattened frame.
    pub fn laplace_diagonal(&self) -> Vec<f64> {
        self.clusters
            .iter()
            .flat_map(|c| c.laplace.iter().copied())
            .collect()
    }

    /// Corrections `eta_{k,j}`, i.e. the diagonal of `Q0`.
    pub fn eta(&self, p: usize) -> Vec<f64> {
        let c = &self.clusters[p];
        c.laplace.iter().map(|l| l - c.lambda * c.lambda).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn circle_layout() {
        let m = SpectralModel::circle(3).unwrap();
        let dims: Vec<_> = m.clusters().iter().map(|c| c.dim).collect();
        assert_eq!(dims, vec![1, 2, 2, 2]);
        let lap: Vec<_> = m.clusters().iter().map(|c| c.laplace[0]).collect();
        assert_eq!(lap, vec![0.0, 1.0, 4.0, 9.0]);
        assert_eq!(m.total_dim(), 7);
        assert_eq!(m.range(2), 3..5);
    }

    #[test]
    fn circle_lambda_step_is_exact() {
        let m = SpectralModel::circle(1).unwrap();
        assert_eq!(m.cluster(1).lambda - m.cluster(0).lambda, 1.0);
        assert_eq!(m.lambda_diff(1, 0), 1.0);
    }

    #[test]
    fn zero_truncation_rejected() {
        assert!(matches!(SpectralModel::circle(0), Err(Error::InvalidTruncation(_))));
        assert!(matches!(SpectralModel::sphere(0), Err(Error::InvalidTruncation(_))));
    }

    #[test]
    fn sphere_layout() {
        let m = SpectralModel::sphere(6).unwrap();
        let c = m.cluster(2);
        assert_eq!(c.dim, 5);
        assert_eq!(c.laplace[0], 6.0);
        assert_eq!(c.lambda, 2.5);
        for p in 0..m.num_clusters() {
            assert!(m.eta(p).iter().all(|&e| e == -0.25));
        }
        assert_eq!(m.total_dim(), 49);
    }

    // Exhaustive pair scans, written independently of verify_gaps.
    fn brute_c0(m: &SpectralModel) -> f64 {
        let mut best = f64::INFINITY;
        for a in m.clusters() {
            for &la in &a.laplace {
                if a.k > 0 {
                    best = best.min(la / (a.k * a.k) as f64);
                }
                for b in m.clusters().iter().filter(|b| b.k != a.k) {
                    for &lb in &b.laplace {
                        best = best.min((la - lb).abs() / (a.k + b.k) as f64);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn circle_gap_constant() {
        for k_max in [5, 10] {
            let m = SpectralModel::circle(k_max).unwrap();
            let c0 = m.verify_gaps().unwrap();
            assert!(c0 >= 1.0, "c0 = {c0}");
            assert_eq!(c0, brute_c0(&m));
        }
    }

    #[test]
    fn sphere_gap_constant() {
        let m = SpectralModel::sphere(5).unwrap();
        let c0 = m.verify_gaps().unwrap();
        assert!(c0 >= 0.9);
        assert_eq!(c0, brute_c0(&m));
    }

    #[test]
    fn single_cluster_uses_lower_bound_only() {
        let c = Cluster {
            k: 1,
            dim: 2,
            lambda: 1.0,
            laplace: vec![0.8, 1.1],
        };
        let m = SpectralModel::from_clusters(1, 0.0, 2.0, 0.2, vec![c]).unwrap();
        assert_eq!(m.c0(), 0.8);
    }

    #[test]
    fn gaps_hold_up_to_128() {
        for k in [1, 2, 17, 64, 128] {
            assert!(SpectralModel::circle(k).unwrap().verify_gaps().is_ok());
            assert!(SpectralModel::sphere(k).unwrap().verify_gaps().is_ok());
        }
    }

    #[test]
    fn synthetic_zero_eta_is_exact() {
        let m = SpectralModel::synthetic(2, 0.3, 5, |k| k + 1, 2.0, 0.0, 7).unwrap();
        for c in m.clusters() {
            assert!(c.laplace.iter().all(|&l| l == c.lambda * c.lambda));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = SpectralModel::synthetic(2, 0.5, 8, |k| k + 1, 2.0, 0.1, 42).unwrap();
        let b = SpectralModel::synthetic(2, 0.5, 8, |k| k + 1, 2.0, 0.1, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn synthetic_linear_profile_gap() {
        let m = SpectralModel::synthetic(2, 0.5, 8, |k| k + 1, 2.0, 0.1, 3).unwrap();
        let c0 = m.verify_gaps().unwrap();
        assert!(c0 >= 0.5, "c0 = {c0}");
        assert_eq!(c0, brute_c0(&m));
    }

    #[test]
    fn synthetic_rejects_oversized_cluster() {
        let r = SpectralModel::synthetic(1, 0.0, 4, |_| 3, 2.0, 0.0, 0);
        assert!(matches!(r, Err(Error::Model(_))));
    }

    #[test]
    fn synthetic_gap_violation_lists_pairs() {
        // lambda_shift = 0 puts clusters 0 and 1 at Lambda 0 and 1; a large
        // correction makes them collide.
        let r = SpectralModel::synthetic(1, 0.0, 3, |k| if k == 0 { 1 } else { 2 }, 2.0, 3.0, 11);
        match r {
            Err(Error::GapViolation { pairs }) => assert!(!pairs.is_empty()),
            Err(Error::Model(_)) => {}
            other => panic!("expected a gap failure, got {other:?}"),
        }
    }

    #[test]
    fn certified_gap_is_monotone_and_below_realised() {
        let mut last = f64::NEG_INFINITY;
        for eta in [0.2, 0.15, 0.1, 0.05, 0.0] {
            let m = SpectralModel::synthetic(2, 0.5, 8, |k| k + 1, 2.0, eta, 5).unwrap();
            let cert = m.certified_gap();
            assert!(cert >= last);
            assert!(m.c0() >= cert - 1e-12);
            last = cert;
        }
    }
}
