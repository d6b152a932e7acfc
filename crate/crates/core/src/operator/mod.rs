//! Fourier–cluster block operators.
//!
//! An operator `A(phi)` on the truncated cluster space is stored as its
//! Fourier coefficients `A(l)`, `|l|_inf <= n_max`, each a dense matrix on
//! the flattened space `C^{d_0} + ... + C^{d_kmax}`. The block `A(l)_{[k]}^{[k']}`
//! is the sub-matrix on the cluster ranges of `k` and `k'`. Missing
//! coefficients are zero.

mod expm;
mod grid;
mod lattice;
mod state;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::SpectralModel;

pub use expm::{exp_i_hermitian, expm, exp_i_hermitian_eig, newton_schulz};
pub use grid::PhiGrid;
pub use lattice::{flatten_operator, flatten_state, lattice_modes, quasi_energy_matrix, unflatten_state};
pub use state::StateVector;

pub type C64 = Complex64;

/// Fourier index `l` in `Z^d`.
pub type Mode = Vec<i64>;


/// Numerical tolerances shared by the conjugation routines.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    pub tol_herm: f64,
    pub tol_unit: f64,
    pub tol_inv: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            tol_herm: 1e-9,
            tol_unit: 1e-10,
            tol_inv: 1e-9,
        }
    }
}

pub fn linf(l: &[i64]) -> usize {
    l.iter().map(|x| x.unsigned_abs() as usize).max().unwrap_or(0)
}

pub fn l2_sq(l: &[i64]) -> f64 {
    l.iter().map(|&x| (x * x) as f64).sum()
}

pub fn dot(omega: &[f64], l: &[i64]) -> f64 {
    omega.iter().zip(l).map(|(w, &x)| w * x as f64).sum()
}

fn neg_mode(l: &[i64]) -> Mode {
    l.iter().map(|x| -x).collect()
}

/// All `l` with `|l|_inf <= n`, in lexicographic order.
pub fn modes_in_box(d: usize, n: usize) -> Vec<Mode> {
    let n = n as i64;
    let mut out = vec![Vec::with_capacity(d)];
    for _ in 0..d {
        let mut next = Vec::with_capacity(out.len() * (2 * n as usize + 1));
        for m in &out {
            for x in -n..=n {
                let mut m2 = m.clone();
                m2.push(x);
                next.push(m2);
            }
        }
        out = next;
    }
    out
}

/// Frobenius norm; an upper bound for the spectral norm.
pub fn frobenius(m: &DMatrix<C64>) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Spectral norm (largest singular value).
pub fn spectral_norm(m: &DMatrix<C64>) -> f64 {
    match (m.nrows(), m.ncols()) {
        (0, _) | (_, 0) => 0.0,
        (1, _) | (_, 1) => frobenius(m),
        _ => m.clone().singular_values().max(),
    }
}

/// Operator-valued trigonometric polynomial in cluster-block form.
#[derive(Debug, Clone)]
pub struct Fbo {
    model: Arc<SpectralModel>,
    d: usize,
    n_max: usize,
    coeffs: BTreeMap<Mode, DMatrix<C64>>,
    hermitian: bool,
}

impl Fbo {
    pub fn zeros(model: Arc<SpectralModel>, d: usize, n_max: usize) -> Self {
        Fbo {
            model,
            d,
            n_max,
            coeffs: BTreeMap::new(),
            hermitian: true,
        }
    }

    /// Phi-independent diagonal operator from the flattened diagonal.
    pub fn from_diagonal(model: Arc<SpectralModel>, d: usize, n_max: usize, diag: &[f64]) -> Self {
        assert_eq!(diag.len(), model.total_dim());
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(
            diag.len(),
            diag.iter().map(|&x| C64::new(x, 0.0)),
        ));
        let mut out = Fbo::zeros(model, d, n_max);
        out.coeffs.insert(vec![0; d], m);
        out
    }

    /// Phi-independent diagonal operator with value `f(p)` on cluster `p`.
    pub fn cluster_diagonal<F: Fn(usize) -> f64>(
        model: Arc<SpectralModel>,
        d: usize,
        n_max: usize,
        f: F,
    ) -> Self {
        let diag: Vec<f64> = model
            .cluster_of_index()
            .into_iter()
            .map(f)
            .collect();
        Fbo::from_diagonal(model, d, n_max, &diag)
    }

    pub fn identity(model: Arc<SpectralModel>, d: usize, n_max: usize) -> Self {
        Fbo::cluster_diagonal(model, d, n_max, |_| 1.0)
    }

    /// The Laplacian `Delta` in the cluster frame.
    pub fn laplacian(model: Arc<SpectralModel>, d: usize, n_max: usize) -> Self {
        let diag = model.laplace_diagonal();
        Fbo::from_diagonal(model, d, n_max, &diag)
    }

    /// `K0 = diag(lambda_k)` with the raw eigenvalues.
    pub fn k0(model: Arc<SpectralModel>, d: usize, n_max: usize) -> Self {
        let m = model.clone();
        Fbo::cluster_diagonal(model, d, n_max, move |p| m.cluster(p).lambda)
    }

    /// `D^beta` with the regularised weight `max(lambda_k, 1/2)`.
    pub fn weight_power(model: Arc<SpectralModel>, d: usize, n_max: usize, beta: f64) -> Self {
        let m = model.clone();
        Fbo::cluster_diagonal(model, d, n_max, move |p| m.weight(p).powf(beta))
    }

    pub fn model(&self) -> &Arc<SpectralModel> {
        &self.model
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.model.total_dim()
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermitian
    }

    pub fn set_hermitian(&mut self, flag: bool) {
        self.hermitian = flag;
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.is_empty()
    }

    pub fn num_coeffs(&self) -> usize {
        self.coeffs.len()
    }

    pub fn coeff(&self, l: &[i64]) -> Option<&DMatrix<C64>> {
        self.coeffs.get(l)
    }

    /// Mutable access to `A(l)`, inserting a zero matrix if absent.
    pub fn coeff_mut(&mut self, l: &[i64]) -> &mut DMatrix<C64> {
        assert_eq!(l.len(), self.d, "mode has wrong dimension");
        assert!(linf(l) <= self.n_max, "mode {l:?} outside truncation {}", self.n_max);
        let dim = self.dim();
        self.coeffs
            .entry(l.to_vec())
            .or_insert_with(|| DMatrix::zeros(dim, dim))
    }

    pub fn insert_coeff(&mut self, l: Mode, m: DMatrix<C64>) {
        assert_eq!(l.len(), self.d);
        assert!(linf(&l) <= self.n_max);
        assert_eq!(m.shape(), (self.dim(), self.dim()));
        self.coeffs.insert(l, m);
    }

    pub fn remove_coeff(&mut self, l: &[i64]) -> Option<DMatrix<C64>> {
        self.coeffs.remove(l)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Mode, &DMatrix<C64>)> {
        self.coeffs.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&Mode, &mut DMatrix<C64>)> {
        self.coeffs.iter_mut()
    }

    pub fn modes(&self) -> impl Iterator<Item = &Mode> {
        self.coeffs.keys()
    }

    /// Largest `|l|_inf` actually present.
    pub fn support_radius(&self) -> usize {
        self.coeffs.keys().map(|l| linf(l)).max().unwrap_or(0)
    }

    /// Copy of the block `A(l)_{[k]}^{[k']}` for cluster positions `p`, `q`.
    pub fn block(&self, l: &[i64], p: usize, q: usize) -> DMatrix<C64> {
        let (rp, rq) = (self.model.range(p), self.model.range(q));
        match self.coeffs.get(l) {
            Some(m) => m.view((rp.start, rq.start), (rp.len(), rq.len())).into_owned(),
            None => DMatrix::zeros(rp.len(), rq.len()),
        }
    }

    pub fn set_block(&mut self, l: &[i64], p: usize, q: usize, b: &DMatrix<C64>) {
        let (rp, rq) = (self.model.range(p), self.model.range(q));
        assert_eq!(b.shape(), (rp.len(), rq.len()));
        self.coeff_mut(l)
            .view_mut((rp.start, rq.start), (rp.len(), rq.len()))
            .copy_from(b);
    }

    pub fn same_space(&self, other: &Fbo) -> bool {
        self.d == other.d && (Arc::ptr_eq(&self.model, &other.model) || *self.model == *other.model)
    }

    fn check(&self, other: &Fbo) -> Result<()> {
        if self.same_space(other) {
            Ok(())
        } else {
            Err(Error::ModelMismatch)
        }
    }

    /// Same operator under a different truncation; coefficients beyond the
    /// new `n_max` are dropped.
    pub fn with_n_max(&self, n_max: usize) -> Fbo {
        let mut out = self.clone();
        out.n_max = n_max;
        out.coeffs.retain(|l, _| linf(l) <= n_max);
        out
    }

    /// Drops coefficients whose entries are all below `tol` in modulus.
    pub fn prune(&mut self, tol: f64) {
        self.coeffs
            .retain(|_, m| m.iter().any(|z| z.norm() > tol));
    }

    pub fn add(&self, other: &Fbo) -> Result<Fbo> {
        self.axpy(C64::new(1.0, 0.0), other)
    }

    pub fn sub(&self, other: &Fbo) -> Result<Fbo> {
        self.axpy(C64::new(-1.0, 0.0), other)
    }

    /// `self + alpha * other`, truncated to the larger `n_max`.
    pub fn axpy(&self, alpha: C64, other: &Fbo) -> Result<Fbo> {
        self.check(other)?;
        let mut out = self.clone();
        out.n_max = self.n_max.max(other.n_max);
        for (l, m) in &other.coeffs {
            match out.coeffs.get_mut(l) {
                Some(acc) => *acc += m * alpha,
                None => {
                    out.coeffs.insert(l.clone(), m * alpha);
                }
            }
        }
        out.hermitian = self.hermitian && other.hermitian && alpha.im == 0.0;
        Ok(out)
    }

    pub fn scale(&self, alpha: C64) -> Fbo {
        let mut out = self.clone();
        for m in out.coeffs.values_mut() {
            *m *= alpha;
        }
        out.hermitian = self.hermitian && alpha.im == 0.0;
        out
    }

    pub fn scale_real(&self, alpha: f64) -> Fbo {
        self.scale(C64::new(alpha, 0.0))
    }

    /// Pointwise adjoint `A(phi)^*`: `A^*(l) = A(-l)^H`.
    pub fn adjoint(&self) -> Fbo {
        let mut out = Fbo::zeros(self.model.clone(), self.d, self.n_max);
        for (l, m) in &self.coeffs {
            out.coeffs.insert(neg_mode(l), m.adjoint());
        }
        out.hermitian = self.hermitian;
        out
    }

    /// `max_l ||A(l) - A(-l)^H||_F`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for (l, m) in &self.coeffs {
            let nl = neg_mode(l);
            let e = match self.coeffs.get(&nl) {
                Some(m2) => frobenius(&(m - m2.adjoint())),
                None => frobenius(m),
            };
            worst = worst.max(e);
        }
        worst
    }

    /// `(A + A^*)/2`, flagged Hermitian.
    pub fn hermitian_part(&self) -> Fbo {
        let mut out = self
            .add(&self.adjoint())
            .expect("adjoint shares the space")
            .scale_real(0.5);
        out.hermitian = true;
        out
    }

    /// Keeps blocks with `keep(l, p, q)`; the rest is zeroed.
    pub fn filter_blocks<F: Fn(&[i64], usize, usize) -> bool>(&self, keep: F) -> Fbo {
        let nc = self.model.num_clusters();
        let mut out = Fbo::zeros(self.model.clone(), self.d, self.n_max);
        out.hermitian = self.hermitian;
        for (l, m) in &self.coeffs {
            let mut acc: Option<DMatrix<C64>> = None;
            for p in 0..nc {
                for q in 0..nc {
                    if !keep(l, p, q) {
                        continue;
                    }
                    let (rp, rq) = (self.model.range(p), self.model.range(q));
                    let dst = acc.get_or_insert_with(|| DMatrix::zeros(m.nrows(), m.ncols()));
                    dst.view_mut((rp.start, rq.start), (rp.len(), rq.len()))
                        .copy_from(&m.view((rp.start, rq.start), (rp.len(), rq.len())));
                }
            }
            if let Some(a) = acc.filter(|a| a.iter().any(|z| z.re != 0.0 || z.im != 0.0)) {
                out.coeffs.insert(l.clone(), a);
            }
        }
        out
    }

    /// Cluster-diagonal part `A(l)_{[k]}^{[k]}` for every `l`.
    pub fn block_diagonal_part(&self) -> Fbo {
        self.filter_blocks(|_, p, q| p == q)
    }

    /// The `l = 0` coefficient as a phi-independent operator.
    pub fn mean(&self) -> Fbo {
        let mut out = Fbo::zeros(self.model.clone(), self.d, self.n_max);
        out.hermitian = self.hermitian;
        if let Some(m) = self.coeffs.get(&vec![0; self.d]) {
            out.coeffs.insert(vec![0; self.d], m.clone());
        }
        out
    }

    pub fn is_phi_independent(&self) -> bool {
        self.coeffs.keys().all(|l| l.iter().all(|&x| x == 0))
    }

    /// Largest off-cluster-diagonal entry modulus.
    pub fn off_block_diagonal_max(&self) -> f64 {
        let idx = self.model.cluster_of_index();
        let mut worst = 0.0f64;
        for m in self.coeffs.values() {
            for c in 0..m.ncols() {
                for r in 0..m.nrows() {
                    if idx[r] != idx[c] {
                        worst = worst.max(m[(r, c)].norm());
                    }
                }
            }
        }
        worst
    }

    /// Largest entry modulus over all coefficients.
    pub fn max_abs(&self) -> f64 {
        self.coeffs
            .values()
            .flat_map(|m| m.iter())
            .map(|z| z.norm())
            .fold(0.0, f64::max)
    }

    /// `max_l ||A(l)||_F`.
    pub fn max_coeff_frobenius(&self) -> f64 {
        self.coeffs.values().map(frobenius).fold(0.0, f64::max)
    }

    /// `omega . d_phi`: multiplies `A(l)` by `i omega.l`.
    pub fn omega_dphi(&self, omega: &[f64]) -> Result<Fbo> {
        if omega.len() != self.d {
            return Err(Error::ModelMismatch);
        }
        let mut out = Fbo::zeros(self.model.clone(), self.d, self.n_max);
        for (l, m) in &self.coeffs {
            let f = dot(omega, l);
            if f != 0.0 {
                out.coeffs.insert(l.clone(), m * C64::new(0.0, f));
            }
        }
        out.hermitian = false;
        Ok(out)
    }

    /// `(omega . d_phi)^{-1}` on zero-mean operators. Every divisor must
    /// satisfy `|omega.l| >= 4 gamma / |l|_inf^tau`.
    pub fn omega_dphi_inverse(&self, omega: &[f64], gamma: f64, tau: f64) -> Result<Fbo> {
        if omega.len() != self.d {
            return Err(Error::ModelMismatch);
        }
        let zero = vec![0; self.d];
        if let Some(m0) = self.coeffs.get(&zero) {
            let norm = frobenius(m0);
            if norm > 0.0 {
                return Err(Error::NonzeroMean { norm });
            }
        }
        let mut out = Fbo::zeros(self.model.clone(), self.d, self.n_max);
        for (l, m) in &self.coeffs {
            if *l == zero {
                continue;
            }
            let f = dot(omega, l);
            let threshold = 4.0 * gamma / (linf(l) as f64).powf(tau);
            if !(f.abs() >= threshold) || f == 0.0 {
                return Err(Error::DivisorViolation {
                    l: l.clone(),
                    value: f.abs(),
                    threshold,
                });
            }
            out.coeffs.insert(l.clone(), m / C64::new(0.0, f));
        }
        out.hermitian = false;
        Ok(out)
    }

    /// Product truncated to `|l|_inf <= n_out`, by direct convolution or
    /// by collocation on an alias-free phi-grid, whichever is cheaper.
    pub fn mul(&self, other: &Fbo, n_out: usize) -> Result<Fbo> {
        self.check(other)?;
        if self.is_zero() || other.is_zero() {
            return Ok(Fbo::zeros(self.model.clone(), self.d, n_out));
        }
        if self.is_constant_block_diagonal() {
            return Ok(other.block_scaled(self, n_out, true));
        }
        if other.is_constant_block_diagonal() {
            return Ok(self.block_scaled(other, n_out, false));
        }
        let na = self.support_radius();
        let nb = other.support_radius();
        let g = na + nb + n_out.min(na + nb) + 1;
        let pts = g.pow(self.d as u32) as f64;
        let dim = self.dim() as f64;
        let direct = (self.coeffs.len() * other.coeffs.len()) as f64 * dim * dim * dim;
        let colloc = 3.0 * pts * dim * dim * (g as f64 * self.d as f64 + 0.5) + pts * dim * dim * dim;
        if direct <= colloc {
            Ok(self.mul_direct(other, n_out))
        } else {
            Ok(self.mul_collocation(other, n_out, g))
        }
    }

    fn is_constant_block_diagonal(&self) -> bool {
        self.coeffs.len() == 1 && self.is_phi_independent() && self.off_block_diagonal_max() == 0.0
    }

    /// `C A` (`left`) or `A C` with `C` constant and block-diagonal, one
    /// cluster block at a time.
    fn block_scaled(&self, c: &Fbo, n_out: usize, left: bool) -> Fbo {
        let cm = c.coeffs.values().next().expect("one coefficient");
        let nc = self.model.num_clusters();
        let mut out = Fbo::zeros(self.model.clone(), self.d, n_out);
        out.hermitian = false;
        for (l, m) in &self.coeffs {
            if linf(l) > n_out {
                continue;
            }
            let mut r = DMatrix::zeros(m.nrows(), m.ncols());
            for p in 0..nc {
                let rg = self.model.range(p);
                let blk = cm.view((rg.start, rg.start), (rg.len(), rg.len()));
                if left {
                    r.rows_mut(rg.start, rg.len()).copy_from(&(blk * m.rows(rg.start, rg.len())));
                } else {
                    r.columns_mut(rg.start, rg.len()).copy_from(&(m.columns(rg.start, rg.len()) * blk));
                }
            }
            out.coeffs.insert(l.clone(), r);
        }
        out
    }

    pub(crate) fn mul_direct(&self, other: &Fbo, n_out: usize) -> Fbo {
        let mut out = Fbo::zeros(self.model.clone(), self.d, n_out);
        out.hermitian = false;
        let dim = self.dim();
        for (la, a) in &self.coeffs {
            for (lb, b) in &other.coeffs {
                let l: Mode = la.iter().zip(lb).map(|(x, y)| x + y).collect();
                if linf(&l) > n_out {
                    continue;
                }
                let acc = out
                    .coeffs
                    .entry(l)
                    .or_insert_with(|| DMatrix::zeros(dim, dim));
                acc.gemm(C64::new(1.0, 0.0), a, b, C64::new(1.0, 0.0));
            }
        }
        out
    }

    pub(crate) fn mul_collocation(&self, other: &Fbo, n_out: usize, g: usize) -> Fbo {
        let mut ga = PhiGrid::from_fbo(self, g);
        let gb = PhiGrid::from_fbo(other, g);
        ga.mul_assign_pointwise(&gb);
        ga.to_fbo(self.model.clone(), n_out)
    }

    /// Product of several operators, evaluated on one grid.
    pub fn mul_many(factors: &[&Fbo], n_out: usize) -> Result<Fbo> {
        let first = factors
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty product".into()))?;
        for f in &factors[1..] {
            first.check(f)?;
        }
        if factors.iter().any(|f| f.is_zero()) {
            return Ok(Fbo::zeros(first.model.clone(), first.d, n_out));
        }
        if factors.len() == 1 {
            let mut out = first.with_n_max(n_out);
            out.hermitian = first.hermitian;
            return Ok(out);
        }
        let total: usize = factors.iter().map(|f| f.support_radius()).sum();
        let g = total + n_out.min(total) + 1;
        let mut acc = PhiGrid::from_fbo(first, g);
        for f in &factors[1..] {
            acc.mul_assign_pointwise(&PhiGrid::from_fbo(f, g));
        }
        Ok(acc.to_fbo(first.model.clone(), n_out))
    }

    /// `[A, B] = AB - BA`.
    pub fn commutator(&self, other: &Fbo, n_out: usize) -> Result<Fbo> {
        self.check(other)?;
        if self.is_zero() || other.is_zero() {
            return Ok(Fbo::zeros(self.model.clone(), self.d, n_out));
        }
        if self.is_constant_block_diagonal() {
            return other.block_scaled(self, n_out, true).sub(&other.block_scaled(self, n_out, false));
        }
        if other.is_constant_block_diagonal() {
            return self.block_scaled(other, n_out, false).sub(&self.block_scaled(other, n_out, true));
        }
        let na = self.support_radius();
        let nb = other.support_radius();
        let g = na + nb + n_out.min(na + nb) + 1;
        let pts = g.pow(self.d as u32) as f64;
        let dim = self.dim() as f64;
        let direct = 2.0 * (self.coeffs.len() * other.coeffs.len()) as f64 * dim * dim * dim;
        let colloc = 4.0 * pts * dim * dim * (g as f64 * self.d as f64 + 0.5) + 2.0 * pts * dim * dim * dim;
        let mut out = if direct <= colloc {
            self.mul_direct(other, n_out)
                .sub(&other.mul_direct(self, n_out))?
        } else {
            let ga = PhiGrid::from_fbo(self, g);
            let gb = PhiGrid::from_fbo(other, g);
            ga.commutator(&gb).to_fbo(self.model.clone(), n_out)
        };
        out.hermitian = false;
        Ok(out)
    }

    /// Evaluates `A(phi)` as a dense matrix.
    pub fn eval(&self, phi: &[f64]) -> DMatrix<C64> {
        let dim = self.dim();
        let mut out = DMatrix::zeros(dim, dim);
        for (l, m) in &self.coeffs {
            let arg: f64 = l.iter().zip(phi).map(|(&x, p)| x as f64 * p).sum();
            out += m * C64::from_polar(1.0, arg);
        }
        out
    }

    /// Plain-text dump: one line per nonzero block, `l | k k' | entries`.
    pub fn debug_dump(&self) -> String {
        let mut s = String::new();
        let nc = self.model.num_clusters();
        for (l, _) in &self.coeffs {
            for p in 0..nc {
                for q in 0..nc {
                    let b = self.block(l, p, q);
                    if b.iter().all(|z| *z == C64::new(0.0, 0.0)) {
                        continue;
                    }
                    let ls: Vec<String> = l.iter().map(|x| x.to_string()).collect();
                    let _ = write!(
                        s,
                        "{} | {} {} |",
                        ls.join(" "),
                        self.model.cluster(p).k,
                        self.model.cluster(q).k
                    );
                    for r in 0..b.nrows() {
                        for c in 0..b.ncols() {
                            let z = b[(r, c)];
                            let _ = write!(s, " {:e}{:+e}i", z.re, z.im);
                        }
                    }
                    s.push('\n');
                }
            }
        }
        s
    }
}

/// Evaluates `e^{iS}` as an operator family.
///
/// `S(phi)` is sampled on a `grid`-point collocation grid per axis, each
/// sample is exponentiated by Padé scaling-and-squaring and polished back
/// onto the unitary group, and the result is transformed back to Fourier
/// coefficients with `|l|_inf <= (grid - 1) / 2`.
pub fn exp_map(s: &Fbo, grid: usize, tol: &Tolerances) -> Result<Fbo> {
    if !s.is_hermitian() {
        return Err(Error::NotHermitian {
            defect: s.hermitian_defect(),
        });
    }
    let defect = s.hermitian_defect();
    if defect > tol.tol_herm {
        return Err(Error::NotHermitian { defect });
    }
    if grid < 2 * s.n_max() + 1 {
        return Err(Error::Aliasing {
            grid,
            n_max: s.n_max(),
        });
    }
    let n_out = (grid - 1) / 2;
    if s.is_zero() {
        let mut id = Fbo::identity(s.model.clone(), s.d, n_out);
        id.hermitian = false;
        return Ok(id);
    }
    let mut g = PhiGrid::from_fbo(s, grid);
    g.map_points(|h| {
        let h = (h + h.adjoint()) * C64::new(0.5, 0.0);
        exp_i_hermitian(&h)
    });
    let mut out = g.to_fbo(s.model.clone(), n_out);
    out.hermitian = false;
    Ok(out)
}

/// Output of a quasi-energy conjugation.
#[derive(Debug, Clone)]
pub struct Conjugated {
    pub op: Fbo,
    /// Hermitian defect removed by the final symmetrisation.
    pub herm_defect: f64,
    /// `max_l ||(Phi Phi^{-1} - Id)(l)||_F` on the truncated lattice.
    pub inv_defect: f64,
}

/// Conjugates `omega.d_phi + iM` by the family `Phi`:
/// `i M+ = Phi (i M) Phi^{-1} + Phi (omega.d_phi Phi^{-1})`.
pub fn conjugate_quasienergy(
    phi: &Fbo,
    phi_inv: &Fbo,
    m: &Fbo,
    omega: &[f64],
    n_out: usize,
    tol: &Tolerances,
) -> Result<Conjugated> {
    phi.check(phi_inv)?;
    phi.check(m)?;
    if omega.len() != phi.d {
        return Err(Error::ModelMismatch);
    }
    let id = Fbo::identity(phi.model.clone(), phi.d, phi.n_max.max(phi_inv.n_max));
    let prod = phi.mul(phi_inv, phi.n_max.max(phi_inv.n_max))?;
    let inv_defect = prod.sub(&id)?.max_coeff_frobenius();
    if inv_defect > tol.tol_inv {
        return Err(Error::InverseDefect {
            defect: inv_defect,
            tol: tol.tol_inv,
        });
    }
    // M+ = Phi M Phi^{-1} - i Phi (omega.d_phi Phi^{-1})
    let d_inv = phi_inv.omega_dphi(omega)?;
    let main = Fbo::mul_many(&[phi, m, phi_inv], n_out)?;
    let corr = Fbo::mul_many(&[phi, &d_inv], n_out)?;
    let raw = main.axpy(C64::new(0.0, -1.0), &corr)?;
    let herm_defect = raw.hermitian_defect();
    if herm_defect > tol.tol_herm {
        return Err(Error::NotHermitian {
            defect: herm_defect,
        });
    }
    Ok(Conjugated {
        op: raw.hermitian_part(),
        herm_defect,
        inv_defect,
    })
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random_fbo(model: &Arc<SpectralModel>, d: usize, n: usize, rng: &mut ChaCha8Rng) -> Fbo {
        let mut a = Fbo::zeros(model.clone(), d, n);
        let dim = model.total_dim();
        for l in modes_in_box(d, n) {
            let m = DMatrix::from_fn(dim, dim, |_, _| {
                C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
            });
            a.insert_coeff(l, m);
        }
        a.set_hermitian(false);
        a
    }

    pub fn random_hermitian(model: &Arc<SpectralModel>, d: usize, n: usize, rng: &mut ChaCha8Rng) -> Fbo {
        random_fbo(model, d, n, rng).hermitian_part()
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;

    fn circle(k: usize) -> Arc<SpectralModel> {
        Arc::new(SpectralModel::circle(k).unwrap())
    }

    fn rel(a: &Fbo, b: &Fbo) -> f64 {
        let diff = a.sub(b).unwrap().max_abs();
        diff / a.max_abs().max(b.max_abs()).max(1e-300)
    }

    #[test]
    fn additive_identity_and_involution() {
        let m = circle(3);
        let mut r = rng(1);
        let z = Fbo::zeros(m.clone(), 2, 2);
        for _ in 0..20 {
            let a = random_fbo(&m, 2, 2, &mut r);
            assert_eq!(rel(&a.add(&z).unwrap(), &a), 0.0);
            assert_eq!(rel(&a.adjoint().adjoint(), &a), 0.0);
            assert!(a.hermitian_part().hermitian_defect() < 1e-15);
        }
    }

    #[test]
    fn model_mismatch_detected() {
        let a = Fbo::identity(circle(3), 1, 1);
        let b = Fbo::identity(circle(4), 1, 1);
        assert!(matches!(a.add(&b), Err(Error::ModelMismatch)));
        let c = Fbo::identity(circle(3), 2, 1);
        assert!(matches!(a.mul(&c, 1), Err(Error::ModelMismatch)));
    }

    #[test]
    fn identity_is_neutral() {
        let m = circle(4);
        let mut r = rng(2);
        let a = random_fbo(&m, 1, 2, &mut r);
        let id = Fbo::identity(m.clone(), 1, 0);
        assert!(rel(&id.mul(&a, 2).unwrap(), &a) < 1e-15);
        assert!(rel(&a.mul(&id, 2).unwrap(), &a) < 1e-15);
    }

    #[test]
    fn diagonal_products_multiply_entries() {
        let m = circle(3);
        let a = Fbo::from_diagonal(m.clone(), 1, 0, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]);
        let b = Fbo::from_diagonal(m.clone(), 1, 0, &[2.0, 2.0, 0.5, 1.0, -1.0, 0.0, 3.0]);
        let c = a.mul(&b, 0).unwrap();
        let want = [2.0, 4.0, 1.5, 4.0, -5.0, 0.0, 21.0];
        let c0 = c.coeff(&[0]).unwrap();
        for (i, w) in want.iter().enumerate() {
            assert_eq!(c0[(i, i)], C64::new(*w, 0.0));
        }
    }

    #[test]
    fn direct_and_collocation_agree() {
        let m = circle(3);
        let mut r = rng(3);
        for d in [1, 2] {
            let a = random_fbo(&m, d, 2, &mut r);
            let b = random_fbo(&m, d, 3, &mut r);
            for n_out in [0, 2, 5] {
                let x = a.mul_direct(&b, n_out);
                let y = a.mul_collocation(&b, n_out, 2 + 3 + n_out + 1);
                assert!(rel(&x, &y) < 1e-12, "d={d} n_out={n_out}");
            }
        }
    }

    #[test]
    fn associativity_at_full_truncation() {
        let m = circle(3);
        let mut r = rng(4);
        let a = random_fbo(&m, 1, 2, &mut r);
        let b = random_fbo(&m, 1, 2, &mut r);
        let c = random_fbo(&m, 1, 1, &mut r);
        let ab_c = a.mul(&b, 4).unwrap().mul(&c, 5).unwrap();
        let a_bc = a.mul(&b.mul(&c, 3).unwrap(), 5).unwrap();
        assert!(rel(&ab_c, &a_bc) < 1e-10);
        let many = Fbo::mul_many(&[&a, &b, &c], 5).unwrap();
        assert!(rel(&ab_c, &many) < 1e-10);
    }

    #[test]
    fn commutator_properties() {
        let m = circle(4);
        let mut r = rng(5);
        let a = random_fbo(&m, 1, 2, &mut r);
        assert!(a.commutator(&a, 4).unwrap().max_abs() < 1e-12);
        let k0 = Fbo::k0(m.clone(), 1, 0);
        let c = k0.commutator(&a, 2).unwrap();
        for l in modes_in_box(1, 2) {
            for p in 0..m.num_clusters() {
                for q in 0..m.num_clusters() {
                    let want = a.block(&l, p, q) * C64::new(m.lambda_diff(p, q), 0.0);
                    let got = c.block(&l, p, q);
                    assert!(frobenius(&(want - got)) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn omega_dphi_pair() {
        let m = circle(2);
        let mut r = rng(6);
        let id = Fbo::identity(m.clone(), 1, 0);
        assert!(id.omega_dphi(&[1.3]).unwrap().is_zero());

        let mut a = random_fbo(&m, 2, 2, &mut r);
        a.remove_coeff(&[0, 0]);
        let omega = [1.0, (5f64).sqrt() - 1.0];
        let back = a
            .omega_dphi(&omega)
            .unwrap()
            .omega_dphi_inverse(&omega, 0.01, 3.0)
            .unwrap();
        assert!(rel(&back, &a) < 1e-12);

        let mut single = Fbo::zeros(m.clone(), 1, 2);
        single.insert_coeff(vec![2], DMatrix::identity(5, 5));
        let inv = single.omega_dphi_inverse(&[1.3], 0.01, 2.0).unwrap();
        let want = C64::new(1.0, 0.0) / C64::new(0.0, 2.6);
        assert!((inv.coeff(&[2]).unwrap()[(0, 0)] - want).norm() < 1e-15);
    }

    #[test]
    fn omega_dphi_inverse_errors() {
        let m = circle(2);
        let id = Fbo::identity(m.clone(), 1, 1);
        assert!(matches!(
            id.omega_dphi_inverse(&[1.0], 0.1, 2.0),
            Err(Error::NonzeroMean { .. })
        ));
        let mut a = Fbo::zeros(m.clone(), 2, 1);
        a.insert_coeff(vec![1, -1], DMatrix::identity(5, 5));
        match a.omega_dphi_inverse(&[1.0, 1.001], 0.1, 3.0) {
            Err(Error::DivisorViolation { l, .. }) => assert_eq!(l, vec![1, -1]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn exp_map_basics() {
        let m = circle(3);
        let tol = Tolerances::default();
        let z = Fbo::zeros(m.clone(), 1, 2);
        let e = exp_map(&z, 5, &tol).unwrap();
        assert!(rel(&e, &Fbo::identity(m.clone(), 1, 2)) < 1e-15);

        let mut r = rng(7);
        let s = random_hermitian(&m, 1, 2, &mut r).scale_real(0.3);
        assert!(matches!(exp_map(&s, 4, &tol), Err(Error::Aliasing { .. })));
        let mut bad = s.clone();
        bad.set_hermitian(false);
        assert!(matches!(exp_map(&bad, 9, &tol), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn exp_map_is_unitary_on_grid() {
        let m = circle(3);
        let mut r = rng(8);
        let s = random_hermitian(&m, 2, 1, &mut r).scale_real(0.5);
        let e = exp_map(&s, 7, &Tolerances::default()).unwrap();
        let g = PhiGrid::from_fbo(&e, 7);
        for u in g.points() {
            let err = (u.adjoint() * &u - DMatrix::<C64>::identity(u.nrows(), u.ncols())).camax();
            assert!(err < 1e-12);
        }
    }

    #[test]
    fn exp_map_constant_generator_matches_eigen_route() {
        let m = circle(3);
        let mut r = rng(9);
        let s = random_hermitian(&m, 1, 0, &mut r);
        let e = exp_map(&s, 3, &Tolerances::default()).unwrap();
        let want = exp_i_hermitian_eig(s.coeff(&[0]).unwrap());
        let got = e.coeff(&[0]).unwrap();
        assert!((got - want).camax() < 1e-12);
        assert!(e.coeff(&[1]).map_or(0.0, |x| x.camax()) < 1e-14);
    }

    #[test]
    fn conjugation_by_identity_and_commuting_constant() {
        let m = circle(3);
        let tol = Tolerances::default();
        let mut r = rng(10);
        let mm = random_hermitian(&m, 1, 2, &mut r);
        let id = Fbo::identity(m.clone(), 1, 0);
        let c = conjugate_quasienergy(&id, &id, &mm, &[1.1], 2, &tol).unwrap();
        assert!(rel(&c.op, &mm) < 1e-14);

        let delta = Fbo::laplacian(m.clone(), 1, 0);
        // a generator diagonal in the flattened frame commutes with Delta
        let s = Fbo::from_diagonal(m.clone(), 1, 0, &[0.3, -0.2, 0.1, 0.7, 0.4, -0.5, 0.9]);
        let phi = exp_map(&s, 1, &tol).unwrap();
        let c = conjugate_quasienergy(&phi, &phi.adjoint(), &delta, &[1.1], 0, &tol).unwrap();
        assert!(rel(&c.op, &delta) < 1e-13);
    }

    #[test]
    fn inverse_defect_rejected() {
        let m = circle(2);
        let id = Fbo::identity(m.clone(), 1, 0);
        let two = id.scale_real(2.0);
        let r = conjugate_quasienergy(&id, &two, &id, &[1.0], 0, &Tolerances::default());
        assert!(matches!(r, Err(Error::InverseDefect { .. })));
    }

    #[test]
    fn block_views_roundtrip() {
        let m = Arc::new(SpectralModel::sphere(2).unwrap());
        let mut a = Fbo::zeros(m.clone(), 1, 1);
        let b = DMatrix::from_fn(5, 3, |i, j| C64::new(i as f64, j as f64));
        a.set_block(&[1], 2, 1, &b);
        assert_eq!(a.block(&[1], 2, 1), b);
        assert_eq!(a.block(&[1], 1, 2), DMatrix::zeros(3, 5));
        assert_eq!(a.block(&[0], 2, 1), DMatrix::zeros(5, 3));
        let dump = a.debug_dump();
        assert_eq!(dump.lines().count(), 1);
        assert!(dump.starts_with("1 | 2 1 |"));
    }
}
