//! Regularisation of `omega.d_phi + i(Delta + V(phi))` by averaging along
//! the periodic `K0`-flow and eliminating the resulting block-diagonal
//! time dependence.
//!
//! Each pass conjugates by `e^{iS}`, with `S` built from the solution `Y`
//! of `i[K0, Y] = A - <A>`, and then by `e^{iT}` with
//! `omega.d_phi T = <A> - <A>(0)`. The off-diagonal part of the
//! perturbation loses roughly `1 - delta` orders per pass.

use std::sync::Arc;

use log::debug;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::s_decay;
use crate::operator::{conjugate_quasienergy, dot, exp_map, linf, Fbo, Tolerances, C64};
use crate::spectral::SpectralModel;

fn check_integer_spacing(model: &SpectralModel) -> Result<()> {
    let base = model.cluster(0);
    for c in model.clusters() {
        let diff = c.lambda - base.lambda;
        if diff != (c.k as f64 - base.k as f64) {
            return Err(Error::Model(format!(
                "lambda spacing between clusters {} and {} is {diff}, not an integer",
                base.k, c.k
            )));
        }
    }
    Ok(())
}

/// Mean of `e^{-i tau K0} A e^{i tau K0}` over one period: the
/// cluster-block-diagonal part of `A`, coefficient by coefficient.
pub fn average_k0(a: &Fbo) -> Result<Fbo> {
    check_integer_spacing(a.model())?;
    Ok(a.block_diagonal_part())
}

/// Solves `i[K0, Y] = A - <A>`: `Y_{kk'} = A_{kk'} / (i (lambda_k - lambda_k'))`.
pub fn solve_y(a: &Fbo) -> Result<Fbo> {
    let model = a.model().clone();
    check_integer_spacing(&model)?;
    let mut y = a.filter_blocks(|_, p, q| p != q);
    let idx = model.cluster_of_index();
    for (_, m) in y.iter_mut() {
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                let (p, q) = (idx[r], idx[c]);
                if p != q {
                    m[(r, c)] /= C64::new(0.0, model.lambda_diff(p, q));
                }
            }
        }
    }
    y.set_hermitian(a.is_hermitian());
    Ok(y)
}

/// `K0^{-1}` on cluster `p`. With `regularised` the weight
/// `max(lambda_k, 1/2)` replaces `lambda_k`.
pub fn k0_inverse_weight(model: &SpectralModel, p: usize, regularised: bool) -> Result<f64> {
    if regularised {
        Ok(1.0 / model.weight(p))
    } else {
        let l = model.cluster(p).lambda;
        if l == 0.0 {
            Err(Error::SingularWeight(model.cluster(p).k))
        } else {
            Ok(1.0 / l)
        }
    }
}

/// `S = (Y K0^{-1} + K0^{-1} Y) / 4`, using the regularised inverse.
pub fn build_s(y: &Fbo) -> Fbo {
    let model = y.model().clone();
    let idx = model.cluster_of_index();
    let inv: Vec<f64> = (0..model.num_clusters()).map(|p| 1.0 / model.weight(p)).collect();
    let mut s = y.clone();
    for (_, m) in s.iter_mut() {
        for c in 0..m.ncols() {
            for r in 0..m.nrows() {
                m[(r, c)] *= C64::new(0.25 * (inv[idx[r]] + inv[idx[c]]), 0.0);
            }
        }
    }
    s.set_hermitian(y.is_hermitian());
    s
}

/// `|X|_0 / |A|_0`, the yardstick for the algebraic identities.
pub fn relative_residual(x: &Fbo, reference: &Fbo) -> f64 {
    let r = s_decay(reference, 0.0);
    let v = s_decay(x, 0.0);
    if r == 0.0 {
        v
    } else {
        v / r
    }
}

/// Residual of `i[K0, Y] = A - <A>`.
pub fn residual_y(y: &Fbo, a: &Fbo) -> Result<f64> {
    let n = a.n_max();
    let k0 = Fbo::k0(a.model().clone(), a.d(), 0);
    let lhs = k0.commutator(y, n)?.scale(C64::new(0.0, 1.0));
    let rhs = a.sub(&average_k0(a)?)?;
    Ok(relative_residual(&lhs.sub(&rhs)?, a))
}

/// Residual of `i[K0^2, S] = A - <A> - [[A, K0], K0^{-1}] / 4`.
pub fn residual_s(s: &Fbo, a: &Fbo) -> Result<f64> {
    let model = a.model().clone();
    let (d, n) = (a.d(), a.n_max());
    let k0 = Fbo::k0(model.clone(), d, 0);
    let k0sq = k0.mul(&k0, 0)?;
    let kinv = Fbo::weight_power(model, d, 0, -1.0);
    let lhs = k0sq.commutator(s, n)?.scale(C64::new(0.0, 1.0));
    let inner = a.commutator(&k0, n)?.commutator(&kinv, n)?;
    let rhs = a.sub(&average_k0(a)?)?.sub(&inner.scale_real(0.25))?;
    Ok(relative_residual(&lhs.sub(&rhs)?, a))
}

/// `T(l) = <A>(l) / (i omega.l)` for `l != 0`, `T(0) = 0`.
pub fn build_t(avg: &Fbo, omega: &[f64], gamma: f64, tau: f64) -> Result<Fbo> {
    if omega.len() != avg.d() {
        return Err(Error::ModelMismatch);
    }
    let mut t = Fbo::zeros(avg.model().clone(), avg.d(), avg.n_max());
    for (l, m) in avg.iter() {
        if l.iter().all(|&x| x == 0) {
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
        t.insert_coeff(l.clone(), m / C64::new(0.0, f));
    }
    t.set_hermitian(avg.is_hermitian());
    Ok(t)
}

/// Residual of `<A> - omega.d_phi T = <A>(0)`.
pub fn residual_t(t: &Fbo, avg: &Fbo, omega: &[f64]) -> Result<f64> {
    let lhs = avg.sub(&t.omega_dphi(omega)?)?;
    Ok(relative_residual(&lhs.sub(&avg.mean())?, avg))
}

/// Least-squares slope of `log p_k` against `log lambda_k` over clusters
/// with `lambda_k >= 1`, where `p_k` is the largest block norm in row `k`
/// within distance one of the diagonal.
pub fn estimate_order(a: &Fbo) -> Result<f64> {
    let model = a.model();
    let nc = model.num_clusters();
    let mut peak = vec![0.0f64; nc];
    for (_, p, q, n) in crate::norms::BlockNorms::of(a).entries {
        if model.label_distance(p, q) <= 1 {
            peak[p] = peak[p].max(n);
        }
    }
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for p in 0..nc {
        if model.cluster(p).lambda >= 1.0 && peak[p] > 0.0 {
            xs.push(model.weight(p).ln());
            ys.push(peak[p].ln());
        }
    }
    if xs.len() < 2 {
        return Err(Error::UndefinedOrder);
    }
    Ok(crate::frequency::linear_slope(&xs, &ys))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    S,
    T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// Stop once the fitted order of the perturbation is at or below this.
    pub target_order: f64,
    /// Number of averaging/time-elimination passes allowed.
    pub max_steps: usize,
    pub gamma: f64,
    pub tau: f64,
    /// Coefficients with every entry below this are discarded.
    pub prune_tol: f64,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            target_order: -2.0,
            max_steps: 6,
            gamma: 0.03,
            tau: 3.0,
            prune_tol: 1e-20,
        }
    }
}

/// Iteration state `Delta + W + A(phi) + R(phi)`.
#[derive(Debug, Clone)]
pub struct RegularizationState {
    pub w: Fbo,
    pub a: Fbo,
    pub r: Fbo,
    pub order_est: Option<f64>,
    pub transform_log: Vec<(Role, usize, Fbo)>,
    /// `Phi` accumulated so far, latest factor on the left.
    pub transform: Fbo,
    pub step: usize,
    /// Block norm above which nothing is sent to `R`.
    pub reference: f64,
    pub herm_defects: Vec<f64>,
    pub inv_defects: Vec<f64>,
}

impl RegularizationState {
    pub fn new(v: &Fbo) -> Self {
        let model = v.model().clone();
        let reference = crate::norms::BlockNorms::of(v)
            .entries
            .iter()
            .map(|e| e.3)
            .fold(0.0, f64::max);
        RegularizationState {
            w: Fbo::zeros(model.clone(), v.d(), 0),
            a: v.clone(),
            r: Fbo::zeros(model.clone(), v.d(), v.n_max()),
            order_est: estimate_order(v).ok(),
            transform_log: Vec::new(),
            transform: Fbo::identity(model, v.d(), v.n_max()),
            step: 0,
            reference,
            herm_defects: Vec::new(),
            inv_defects: Vec::new(),
        }
    }

    pub fn model(&self) -> &Arc<SpectralModel> {
        self.a.model()
    }

    pub fn n_max(&self) -> usize {
        self.a.n_max().max(self.r.n_max())
    }

    /// `Delta + W + A + R`.
    pub fn full_operator(&self) -> Result<Fbo> {
        let delta = Fbo::laplacian(self.model().clone(), self.a.d(), 0);
        let mut m = delta.add(&self.w)?.add(&self.a)?.add(&self.r)?;
        m.set_hermitian(true);
        Ok(m)
    }

    /// Everything that is not `Delta + W`.
    pub fn remainder(&self) -> Result<Fbo> {
        let mut x = self.a.add(&self.r)?;
        x.set_hermitian(true);
        Ok(x)
    }

    fn conjugate(&mut self, gen: &Fbo, omega: &[f64], tol: &Tolerances) -> Result<Fbo> {
        let n = self.n_max();
        let mut g = gen.with_n_max(n);
        g.set_hermitian(true);
        let phi = exp_map(&g, 2 * n + 1, tol)?;
        let m = self.full_operator()?;
        let c = conjugate_quasienergy(&phi, &phi.adjoint(), &m, omega, n, tol)?;
        self.herm_defects.push(c.herm_defect);
        self.inv_defects.push(c.inv_defect);
        self.transform = phi.mul(&self.transform, n)?;
        let delta = Fbo::laplacian(self.model().clone(), self.a.d(), 0);
        Ok(c.op.sub(&delta)?.sub(&self.w)?)
    }

    /// Splits `P` into the part kept as perturbation and the part sent to
    /// `R`: blocks whose norm is at most `reference * lambda^target` with
    /// `lambda = max(weight_k, weight_k')`.
    fn split(&mut self, p: Fbo, cfg: &RegularizerConfig) {
        let model = self.model().clone();
        let reference = self.reference;
        let mut to_r = std::collections::BTreeSet::new();
        for (l, pc, qc, n) in crate::norms::BlockNorms::of(&p).entries {
            let lam = model.weight(pc).max(model.weight(qc));
            if n <= reference * lam.powf(cfg.target_order) {
                to_r.insert((l, pc, qc));
            }
        }
        let mut a = p.filter_blocks(|l, pc, qc| !to_r.contains(&(l.to_vec(), pc, qc)));
        let mut r = p.filter_blocks(|l, pc, qc| to_r.contains(&(l.to_vec(), pc, qc)));
        a.prune(cfg.prune_tol);
        a.set_hermitian(true);
        r.prune(cfg.prune_tol);
        r.set_hermitian(true);
        self.a = a;
        self.r = r;
        self.order_est = estimate_order(&self.a).ok();
    }
}

/// Conjugation by `e^{iS}` with `S` built from the off-diagonal part of
/// the current perturbation.
pub fn averaging_step(
    state: &RegularizationState,
    omega: &[f64],
    cfg: &RegularizerConfig,
    tol: &Tolerances,
) -> Result<RegularizationState> {
    let mut next = state.clone();
    if state.a.is_zero() {
        return Ok(next);
    }
    let s = build_s(&solve_y(&state.a)?);
    if s.is_zero() {
        return Ok(next);
    }
    let p = next.conjugate(&s, omega, tol)?;
    next.transform_log.push((Role::S, state.step, s));
    next.split(p, cfg);
    Ok(next)
}

/// Conjugation by `e^{iT}` removing the phi-dependence of the
/// block-diagonal part; its mean is moved into `W`.
pub fn time_elimination_step(
    state: &RegularizationState,
    omega: &[f64],
    cfg: &RegularizerConfig,
    tol: &Tolerances,
) -> Result<RegularizationState> {
    let mut next = state.clone();
    let avg = average_k0(&state.a)?;
    let t = build_t(&avg, omega, cfg.gamma, cfg.tau)?;
    let p = if t.is_zero() {
        state.remainder()?
    } else {
        let p = next.conjugate(&t, omega, tol)?;
        next.transform_log.push((Role::T, state.step, t));
        p
    };
    let mean_diag = p.mean().block_diagonal_part();
    let mut w = next.w.add(&mean_diag)?;
    w.set_hermitian(true);
    next.w = w.hermitian_part().with_n_max(0);
    let rest = p.sub(&mean_diag)?;
    next.split(rest, cfg);
    next.step += 1;
    Ok(next)
}

#[derive(Debug, Clone)]
pub struct Regularized {
    /// Phi-independent block-diagonal normal form.
    pub z: Fbo,
    /// Mean block-diagonal part of the input, independent of omega.
    pub z1: Fbo,
    pub z2: Fbo,
    /// Remaining perturbation, `A + R` at exit.
    pub r: Fbo,
    pub transform: Fbo,
    pub transform_log: Vec<(Role, usize, Fbo)>,
    /// Fitted order of `A` after each pass (None once `A` vanishes).
    pub orders: Vec<Option<f64>>,
    pub converged: bool,
    pub steps: usize,
    pub max_herm_defect: f64,
    pub max_inv_defect: f64,
}

/// Alternates averaging and time elimination until the perturbation's
/// fitted order reaches `target_order` (or it vanishes).
pub fn regularize(v: &Fbo, omega: &[f64], cfg: &RegularizerConfig, tol: &Tolerances) -> Result<Regularized> {
    let z1 = v.mean().block_diagonal_part().with_n_max(0);
    let mut state = RegularizationState::new(v);
    let mut orders = vec![state.order_est];
    let done = |s: &RegularizationState| s.a.is_zero() || s.order_est.is_some_and(|o| o <= cfg.target_order);
    while !done(&state) && state.step < cfg.max_steps {
        state = averaging_step(&state, omega, cfg, tol)?;
        state = time_elimination_step(&state, omega, cfg, tol)?;
        orders.push(state.order_est);
        debug!(
            "regularization pass {}: order {:?}, |A|_0 = {:.3e}, |R|_0 = {:.3e}",
            state.step,
            state.order_est,
            s_decay(&state.a, 0.0),
            s_decay(&state.r, 0.0)
        );
    }
    let converged = done(&state);
    let mut z = state.w.clone();
    z.set_hermitian(true);
    let z2 = z.sub(&z1)?;
    let r = state.remainder()?;
    Ok(Regularized {
        z,
        z1,
        z2,
        r,
        transform: state.transform,
        transform_log: state.transform_log,
        orders,
        converged,
        steps: state.step,
        max_herm_defect: state.herm_defects.iter().cloned().fold(0.0, f64::max),
        max_inv_defect: state.inv_defects.iter().cloned().fold(0.0, f64::max),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::testutil::*;
    use crate::operator::{frobenius, modes_in_box, PhiGrid};
    use nalgebra::DMatrix;

    fn sphere(k: usize) -> Arc<SpectralModel> {
        Arc::new(SpectralModel::sphere(k).unwrap())
    }

    #[test]
    fn average_projects_onto_block_diagonal() {
        let m = sphere(3);
        let mut r = rng(40);
        let a = random_hermitian(&m, 1, 1, &mut r);
        let avg = average_k0(&a).unwrap();
        assert_eq!(average_k0(&avg).unwrap().sub(&avg).unwrap().max_abs(), 0.0);
        let mut off = Fbo::zeros(m.clone(), 1, 0);
        off.set_block(&[0], 2, 0, &DMatrix::from_element(5, 1, C64::new(1.0, 0.0)));
        assert!(average_k0(&off).unwrap().is_zero());
        let k0 = Fbo::k0(m.clone(), 1, 0);
        assert!(k0.commutator(&avg, 1).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn y_single_block() {
        let m = Arc::new(SpectralModel::circle(4).unwrap());
        let mut a = Fbo::zeros(m.clone(), 1, 0);
        let b = DMatrix::from_element(2, 2, C64::new(1.0, 0.0));
        a.set_block(&[0], 3, 1, &b);
        let y = solve_y(&a).unwrap();
        let want = C64::new(1.0, 0.0) / C64::new(0.0, 2.0);
        assert!((y.block(&[0], 3, 1)[(0, 0)] - want).norm() < 1e-15);
        assert!(solve_y(&average_k0(&a).unwrap()).unwrap().is_zero());
    }

    #[test]
    fn identities_on_random_input() {
        let m = sphere(4);
        let mut r = rng(41);
        let a = random_hermitian(&m, 2, 1, &mut r);
        let y = solve_y(&a).unwrap();
        assert!(residual_y(&y, &a).unwrap() < 1e-12);
        let s = build_s(&y);
        assert!(s.hermitian_defect() < 1e-12);
        assert!(residual_s(&s, &a).unwrap() < 1e-12);
        let omega = [1.0, 0.5 * (1.0 + 5f64.sqrt()) - 0.5];
        let avg = average_k0(&a).unwrap();
        let t = build_t(&avg, &omega, 0.01, 3.0).unwrap();
        assert!(t.hermitian_defect() < 1e-12);
        assert!(residual_t(&t, &avg, &omega).unwrap() < 1e-12);
        let k0 = Fbo::k0(m.clone(), 2, 0);
        assert!(k0.commutator(&t, 1).unwrap().max_abs() < 1e-14);
    }

    #[test]
    fn singular_weight_without_regularisation() {
        let m = SpectralModel::circle(2).unwrap();
        assert!(matches!(k0_inverse_weight(&m, 0, false), Err(Error::SingularWeight(0))));
        assert_eq!(k0_inverse_weight(&m, 0, true).unwrap(), 2.0);
    }

    #[test]
    fn t_single_coefficient() {
        let m = sphere(2);
        let mut avg = Fbo::zeros(m.clone(), 1, 1);
        avg.insert_coeff(vec![1], DMatrix::identity(9, 9));
        let t = build_t(&avg, &[1.25], 0.01, 2.0).unwrap();
        let want = C64::new(1.0, 0.0) / C64::new(0.0, 1.25);
        assert!((t.coeff(&[1]).unwrap()[(3, 3)] - want).norm() < 1e-15);
        let constant = Fbo::identity(m.clone(), 1, 1);
        assert!(build_t(&constant, &[1.25], 0.01, 2.0).unwrap().is_zero());
    }

    #[test]
    fn averaging_matches_64_node_quadrature() {
        let m = sphere(3);
        let mut r = rng(42);
        let a = random_fbo(&m, 1, 1, &mut r);
        let avg = average_k0(&a).unwrap();
        let lam: Vec<f64> = m
            .cluster_of_index()
            .into_iter()
            .map(|p| m.cluster(p).lambda)
            .collect();
        for l in modes_in_box(1, 1) {
            let x = a.coeff(&l).unwrap();
            let mut acc = DMatrix::<C64>::zeros(x.nrows(), x.ncols());
            for node in 0..64 {
                let tau = 2.0 * std::f64::consts::PI * node as f64 / 64.0;
                for c in 0..x.ncols() {
                    for rr in 0..x.nrows() {
                        acc[(rr, c)] += x[(rr, c)] * C64::from_polar(1.0, -tau * (lam[rr] - lam[c])) / 64.0;
                    }
                }
            }
            assert!(frobenius(&(acc - avg.coeff(&l).unwrap())) < 1e-12);
        }
    }

    #[test]
    fn order_regression() {
        let m = Arc::new(SpectralModel::circle(16).unwrap());
        for (beta, want) in [(0.5, 0.5), (0.0, 0.0), (-2.0, -2.0)] {
            let a = Fbo::weight_power(m.clone(), 1, 0, beta);
            let o = estimate_order(&a).unwrap();
            assert!((o - want).abs() < 0.05, "beta {beta}: {o}");
        }
        assert!(matches!(
            estimate_order(&Fbo::zeros(m.clone(), 1, 0)),
            Err(Error::UndefinedOrder)
        ));
    }

    #[test]
    fn trivial_regularizations() {
        let m = Arc::new(SpectralModel::circle(6).unwrap());
        let cfg = RegularizerConfig::default();
        let tol = Tolerances::default();
        let omega = [1.0, 0.5 * 5f64.sqrt()];
        let zero = Fbo::zeros(m.clone(), 2, 2);
        let out = regularize(&zero, &omega, &cfg, &tol).unwrap();
        assert!(out.z.is_zero() && out.r.is_zero());

        let mut r = rng(43);
        let v = random_hermitian(&m, 2, 0, &mut r).block_diagonal_part().scale_real(1e-3);
        let v = v.with_n_max(2);
        let out = regularize(&v, &omega, &cfg, &tol).unwrap();
        assert!(out.z.sub(&v).unwrap().max_abs() < 1e-15);
        assert!(out.r.max_abs() < 1e-15);
        assert_eq!(out.steps, 1);
    }

    #[test]
    fn step_preserves_unitarity_on_grid() {
        let m = sphere(3);
        let mut r = rng(44);
        let v = random_hermitian(&m, 1, 1, &mut r).scale_real(1e-2).with_n_max(3);
        let st = RegularizationState::new(&v);
        let cfg = RegularizerConfig::default();
        let next = averaging_step(&st, &[1.1], &cfg, &Tolerances::default()).unwrap();
        let g = PhiGrid::from_fbo(&next.transform, 7);
        for u in g.points() {
            let e = (u.adjoint() * &u - DMatrix::<C64>::identity(u.nrows(), u.ncols())).camax();
            assert!(e < 1e-12);
        }
    }
}
