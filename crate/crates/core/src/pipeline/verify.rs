//! Property suites: algebraic identities, averaging, dense-lattice
//! equivalence and the norm inequalities.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::kam::{homological_solve, KamConfig};
use crate::norms::{
    action_check, cutoff_tail_check, op_norm_bound_check, tame_check, weight_conjugation_check,
    weighted_action_check, BoundReport,
};
use crate::operator::{
    conjugate_quasienergy, exp_map, flatten_operator, flatten_state, l2_sq, lattice_modes, modes_in_box, Fbo,
    Mode, StateVector, Tolerances, C64,
};
use crate::regularizer::{average_k0, build_s, build_t, residual_s, residual_t, residual_y, solve_y};
use crate::spectral::SpectralModel;

/// One property over a batch.
#[derive(Debug, Clone, Serialize)]
pub struct PropertyResult {
    pub suite: String,
    pub property: String,
    pub samples: usize,
    /// Worst observed value (residual, error or constant).
    pub worst: f64,
    pub bound: f64,
    pub violations: usize,
}

impl PropertyResult {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.samples > 0
    }
}

#[derive(Debug, Default)]
struct Tally {
    samples: usize,
    worst: f64,
    violations: usize,
}

impl Tally {
    fn push(&mut self, v: f64, bound: f64) {
        self.samples += 1;
        if !(v <= bound) {
            self.violations += 1;
        }
        self.worst = if v.is_nan() { f64::NAN } else { self.worst.max(v) };
    }

    fn finish(self, suite: &str, property: &str, bound: f64) -> PropertyResult {
        PropertyResult {
            suite: suite.into(),
            property: property.into(),
            samples: self.samples,
            worst: self.worst,
            bound,
            violations: self.violations,
        }
    }
}

/// Random operator with blocks of entries in the unit square scaled by
/// `<l, k - k'>^{-sigma}`.
pub fn random_operator(model: &Arc<SpectralModel>, d: usize, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Fbo {
    let idx = model.cluster_of_index();
    let dim = model.total_dim();
    let mut a = Fbo::zeros(model.clone(), d, n);
    for l in modes_in_box(d, n) {
        let ll = l2_sq(&l);
        let m = DMatrix::from_fn(dim, dim, |r, c| {
            let h = model.label_distance(idx[r], idx[c]) as f64;
            let w = (1.0 + ll + h * h).sqrt().powf(-sigma);
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5) * w
        });
        a.insert_coeff(l, m);
    }
    a.set_hermitian(false);
    a
}

pub fn random_hermitian_operator(model: &Arc<SpectralModel>, d: usize, n: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Fbo {
    random_operator(model, d, n, sigma, rng).hermitian_part()
}

fn random_state(model: &Arc<SpectralModel>, d: usize, n: usize, rng: &mut ChaCha8Rng) -> StateVector {
    let mut z = StateVector::zeros(model.clone(), d, n);
    for l in modes_in_box(d, n) {
        let v = DVector::from_fn(model.total_dim(), |_, _| C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5));
        z.insert_coeff(l, v);
    }
    z
}

fn random_omega(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| 0.5 + rng.gen::<f64>()).collect()
}

/// Residuals of the three regularization identities and of the
/// homological equation on `samples` random Hermitian inputs (sphere,
/// `k_max = 8`, `n_max = 3`, `d = 2`), each against `tol`.
pub fn identity_suite(samples: usize, seed: u64, tol: f64) -> Result<Vec<PropertyResult>> {
    let model = Arc::new(SpectralModel::sphere(8)?);
    let (d, n) = (2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ty, mut ts, mut tt, mut th) = (Tally::default(), Tally::default(), Tally::default(), Tally::default());
    let mut cfg = KamConfig::new(d, model.n(), 0.0, 1e-4);
    cfg.tau = 3.0;
    // the suite records the residual; the solver must not reject it first
    cfg.residual_tol = f64::INFINITY;
    let mut excised = 0;
    while th.samples < samples {
        let a = random_hermitian_operator(&model, d, n, 0.0, &mut rng);
        let omega = random_omega(d, &mut rng);
        if ty.samples < samples {
            let y = solve_y(&a)?;
            ty.push(residual_y(&y, &a)?, tol);
            let s = build_s(&y);
            ts.push(residual_s(&s, &a)?, tol);
            let avg = average_k0(&a)?;
            match build_t(&avg, &omega, 1e-6, 3.0) {
                Ok(t) => tt.push(residual_t(&t, &avg, &omega)?, tol),
                Err(_) => excised += 1,
            }
        }
        let z = random_hermitian_operator(&model, d, 0, 0.0, &mut rng)
            .block_diagonal_part()
            .scale_real(1e-2);
        let r = a.scale_real(1e-3);
        match homological_solve(&r, &z, &omega, cfg.gamma, n, &cfg) {
            // the solver reports |residual|_s / |R|_s itself
            Ok(h) => th.push(h.residual, tol),
            Err(crate::Error::ExcisionRequired { .. }) => excised += 1,
            Err(e) => return Err(e),
        }
        if excised > samples {
            return Err(crate::Error::InvalidArgument("too many excised identity samples".into()));
        }
    }
    Ok(vec![
        ty.finish("identities", "commutator_equation_y", tol),
        ts.finish("identities", "commutator_equation_s", tol),
        tt.finish("identities", "time_average_equation_t", tol),
        th.finish("identities", "homological_equation", tol),
    ])
}

/// The averaging projector against an entrywise projection (to
/// `exact_tol`) and against a 64-node quadrature of
/// `e^{-i tau K0} A e^{i tau K0}` over one period (to `quad_tol`).
pub fn averaging_suite(samples: usize, seed: u64, exact_tol: f64, quad_tol: f64) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut te, mut tq) = (Tally::default(), Tally::default());
    for i in 0..samples {
        let model = Arc::new(if i % 2 == 0 { SpectralModel::sphere(5)? } else { SpectralModel::circle(8)? });
        let a = random_operator(&model, 2, 1, 0.0, &mut rng);
        let avg = average_k0(&a)?;
        let idx = model.cluster_of_index();
        let lam: Vec<f64> = idx.iter().map(|&p| model.cluster(p).lambda).collect();
        let scale = a.max_abs();
        let (mut e_exact, mut e_quad) = (0.0f64, 0.0f64);
        for (l, x) in a.iter() {
            let got = avg.coeff(l).cloned().unwrap_or_else(|| DMatrix::zeros(x.nrows(), x.ncols()));
            let proj = DMatrix::from_fn(x.nrows(), x.ncols(), |r, c| if idx[r] == idx[c] { x[(r, c)] } else { C64::new(0.0, 0.0) });
            e_exact = e_exact.max((&got - proj).camax());
            let mut acc = DMatrix::<C64>::zeros(x.nrows(), x.ncols());
            for node in 0..64 {
                let tau = 2.0 * PI * node as f64 / 64.0;
                for c in 0..x.ncols() {
                    for r in 0..x.nrows() {
                        acc[(r, c)] += x[(r, c)] * C64::from_polar(1.0, -tau * (lam[r] - lam[c])) / 64.0;
                    }
                }
            }
            e_quad = e_quad.max((acc - got).camax());
        }
        te.push(e_exact / scale, exact_tol);
        tq.push(e_quad / scale, quad_tol);
    }
    Ok(vec![
        te.finish("averaging", "block_diagonal_projection", exact_tol),
        tq.finish("averaging", "period_quadrature", quad_tol),
    ])
}

/// Block column `l' = 0` of a dense lattice matrix, rows `|l|_inf <= n`.
fn column_zero(dense: &DMatrix<C64>, d: usize, r: usize, dim: usize, n: usize) -> Vec<(Mode, DMatrix<C64>)> {
    let modes = lattice_modes(d, r);
    let j = modes.iter().position(|l| l.iter().all(|&x| x == 0)).expect("origin on lattice");
    modes
        .iter()
        .enumerate()
        .filter(|(_, l)| l.iter().all(|x| x.unsigned_abs() as usize <= n))
        .map(|(i, l)| (l.clone(), dense.view((i * dim, j * dim), (dim, dim)).into_owned()))
        .collect()
}

fn relative_to_dense(a: &Fbo, reference: &[(Mode, DMatrix<C64>)]) -> f64 {
    let dim = a.dim();
    let zero = DMatrix::<C64>::zeros(dim, dim);
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for (l, m) in reference {
        let got = a.coeff(l).unwrap_or(&zero);
        diff = diff.max((got - m).camax());
        scale = scale.max(m.camax());
    }
    // coefficients the reference does not list must vanish
    for (l, m) in a.iter() {
        if !reference.iter().any(|(x, _)| x == l) {
            diff = diff.max(m.camax());
        }
    }
    diff / scale.max(f64::MIN_POSITIVE)
}

fn hermitian_exp(h: &DMatrix<C64>) -> DMatrix<C64> {
    let n = h.nrows();
    let m = faer::Mat::<faer::c64>::from_fn(n, n, |i, j| {
        let z = 0.5 * (h[(i, j)] + h[(j, i)].conj());
        faer::c64::new(z.re, z.im)
    });
    let eig = m.self_adjoint_eigen(faer::Side::Lower).expect("hermitian eigen");
    let u = eig.U();
    let s = eig.S();
    let mut out = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        let e = C64::from_polar(1.0, s[k].re);
        for i in 0..n {
            let ui = u[(i, k)];
            for j in 0..n {
                let uj = u[(j, k)];
                out[(i, j)] += C64::new(ui.re, ui.im) * e * C64::new(uj.re, -uj.im);
            }
        }
    }
    out
}

/// Operator algebra against dense computations on the flattened
/// `(l, x)` lattice, relative error against `tol`.
pub fn oracle_suite(samples: usize, seed: u64, tol: f64) -> Result<Vec<PropertyResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["mul", "commutator", "apply", "exp", "conjugate"];
    let mut tallies: Vec<Tally> = names.iter().map(|_| Tally::default()).collect();
    let tols = Tolerances::default();
    for i in 0..samples {
        let k_max = 3 + i % 4;
        let d = 1 + i % 2;
        let model = Arc::new(if i % 3 == 0 { SpectralModel::sphere(k_max.min(4))? } else { SpectralModel::circle(k_max)? });
        let dim = model.total_dim();
        let (na, nb) = (1 + i % 3, 1 + (i + 1) % 3);
        let a = random_operator(&model, d, na, 0.0, &mut rng);
        let b = random_operator(&model, d, nb, 0.0, &mut rng);
        let n_out = 3;

        let r = n_out.max(nb);
        let fa = flatten_operator(&a, r);
        let fb = flatten_operator(&b, r);
        let ab = &fa * &fb;
        tallies[0].push(relative_to_dense(&a.mul(&b, n_out)?, &column_zero(&ab, d, r, dim, n_out)), tol);
        let r2 = n_out.max(na).max(nb);
        let (fa2, fb2) = (flatten_operator(&a, r2), flatten_operator(&b, r2));
        let comm = &fa2 * &fb2 - &fb2 * &fa2;
        tallies[1].push(relative_to_dense(&a.commutator(&b, n_out)?, &column_zero(&comm, d, r2, dim, n_out)), tol);

        let z = random_state(&model, d, nb, &mut rng);
        let az = a.apply(&z)?;
        let r3 = az.n_max().max(nb);
        let dense = flatten_operator(&a, r3) * flatten_state(&z, r3);
        let modes = lattice_modes(d, r3);
        let (mut e, mut sc) = (0.0f64, 0.0f64);
        for (j, l) in modes.iter().enumerate() {
            let want = dense.rows(j * dim, dim);
            let got = az.coeff(l).map(|v| v.clone_owned()).unwrap_or_else(|| DVector::zeros(dim));
            e = e.max((got - want).camax());
            sc = sc.max(want.camax());
        }
        tallies[2].push(e / sc, tol);

        // e^{iS} at the collocation nodes against dense eigen exponentials
        let s = random_hermitian_operator(&model, d, 1, 0.0, &mut rng).scale_real(0.3);
        let g = 5;
        let phi = exp_map(&s, g, &tols)?;
        let mut e = 0.0f64;
        for node in modes_in_box(d, (g - 1) / 2) {
            let pt: Vec<f64> = node.iter().map(|&x| 2.0 * PI * x as f64 / g as f64).collect();
            e = e.max((phi.eval(&pt) - hermitian_exp(&s.eval(&pt))).camax());
        }
        tallies[3].push(e, tol);

        // Phi (omega.d_phi + iM) Phi^{-1} = omega.d_phi + iM+ on the lattice
        let s = random_hermitian_operator(&model, d, 1, 0.0, &mut rng).scale_real(0.1);
        let phi = exp_map(&s, 3, &tols)?;
        let phi_inv = exp_map(&s.scale_real(-1.0), 3, &tols)?;
        let m = random_hermitian_operator(&model, d, 1, 0.0, &mut rng);
        let omega = random_omega(d, &mut rng);
        let n_conj = 2;
        // truncated factors are only approximately inverse; the algebra is
        // what is compared, so the defect gates are opened
        let loose = Tolerances { tol_herm: 1.0, tol_unit: 1.0, tol_inv: 1.0 };
        let c = conjugate_quasienergy(&phi, &phi_inv, &m, &omega, n_conj, &loose)?;
        let r4 = n_conj.max(phi_inv.n_max() + m.n_max()).max(phi_inv.n_max());
        let q = crate::operator::quasi_energy_matrix(&m, &omega, r4);
        let dense = flatten_operator(&phi, r4) * q * flatten_operator(&phi_inv, r4);
        let mut raw = Fbo::zeros(model.clone(), d, n_conj);
        for (l, x) in column_zero(&dense, d, r4, dim, n_conj) {
            raw.insert_coeff(l, x);
        }
        raw.set_hermitian(false);
        let want = raw.hermitian_part();
        let reference: Vec<(Mode, DMatrix<C64>)> = want.iter().map(|(l, x)| (l.clone(), x.clone())).collect();
        tallies[4].push(relative_to_dense(&c.op, &reference), tol);
    }
    Ok(names
        .iter()
        .zip(tallies)
        .map(|(n, t)| t.finish("oracle", n, tol))
        .collect())
}

/// Constants `C` with `lhs <= C rhs` for the norm inequalities, frozen
/// from a calibration batch (seed 7001, 100 samples) times a safety
/// factor of two.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NormConstants {
    pub tame: f64,
    pub action: f64,
    pub weighted_action: f64,
    pub weight_conjugation: f64,
    pub cutoff_tail: f64,
    pub op_norm: f64,
}

pub const FROZEN_NORM_CONSTANTS: NormConstants = NormConstants {
    tame: 0.6597,
    action: 0.5915,
    weighted_action: 0.3224,
    weight_conjugation: 1.714,
    cutoff_tail: 1.167,
    op_norm: 0.7097,
};

/// Indices of the norm batch.
pub const NORM_S: f64 = 3.0;
pub const NORM_S0: f64 = 2.0;

fn norm_samples(samples: usize, seed: u64) -> Result<Vec<[BoundReport; 6]>> {
    let model = Arc::new(SpectralModel::circle(10)?);
    let d = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for i in 0..samples {
        let sigma = 4.0 * rng.gen::<f64>();
        let a = random_operator(&model, d, 2, sigma, &mut rng);
        let b = random_operator(&model, d, 2, 4.0 * rng.gen::<f64>(), &mut rng);
        let z = random_state(&model, d, 2, &mut rng);
        let phis: Vec<Vec<f64>> = (0..6).map(|_| (0..d).map(|_| 2.0 * PI * rng.gen::<f64>()).collect()).collect();
        let n = [2.0, 4.0, 8.0][i % 3];
        let beta = [1.0, 2.0][i % 2];
        let alpha = [0.5, 1.0][(i / 2) % 2];
        let worst_tail = [2.0, 4.0, 8.0]
            .iter()
            .flat_map(|&nn| [1.0, 2.0].map(|bb| cutoff_tail_check(&a, nn, bb, 1.0)))
            .fold(BoundReport::new(0.0, 1.0), |acc, r| if r.constant > acc.constant { r } else { acc });
        let _ = (n, beta);
        out.push([
            tame_check(&a, &b, NORM_S, NORM_S0),
            action_check(&a, &z, NORM_S, NORM_S0),
            weighted_action_check(&a, &z, 1.0, NORM_S, NORM_S0),
            weight_conjugation_check(&a, alpha, n, NORM_S),
            worst_tail,
            op_norm_bound_check(&a, 1.0, NORM_S0, &phis),
        ]);
    }
    Ok(out)
}

/// Largest constants over a batch, times `margin`.
pub fn calibrate_norm_constants(samples: usize, seed: u64, margin: f64) -> Result<NormConstants> {
    let mut c = [0.0f64; 6];
    for row in norm_samples(samples, seed)? {
        for (x, r) in c.iter_mut().zip(row.iter()) {
            *x = x.max(r.constant);
        }
    }
    Ok(NormConstants {
        tame: margin * c[0],
        action: margin * c[1],
        weighted_action: margin * c[2],
        weight_conjugation: margin * c[3],
        cutoff_tail: margin * c[4],
        op_norm: margin * c[5],
    })
}

/// Norm inequalities on a fresh batch against frozen constants.
pub fn norm_suite(samples: usize, seed: u64, constants: &NormConstants) -> Result<Vec<PropertyResult>> {
    let names = ["tame_product", "action", "weighted_action", "weight_conjugation", "cutoff_tail", "pointwise_operator_norm"];
    let bounds = [
        constants.tame,
        constants.action,
        constants.weighted_action,
        constants.weight_conjugation,
        constants.cutoff_tail,
        constants.op_norm,
    ];
    let mut tallies: Vec<Tally> = names.iter().map(|_| Tally::default()).collect();
    for row in norm_samples(samples, seed)? {
        for ((t, r), b) in tallies.iter_mut().zip(row.iter()).zip(bounds) {
            t.push(r.constant, b);
        }
    }
    Ok(names
        .iter()
        .zip(tallies)
        .zip(bounds)
        .map(|((n, t), b)| t.finish("norms", n, b))
        .collect())
}

/// Every suite at its acceptance size.
pub fn run_all(seed: u64) -> Result<Vec<PropertyResult>> {
    let mut out = identity_suite(50, seed, 1e-9)?;
    out.extend(averaging_suite(20, seed.wrapping_add(1), 1e-12, 1e-8)?);
    out.extend(oracle_suite(12, seed.wrapping_add(2), 1e-10)?);
    out.extend(norm_suite(100, seed.wrapping_add(3), &FROZEN_NORM_CONSTANTS)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suites_pass() {
        for r in identity_suite(3, 5, 1e-9).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
        for r in averaging_suite(2, 5, 1e-12, 1e-8).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
        for r in oracle_suite(4, 5, 1e-10).unwrap() {
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn frozen_constants_cover_calibration_head() {
        let c = calibrate_norm_constants(10, 7001, 2.0).unwrap();
        let f = FROZEN_NORM_CONSTANTS;
        assert!(c.tame <= f.tame && c.action <= f.action && c.weighted_action <= f.weighted_action);
        assert!(c.weight_conjugation <= f.weight_conjugation && c.cutoff_tail <= f.cutoff_tail && c.op_norm <= f.op_norm);
    }
}
