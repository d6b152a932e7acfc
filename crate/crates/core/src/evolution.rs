//! Time integration of `i u_t = (Delta + eps W(omega t)) u` on the
//! truncated cluster space, and the norm and conjugacy checks built on it.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::loglog_slope;
use crate::norms::hs_norm;
use crate::operator::{exp_i_hermitian_eig, spectral_norm, Fbo, C64};
use crate::spectral::SpectralModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// `exp(-i h H(t + h/2))`.
    ExpMidpoint,
    /// `exp(-i h Delta/2) exp(-i h eps W(t + h/2)) exp(-i h Delta/2)`.
    StrangSplit,
    /// Fourth-order commutator-free Magnus, two exponentials at the Gauss
    /// nodes.
    Magnus4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    pub l2: f64,
    /// `||u(t)||_{H^s}` for each configured `s`.
    pub hs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EvolutionRun {
    pub model: Arc<SpectralModel>,
    pub omega: Vec<f64>,
    pub epsilon: f64,
    pub w: Fbo,
    pub u0: DVector<C64>,
    /// Record times, starting at 0.
    pub t_grid: Vec<f64>,
    pub integrator: Integrator,
    /// Step size; `None` picks `min(0.01, 0.1 / (eps sup|W|))`.
    pub h: Option<f64>,
    pub s_list: Vec<f64>,
    /// Step-halving estimate bound per unit time.
    pub alert_tol: f64,
    pub records: Vec<Record>,
    pub states: Vec<DVector<C64>>,
}

impl EvolutionRun {
    pub fn new(w: &Fbo, epsilon: f64, omega: &[f64], u0: DVector<C64>, t_grid: Vec<f64>) -> Self {
        EvolutionRun {
            model: w.model().clone(),
            omega: omega.to_vec(),
            epsilon,
            w: w.clone(),
            u0,
            t_grid,
            integrator: Integrator::ExpMidpoint,
            h: None,
            s_list: vec![0.0, 2.0],
            alert_tol: 1e-6,
            records: Vec::new(),
            states: Vec::new(),
        }
    }

    /// Uniform record grid `0, dt, ..., t_max`.
    pub fn uniform_grid(t_max: f64, count: usize) -> Vec<f64> {
        (0..=count).map(|i| t_max * i as f64 / count as f64).collect()
    }

    fn hamiltonian(&self, t: f64) -> DMatrix<C64> {
        let phi: Vec<f64> = self.omega.iter().map(|w| w * t).collect();
        let mut h = self.w.eval(&phi) * C64::new(self.epsilon, 0.0);
        for (i, x) in self.model.laplace_diagonal().iter().enumerate() {
            h[(i, i)] += C64::new(*x, 0.0);
        }
        (&h + h.adjoint()) * C64::new(0.5, 0.0)
    }

    /// Step size used by `integrate`.
    pub fn step_size(&self) -> f64 {
        if let Some(h) = self.h {
            return h;
        }
        let scale = self.epsilon.abs()
            * self
                .w
                .iter()
                .map(|(_, m)| spectral_norm(m))
                .sum::<f64>();
        if scale > 0.0 {
            0.01f64.min(0.1 / scale)
        } else {
            0.01
        }
    }

    /// Propagator of one step `[t, t + h]`.
    pub fn step_matrix(&self, t: f64, h: f64) -> DMatrix<C64> {
        match self.integrator {
            Integrator::ExpMidpoint => exp_i_hermitian_eig(&(self.hamiltonian(t + 0.5 * h) * C64::new(-h, 0.0))),
            Integrator::StrangSplit => {
                let half: DVector<C64> = DVector::from_iterator(
                    self.model.total_dim(),
                    self.model
                        .laplace_diagonal()
                        .iter()
                        .map(|x| C64::from_polar(1.0, -0.5 * h * x)),
                );
                let phi: Vec<f64> = self.omega.iter().map(|w| w * (t + 0.5 * h)).collect();
                let wm = self.w.eval(&phi) * C64::new(-h * self.epsilon, 0.0);
                let mid = exp_i_hermitian_eig(&((&wm + wm.adjoint()) * C64::new(0.5, 0.0)));
                DMatrix::from_fn(mid.nrows(), mid.ncols(), |i, j| half[i] * mid[(i, j)] * half[j])
            }
            Integrator::Magnus4 => {
                let r = 3f64.sqrt() / 6.0;
                let h1 = self.hamiltonian(t + (0.5 - r) * h);
                let h2 = self.hamiltonian(t + (0.5 + r) * h);
                let (a1, a2) = ((3.0 + 2.0 * 3f64.sqrt()) / 12.0, (3.0 - 2.0 * 3f64.sqrt()) / 12.0);
                let first = exp_i_hermitian_eig(&((&h1 * C64::new(a1, 0.0) + &h2 * C64::new(a2, 0.0)) * C64::new(-h, 0.0)));
                let second = exp_i_hermitian_eig(&((&h1 * C64::new(a2, 0.0) + &h2 * C64::new(a1, 0.0)) * C64::new(-h, 0.0)));
                second * first
            }
        }
    }

    fn record(&self, t: f64, u: &DVector<C64>) -> Record {
        Record {
            t,
            l2: u.norm(),
            hs: self.s_list.iter().map(|&s| hs_norm(&self.model, u, s)).collect(),
        }
    }

    /// Step-halving estimate `|U_h u - U_{h/2} U_{h/2} u|` at time `t`.
    pub fn halving_estimate(&self, t: f64, h: f64, u: &DVector<C64>) -> f64 {
        let full = self.step_matrix(t, h) * u;
        let half = self.step_matrix(t + 0.5 * h, 0.5 * h) * (self.step_matrix(t, 0.5 * h) * u);
        (full - half).norm()
    }
}

/// Integrates over `t_grid`, storing a record and the state at each time.
///
/// Every 1000 steps the local error is estimated by step halving; an
/// estimate above `alert_tol * h` raises an accuracy alert.
pub fn integrate(run: EvolutionRun) -> Result<EvolutionRun> {
    let u0 = run.u0.clone();
    Ok(integrate_batch(run, vec![u0])?.remove(0))
}

/// Runs the template for several initial states at once, sharing the
/// step propagators.
pub fn integrate_batch(template: EvolutionRun, u0s: Vec<DVector<C64>>) -> Result<Vec<EvolutionRun>> {
    let run = template;
    if run.t_grid.first() != Some(&0.0) || run.t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("t_grid must start at 0 and increase".into()));
    }
    let dim = run.model.total_dim();
    if u0s.is_empty() || u0s.iter().any(|u| u.len() != dim) || run.omega.len() != run.w.d() {
        return Err(Error::ModelMismatch);
    }
    let defect = run.w.hermitian_defect();
    if defect > 1e-12 {
        return Err(Error::NotHermitian { defect });
    }
    let h = run.step_size();
    let cols: Vec<_> = u0s.iter().map(|u| u.column(0)).collect();
    let mut u = DMatrix::from_columns(&cols);
    let mut t = 0.0;
    let mut steps = 0usize;
    let mut out: Vec<EvolutionRun> = u0s
        .iter()
        .map(|u0| {
            let mut r = run.clone();
            r.u0 = u0.clone();
            r.records = vec![r.record(0.0, u0)];
            r.states = vec![u0.clone()];
            r
        })
        .collect();
    for &target in &run.t_grid[1..] {
        let n = ((target - t) / h).ceil().max(1.0) as usize;
        let hh = (target - t) / n as f64;
        for _ in 0..n {
            if steps % 1000 == 0 {
                let est = run.halving_estimate(t, hh, &u.column(0).into_owned());
                if est > run.alert_tol * hh {
                    return Err(Error::AccuracyAlert {
                        estimate: est,
                        tol: run.alert_tol * hh,
                    });
                }
            }
            u = run.step_matrix(t, hh) * u;
            t += hh;
            steps += 1;
        }
        t = target;
        for (i, r) in out.iter_mut().enumerate() {
            let col = u.column(i).into_owned();
            let rec = r.record(t, &col);
            r.records.push(rec);
            r.states.push(col);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SobolevReport {
    pub s: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    pub lo: f64,
    pub hi: f64,
    pub passed: bool,
    /// Total drift of the `L^2` norm.
    pub l2_drift: f64,
}

/// `||u(t)||_{H^s} / ||u0||_{H^s}` against `[1 - C eps, 1 + C eps]`.
pub fn sobolev_bound_check(run: &EvolutionRun, s: f64, c_gate: f64) -> Result<SobolevReport> {
    let idx = run
        .s_list
        .iter()
        .position(|&x| x == s)
        .ok_or_else(|| Error::InvalidArgument(format!("s = {s} was not recorded")))?;
    let base = run.records[0].hs[idx];
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for r in &run.records {
        let q = r.hs[idx] / base;
        lo = lo.min(q);
        hi = hi.max(q);
    }
    let l0 = run.records[0].l2;
    let l2_drift = run.records.iter().map(|r| (r.l2 - l0).abs()).fold(0.0, f64::max);
    // rounding floor so that eps = 0 still passes
    let gate = c_gate * run.epsilon + 1e-12;
    Ok(SobolevReport {
        s,
        min_ratio: lo,
        max_ratio: hi,
        lo: 1.0 - gate,
        hi: 1.0 + gate,
        passed: lo >= 1.0 - gate && hi <= 1.0 + gate,
        l2_drift,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyReport {
    pub s: f64,
    pub defects: Vec<(f64, f64)>,
    pub sup: f64,
}

/// `|Psi(omega t) u(t) - e^{-it(Delta + Z)} Psi(0) u0|_{H^s} / |u0|_{H^s}`
/// along the recorded states.
pub fn conjugacy_check(run: &EvolutionRun, psi: &Fbo, z: &Fbo, omega: &[f64], s: f64) -> Result<ConjugacyReport> {
    if omega.len() != run.omega.len() || omega.iter().zip(&run.omega).any(|(a, b)| a != b) {
        return Err(Error::InvalidArgument("transform belongs to a different frequency".into()));
    }
    if !psi.same_space(&run.w) || !z.same_space(&run.w) {
        return Err(Error::ModelMismatch);
    }
    let zero = vec![0.0; omega.len()];
    let mut h = z.eval(&zero);
    for (i, x) in run.model.laplace_diagonal().iter().enumerate() {
        h[(i, i)] += C64::new(*x, 0.0);
    }
    let h = (&h + h.adjoint()) * C64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let v0 = psi.eval(&zero) * &run.u0;
    let c0 = eig.eigenvectors.adjoint() * v0;
    let norm0 = hs_norm(&run.model, &run.u0, s);
    let mut defects = Vec::with_capacity(run.states.len());
    for (rec, u) in run.records.iter().zip(&run.states) {
        let t = rec.t;
        let phases = DVector::from_iterator(c0.len(), eig.eigenvalues.iter().map(|e| C64::from_polar(1.0, -t * e)));
        let pred = &eig.eigenvectors * c0.component_mul(&phases);
        let phi: Vec<f64> = omega.iter().map(|w| w * t).collect();
        let got = psi.eval(&phi) * u;
        defects.push((t, hs_norm(&run.model, &(got - pred), s) / norm0));
    }
    let sup = defects.iter().map(|x| x.1).fold(0.0, f64::max);
    Ok(ConjugacyReport { s, defects, sup })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformReport {
    pub s: f64,
    pub delta: f64,
    /// `sup_phi ||Psi(phi) - Id||_{L(H^s, H^{s-delta})}`.
    pub sup_minus_id: f64,
    /// `sup_phi ||Psi(phi)||_{L(H^s)}`.
    pub sup_norm: f64,
    /// `sup_phi ||Psi^H Psi - Id||_2`.
    pub unitarity_defect: f64,
}

fn weights(model: &SpectralModel, s: f64) -> Vec<f64> {
    let mut out = vec![0.0; model.total_dim()];
    for p in 0..model.num_clusters() {
        for i in model.range(p) {
            out[i] = model.bracket(p).powf(s);
        }
    }
    out
}

/// Dense operator norms of `Psi(phi)` at the sampled angles.
pub fn transform_bound_check(psi: &Fbo, s: f64, delta: f64, phis: &[Vec<f64>]) -> TransformReport {
    let model = psi.model();
    let w_in = weights(model, -s);
    let w_out = weights(model, s - delta);
    let w_same = weights(model, s);
    let dim = psi.dim();
    let id = DMatrix::<C64>::identity(dim, dim);
    let (mut a, mut b, mut c) = (0.0f64, 0.0f64, 0.0f64);
    for phi in phis {
        let m = psi.eval(phi);
        let diff = &m - &id;
        let scaled = DMatrix::from_fn(dim, dim, |i, j| diff[(i, j)] * w_out[i] * w_in[j]);
        a = a.max(spectral_norm(&scaled));
        let same = DMatrix::from_fn(dim, dim, |i, j| m[(i, j)] * w_same[i] * w_in[j]);
        b = b.max(spectral_norm(&same));
        c = c.max(spectral_norm(&(m.adjoint() * &m - &id)));
    }
    TransformReport {
        s,
        delta,
        sup_minus_id: a,
        sup_norm: b,
        unitarity_defect: c,
    }
}

/// Log-log slope of `||Psi - Id||` against `eps`.
pub fn transform_scaling(eps: &[f64], values: &[f64]) -> f64 {
    loglog_slope(eps, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::testutil::*;

    fn setup() -> (Arc<SpectralModel>, Fbo, DVector<C64>) {
        let m = Arc::new(SpectralModel::circle(4).unwrap());
        let mut r = rng(71);
        let w = random_hermitian(&m, 2, 1, &mut r);
        let dim = m.total_dim();
        let u0 = DVector::from_fn(dim, |i, _| C64::new(1.0 / (1.0 + i as f64), 0.3));
        (m, w, u0)
    }

    #[test]
    fn free_flow_is_exact() {
        let (m, w, u0) = setup();
        let run = EvolutionRun::new(&w, 0.0, &[0.9, 1.2], u0.clone(), EvolutionRun::uniform_grid(3.0, 3));
        let run = integrate(run).unwrap();
        let last = run.states.last().unwrap();
        for (i, x) in m.laplace_diagonal().iter().enumerate() {
            let want = u0[i] * C64::from_polar(1.0, -3.0 * x);
            assert!((last[i] - want).norm() < 1e-12);
        }
        let rep = sobolev_bound_check(&run, 2.0, 10.0).unwrap();
        assert!((rep.max_ratio - 1.0).abs() < 1e-12 && (rep.min_ratio - 1.0).abs() < 1e-12);
    }

    #[test]
    fn commuting_static_perturbation() {
        let (m, _, u0) = setup();
        let mut r = rng(72);
        let w = random_hermitian(&m, 2, 0, &mut r).block_diagonal_part();
        let eps = 0.05;
        let mut run = EvolutionRun::new(&w, eps, &[0.9, 1.2], u0.clone(), vec![0.0, 10.0]);
        run.h = Some(0.05);
        let run = integrate(run).unwrap();
        let mut hm = w.eval(&[0.0, 0.0]) * C64::new(eps, 0.0);
        for (i, x) in m.laplace_diagonal().iter().enumerate() {
            hm[(i, i)] += C64::new(*x, 0.0);
        }
        let want = exp_i_hermitian_eig(&(hm * C64::new(-10.0, 0.0))) * u0;
        assert!((run.states[1].clone() - want).norm() < 1e-9);
    }

    fn self_convergence(integrator: Integrator) -> f64 {
        let (_, w, u0) = setup();
        let solve = |h: f64| {
            let mut run = EvolutionRun::new(&w, 0.3, &[0.9, 1.2], u0.clone(), vec![0.0, 1.0]);
            run.h = Some(h);
            run.integrator = integrator;
            run.alert_tol = f64::INFINITY;
            integrate(run).unwrap().states[1].clone()
        };
        let reference = solve(1e-3 / 4.0);
        let e1 = (solve(0.02) - &reference).norm();
        let e2 = (solve(0.01) - &reference).norm();
        e1 / e2
    }

    #[test]
    fn integrator_orders() {
        let r = self_convergence(Integrator::ExpMidpoint);
        assert!((r - 4.0).abs() < 0.6, "midpoint ratio {r}");
        let r = self_convergence(Integrator::StrangSplit);
        assert!((r - 4.0).abs() < 0.6, "strang ratio {r}");
        let r = self_convergence(Integrator::Magnus4);
        assert!((r - 16.0).abs() < 3.0, "magnus4 ratio {r}");
    }

    #[test]
    fn identity_transform_checks() {
        let (m, w, u0) = setup();
        let run = integrate(EvolutionRun::new(&w, 0.0, &[0.9, 1.2], u0, vec![0.0, 1.0, 2.0])).unwrap();
        let id = Fbo::identity(m.clone(), 2, 0);
        let z = Fbo::zeros(m.clone(), 2, 0);
        let rep = conjugacy_check(&run, &id, &z, &[0.9, 1.2], 2.0).unwrap();
        assert!(rep.sup < 1e-13);
        let tr = transform_bound_check(&id, 2.0, 0.0, &[vec![0.0, 0.0], vec![1.0, 2.0]]);
        assert_eq!(tr.sup_minus_id, 0.0);
        assert!(tr.unitarity_defect < 1e-15);
    }
}
