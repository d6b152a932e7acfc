//! KAM reduction of `omega.d_phi + i(Delta + Z + R)` to a phi-independent
//! block-diagonal normal form.

use std::sync::Arc;

use log::{debug, warn};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frequency::{melnikov_violation, pair_bracket, DivisorIndex, OmegaSet, Spectrum};
use crate::norms::{beta_decay, s_decay};
use crate::operator::{dot, exp_map, linf, quasi_energy_matrix, Fbo, Tolerances, C64};
use crate::spectral::SpectralModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KamConfig {
    pub d: usize,
    pub n: usize,
    pub s0: f64,
    pub s: f64,
    pub b: f64,
    pub a: f64,
    pub tau: f64,
    pub rho: f64,
    pub kappa: f64,
    pub gamma: f64,
    pub n0: f64,
    pub chi: f64,
    pub nu_max: usize,
    pub tol_r: f64,
    pub decay_gate: f64,
    /// Lie series stops once a term is below `lie_tol * |R|_s`.
    pub lie_tol: f64,
    pub lie_max_terms: usize,
    /// Calibration constant of the smallness advisory.
    pub smallness_c: f64,
    /// Relative bound on the homological residual.
    pub residual_tol: f64,
    pub tolerances: Tolerances,
}

impl KamConfig {
    pub fn new(d: usize, n: usize, delta: f64, gamma: f64) -> Self {
        let b = (6 * d + 15 * n + 23) as f64;
        let s0 = (d + n) as f64 / 2.0 + 0.5;
        KamConfig {
            d,
            n,
            s0,
            s: s0,
            b,
            a: b - 2.0,
            tau: (d + 1) as f64,
            rho: (5 * n + 3) as f64,
            kappa: (1.0 - 2.0 * delta).clamp(0.0, 1.0),
            gamma,
            n0: 8.0,
            chi: 1.5,
            nu_max: 6,
            tol_r: 1e-10,
            decay_gate: 0.2,
            lie_tol: 1e-14,
            lie_max_terms: 40,
            smallness_c: 1.0,
            residual_tol: 1e-9,
            tolerances: Tolerances::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma must lie in [0,1), got {}", self.gamma)));
        }
        if !(self.chi > 1.0) {
            return Err(Error::Config(format!("chi must exceed 1, got {}", self.chi)));
        }
        if !(self.n0 >= 1.0) {
            return Err(Error::Config(format!("N0 must be at least 1, got {}", self.n0)));
        }
        if self.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        Ok(())
    }

    /// `N_nu = N0^{chi^nu}`, rounded down.
    pub fn cutoff(&self, nu: usize) -> usize {
        let x = self.n0.powf(self.chi.powi(nu as i32));
        if x >= 1e15 {
            1_000_000_000_000_000
        } else {
            x.floor() as usize
        }
    }

    /// `|R|_{rho,s}`.
    pub fn norm_low(&self, r: &Fbo) -> f64 {
        beta_decay(r, self.rho, self.s)
    }

    /// `|R|_{rho,s+b}`.
    pub fn norm_high(&self, r: &Fbo) -> f64 {
        beta_decay(r, self.rho, self.s + self.b)
    }
}

/// Eigen-decomposition of the diagonal blocks of `Delta + Z`.
///
/// Returns ascending eigenvalues per cluster and the frames `U_p` with
/// `U_p^H B_p U_p = diag(mu_p)`.
pub fn block_eigen(dz: &Fbo, tol: &Tolerances) -> Result<(Spectrum, Vec<DMatrix<C64>>)> {
    let model = dz.model();
    let zero = vec![0; dz.d()];
    let mut mu = Vec::with_capacity(model.num_clusters());
    let mut frames = Vec::with_capacity(model.num_clusters());
    let mut labels = Vec::with_capacity(model.num_clusters());
    for p in 0..model.num_clusters() {
        let b = dz.block(&zero, p, p);
        let defect = (&b - b.adjoint()).camax();
        if defect > tol.tol_herm {
            return Err(Error::NotHermitian { defect });
        }
        let h = (&b + b.adjoint()) * C64::new(0.5, 0.0);
        let (nr, nc) = h.shape();
        let eig = h.symmetric_eigen();
        let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let vals: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        let u = DMatrix::from_fn(nr, nc, |r, c| eig.eigenvectors[(r, order[c])]);
        mu.push(vals);
        frames.push(u);
        labels.push(model.cluster(p).k);
    }
    Ok((Spectrum { labels, mu }, frames))
}

/// Solution of the homological equation
/// `-omega.d_phi S + [iS, Delta + Z] + R = DiagR + Q`.
#[derive(Debug, Clone)]
pub struct Homological {
    pub s: Fbo,
    pub q: Fbo,
    pub diag_r: Fbo,
    pub spectrum: Spectrum,
    /// `|residual|_s / |R|_s`.
    pub residual: f64,
}

fn is_solved(l: &[i64], k: usize, k2: usize, n_cut: usize) -> bool {
    linf(l) <= n_cut && k.abs_diff(k2) <= n_cut
}

/// Residual `-omega.d_phi S + [iS, Delta + Z] + R - DiagR - Q`.
pub fn homological_residual(h: &Homological, r: &Fbo, z: &Fbo, omega: &[f64]) -> Result<Fbo> {
    let dz = Fbo::laplacian(r.model().clone(), r.d(), 0).add(z)?;
    let is = h.s.scale(C64::new(0.0, 1.0));
    let n = h.s.n_max().max(r.n_max());
    let comm = is.commutator(&dz, n)?;
    h.s
        .omega_dphi(omega)?
        .scale_real(-1.0)
        .add(&comm)?
        .add(r)?
        .sub(&h.diag_r)?
        .sub(&h.q)
}

/// Blockwise solve in the eigenframes of `Delta + Z`. Every divisor used is
/// checked against `2 gamma / (N^tau <k,k'>^{2n+2})`.
pub fn homological_solve(r: &Fbo, z: &Fbo, omega: &[f64], gamma: f64, n_cut: usize, cfg: &KamConfig) -> Result<Homological> {
    let model = r.model().clone();
    let d = r.d();
    let zero = vec![0; d];
    let dz = Fbo::laplacian(model.clone(), d, 0).add(z)?;
    let (spectrum, frames) = block_eigen(&dz, &cfg.tolerances)?;
    let nc = model.num_clusters();
    let base = 2.0 * gamma / (n_cut as f64).powf(cfg.tau);
    let mut s = Fbo::zeros(model.clone(), d, r.n_max());
    let mut diag_r = Fbo::zeros(model.clone(), d, r.n_max());
    for (l, _) in r.iter() {
        let wl = dot(omega, l);
        let l_zero = *l == zero;
        for p in 0..nc {
            let k = model.cluster(p).k;
            for q in 0..nc {
                let k2 = model.cluster(q).k;
                if !is_solved(l, k, k2, n_cut) {
                    continue;
                }
                let blk = r.block(l, p, q);
                if blk.iter().all(|x| x.re == 0.0 && x.im == 0.0) {
                    continue;
                }
                if l_zero && p == q {
                    diag_r.set_block(l, p, q, &blk);
                    continue;
                }
                let hat = frames[p].adjoint() * &blk * &frames[q];
                let weight = pair_bracket(k, k2).powi(2 * cfg.n as i32 + 2);
                let threshold = base / weight;
                let mut sol = DMatrix::zeros(hat.nrows(), hat.ncols());
                for i in 0..hat.nrows() {
                    for j in 0..hat.ncols() {
                        let div = wl + spectrum.mu[p][i] - spectrum.mu[q][j];
                        if !(div.abs() >= threshold) || div == 0.0 {
                            return Err(Error::ExcisionRequired {
                                l: l.clone(),
                                k,
                                j: i,
                                k2,
                                j2: j,
                                value: div.abs(),
                                threshold,
                            });
                        }
                        sol[(i, j)] = hat[(i, j)] * C64::new(0.0, -1.0 / div);
                    }
                }
                s.set_block(l, p, q, &(&frames[p] * sol * frames[q].adjoint()));
            }
        }
    }
    let q = r.filter_blocks(|l, p, q| !is_solved(l, model.cluster(p).k, model.cluster(q).k, n_cut));
    let mut s = s.hermitian_part();
    s.set_hermitian(true);
    let mut q = q;
    q.set_hermitian(true);
    diag_r.set_hermitian(true);
    let mut out = Homological {
        s,
        q,
        diag_r,
        spectrum,
        residual: 0.0,
    };
    let rn = s_decay(r, cfg.s);
    if rn > 0.0 {
        let res = homological_residual(&out, r, z, omega)?;
        out.residual = s_decay(&res, cfg.s) / rn;
        if out.residual > cfg.residual_tol {
            return Err(Error::LinearAlgebra(format!(
                "homological residual {:.3e} exceeds {:.1e}",
                out.residual, cfg.residual_tol
            )));
        }
    }
    Ok(out)
}

/// One row of the per-step history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub nu: usize,
    pub n_nu: usize,
    /// `|R_{nu+1}|_{rho,s}` after the step.
    pub norm_r_low: f64,
    pub norm_r_high: f64,
    /// `|R_{nu+1}|_{rho,s} / |R_nu|_{rho,s}`.
    pub ratio: f64,
    pub lie_terms: usize,
    /// `C(s) gamma^{-1} N^{2 tau + 1} |R|`, advisory only.
    pub smallness: f64,
    pub residual: f64,
    pub excised: bool,
    pub mu_head: Vec<f64>,
}

/// Reduction state for one frequency sample.
#[derive(Debug, Clone)]
pub struct KamState {
    pub omega: Vec<f64>,
    pub nu: usize,
    pub z: Fbo,
    pub r: Fbo,
    /// Accumulated transform, latest factor on the left.
    pub composed: Fbo,
    pub spectrum: Spectrum,
    pub history: Vec<StepRecord>,
    /// `|R_0|_{rho,s}`.
    pub initial_norm: f64,
}

impl KamState {
    pub fn new(omega: &[f64], z: &Fbo, r: &Fbo, composed: &Fbo, cfg: &KamConfig) -> Result<Self> {
        if omega.len() != r.d() {
            return Err(Error::ModelMismatch);
        }
        let mut z = z.with_n_max(0);
        if z.off_block_diagonal_max() > 0.0 {
            return Err(Error::InvalidArgument("Z must be block-diagonal".into()));
        }
        z.set_hermitian(true);
        let dz = Fbo::laplacian(z.model().clone(), z.d(), 0).add(&z)?;
        let (spectrum, _) = block_eigen(&dz, &cfg.tolerances)?;
        let mut r = r.clone();
        r.set_hermitian(true);
        Ok(KamState {
            omega: omega.to_vec(),
            nu: 0,
            initial_norm: cfg.norm_low(&r),
            z,
            r,
            composed: composed.clone(),
            spectrum,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Arc<SpectralModel> {
        self.r.model()
    }

    /// `Delta + Z + R`.
    pub fn operator(&self) -> Result<Fbo> {
        let mut m = Fbo::laplacian(self.model().clone(), self.r.d(), 0)
            .add(&self.z)?
            .add(&self.r)?;
        m.set_hermitian(true);
        Ok(m)
    }

    pub fn norm_low(&self, cfg: &KamConfig) -> f64 {
        cfg.norm_low(&self.r)
    }
}

/// `sum_{p>=1} ad_{iS}^p(X) c_p` with `c_p = c_{p-1} / (p + shift)`, stopped
/// once a term falls below `floor`.
fn lie_sum(is: &Fbo, x: &Fbo, shift: usize, n: usize, s: f64, floor: f64, max_terms: usize) -> Result<(Fbo, usize)> {
    let mut acc = Fbo::zeros(x.model().clone(), x.d(), n);
    let mut term = x.clone();
    let mut used = 0;
    for p in 1..=max_terms {
        term = is.commutator(&term, n)?.scale_real(1.0 / (p + shift) as f64);
        used = p;
        acc = acc.add(&term)?;
        let tn = s_decay(&term, s);
        if tn < floor || term.is_zero() {
            break;
        }
    }
    Ok((acc, used))
}

/// One KAM step at the current `N_nu`.
pub fn kam_step(state: &KamState, cfg: &KamConfig) -> Result<KamState> {
    let n_cut = cfg.cutoff(state.nu);
    let before = state.norm_low(cfg);
    let smallness = cfg.smallness_c / cfg.gamma * (n_cut as f64).powf(2.0 * cfg.tau + 1.0) * before;
    if smallness > 0.5 {
        debug!("smallness advisory at nu = {}: {smallness:.3e} > 1/2", state.nu);
    }
    let hom = homological_solve(&state.r, &state.z, &state.omega, cfg.gamma, n_cut, cfg)?;
    let n = state.r.n_max();
    let model = state.model().clone();
    let d = state.r.d();

    let mut z = state.z.add(&hom.diag_r.with_n_max(0))?;
    z.set_hermitian(true);
    let z = z.hermitian_part();

    let (r_new, lie_terms, composed) = if hom.s.is_zero() {
        (hom.q.clone(), 0, state.composed.clone())
    } else {
        let is = hom.s.scale(C64::new(0.0, 1.0));
        let floor = cfg.lie_tol * s_decay(&state.r, cfg.s);
        let x0 = hom.diag_r.add(&hom.q)?.sub(&state.r)?;
        let (sx, tx) = lie_sum(&is, &x0, 1, n, cfg.s, floor, cfg.lie_max_terms)?;
        let (sr, tr) = lie_sum(&is, &state.r, 0, n, cfg.s, floor, cfg.lie_max_terms)?;
        let r_new = hom.q.add(&sx)?.add(&sr)?;
        let phi = exp_map(&hom.s, 2 * n + 1, &cfg.tolerances)?;
        let composed = phi.mul(&state.composed, state.composed.n_max())?;
        (r_new, tx.max(tr), composed)
    };
    let mut r_new = r_new.hermitian_part().with_n_max(n);
    r_new.prune(0.0);
    r_new.set_hermitian(true);
    let dz = Fbo::laplacian(model, d, 0).add(&z)?;
    let (spectrum, _) = block_eigen(&dz, &cfg.tolerances)?;
    let after = cfg.norm_low(&r_new);
    let record = StepRecord {
        nu: state.nu,
        n_nu: n_cut,
        norm_r_low: after,
        norm_r_high: cfg.norm_high(&r_new),
        ratio: if before > 0.0 { after / before } else { 0.0 },
        lie_terms,
        smallness,
        residual: hom.residual,
        excised: false,
        mu_head: spectrum.mu.iter().flatten().take(4).cloned().collect(),
    };
    let mut history = state.history.clone();
    history.push(record);
    Ok(KamState {
        omega: state.omega.clone(),
        nu: state.nu + 1,
        z,
        r: r_new,
        composed,
        spectrum,
        history,
        initial_norm: state.initial_norm,
    })
}

/// Second Melnikov check of the current spectrum at cutoff `N`.
pub fn melnikov_check(state: &KamState, cfg: &KamConfig, n_cut: usize) -> Result<()> {
    let index = DivisorIndex::new(&state.spectrum, n_cut, cfg.n);
    match melnikov_violation(&state.omega, &index, cfg.gamma, cfg.tau, n_cut) {
        None => Ok(()),
        Some((l, (value, threshold, p, j, q, j2))) => Err(Error::ExcisionRequired {
            l,
            k: index.labels()[p],
            j,
            k2: index.labels()[q],
            j2,
            value,
            threshold,
        }),
    }
}

/// Melnikov check and KAM step until `|R|_{rho,s} <= tol_r` or `nu_max`.
pub fn iterate(initial: KamState, cfg: &KamConfig) -> Result<KamState> {
    // nothing to reduce, the unperturbed operator is already normal form
    if initial.r.max_abs() == 0.0 {
        return Ok(initial);
    }
    cfg.validate()?;
    let mut state = initial;
    let mut above = 0;
    while state.nu < cfg.nu_max && state.norm_low(cfg) > cfg.tol_r {
        let n_cut = cfg.cutoff(state.nu);
        melnikov_check(&state, cfg, n_cut)?;
        state = kam_step(&state, cfg)?;
        let rec = state.history.last().expect("step recorded");
        debug!(
            "kam nu={} N={} |R|={:.3e} ratio={:.3e} lie={}",
            rec.nu, rec.n_nu, rec.norm_r_low, rec.ratio, rec.lie_terms
        );
        if rec.ratio > cfg.decay_gate {
            above += 1;
            if above >= 2 {
                return Err(Error::Stagnation {
                    nu: rec.nu,
                    ratio: rec.ratio,
                });
            }
        } else {
            above = 0;
        }
    }
    Ok(state)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Outcome {
    Converged { steps: usize },
    NotConverged { steps: usize },
    Excised { nu: usize, detail: String },
    Stagnated { nu: usize, ratio: f64 },
    Failed { message: String },
}

impl Outcome {
    pub fn converged(&self) -> bool {
        matches!(self, Outcome::Converged { .. })
    }
}

/// Per-sample results of a batch run.
#[derive(Debug, Clone)]
pub struct KamBatch {
    pub omega_set: OmegaSet,
    pub outcomes: Vec<Option<Outcome>>,
    pub states: Vec<Option<KamState>>,
}

impl KamBatch {
    pub fn converged(&self) -> Vec<usize> {
        (0..self.outcomes.len())
            .filter(|&i| self.outcomes[i].as_ref().is_some_and(Outcome::converged))
            .collect()
    }
}

/// Runs `iterate` on every surviving sample. `init` builds the starting
/// state of sample `i`; failures flag that sample only.
pub fn iterate_batch<F>(set: &OmegaSet, cfg: &KamConfig, init: F) -> Result<KamBatch>
where
    F: Fn(usize, &[f64]) -> Result<KamState> + Sync,
{
    cfg.validate()?;
    let alive = set.survivors();
    let results: Vec<(usize, Outcome, Option<KamState>)> = alive
        .par_iter()
        .map(|&i| {
            let w = &set.samples[i];
            let run = init(i, w).and_then(|s| iterate(s, cfg));
            match run {
                Ok(s) => {
                    let steps = s.nu;
                    let out = if s.norm_low(cfg) <= cfg.tol_r {
                        Outcome::Converged { steps }
                    } else {
                        Outcome::NotConverged { steps }
                    };
                    (i, out, Some(s))
                }
                Err(Error::ExcisionRequired { l, k, j, k2, j2, value, threshold }) => (
                    i,
                    Outcome::Excised {
                        nu: 0,
                        detail: format!("l={l:?} k={k} j={j} k'={k2} j'={j2} |div|={value:.3e} < {threshold:.3e}"),
                    },
                    None,
                ),
                Err(Error::Stagnation { nu, ratio }) => (i, Outcome::Stagnated { nu, ratio }, None),
                Err(e) => {
                    warn!("kam failed at sample {i}: {e}");
                    (i, Outcome::Failed { message: e.to_string() }, None)
                }
            }
        })
        .collect();
    let mut outcomes = vec![None; set.len()];
    let mut states = vec![None; set.len()];
    for (i, o, s) in results {
        outcomes[i] = Some(o);
        states[i] = s;
    }
    let keep: Vec<bool> = (0..set.len())
        .map(|i| !matches!(outcomes[i], Some(Outcome::Excised { .. }) | None))
        .collect();
    let omega_set = set.with_stage("kam", |i, _| keep[i]);
    if omega_set.survivors().is_empty() {
        return Err(Error::EmptySurvivors);
    }
    Ok(KamBatch {
        omega_set,
        outcomes,
        states,
    })
}

/// Sorted eigenvalues of `diag(omega.l) + M` on the lattice `|l|_inf <= r`,
/// computed with a dense Hermitian solver.
pub fn floquet_oracle(m: &Fbo, omega: &[f64], r: usize, cap: usize) -> Result<Vec<f64>> {
    let dim = (2 * r + 1).pow(m.d() as u32) * m.dim();
    if dim > cap {
        return Err(Error::OracleCap { dim, cap });
    }
    let h = quasi_energy_matrix(m, omega, r);
    let mat = faer::Mat::<faer::c64>::from_fn(dim, dim, |i, j| {
        let a = h[(i, j)];
        let b = h[(j, i)].conj();
        faer::c64::new(0.5 * (a.re + b.re), 0.5 * (a.im + b.im))
    });
    let mut ev = mat
        .self_adjoint_eigenvalues(faer::Side::Lower)
        .map_err(|e| Error::LinearAlgebra(format!("{e:?}")))?;
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Matching of normal-form eigenvalues against oracle quasi-energies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMatch {
    pub max_distance: f64,
    pub matched: usize,
    pub total: usize,
    /// Every eigenvalue found a mutual nearest neighbour within `tol`.
    pub passed: bool,
}

fn nearest(sorted: &[f64], x: f64) -> (usize, f64) {
    let i = sorted.partition_point(|&v| v < x);
    let mut best = (usize::MAX, f64::INFINITY);
    for j in [i.wrapping_sub(1), i] {
        if let Some(&v) = sorted.get(j) {
            if (v - x).abs() < best.1 {
                best = (j, (v - x).abs());
            }
        }
    }
    best
}

/// Compares `mu_{k,j}` with quasi-energies `q` modulo `omega.Z^d`. Each
/// `mu` is matched to its nearest `q`, which must in turn have no closer
/// point among the shifted values `mu + omega.l`, `|l|_inf <= r`.
pub fn match_quasi_energies(spectrum: &Spectrum, q: &[f64], omega: &[f64], r: usize, tol: f64) -> OracleMatch {
    let mus: Vec<f64> = spectrum.mu.iter().flatten().cloned().collect();
    let mut shifted: Vec<f64> = crate::operator::lattice_modes(omega.len(), r)
        .iter()
        .flat_map(|l| {
            let w = dot(omega, l);
            mus.iter().map(move |m| m + w)
        })
        .collect();
    shifted.sort_by(f64::total_cmp);
    let mut max_distance: f64 = 0.0;
    let mut matched = 0;
    for &m in &mus {
        let (iq, dist) = nearest(q, m);
        max_distance = max_distance.max(dist);
        if iq == usize::MAX {
            continue;
        }
        let (_, back) = nearest(&shifted, q[iq]);
        if dist <= tol && back >= dist - 1e-13 {
            matched += 1;
        }
    }
    OracleMatch {
        max_distance,
        matched,
        total: mus.len(),
        passed: matched == mus.len(),
    }
}

/// Finite-difference Lipschitz quotients of weighted eigenvalues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenLipschitzReport {
    /// `(k, max_{omega pairs, j} <k>^kappa |mu(w1) - mu(w2)| / |w1 - w2|)`.
    pub per_cluster: Vec<(usize, f64)>,
    pub max: f64,
    pub gate: f64,
    pub passed: bool,
}

pub fn eigen_lipschitz_check(samples: &[(Vec<f64>, Spectrum)], kappa: f64, gate: f64) -> Result<EigenLipschitzReport> {
    if samples.len() < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let labels = &samples[0].1.labels;
    let mut per: Vec<(usize, f64)> = labels.iter().map(|&k| (k, 0.0)).collect();
    for (a, (w1, s1)) in samples.iter().enumerate() {
        for (w2, s2) in &samples[a + 1..] {
            if s1.labels != s2.labels {
                return Err(Error::ModelMismatch);
            }
            let dw = w1.iter().zip(w2).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if dw == 0.0 {
                continue;
            }
            for (p, (m1, m2)) in s1.mu.iter().zip(&s2.mu).enumerate() {
                let k = labels[p] as f64;
                let wk = (1.0 + k * k).sqrt().powf(kappa);
                for (x, y) in m1.iter().zip(m2) {
                    per[p].1 = per[p].1.max(wk * (x - y).abs() / dw);
                }
            }
        }
    }
    let max = per.iter().map(|x| x.1).fold(0.0, f64::max);
    Ok(EigenLipschitzReport {
        per_cluster: per,
        max,
        gate,
        passed: max <= gate,
    })
}
