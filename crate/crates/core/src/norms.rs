//! Decay norms of block operators and the inequalities they satisfy.
//!
//! The weight is `<l, h> = sqrt(1 + |l|_2^2 + h^2)` with `h = |k - k'|`, and
//! block norms are spectral norms. `D = diag(max(lambda_k, 1/2))`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::operator::{l2_sq, linf, spectral_norm, Fbo, Mode, StateVector, C64};

/// Which quantity a [`NormReport`] carries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    SDecay,
    BetaDecay { beta: f64 },
    Lipschitz { gamma: f64 },
    HSr { r: f64 },
    EllP,
    OpNorm { s_prime: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    #[serde(flatten)]
    pub kind: NormKind,
    pub s: f64,
    pub value: f64,
    /// Cluster truncation the value was computed at.
    pub k_max: usize,
}

impl NormReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("plain data serialises")
    }
}

/// Spectral norms of every nonzero block, keyed by `(l, p, q)`.
#[derive(Debug, Clone)]
pub struct BlockNorms {
    pub entries: Vec<(Mode, usize, usize, f64)>,
}

impl BlockNorms {
    pub fn of(a: &Fbo) -> Self {
        let model = a.model();
        let nc = model.num_clusters();
        let mut entries = Vec::new();
        for (l, m) in a.iter() {
            for p in 0..nc {
                let rp = model.range(p);
                for q in 0..nc {
                    let rq = model.range(q);
                    let v = m.view((rp.start, rq.start), (rp.len(), rq.len()));
                    if v.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                        continue;
                    }
                    let n = spectral_norm(&v.into_owned());
                    entries.push((l.clone(), p, q, n));
                }
            }
        }
        BlockNorms { entries }
    }

    /// `sum_{l,h} <l,h>^{2s} sup_{|k-k'|=h} (wl * wr * ||A_kk'(l)||)^2`.
    fn weighted_decay<F: Fn(usize, usize) -> f64>(&self, a: &Fbo, s: f64, w: F) -> f64 {
        let model = a.model();
        let mut sup: std::collections::BTreeMap<(&Mode, usize), f64> = Default::default();
        for (l, p, q, n) in &self.entries {
            let h = model.label_distance(*p, *q);
            let e = sup.entry((l, h)).or_insert(0.0);
            *e = e.max(n * w(*p, *q));
        }
        sup.iter()
            .map(|((l, h), v)| (1.0 + l2_sq(l) + (*h * *h) as f64).powf(s) * v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// `s`-decay norm.
pub fn s_decay(a: &Fbo, s: f64) -> f64 {
    BlockNorms::of(a).weighted_decay(a, s, |_, _| 1.0)
}

/// `|D^beta A|_s + |A D^beta|_s`.
pub fn beta_decay(a: &Fbo, beta: f64, s: f64) -> f64 {
    let bn = BlockNorms::of(a);
    let model = a.model();
    let left = bn.weighted_decay(a, s, |p, _| model.weight(p).powf(beta));
    let right = bn.weighted_decay(a, s, |_, q| model.weight(q).powf(beta));
    left + right
}

pub fn s_decay_report(a: &Fbo, s: f64) -> NormReport {
    NormReport {
        kind: NormKind::SDecay,
        s,
        value: s_decay(a, s),
        k_max: a.model().k_max(),
    }
}

pub fn beta_decay_report(a: &Fbo, beta: f64, s: f64) -> NormReport {
    NormReport {
        kind: NormKind::BetaDecay { beta },
        s,
        value: beta_decay(a, beta, s),
        k_max: a.model().k_max(),
    }
}

/// Sup-plus-Lipschitz norm over frequency samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub sup: f64,
    pub lip: f64,
    pub value: f64,
    /// Set when fewer than two samples were given.
    pub degenerate: bool,
}

/// `sup_omega |A(omega)| + gamma sup |A(w1) - A(w2)| / |w1 - w2|`, with
/// `|.|` the `s`-decay norm or, given `beta`, the `(beta, s)` norm.
pub fn lipschitz_decay(samples: &[(Vec<f64>, Fbo)], gamma: f64, s: f64, beta: Option<f64>) -> LipschitzReport {
    let norm = |a: &Fbo| match beta {
        Some(b) => beta_decay(a, b, s),
        None => s_decay(a, s),
    };
    let sup = samples.iter().map(|(_, a)| norm(a)).fold(0.0, f64::max);
    if samples.len() < 2 {
        return LipschitzReport {
            sup,
            lip: 0.0,
            value: sup,
            degenerate: true,
        };
    }
    let mut lip = 0.0f64;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let (w1, a1) = &samples[i];
            let (w2, a2) = &samples[j];
            let dw = w1
                .iter()
                .zip(w2)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            if dw == 0.0 {
                continue;
            }
            let diff = a1.sub(a2).expect("samples share one space");
            lip = lip.max(norm(&diff) / dw);
        }
    }
    LipschitzReport {
        sup,
        lip,
        value: sup + gamma * lip,
        degenerate: false,
    }
}

/// `Pi_N`: keeps blocks with `|l|_inf <= N` and `|k - k'| <= N`.
pub fn cutoff(a: &Fbo, n: f64) -> (Fbo, Fbo) {
    let model = a.model().clone();
    let head = a.filter_blocks(|l, p, q| linf(l) as f64 <= n && model.label_distance(p, q) as f64 <= n);
    let tail = a.filter_blocks(|l, p, q| !(linf(l) as f64 <= n && model.label_distance(p, q) as f64 <= n));
    (head, tail)
}

/// Ratio of a left-hand side to a bound; `constant` is the smallest `C`
/// with `lhs <= C * rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub lhs: f64,
    pub rhs: f64,
    pub constant: f64,
}

impl BoundReport {
    pub fn new(lhs: f64, rhs: f64) -> Self {
        let constant = if lhs == 0.0 {
            0.0
        } else if rhs == 0.0 {
            f64::INFINITY
        } else {
            lhs / rhs
        };
        BoundReport { lhs, rhs, constant }
    }
}

/// `|AB|_s` against `|A|_s |B|_s0 + |A|_s0 |B|_s`.
pub fn tame_check(a: &Fbo, b: &Fbo, s: f64, s0: f64) -> BoundReport {
    let ab = a
        .mul(b, a.support_radius() + b.support_radius())
        .expect("operands share one space");
    let rhs = s_decay(a, s) * s_decay(b, s0) + s_decay(a, s0) * s_decay(b, s);
    BoundReport::new(s_decay(&ab, s), rhs)
}

/// `|(Id - Pi_N) A|_s` against `N^{-beta} |A|_{s+beta}`.
pub fn cutoff_tail_check(a: &Fbo, n: f64, beta: f64, s: f64) -> BoundReport {
    let (_, tail) = cutoff(a, n);
    BoundReport::new(s_decay(&tail, s), n.powf(-beta) * s_decay(a, s + beta))
}

/// `|D^{+-alpha} Pi_N A D^{-+alpha}|_s` against `N^alpha |A|_s`, worst sign.
pub fn weight_conjugation_check(a: &Fbo, alpha: f64, n: f64, s: f64) -> BoundReport {
    let (head, _) = cutoff(a, n);
    let model = a.model();
    let bn = BlockNorms::of(&head);
    let plus = bn.weighted_decay(&head, s, |p, q| (model.weight(p) / model.weight(q)).powf(alpha));
    let minus = bn.weighted_decay(&head, s, |p, q| (model.weight(q) / model.weight(p)).powf(alpha));
    BoundReport::new(plus.max(minus), n.powf(alpha) * s_decay(a, s))
}

/// `||A z||_{l_s}` against `|A|_s ||z||_{l_s0} + |A|_s0 ||z||_{l_s}`.
pub fn action_check(a: &Fbo, z: &StateVector, s: f64, s0: f64) -> BoundReport {
    let big = StateVector::zeros(z.model().clone(), z.d(), z.n_max() + a.support_radius());
    let mut zz = big;
    for (l, v) in z.iter() {
        zz.insert_coeff(l.clone(), v.clone());
    }
    let az = a.apply(&zz).expect("operands share one space");
    let rhs = s_decay(a, s) * z.ell_p_norm(s0) + s_decay(a, s0) * z.ell_p_norm(s);
    BoundReport::new(az.ell_p_norm(s), rhs)
}

/// `||D^beta A z||_{l_s}` against `|A|_{beta,s} ||z||_{l_s0} + |A|_{beta,s0} ||z||_{l_s}`.
pub fn weighted_action_check(a: &Fbo, z: &StateVector, beta: f64, s: f64, s0: f64) -> BoundReport {
    let dbeta = Fbo::weight_power(a.model().clone(), a.d(), 0, beta);
    let da = dbeta.mul(a, a.n_max()).expect("operands share one space");
    let r = action_check(&da, z, s, s0);
    let rhs = beta_decay(a, beta, s) * z.ell_p_norm(s0) + beta_decay(a, beta, s0) * z.ell_p_norm(s);
    BoundReport::new(r.lhs, rhs)
}

/// Operator norm of `A(phi)` on `h^s`, i.e. `|| <k>^s A(phi) <k>^{-s} ||_2`.
pub fn op_norm_at(a: &Fbo, phi: &[f64], s: f64) -> f64 {
    let model = a.model();
    let w: Vec<f64> = model
        .cluster_of_index()
        .into_iter()
        .map(|p| model.bracket(p).powf(s))
        .collect();
    let m = a.eval(phi);
    let wm = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * C64::new(w[i] / w[j], 0.0));
    spectral_norm(&wm)
}

/// `sup_phi ||A(phi)||_{L(h^s)}` over `phis` against `|A|_{s+s0}`.
pub fn op_norm_bound_check(a: &Fbo, s: f64, s0: f64, phis: &[Vec<f64>]) -> BoundReport {
    let lhs = phis.iter().map(|p| op_norm_at(a, p, s)).fold(0.0, f64::max);
    BoundReport::new(lhs, s_decay(a, s + s0))
}

/// Norm of a spatial vector in `H^s`: `sum_k <k>^{2s} |z_k|^2`.
pub fn hs_norm(model: &crate::spectral::SpectralModel, v: &DVector<C64>, s: f64) -> f64 {
    let mut acc = 0.0;
    for p in 0..model.num_clusters() {
        acc += model.bracket(p).powf(2.0 * s) * v.rows_range(model.range(p)).norm_squared();
    }
    acc.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::modes_in_box;
    use crate::operator::testutil::*;
    use crate::spectral::SpectralModel;
    use std::sync::Arc;

    fn circle(k: usize) -> Arc<SpectralModel> {
        Arc::new(SpectralModel::circle(k).unwrap())
    }

    #[test]
    fn identity_has_unit_norm() {
        let id = Fbo::identity(circle(5), 2, 2);
        for s in [0.0, 1.0, 3.5] {
            assert!((s_decay(&id, s) - 1.0).abs() < 1e-14);
        }
        assert!((beta_decay(&id, 0.0, 2.0) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn single_block() {
        let m = Arc::new(SpectralModel::sphere(3).unwrap());
        let mut a = Fbo::zeros(m.clone(), 2, 2);
        let mut b = DMatrix::zeros(7, 3);
        b[(2, 1)] = C64::new(0.0, 1.0);
        a.set_block(&[1, -2], 3, 1, &b);
        let want = (1.0f64 + 5.0 + 4.0).powf(1.5);
        assert!((s_decay(&a, 3.0) - want).abs() < 1e-12 * want);
    }

    // independent double loop over (l, k, k')
    fn brute(a: &Fbo, s: f64) -> f64 {
        let m = a.model();
        let nc = m.num_clusters();
        let mut total = 0.0;
        for l in modes_in_box(a.d(), a.n_max()) {
            for h in 0..=m.k_max() {
                let mut best = 0.0f64;
                for p in 0..nc {
                    for q in 0..nc {
                        if m.cluster(p).k.abs_diff(m.cluster(q).k) == h {
                            let b = a.block(&l, p, q);
                            let sv = b.singular_values();
                            best = best.max(sv.iter().cloned().fold(0.0, f64::max));
                        }
                    }
                }
                let br: f64 = 1.0 + l.iter().map(|x| (x * x) as f64).sum::<f64>() + (h * h) as f64;
                total += br.powf(s) * best * best;
            }
        }
        total.sqrt()
    }

    #[test]
    fn matches_brute_force() {
        let m = Arc::new(SpectralModel::sphere(3).unwrap());
        let mut r = rng(30);
        let a = random_fbo(&m, 1, 2, &mut r);
        let x = s_decay(&a, 2.0);
        assert!((x - brute(&a, 2.0)).abs() < 1e-12 * x);
    }

    #[test]
    fn block_diagonal_weighted() {
        let m = circle(4);
        let id = Fbo::identity(m.clone(), 1, 0);
        // only h = 0, l = 0: sup of weights is lambda_4 = 4 on each side
        assert!((beta_decay(&id, 1.0, 1.0) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn norm_axioms_and_monotonicity() {
        let m = circle(4);
        let mut r = rng(31);
        for _ in 0..10 {
            let a = random_fbo(&m, 2, 1, &mut r);
            let b = random_fbo(&m, 2, 1, &mut r);
            let s = 1.5;
            let sum = s_decay(&a.add(&b).unwrap(), s);
            assert!(sum <= s_decay(&a, s) + s_decay(&b, s) + 1e-10);
            let scaled = s_decay(&a.scale(C64::new(-2.0, 1.0)), s);
            assert!((scaled - 5f64.sqrt() * s_decay(&a, s)).abs() < 1e-10 * scaled);
            assert!(s_decay(&a, 1.0) <= s_decay(&a, 2.0));
        }
    }

    #[test]
    fn lipschitz_cases() {
        let m = circle(2);
        let a = Fbo::identity(m.clone(), 1, 0);
        let samples = vec![(vec![0.7], a.clone()), (vec![1.2], a.clone())];
        let r = lipschitz_decay(&samples, 0.1, 1.0, Some(0.0));
        assert_eq!(r.lip, 0.0);
        assert!((r.value - 2.0).abs() < 1e-14);

        let s2 = vec![
            (vec![0.6, 1.0], a.scale_real(0.6)),
            (vec![1.1, 1.0], a.scale_real(1.1)),
            (vec![0.9, 1.0], a.scale_real(0.9)),
        ];
        let r = lipschitz_decay(&s2, 0.5, 1.0, None);
        assert!((r.lip - 1.0).abs() < 1e-12);
        assert!((r.value - (1.1 + 0.5)).abs() < 1e-12);
        let mut perm = s2.clone();
        perm.reverse();
        assert_eq!(lipschitz_decay(&perm, 0.5, 1.0, None), r);

        let one = lipschitz_decay(&samples[..1], 0.1, 1.0, None);
        assert!(one.degenerate);
        assert_eq!(one.lip, 0.0);
    }

    #[test]
    fn cutoff_properties() {
        let m = circle(4);
        let mut r = rng(32);
        let a = random_fbo(&m, 1, 2, &mut r);
        let (head, tail) = cutoff(&a, 4.0);
        assert!(tail.is_zero());
        assert_eq!(head.sub(&a).unwrap().max_abs(), 0.0);

        let (h0, t0) = cutoff(&a, 0.0);
        let want = a.mean().block_diagonal_part();
        assert_eq!(h0.sub(&want).unwrap().max_abs(), 0.0);
        assert_eq!(h0.add(&t0).unwrap().sub(&a).unwrap().max_abs(), 0.0);

        let (h1, _) = cutoff(&a, 1.0);
        let (h2, t2) = cutoff(&h1, 1.0);
        assert_eq!(h2.sub(&h1).unwrap().max_abs(), 0.0);
        assert!(t2.is_zero());
        assert!(s_decay(&h1, 2.0) <= s_decay(&a, 2.0));
    }

    #[test]
    fn tame_trivial_cases() {
        let m = circle(3);
        let id = Fbo::identity(m.clone(), 1, 0);
        let r = tame_check(&id, &id, 3.0, 1.6);
        assert!((r.lhs - 1.0).abs() < 1e-14);
        assert!((r.rhs - 2.0).abs() < 1e-14);
        assert!((r.constant - 0.5).abs() < 1e-14);
        let z = Fbo::zeros(m.clone(), 1, 0);
        assert_eq!(tame_check(&id, &z, 3.0, 1.6).lhs, 0.0);
    }

    #[test]
    fn op_norm_of_identity() {
        let id = Fbo::identity(circle(3), 1, 0);
        let r = op_norm_bound_check(&id, 2.0, 1.0, &[vec![0.0], vec![1.0]]);
        assert!((r.lhs - 1.0).abs() < 1e-14);
        assert!((r.constant - 1.0).abs() < 1e-14);
    }

    #[test]
    fn report_json_line() {
        let id = Fbo::identity(circle(2), 1, 0);
        let line = beta_decay_report(&id, 0.5, 1.0).to_json_line();
        assert!(line.contains("\"kind\":\"beta_decay\""));
        assert!(line.contains("\"beta\":0.5"));
        assert!(line.contains("\"k_max\":2"));
        let _: NormReport = serde_json::from_str(&line).unwrap();
    }
}
