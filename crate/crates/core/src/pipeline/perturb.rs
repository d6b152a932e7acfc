use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frequency::half_space_modes;
use crate::norms::beta_decay;
use crate::operator::{l2_sq, spectral_norm, Fbo, C64};
use crate::spectral::SpectralModel;

/// Random Hermitian perturbation of prescribed order and decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationSpec {
    pub seed: u64,
    /// Decay `<k - k'>^{-sigma_k}` across clusters; infinite keeps only
    /// diagonal blocks.
    pub sigma_k: f64,
    /// Decay `<l>^{-sigma_l}` in time frequency; infinite keeps `l = 0`.
    pub sigma_l: f64,
    /// Fourier support `|l|_inf <= n_w`.
    pub n_w: usize,
    /// Order: block `(k,k')` scales like `(lambda_k^delta + lambda_k'^delta) / 2`.
    pub delta: f64,
    /// When set, rescale so that `|W|_{rho, s}` equals `magnitude`.
    pub normalize: Option<NormTarget>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormTarget {
    pub rho: f64,
    pub s: f64,
    pub magnitude: f64,
}

impl Default for PerturbationSpec {
    fn default() -> Self {
        PerturbationSpec {
            seed: 1,
            sigma_k: 4.0,
            sigma_l: 2.0,
            n_w: 1,
            delta: 0.0,
            normalize: None,
        }
    }
}

fn random_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<C64> {
    let m = DMatrix::from_fn(rows, cols, |_, _| C64::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0));
    let n = spectral_norm(&m);
    if n > 0.0 {
        m / C64::new(n, 0.0)
    } else {
        m
    }
}

/// Builds `W` with `|l|_inf <= min(n_w, n_max)`. Each block is a random
/// matrix of unit spectral norm times `<l>^{-sigma_l} <k-k'>^{-sigma_k}`
/// times the order profile; `W(-l) = W(l)^H`.
pub fn generate_perturbation(model: Arc<SpectralModel>, d: usize, n_max: usize, spec: &PerturbationSpec) -> Fbo {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let nw = spec.n_w.min(n_max);
    let mut modes = vec![vec![0i64; d]];
    if spec.sigma_l.is_finite() {
        modes.extend(half_space_modes(d, nw));
    }
    let nc = model.num_clusters();
    let mut w = Fbo::zeros(model.clone(), d, n_max);
    for l in &modes {
        let zero = l.iter().all(|&x| x == 0);
        let fl = (1.0 + l2_sq(l)).sqrt().powf(-spec.sigma_l);
        let fl = if zero { 1.0 } else { fl };
        for p in 0..nc {
            // l = 0 needs only the upper triangle, the rest follows by symmetry
            let q_start = if zero { p } else { 0 };
            for q in q_start..nc {
                let h = model.label_distance(p, q);
                if h > 0 && !spec.sigma_k.is_finite() {
                    continue;
                }
                let fk = (1.0 + (h * h) as f64).sqrt().powf(-spec.sigma_k);
                let fk = if h == 0 { 1.0 } else { fk };
                let order = 0.5 * (model.weight(p).powf(spec.delta) + model.weight(q).powf(spec.delta));
                let (rp, rq) = (model.range(p).len(), model.range(q).len());
                let mut b = random_block(&mut rng, rp, rq) * C64::new(fl * fk * order, 0.0);
                if zero && p == q {
                    b = (&b + b.adjoint()) * C64::new(0.5, 0.0);
                    let n = spectral_norm(&b);
                    if n > 0.0 {
                        b *= C64::new(fl * fk * order / n, 0.0);
                    }
                }
                w.set_block(l, p, q, &b);
                let neg: Vec<i64> = l.iter().map(|x| -x).collect();
                if !(zero && p == q) {
                    w.set_block(&neg, q, p, &b.adjoint());
                }
            }
        }
    }
    w.set_hermitian(true);
    if let Some(t) = spec.normalize {
        let norm = beta_decay(&w, t.rho, t.s);
        if norm > 0.0 {
            w = w.scale_real(t.magnitude / norm);
            w.set_hermitian(true);
        }
    }
    w
}
