use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DVector;

use super::{l2_sq, linf, Fbo, Mode, C64};
use crate::error::{Error, Result};
use crate::spectral::SpectralModel;

/// Coefficients `z_{[k]}(l)` of a function of `(phi, x)`.
#[derive(Debug, Clone)]
pub struct StateVector {
    model: Arc<SpectralModel>,
    d: usize,
    n_max: usize,
    coeffs: BTreeMap<Mode, DVector<C64>>,
}

impl StateVector {
    pub fn zeros(model: Arc<SpectralModel>, d: usize, n_max: usize) -> Self {
        StateVector {
            model,
            d,
            n_max,
            coeffs: BTreeMap::new(),
        }
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

    pub fn coeff(&self, l: &[i64]) -> Option<&DVector<C64>> {
        self.coeffs.get(l)
    }

    pub fn insert_coeff(&mut self, l: Mode, v: DVector<C64>) {
        assert_eq!(l.len(), self.d);
        assert!(linf(&l) <= self.n_max);
        assert_eq!(v.len(), self.model.total_dim());
        self.coeffs.insert(l, v);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Mode, &DVector<C64>)> {
        self.coeffs.iter()
    }

    /// `sum_l <l>^{2r} sum_k <k>^{2s} |z_k(l)|^2`, square-rooted.
    pub fn h_sr_norm(&self, s: f64, r: f64) -> f64 {
        let mut acc = 0.0;
        for (l, v) in &self.coeffs {
            let wl = (1.0 + l2_sq(l)).powf(r);
            for p in 0..self.model.num_clusters() {
                let wk = self.model.bracket(p).powf(2.0 * s);
                let seg = v.rows_range(self.model.range(p));
                acc += wl * wk * seg.norm_squared();
            }
        }
        acc.sqrt()
    }

    /// `sum_{l,k} <l,k>^{2p} |z_k(l)|^2`, square-rooted.
    pub fn ell_p_norm(&self, p: f64) -> f64 {
        let mut acc = 0.0;
        for (l, v) in &self.coeffs {
            let ll = l2_sq(l);
            for c in 0..self.model.num_clusters() {
                let k = self.model.cluster(c).k as f64;
                let seg = v.rows_range(self.model.range(c));
                acc += (1.0 + ll + k * k).powf(p) * seg.norm_squared();
            }
        }
        acc.sqrt()
    }
}

impl Fbo {
    /// `(A z)(l) = sum_p A(l - p) z(p)`, truncated to `z`'s `n_max`.
    pub fn apply(&self, z: &StateVector) -> Result<StateVector> {
        if self.d() != z.d
            || !(Arc::ptr_eq(self.model(), &z.model) || **self.model() == *z.model)
        {
            return Err(Error::ModelMismatch);
        }
        let mut out = StateVector::zeros(z.model.clone(), z.d, z.n_max);
        let dim = self.dim();
        for (la, a) in self.iter() {
            for (lz, v) in &z.coeffs {
                let l: Mode = la.iter().zip(lz).map(|(x, y)| x + y).collect();
                if linf(&l) > z.n_max {
                    continue;
                }
                let acc = out
                    .coeffs
                    .entry(l)
                    .or_insert_with(|| DVector::zeros(dim));
                acc.gemv(C64::new(1.0, 0.0), a, v, C64::new(1.0, 0.0));
            }
        }
        Ok(out)
    }
}
