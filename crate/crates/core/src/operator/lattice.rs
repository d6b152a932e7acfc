//! Dense realisations on the `(l, x)` lattice `|l|_inf <= r`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use super::{dot, linf, modes_in_box, Fbo, Mode, StateVector, C64};
use crate::spectral::SpectralModel;

pub fn lattice_modes(d: usize, r: usize) -> Vec<Mode> {
    modes_in_box(d, r)
}

/// Multiplication operator of `A(phi)` on the lattice: block
/// `(l, l')` is `A(l - l')`.
pub fn flatten_operator(a: &Fbo, r: usize) -> DMatrix<C64> {
    let modes = lattice_modes(a.d(), r);
    let dim = a.dim();
    let n = modes.len() * dim;
    let mut out = DMatrix::zeros(n, n);
    for (i, li) in modes.iter().enumerate() {
        for (j, lj) in modes.iter().enumerate() {
            let diff: Mode = li.iter().zip(lj).map(|(x, y)| x - y).collect();
            if linf(&diff) > a.n_max() {
                continue;
            }
            if let Some(m) = a.coeff(&diff) {
                out.view_mut((i * dim, j * dim), (dim, dim)).copy_from(m);
            }
        }
    }
    out
}

/// Hermitian matrix of `-i (omega.d_phi + i M) = diag(omega.l) + M`.
pub fn quasi_energy_matrix(m: &Fbo, omega: &[f64], r: usize) -> DMatrix<C64> {
    let mut out = flatten_operator(m, r);
    let dim = m.dim();
    for (i, l) in lattice_modes(m.d(), r).iter().enumerate() {
        let w = dot(omega, l);
        for x in 0..dim {
            out[(i * dim + x, i * dim + x)] += C64::new(w, 0.0);
        }
    }
    out
}

pub fn flatten_state(z: &StateVector, r: usize) -> DVector<C64> {
    let modes = lattice_modes(z.d(), r);
    let dim = z.model().total_dim();
    let mut out = DVector::zeros(modes.len() * dim);
    for (i, l) in modes.iter().enumerate() {
        if let Some(v) = z.coeff(l) {
            out.rows_mut(i * dim, dim).copy_from(v);
        }
    }
    out
}

pub fn unflatten_state(model: Arc<SpectralModel>, d: usize, r: usize, v: &DVector<C64>) -> StateVector {
    let dim = model.total_dim();
    let mut z = StateVector::zeros(model, d, r);
    for (i, l) in lattice_modes(d, r).into_iter().enumerate() {
        let seg = v.rows(i * dim, dim).into_owned();
        if seg.iter().any(|x| x.norm() > 0.0) {
            z.insert_coeff(l, seg);
        }
    }
    z
}
