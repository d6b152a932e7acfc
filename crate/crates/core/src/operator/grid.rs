use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::DMatrix;

use super::{linf, Fbo, Mode, C64};
use crate::spectral::SpectralModel;

/// Samples of an operator family on the uniform grid
/// `phi_j = 2 pi j / g`, `j in {0..g-1}^d`.
///
/// Storage is one contiguous buffer: grid point after grid point, each a
/// column-major `dim x dim` matrix.
#[derive(Debug, Clone)]
pub struct PhiGrid {
    d: usize,
    g: usize,
    dim: usize,
    data: Vec<C64>,
}

impl PhiGrid {
    pub fn from_fbo(a: &Fbo, g: usize) -> PhiGrid {
        assert!(g >= 1);
        let dim = a.dim();
        let d = a.d();
        let bs = dim * dim;
        let mut grid = PhiGrid {
            d,
            g,
            dim,
            data: vec![C64::new(0.0, 0.0); g.pow(d as u32) * bs],
        };
        // coefficients sharing a residue mod g give the same samples
        for (l, m) in a.iter() {
            let idx = grid.index_of(l);
            let dst = &mut grid.data[idx * bs..(idx + 1) * bs];
            for (x, y) in dst.iter_mut().zip(m.as_slice()) {
                *x += y;
            }
        }
        grid.transform(1.0);
        grid
    }

    fn index_of(&self, l: &[i64]) -> usize {
        let g = self.g as i64;
        l.iter()
            .fold(0usize, |acc, &x| acc * self.g + x.rem_euclid(g) as usize)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn size(&self) -> usize {
        self.g
    }

    pub fn num_points(&self) -> usize {
        self.g.pow(self.d as u32)
    }

    /// Angle vector of grid point `idx`.
    pub fn phi(&self, idx: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.d];
        let mut rest = idx;
        for a in (0..self.d).rev() {
            out[a] = 2.0 * PI * (rest % self.g) as f64 / self.g as f64;
            rest /= self.g;
        }
        out
    }

    pub fn point(&self, idx: usize) -> DMatrix<C64> {
        let bs = self.dim * self.dim;
        DMatrix::from_column_slice(self.dim, self.dim, &self.data[idx * bs..(idx + 1) * bs])
    }

    pub fn set_point(&mut self, idx: usize, m: &DMatrix<C64>) {
        let bs = self.dim * self.dim;
        self.data[idx * bs..(idx + 1) * bs].copy_from_slice(m.as_slice());
    }

    pub fn points(&self) -> impl Iterator<Item = DMatrix<C64>> + '_ {
        (0..self.num_points()).map(|i| self.point(i))
    }

    pub fn map_points<F: Fn(&DMatrix<C64>) -> DMatrix<C64>>(&mut self, f: F) {
        for i in 0..self.num_points() {
            let m = f(&self.point(i));
            self.set_point(i, &m);
        }
    }

    pub fn mul_assign_pointwise(&mut self, other: &PhiGrid) {
        assert_eq!((self.d, self.g, self.dim), (other.d, other.g, other.dim));
        for i in 0..self.num_points() {
            let m = self.point(i) * other.point(i);
            self.set_point(i, &m);
        }
    }

    pub fn commutator(&self, other: &PhiGrid) -> PhiGrid {
        assert_eq!((self.d, self.g, self.dim), (other.d, other.g, other.dim));
        let mut out = self.clone();
        for i in 0..self.num_points() {
            let (a, b) = (self.point(i), other.point(i));
            out.set_point(i, &(&a * &b - &b * &a));
        }
        out
    }

    /// Fourier coefficients with `|l|_inf <= min(n_out, (g-1)/2)`.
    pub fn to_fbo(&self, model: Arc<SpectralModel>, n_out: usize) -> Fbo {
        let mut work = self.clone();
        work.transform(-1.0);
        let scale = 1.0 / work.num_points() as f64;
        let bs = self.dim * self.dim;
        let n_read = n_out.min((self.g - 1) / 2);
        let mut out = Fbo::zeros(model, self.d, n_out);
        for l in super::modes_in_box(self.d, n_read) {
            debug_assert!(linf(&l) <= n_read);
            let idx = work.index_of(&l);
            let slice = &work.data[idx * bs..(idx + 1) * bs];
            if slice.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
                continue;
            }
            let m = DMatrix::from_column_slice(self.dim, self.dim, slice) * C64::new(scale, 0.0);
            out.insert_coeff(l as Mode, m);
        }
        out.set_hermitian(false);
        out
    }

    /// In-place separable DFT, `out[j] = sum_m in[m] e^{sign 2 pi i m j / g}`.
    fn transform(&mut self, sign: f64) {
        let g = self.g;
        if g == 1 {
            return;
        }
        let tw: Vec<C64> = (0..g)
            .map(|t| C64::from_polar(1.0, sign * 2.0 * PI * t as f64 / g as f64))
            .collect();
        let bs = self.dim * self.dim;
        let mut line = vec![C64::new(0.0, 0.0); g];
        let mut res = vec![C64::new(0.0, 0.0); g];
        for axis in 0..self.d {
            let inner = g.pow((self.d - 1 - axis) as u32) * bs;
            let outer = g.pow(axis as u32);
            for o in 0..outer {
                let base = o * g * inner;
                for r in 0..inner {
                    let mut any = false;
                    for (m, v) in line.iter_mut().enumerate() {
                        *v = self.data[base + r + m * inner];
                        any |= v.re != 0.0 || v.im != 0.0;
                    }
                    if !any {
                        continue;
                    }
                    for (j, out) in res.iter_mut().enumerate() {
                        let mut acc = C64::new(0.0, 0.0);
                        for (m, v) in line.iter().enumerate() {
                            acc += v * tw[(m * j) % g];
                        }
                        *out = acc;
                    }
                    for (j, v) in res.iter().enumerate() {
                        self.data[base + r + j * inner] = *v;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operator::testutil::*;

    #[test]
    fn samples_match_direct_evaluation() {
        let m = Arc::new(SpectralModel::circle(2).unwrap());
        let mut r = rng(11);
        let a = random_fbo(&m, 2, 2, &mut r);
        let g = PhiGrid::from_fbo(&a, 6);
        for idx in [0, 7, 20, 35] {
            let want = a.eval(&g.phi(idx));
            assert!((g.point(idx) - want).camax() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_recovers_coefficients() {
        let m = Arc::new(SpectralModel::circle(2).unwrap());
        let mut r = rng(12);
        let a = random_fbo(&m, 2, 2, &mut r);
        let back = PhiGrid::from_fbo(&a, 5).to_fbo(m.clone(), 2);
        assert!(back.sub(&a).unwrap().max_abs() < 1e-13);
    }
}
