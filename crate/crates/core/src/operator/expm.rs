use nalgebra::DMatrix;

use super::C64;

const THETA_13: f64 = 5.371920351148152;

const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<C64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Matrix exponential by [13/13] Padé approximation with scaling and
/// squaring (Higham 2005).
pub fn expm(a: &DMatrix<C64>) -> DMatrix<C64> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    if n == 0 {
        return a.clone();
    }
    let norm = one_norm(a);
    let s = if norm > THETA_13 {
        (norm / THETA_13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let a = a * C64::new(0.5f64.powi(s), 0.0);
    let b = PADE_13.map(|x| C64::new(x, 0.0));
    let id = DMatrix::<C64>::identity(n, n);
    let a2 = &a * &a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &a * (u_inner + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1]);
    let v_inner = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_inner + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];

    let p = &v + &u;
    let q = &v - &u;
    let mut r = q.lu().solve(&p).expect("Padé denominator is nonsingular");
    for _ in 0..s {
        r = &r * &r;
    }
    r
}

/// Newton–Schulz polish towards the nearest unitary:
/// `U <- U (3 I - U^H U) / 2`.
pub fn newton_schulz(u: &DMatrix<C64>, sweeps: usize) -> DMatrix<C64> {
    let n = u.nrows();
    let id3 = DMatrix::<C64>::identity(n, n) * C64::new(3.0, 0.0);
    let mut u = u.clone();
    for _ in 0..sweeps {
        let g = u.adjoint() * &u;
        u = &u * (&id3 - g) * C64::new(0.5, 0.0);
    }
    u
}

/// `exp(i H)` for Hermitian `H`, Padé route with unitarity cleanup.
pub fn exp_i_hermitian(h: &DMatrix<C64>) -> DMatrix<C64> {
    let u = expm(&(h * C64::new(0.0, 1.0)));
    newton_schulz(&u, 2)
}

/// `exp(i H)` for Hermitian `H` through its eigendecomposition.
pub fn exp_i_hermitian_eig(h: &DMatrix<C64>) -> DMatrix<C64> {
    let n = h.nrows();
    if n == 0 {
        return h.clone();
    }
    let sym = (h + h.adjoint()) * C64::new(0.5, 0.0);
    let eig = sym.symmetric_eigen();
    let v = &eig.eigenvectors;
    let phases = DMatrix::from_diagonal(&eig.eigenvalues.map(|x| C64::from_polar(1.0, x)));
    v * phases * v.adjoint()
}
