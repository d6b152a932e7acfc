//! Frequency samples in `[1/2, 3/2]^d` and the non-resonance filters that
//! excise them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::operator::{dot, linf, modes_in_box, Mode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleScheme {
    /// Tensor grid; `count` must be a perfect `d`-th power.
    Grid,
    /// Halton sequence with a seeded random shift modulo 1.
    LowDiscrepancy,
    /// Independent uniform draws.
    MonteCarlo,
}

/// One filtering pass: which samples were still alive after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub alive: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OmegaSet {
    pub d: usize,
    pub samples: Vec<Vec<f64>>,
    /// Quadrature weights, summing to the box volume 1.
    pub weights: Vec<f64>,
    pub stages: Vec<Stage>,
}

const PRIMES: [u64; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut f = inv;
    let mut out = 0.0;
    while i > 0 {
        out += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    out
}

/// Samples `count` frequencies in `[1/2, 3/2]^d` with uniform weights.
pub fn sample_box(d: usize, count: usize, scheme: SampleScheme, seed: u64) -> Result<OmegaSet> {
    if count == 0 || d == 0 {
        return Err(Error::InvalidArgument("need d >= 1 and count >= 1".into()));
    }
    let samples: Vec<Vec<f64>> = match scheme {
        SampleScheme::Grid => {
            let m = (count as f64).powf(1.0 / d as f64).round() as usize;
            if m.pow(d as u32) != count {
                return Err(Error::InvalidArgument(format!(
                    "grid sampling needs a perfect power count, got {count} for d = {d}"
                )));
            }
            let axis: Vec<f64> = if m == 1 {
                vec![1.0]
            } else {
                (0..m).map(|i| 0.5 + i as f64 / (m - 1) as f64).collect()
            };
            (0..count)
                .map(|mut i| {
                    let mut w = vec![0.0; d];
                    for a in (0..d).rev() {
                        w[a] = axis[i % m];
                        i /= m;
                    }
                    w
                })
                .collect()
        }
        SampleScheme::LowDiscrepancy => {
            if d > PRIMES.len() {
                return Err(Error::InvalidArgument(format!("Halton sampling supports d <= {}", PRIMES.len())));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shift: Vec<f64> = (0..d).map(|_| rng.gen()).collect();
            (1..=count as u64)
                .map(|i| {
                    (0..d)
                        .map(|a| 0.5 + (radical_inverse(i, PRIMES[a]) + shift[a]).fract())
                        .collect()
                })
                .collect()
        }
        SampleScheme::MonteCarlo => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..count)
                .map(|_| (0..d).map(|_| 0.5 + rng.gen::<f64>()).collect())
                .collect()
        }
    };
    Ok(OmegaSet::from_samples(d, samples))
}

impl OmegaSet {
    /// Explicit samples with uniform weights.
    pub fn from_samples(d: usize, samples: Vec<Vec<f64>>) -> OmegaSet {
        let n = samples.len();
        OmegaSet {
            d,
            weights: vec![1.0 / n as f64; n],
            samples,
            stages: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_alive(&self, i: usize) -> bool {
        self.stages.last().map_or(true, |s| s.alive[i])
    }

    pub fn survivors(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_alive(i)).collect()
    }

    pub fn surviving_weight(&self) -> f64 {
        (0..self.len())
            .filter(|&i| self.is_alive(i))
            .map(|i| self.weights[i])
            .sum()
    }

    /// Appends a stage that kills the alive samples failing `keep`.
    pub fn with_stage<F>(&self, name: &str, keep: F) -> OmegaSet
    where
        F: Fn(usize, &[f64]) -> bool + Sync,
    {
        let alive: Vec<bool> = (0..self.len())
            .into_par_iter()
            .map(|i| self.is_alive(i) && keep(i, &self.samples[i]))
            .collect();
        let mut out = self.clone();
        out.stages.push(Stage {
            name: name.to_string(),
            alive,
        });
        out
    }

    /// CSV with one row per sample: the components of omega, then one 0/1
    /// column per stage.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let mut head: Vec<String> = (0..self.d).map(|a| format!("omega_{a}")).collect();
        head.push("weight".into());
        head.extend(self.stages.iter().map(|st| st.name.clone()));
        s.push_str(&head.join(","));
        s.push('\n');
        for (i, w) in self.samples.iter().enumerate() {
            let mut row: Vec<String> = w.iter().map(|x| format!("{x:.17e}")).collect();
            row.push(format!("{:.17e}", self.weights[i]));
            row.extend(self.stages.iter().map(|st| (st.alive[i] as u8).to_string()));
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Nonzero modes with `|l|_inf <= n` in the half-space whose first
/// nonzero component is positive.
pub fn half_space_modes(d: usize, n: usize) -> Vec<Mode> {
    modes_in_box(d, n)
        .into_iter()
        .filter(|l| l.iter().find(|&&x| x != 0).is_some_and(|&x| x > 0))
        .collect()
}

/// Smallest `|omega.l| |l|_inf^tau / 4` over `0 < |l|_inf <= l_max`; the
/// sample lies in the truncated diophantine set iff this is `>= gamma`.
pub fn diophantine_margin(omega: &[f64], tau: f64, modes: &[Mode]) -> f64 {
    modes
        .iter()
        .map(|l| dot(omega, l).abs() * (linf(l) as f64).powf(tau) / 4.0)
        .fold(f64::INFINITY, f64::min)
}

/// Keeps samples with `|omega.l| >= 4 gamma / |l|_inf^tau` for all
/// `0 < |l|_inf <= l_max`.
pub fn diophantine_filter(set: &OmegaSet, gamma: f64, tau: f64, l_max: usize) -> OmegaSet {
    let modes = half_space_modes(set.d, l_max);
    set.with_stage("diophantine", |_, w| {
        gamma <= 0.0 || diophantine_margin(w, tau, &modes) >= gamma
    })
}

/// `<k, k'> = sqrt(1 + k^2 + k'^2)`.
pub fn pair_bracket(k: usize, k2: usize) -> f64 {
    (1.0 + (k * k) as f64 + (k2 * k2) as f64).sqrt()
}

/// Block eigenvalues `mu_{k,j}` per cluster, with cluster labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub labels: Vec<usize>,
    pub mu: Vec<Vec<f64>>,
}

/// Eigenvalues for each frequency sample.
#[derive(Debug, Clone)]
pub enum MuTable {
    /// The same eigenvalues at every sample.
    Shared(Spectrum),
    PerSample(Vec<Option<Spectrum>>),
}

impl MuTable {
    fn get(&self, i: usize) -> Option<&Spectrum> {
        match self {
            MuTable::Shared(s) => Some(s),
            MuTable::PerSample(v) => v.get(i).and_then(|x| x.as_ref()),
        }
    }
}

/// Second-Melnikov divisors of one spectrum, sorted for window queries.
#[derive(Debug, Clone)]
pub struct DivisorIndex {
    /// `(mu_{k,j} - mu_{k',j'}, weight, p, j, q, j')`, sorted by difference,
    /// where `weight = <k,k'>^{2n+2}`.
    entries: Vec<(f64, f64, usize, usize, usize, usize)>,
    labels: Vec<usize>,
}

impl DivisorIndex {
    pub fn new(spec: &Spectrum, n_cut: usize, n: usize) -> Self {
        let mut entries = Vec::new();
        let c = spec.labels.len();
        for p in 0..c {
            for q in 0..c {
                let (k, k2) = (spec.labels[p], spec.labels[q]);
                if k.abs_diff(k2) > n_cut {
                    continue;
                }
                let w = pair_bracket(k, k2).powi(2 * n as i32 + 2);
                for (j, a) in spec.mu[p].iter().enumerate() {
                    for (j2, b) in spec.mu[q].iter().enumerate() {
                        entries.push((a - b, w, p, j, q, j2));
                    }
                }
            }
        }
        entries.sort_by(|x, y| x.0.total_cmp(&y.0));
        DivisorIndex {
            entries,
            labels: spec.labels.clone(),
        }
    }

    /// First violation of `|omega.l + diff| >= base / weight` among the
    /// indexed pairs, `base = 2 gamma / N^tau`. Pairs with `l = 0` and
    /// `p = q` are skipped.
    pub fn first_violation(&self, wl: f64, l_is_zero: bool, base: f64) -> Option<(f64, f64, usize, usize, usize, usize)> {
        let lo = -wl - base;
        let start = self.entries.partition_point(|e| e.0 < lo);
        for e in &self.entries[start..] {
            if e.0 > -wl + base {
                break;
            }
            if l_is_zero && e.2 == e.4 {
                continue;
            }
            let thr = base / e.1;
            let v = (wl + e.0).abs();
            if v < thr {
                return Some((v, thr, e.2, e.3, e.4, e.5));
            }
        }
        None
    }

    /// Every violation in the window, for diagnostics.
    pub fn violations(&self, wl: f64, l_is_zero: bool, base: f64) -> Vec<(f64, f64, usize, usize, usize, usize)> {
        let start = self.entries.partition_point(|e| e.0 < -wl - base);
        self.entries[start..]
            .iter()
            .take_while(|e| e.0 <= -wl + base)
            .filter(|e| !(l_is_zero && e.2 == e.4))
            .filter_map(|e| {
                let (v, thr) = ((wl + e.0).abs(), base / e.1);
                (v < thr).then_some((v, thr, e.2, e.3, e.4, e.5))
            })
            .collect()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Keeps samples satisfying the second Melnikov conditions
/// `|omega.l + mu_{k,j} - mu_{k',j'}| >= 2 gamma / (N^tau <k,k'>^{2n+2})`
/// for `|l|_inf <= N`, `|k - k'| <= N`, `(l,k,k') != (0,k,k)`.
pub fn melnikov_filter(
    set: &OmegaSet,
    mu: &MuTable,
    gamma: f64,
    tau: f64,
    n_cut: usize,
    n: usize,
) -> Result<OmegaSet> {
    for i in set.survivors() {
        if mu.get(i).is_none() {
            return Err(Error::IncompleteTable(i));
        }
    }
    let shared = match mu {
        MuTable::Shared(s) => Some(DivisorIndex::new(s, n_cut, n)),
        MuTable::PerSample(_) => None,
    };
    let name = format!("melnikov_N{n_cut}");
    Ok(set.with_stage(&name, |i, w| {
        if gamma <= 0.0 {
            return true;
        }
        let local;
        let index = match &shared {
            Some(x) => x,
            None => {
                local = DivisorIndex::new(mu.get(i).expect("checked above"), n_cut, n);
                &local
            }
        };
        melnikov_violation(w, index, gamma, tau, n_cut).is_none()
    }))
}

/// Half-space modes `|l|_inf <= n` (plus `l = 0`) with `|omega.l| <= bound`.
///
/// All coordinates but the last are enumerated; the last one is restricted
/// to the interval allowed by `bound`.
pub fn modes_near_resonance(omega: &[f64], n: usize, bound: f64) -> Vec<Mode> {
    let d = omega.len();
    let n_i = n as i64;
    let mut out = Vec::new();
    let head = if d > 1 { modes_in_box(d - 1, n) } else { vec![vec![]] };
    let wl = omega[d - 1];
    for h in head {
        let part: f64 = h.iter().zip(omega).map(|(&x, w)| x as f64 * w).sum();
        let (lo, hi) = if wl.abs() > 1e-300 {
            let a = (-bound - part) / wl;
            let b = (bound - part) / wl;
            let (a, b) = if a <= b { (a, b) } else { (b, a) };
            ((a.floor() as i64).max(-n_i), (b.ceil() as i64).min(n_i))
        } else {
            (-n_i, n_i)
        };
        let head_sign = h.iter().find(|&&x| x != 0).map(|x| x.signum()).unwrap_or(0);
        for last in lo..=hi {
            if head_sign < 0 || (head_sign == 0 && last < 0) {
                continue;
            }
            let mut l = h.clone();
            l.push(last);
            if (part + last as f64 * wl).abs() <= bound {
                out.push(l);
            }
        }
    }
    out
}

/// First violated second-Melnikov condition for `omega`, if any.
#[allow(clippy::type_complexity)]
pub fn melnikov_violation(
    omega: &[f64],
    index: &DivisorIndex,
    gamma: f64,
    tau: f64,
    n_cut: usize,
) -> Option<(Mode, (f64, f64, usize, usize, usize, usize))> {
    if gamma <= 0.0 || index.entries.is_empty() {
        return None;
    }
    let base = 2.0 * gamma / (n_cut as f64).powf(tau);
    let span = index.entries.iter().map(|e| e.0.abs()).fold(0.0, f64::max);
    for l in modes_near_resonance(omega, n_cut, span + base) {
        let zero = l.iter().all(|&x| x == 0);
        if let Some(v) = index.first_violation(dot(omega, &l), zero, base) {
            return Some((l, v));
        }
    }
    None
}

/// Excised weight with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasureEstimate {
    pub excised: f64,
    pub lo: f64,
    pub hi: f64,
    pub excised_count: usize,
    pub total: usize,
}

/// Weight of samples alive in `before` but not in `after`, as a fraction
/// of the box.
pub fn measure_estimate(before: &OmegaSet, after: &OmegaSet) -> MeasureEstimate {
    assert_eq!(before.len(), after.len());
    let mut excised = 0.0;
    let mut count = 0;
    for i in 0..before.len() {
        if before.is_alive(i) && !after.is_alive(i) {
            excised += after.weights[i];
            count += 1;
        }
    }
    let n = before.len() as f64;
    let p = count as f64 / n;
    let z = 1.959963984540054;
    let denom = 1.0 + z * z / n;
    let centre = (p + z * z / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / denom;
    let vol: f64 = before.weights.iter().sum();
    MeasureEstimate {
        excised,
        lo: (centre - half).max(0.0) * vol,
        hi: (centre + half).min(1.0) * vol,
        excised_count: count,
        total: before.len(),
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_slope(&lx, &ly)
}

pub fn linear_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}
