//! Acceptance suite: one line per criterion, nonzero exit on any failure.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use sha2::{Digest, Sha256};

use zkam::frequency::{
    loglog_slope, measure_estimate, melnikov_filter, sample_box, MuTable, SampleScheme,
};
use zkam::kam::{block_eigen, iterate, KamConfig, KamState};
use zkam::evolution::{transform_bound_check, transform_scaling};
use zkam::operator::{Fbo, Tolerances};
use zkam::pipeline::{
    averaging_suite, decode_fbo, encode_fbo, generate_perturbation, identity_suite, norm_suite, oracle_suite,
    run_pipeline, ModelSpec, PerturbationSpec, PipelineConfig, PipelineOutcome, PropertyResult, Stage,
    FROZEN_NORM_CONSTANTS,
};
use zkam::regularizer::{regularize, RegularizerConfig};
use zkam::spectral::SpectralModel;

/// sha-256 of the container of [`golden_operator`], computed by a separate
/// encoder written from the byte layout alone.
const GOLDEN_HASH: &str = "004c4be0333e2ae576ff615975e65d37fd02638ff371e7cd1b56fa4e83a02395";

/// Sphere `k_max = 2`, `d = 2`, `n_max = 1`, dyadic entries so every
/// value is exact; block `(l, k, k') = ((0, 1), 2, 0)` is left empty.
fn golden_operator() -> Fbo {
    let model = Arc::new(SpectralModel::sphere(2).unwrap());
    let mut a = Fbo::zeros(model.clone(), 2, 1);
    for l in zkam::operator::modes_in_box(2, 1) {
        let m = nalgebra::DMatrix::from_fn(9, 9, |r, c| {
            zkam::operator::C64::new((r + 1) as f64 * 0.5 + l[0] as f64 * 0.25, c as f64 * 0.125 - l[1] as f64)
        });
        a.insert_coeff(l, m);
    }
    a.set_block(&[0, 1], 2, 0, &nalgebra::DMatrix::zeros(5, 1));
    a
}

struct Line {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn suites(results: &[PropertyResult]) -> (bool, String) {
    let ok = results.iter().all(|r| r.passed());
    let detail = results
        .iter()
        .map(|r| format!("{} worst {:.2e}/{:.2e} over {}", r.property, r.worst, r.bound, r.samples))
        .collect::<Vec<_>>()
        .join("; ");
    (ok, detail)
}

fn criterion_1() -> (bool, String) {
    let clock = Instant::now();
    let r = identity_suite(50, 11, 1e-9).expect("identity suite runs");
    let secs = clock.elapsed().as_secs_f64();
    let (ok, d) = suites(&r);
    (ok && secs <= 60.0, format!("{d}; {secs:.1} s (limit 60 s)"))
}

fn criterion_2() -> (bool, String) {
    suites(&averaging_suite(20, 12, 1e-12, 1e-8).expect("averaging suite runs"))
}

fn criterion_3() -> (bool, String) {
    suites(&oracle_suite(12, 13, 1e-10).expect("oracle suite runs"))
}

fn criterion_4() -> (bool, String) {
    suites(&norm_suite(100, 14, &FROZEN_NORM_CONSTANTS).expect("norm suite runs"))
}

fn criterion_5() -> (bool, String) {
    let clock = Instant::now();
    let model = SpectralModel::circle(16).expect("circle model");
    let d = 2;
    let dz = Fbo::laplacian(Arc::new(model.clone()), d, 0);
    let (spectrum, _) = block_eigen(&dz, &Tolerances::default()).expect("block eigen");
    let table = MuTable::Shared(spectrum);
    let set = sample_box(d, 10_000, SampleScheme::MonteCarlo, 5).expect("samples");
    let tau = (d + 1) as f64;
    let excised = |gamma: f64, n: usize| {
        let after = melnikov_filter(&set, &table, gamma, tau, n, model.n()).expect("filter");
        measure_estimate(&set, &after).excised
    };
    let ns = [8.0, 16.0, 32.0, 64.0];
    let fn_: Vec<f64> = ns.iter().map(|&n| excised(0.05, n as usize)).collect();
    let slope_n = fit_nonzero(&ns, &fn_);
    let gammas = [0.0125, 0.025, 0.05, 0.1];
    let fg: Vec<f64> = gammas.iter().map(|&g| excised(g, 8)).collect();
    let slope_g = fit_nonzero(&gammas, &fg);
    let secs = clock.elapsed().as_secs_f64();
    let ok = (-1.3..=-0.7).contains(&slope_n) && (0.7..=1.3).contains(&slope_g) && secs <= 300.0;
    (
        ok,
        format!(
            "slope in N {slope_n:.3} (fractions {}), slope in gamma {slope_g:.3} (fractions {}); {secs:.1} s",
            fmt_list(&fn_),
            fmt_list(&fg)
        ),
    )
}

/// Log-log slope over the points with a nonzero estimate; NaN when fewer
/// than two remain.
fn fit_nonzero(x: &[f64], y: &[f64]) -> f64 {
    let (xs, ys): (Vec<f64>, Vec<f64>) = x.iter().zip(y).filter(|(_, &v)| v > 0.0).map(|(a, b)| (*a, *b)).unzip();
    if xs.len() < 2 {
        f64::NAN
    } else {
        loglog_slope(&xs, &ys)
    }
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2e}")).collect::<Vec<_>>().join(", ")
}

fn reference_run() -> (PipelineOutcome, f64) {
    let cfg = PipelineConfig::reference();
    let dir = tempfile::tempdir().expect("tempdir");
    let clock = Instant::now();
    let out = run_pipeline(&cfg, Some(dir.path()), Stage::Evolution).expect("reference run");
    (out, clock.elapsed().as_secs_f64())
}

fn checks<'a>(o: &'a PipelineOutcome, check: &str) -> Vec<&'a zkam::pipeline::CheckRecord> {
    o.records.iter().filter(|r| r.check == check).collect()
}

fn criterion_6(o: &PipelineOutcome) -> (bool, String) {
    let Some(batch) = &o.kam else {
        return (false, format!("no kam stage: {:?}", o.error));
    };
    let diophantine = batch
        .omega_set
        .stages
        .iter()
        .find(|s| s.name == "diophantine")
        .map(|s| s.alive.iter().filter(|&&a| a).count())
        .unwrap_or(0);
    let conv = batch.converged();
    let cfg = PipelineConfig::reference().kam_config(1);
    let mut steps_ok = true;
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for &i in &conv {
        let st = batch.states[i].as_ref().expect("state");
        steps_ok &= st.nu <= 6 && st.norm_low(&cfg) <= 1e-10;
        worst = st.history.iter().map(|h| h.ratio).fold(worst, f64::max);
        monotone &= st.history.windows(2).all(|w| w[1].ratio < w[0].ratio);
    }
    let frac = conv.len() as f64 / diophantine.max(1) as f64;
    let ok = frac >= 0.9 && steps_ok && worst <= 0.2 && monotone;
    (
        ok,
        format!(
            "{}/{} converged ({:.0}%), max steps {}, worst ratio {worst:.2e}, decreasing {monotone}",
            conv.len(),
            diophantine,
            100.0 * frac,
            conv.iter().map(|&i| batch.states[i].as_ref().unwrap().nu).max().unwrap_or(0)
        ),
    )
}

fn criterion_7(o: &PipelineOutcome) -> (bool, String) {
    let Some(batch) = &o.kam else {
        return (false, "no kam stage".into());
    };
    let recs = checks(o, "oracle_match");
    let n_conv = batch.converged().len();
    let ok = n_conv > 0 && recs.len() == n_conv && recs.iter().all(|r| r.passed == Some(true));
    let worst = recs.iter().filter_map(|r| r.value.as_f64()).fold(0.0, f64::max);
    (ok, format!("{} of {} samples matched, worst distance {worst:.2e} (limit 1e-7)", recs.iter().filter(|r| r.passed == Some(true)).count(), n_conv))
}

fn criterion_8(o: &PipelineOutcome) -> (bool, String) {
    let evo_secs = o.timing.iter().find(|(k, _)| k == "evolution").map(|x| x.1).unwrap_or(f64::NAN);
    let omegas = o.evolutions.len();
    let states: usize = o.evolutions.iter().map(|(_, r)| r.len()).sum();
    let t_max = o.evolutions.iter().flat_map(|(_, r)| r.iter()).map(|r| r.records.last().map_or(0.0, |x| x.t)).fold(f64::INFINITY, f64::min);
    let mut ok = omegas == 5 && states == 15 && t_max >= 1000.0 && evo_secs <= 600.0;
    let mut parts = vec![format!("{omegas} frequencies x {} states to t = {t_max}", states / omegas.max(1))];
    for name in ["sobolev_ratio", "l2_drift", "conjugacy_defect"] {
        let recs = checks(o, name);
        let pass = recs.len() == 15 && recs.iter().all(|r| r.passed == Some(true));
        ok &= pass;
        let worst = match name {
            "sobolev_ratio" => recs
                .iter()
                .filter_map(|r| r.value.as_array().map(|a| a.iter().filter_map(|x| x.as_f64()).map(|x| (x - 1.0).abs()).fold(0.0, f64::max)))
                .fold(0.0, f64::max),
            _ => recs.iter().filter_map(|r| r.value.as_f64()).fold(0.0, f64::max),
        };
        parts.push(format!("{name} worst {worst:.2e}"));
    }
    parts.push(format!("{evo_secs:.0} s (limit 600 s)"));
    (ok, parts.join(", "))
}

fn criterion_9() -> (bool, String) {
    let model = Arc::new(SpectralModel::circle(16).expect("circle"));
    let spec = PerturbationSpec {
        sigma_k: 8.0,
        ..Default::default()
    };
    let w = generate_perturbation(model, 2, 6, &spec);
    let tol = Tolerances::default();
    let phis: Vec<Vec<f64>> = (0..8)
        .flat_map(|i| (0..8).map(move |j| vec![i as f64 * std::f64::consts::PI / 4.0, j as f64 * std::f64::consts::PI / 4.0]))
        .collect();
    let epss: [f64; 3] = [1e-4, 3e-4, 1e-3];
    let mut sups = Vec::new();
    for &eps in &epss {
        let gamma: f64 = eps.sqrt();
        // a frequency on the edge of the admissible set: omega.(1,-1) = 4.5 gamma
        let a = 5f64.sqrt() / 2.0;
        let omega = vec![a, a - 4.5 * gamma];
        let cfg = KamConfig::new(2, 1, 0.0, gamma);
        let rcfg = RegularizerConfig {
            gamma,
            tau: cfg.tau,
            ..Default::default()
        };
        let reg = match regularize(&w.scale_real(eps), &omega, &rcfg, &tol) {
            Ok(r) => r,
            Err(e) => return (false, format!("regularization failed at eps {eps}: {e}")),
        };
        let st = KamState::new(&omega, &reg.z, &reg.r, &reg.transform, &cfg).expect("kam state");
        let fin = match iterate(st, &cfg) {
            Ok(s) => s,
            Err(e) => return (false, format!("kam failed at eps {eps}: {e}")),
        };
        sups.push(transform_bound_check(&fin.composed, 0.0, 0.0, &phis).sup_minus_id);
    }
    let slope = transform_scaling(&epss, &sups);
    (
        (slope - 0.5).abs() <= 0.15,
        format!("slope {slope:.3} (target 0.5 +- 0.15), sup |Psi - Id| = {}", fmt_list(&sups)),
    )
}

fn small_config() -> PipelineConfig {
    let mut c = PipelineConfig::reference();
    c.model = ModelSpec::Circle { k_max: 8 };
    c.run.n_max = 4;
    c.omega.count = 6;
    c.evolution.samples = 2;
    c.evolution.initial_states = 2;
    c.evolution.t_max = 20.0;
    c.evolution.records = 20;
    c
}

fn criterion_10() -> (bool, String) {
    let cfg = small_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_pipeline(&cfg, Some(a.path()), Stage::Evolution).expect("first run");
    run_pipeline(&cfg, Some(b.path()), Stage::Evolution).expect("second run");
    let mut same = true;
    let mut files = 0;
    for entry in std::fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        if name == "timing.json" {
            continue;
        }
        let x = std::fs::read(a.path().join(&name)).unwrap();
        let y = std::fs::read(b.path().join(&name)).unwrap_or_default();
        same &= x == y;
        files += 1;
    }

    let model = Arc::new(SpectralModel::sphere(4).unwrap());
    let w = generate_perturbation(model.clone(), 2, 2, &PerturbationSpec::default());
    let bytes = encode_fbo(&w);
    let back = decode_fbo(&bytes, model).expect("decode");
    let golden_bytes = encode_fbo(&golden_operator());
    let roundtrip = encode_fbo(&back) == bytes
        && w.iter().all(|(l, m)| {
            back.coeff(l).is_some_and(|n| m.iter().zip(n.iter()).all(|(u, v)| u.re.to_bits() == v.re.to_bits() && u.im.to_bits() == v.im.to_bits()))
        });
    let hash: String = Sha256::digest(&golden_bytes).iter().map(|b| format!("{b:02x}")).collect();
    let golden = hash == GOLDEN_HASH;
    (
        same && roundtrip && golden,
        format!("{files} artifacts identical: {same}; round trip bit-exact: {roundtrip}; hash {hash} golden: {golden}"),
    )
}

fn main() -> ExitCode {
    let filter: Option<Vec<usize>> = std::env::var("ZKAM_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| filter.as_ref().is_none_or(|f| f.contains(&i));
    let mut lines = Vec::new();
    let mut push = |id: usize, name: &'static str, f: &dyn Fn() -> (bool, String)| {
        if wanted(id) {
            let clock = Instant::now();
            let (passed, detail) = f();
            let line = Line { id, name, passed, detail };
            println!(
                "criterion {:>2} {:<28} {}  {} [{:.1} s]",
                line.id,
                line.name,
                if line.passed { "PASS" } else { "FAIL" },
                line.detail,
                clock.elapsed().as_secs_f64()
            );
            lines.push(line);
        }
    };
    push(1, "exact identities", &criterion_1);
    push(2, "averaging projector", &criterion_2);
    push(3, "dense oracle equivalence", &criterion_3);
    push(4, "norm inequalities", &criterion_4);
    push(5, "measure scaling", &criterion_5);
    if wanted(6) || wanted(7) || wanted(8) {
        let (run, secs) = reference_run();
        println!("reference run finished in {secs:.0} s, passed {}", run.passed());
        push(6, "kam convergence", &|| criterion_6(&run));
        push(7, "normal form vs oracle", &|| criterion_7(&run));
        push(8, "evolution bound", &|| criterion_8(&run));
    }
    push(9, "transform scaling", &criterion_9);
    push(10, "determinism and persistence", &criterion_10);
    let failed = lines.iter().filter(|l| !l.passed).count();
    println!("{} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
