use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use log::info;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::evolution::{
    conjugacy_check, integrate_batch, sobolev_bound_check, transform_bound_check, EvolutionRun,
};
use crate::frequency::{diophantine_filter, measure_estimate, sample_box, OmegaSet};
use crate::kam::{
    eigen_lipschitz_check, floquet_oracle, iterate_batch, match_quasi_energies, KamBatch, KamConfig, KamState,
};
use crate::norms::hs_norm;
use crate::operator::{Fbo, C64};
use crate::regularizer::{estimate_order, regularize, Regularized};
use crate::spectral::SpectralModel;

use super::{generate_perturbation, save_fbo, PipelineConfig};

/// Stages in execution order; a run stops after the requested one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Model,
    Perturbation,
    Excision,
    Regularization,
    Kam,
    Evolution,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Model => "model",
            Stage::Perturbation => "perturbation",
            Stage::Excision => "excision",
            Stage::Regularization => "regularization",
            Stage::Kam => "kam",
            Stage::Evolution => "evolution",
        }
    }
}

/// One report line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRecord {
    pub stage: String,
    pub check: String,
    /// `None` for informational records.
    pub passed: Option<bool>,
    pub value: Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bound: Option<f64>,
    #[serde(skip_serializing_if = "Value::is_null")]
    pub detail: Value,
}

impl CheckRecord {
    fn new(stage: Stage, check: &str, passed: Option<bool>, value: Value) -> Self {
        CheckRecord {
            stage: stage.name().into(),
            check: check.into(),
            passed,
            value,
            bound: None,
            detail: Value::Null,
        }
    }

    fn bound(mut self, b: f64) -> Self {
        self.bound = Some(b);
        self
    }

    fn detail(mut self, d: Value) -> Self {
        self.detail = d;
        self
    }
}

/// Everything a run produced, for callers that keep going in memory.
#[derive(Debug, Default)]
pub struct PipelineOutcome {
    pub records: Vec<CheckRecord>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub model: Option<Arc<SpectralModel>>,
    pub w: Option<Fbo>,
    pub omega_set: Option<OmegaSet>,
    pub regularized: Vec<Option<Regularized>>,
    pub kam: Option<KamBatch>,
    pub evolutions: Vec<(usize, Vec<EvolutionRun>)>,
    /// Wall-clock seconds per stage, kept out of the reports.
    pub timing: Vec<(String, f64)>,
}

impl PipelineOutcome {
    /// No failed stage and no failed check.
    pub fn passed(&self) -> bool {
        self.failed_stage.is_none() && self.records.iter().all(|r| r.passed != Some(false))
    }

    pub fn reports_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("records serialize"));
            s.push('\n');
        }
        s
    }

    pub fn kam_history_csv(&self) -> String {
        let mut s = String::from("omega_index,nu,n_nu,norm_r_low,norm_r_high,ratio,lie_terms,smallness,residual\n");
        if let Some(b) = &self.kam {
            for (i, st) in b.states.iter().enumerate() {
                for h in st.iter().flat_map(|s| s.history.iter()) {
                    let _ = writeln!(
                        s,
                        "{i},{},{},{:.17e},{:.17e},{:.17e},{},{:.17e},{:.17e}",
                        h.nu, h.n_nu, h.norm_r_low, h.norm_r_high, h.ratio, h.lie_terms, h.smallness, h.residual
                    );
                }
            }
        }
        s
    }
}

fn evolution_csv(run: &EvolutionRun, defects: &[(f64, f64)]) -> String {
    let mut s = String::from("t,l2");
    for x in &run.s_list {
        let _ = write!(s, ",h_{x}");
    }
    s.push_str(",defect\n");
    for (r, d) in run.records.iter().zip(defects) {
        let _ = write!(s, "{:.17e},{:.17e}", r.t, r.l2);
        for h in &r.hs {
            let _ = write!(s, ",{h:.17e}");
        }
        let _ = writeln!(s, ",{:.17e}", d.1);
    }
    s
}

/// Random states normalised to `||u||_{H^s} = 1`.
pub fn random_states(model: &SpectralModel, count: usize, s: f64, seed: u64) -> Vec<DVector<C64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let u = DVector::from_fn(model.total_dim(), |_, _| {
                C64::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen::<f64>() * 2.0 - 1.0)
            });
            let n = hs_norm(model, &u, s);
            u / C64::new(n, 0.0)
        })
        .collect()
}

struct Writer {
    dir: Option<PathBuf>,
}

impl Writer {
    fn text(&self, name: &str, body: &str) -> Result<()> {
        if let Some(d) = &self.dir {
            std::fs::write(d.join(name), body)?;
        }
        Ok(())
    }

    fn fbo(&self, name: &str, a: &Fbo) -> Result<()> {
        if let Some(d) = &self.dir {
            save_fbo(&d.join(name), a)?;
        }
        Ok(())
    }
}

/// Runs the stages up to `until`, writing artifacts to `out` when given.
///
/// A failing stage ends the run with `failed_stage` set; the records and
/// artifacts produced so far are kept and written.
pub fn run_pipeline(cfg: &PipelineConfig, out: Option<&Path>, until: Stage) -> Result<PipelineOutcome> {
    cfg.validate()?;
    if let Some(d) = out {
        std::fs::create_dir_all(d)?;
    }
    let writer = Writer {
        dir: out.map(Path::to_path_buf),
    };
    let mut outcome = PipelineOutcome::default();
    let mut current = Stage::Model;
    let res = run_stages(cfg, &writer, until, &mut outcome, &mut current);
    if let Err(e) = res {
        outcome.failed_stage = Some(current.name().into());
        outcome.error = Some(e.to_string());
        outcome.records.push(
            CheckRecord::new(current, "stage_completed", Some(false), Value::Null).detail(json!({ "error": e.to_string() })),
        );
    }
    writer.text("reports.jsonl", &outcome.reports_jsonl())?;
    writer.text("kam_history.csv", &outcome.kam_history_csv())?;
    if let Some(set) = &outcome.omega_set {
        writer.text("omega.csv", &set.to_csv())?;
    }
    let timing: serde_json::Map<String, Value> = outcome.timing.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
    writer.text("timing.json", &serde_json::to_string_pretty(&timing)?)?;
    let summary = json!({
        "passed": outcome.passed(),
        "failed_stage": outcome.failed_stage,
        "error": outcome.error,
        "checks": outcome.records.iter().filter(|r| r.passed.is_some()).count(),
        "failures": outcome.records.iter().filter(|r| r.passed == Some(false)).map(|r| format!("{}/{}", r.stage, r.check)).collect::<Vec<_>>(),
    });
    writer.text("summary.json", &serde_json::to_string_pretty(&summary)?)?;
    Ok(outcome)
}

fn run_stages(
    cfg: &PipelineConfig,
    writer: &Writer,
    until: Stage,
    out: &mut PipelineOutcome,
    current: &mut Stage,
) -> Result<()> {
    let eps = cfg.run.epsilon;
    let gamma = cfg.gamma();
    let (d, n_max) = (cfg.run.d, cfg.run.n_max);

    // model
    let clock = Instant::now();
    *current = Stage::Model;
    let model = Arc::new(cfg.model.build()?);
    let c0 = model.verify_gaps()?;
    out.records.push(
        CheckRecord::new(Stage::Model, "cluster_gap", Some(c0 > 0.0), json!(c0))
            .detail(json!({ "clusters": model.num_clusters(), "total_dim": model.total_dim(), "certified_gap": model.certified_gap() })),
    );
    out.model = Some(model.clone());
    out.timing.push(("model".into(), clock.elapsed().as_secs_f64()));
    if until == Stage::Model {
        return Ok(());
    }

    // perturbation
    let clock = Instant::now();
    *current = Stage::Perturbation;
    let w = generate_perturbation(model.clone(), d, n_max, &cfg.perturbation);
    out.records.push(CheckRecord::new(
        Stage::Perturbation,
        "hermitian",
        Some(w.hermitian_defect() <= cfg.tolerances.tol_herm),
        json!(w.hermitian_defect()),
    ));
    match estimate_order(&w) {
        Ok(o) => out.records.push(
            CheckRecord::new(Stage::Perturbation, "fitted_order", Some((o - cfg.perturbation.delta).abs() <= 0.1), json!(o))
                .bound(cfg.perturbation.delta),
        ),
        Err(e) => out.records.push(
            CheckRecord::new(Stage::Perturbation, "fitted_order", None, Value::Null).detail(json!(e.to_string())),
        ),
    }
    writer.fbo("w.zkam", &w)?;
    out.w = Some(w.clone());
    out.timing.push(("perturbation".into(), clock.elapsed().as_secs_f64()));
    if until == Stage::Perturbation {
        return Ok(());
    }

    // frequencies
    let clock = Instant::now();
    *current = Stage::Excision;
    let kcfg = cfg.kam_config(model.n());
    let mut samples = if cfg.omega.count > 0 {
        sample_box(d, cfg.omega.count, cfg.omega.scheme, cfg.run.seed)?.samples
    } else {
        Vec::new()
    };
    samples.extend(cfg.omega.extra.iter().cloned());
    let all = OmegaSet::from_samples(d, samples);
    let l_max = cfg.omega.l_max.unwrap_or(n_max).max(1);
    let set = diophantine_filter(&all, gamma, kcfg.tau, l_max);
    let m = measure_estimate(&all, &set);
    out.records.push(
        CheckRecord::new(Stage::Excision, "diophantine_survivors", Some(!set.survivors().is_empty()), json!(set.survivors().len()))
            .detail(json!({ "total": all.len(), "excised": m.excised, "lo": m.lo, "hi": m.hi, "gamma": gamma, "tau": kcfg.tau })),
    );
    out.omega_set = Some(set.clone());
    out.timing.push(("excision".into(), clock.elapsed().as_secs_f64()));
    if set.survivors().is_empty() {
        return Err(Error::EmptySurvivors);
    }
    if until == Stage::Excision {
        return Ok(());
    }

    // regularization
    let clock = Instant::now();
    *current = Stage::Regularization;
    let v = w.scale_real(eps);
    let mut v = v;
    v.set_hermitian(true);
    let rcfg = cfg.regularizer_config(kcfg.tau);
    let tol = cfg.tolerances;
    let alive = set.survivors();
    let regs: Vec<(usize, Result<Regularized>)> = alive
        .par_iter()
        .map(|&i| (i, regularize(&v, &set.samples[i], &rcfg, &tol)))
        .collect();
    let mut regularized: Vec<Option<Regularized>> = vec![None; set.len()];
    let mut reg_ok = vec![false; set.len()];
    for (i, r) in regs {
        match r {
            Ok(r) => {
                let audit = kcfg.norm_low(&r.r);
                out.records.push(
                    CheckRecord::new(Stage::Regularization, "regularized", Some(audit.is_finite()), json!(audit)).detail(json!({
                        "omega_index": i,
                        "steps": r.steps,
                        "converged": r.converged,
                        "orders": r.orders,
                        "max_herm_defect": r.max_herm_defect,
                        "max_inv_defect": r.max_inv_defect,
                    })),
                );
                reg_ok[i] = true;
                regularized[i] = Some(r);
            }
            Err(e @ Error::DivisorViolation { .. }) => {
                out.records.push(
                    CheckRecord::new(Stage::Regularization, "excised", None, json!(i)).detail(json!(e.to_string())),
                );
            }
            Err(e) => return Err(e),
        }
    }
    let set = set.with_stage("regularization", |i, _| reg_ok[i]);
    out.omega_set = Some(set.clone());
    out.regularized = regularized;
    out.timing.push(("regularization".into(), clock.elapsed().as_secs_f64()));
    if until == Stage::Regularization {
        return Ok(());
    }

    // kam
    let clock = Instant::now();
    *current = Stage::Kam;
    let regs = &out.regularized;
    let batch = iterate_batch(&set, &kcfg, |i, w| {
        let r = regs[i].as_ref().expect("regularized survivor");
        KamState::new(w, &r.z, &r.r, &r.transform, &kcfg)
    })?;
    kam_reports(cfg, &kcfg, &model, &w, &batch, out);
    writer.text("omega.csv", &batch.omega_set.to_csv())?;
    out.omega_set = Some(batch.omega_set.clone());
    out.kam = Some(batch);
    out.timing.push(("kam".into(), clock.elapsed().as_secs_f64()));
    if until == Stage::Kam {
        return Ok(());
    }

    // evolution
    let clock = Instant::now();
    *current = Stage::Evolution;
    if cfg.evolution.enabled {
        evolution_stage(cfg, writer, &model, &w, out)?;
    }
    out.timing.push(("evolution".into(), clock.elapsed().as_secs_f64()));
    Ok(())
}

fn kam_reports(
    cfg: &PipelineConfig,
    kcfg: &KamConfig,
    model: &Arc<SpectralModel>,
    w: &Fbo,
    batch: &KamBatch,
    out: &mut PipelineOutcome,
) {
    let attempted = batch.outcomes.iter().filter(|o| o.is_some()).count();
    let converged = batch.converged();
    for (i, o) in batch.outcomes.iter().enumerate() {
        let Some(o) = o else { continue };
        let history: Vec<Value> = batch.states[i]
            .iter()
            .flat_map(|s| s.history.iter())
            .map(|h| {
                json!({
                    "nu": h.nu,
                    "N_nu": h.n_nu,
                    "norm_R_low": h.norm_r_low,
                    "norm_R_high": h.norm_r_high,
                    "ratio": h.ratio,
                    "excised": h.excised,
                    "mu_head": h.mu_head,
                })
            })
            .collect();
        out.records.push(
            CheckRecord::new(Stage::Kam, "run", None, json!(o)).detail(json!({ "omega_index": i, "history": history })),
        );
    }
    let frac = if attempted > 0 {
        converged.len() as f64 / attempted as f64
    } else {
        0.0
    };
    let need = cfg.kam.min_converged_fraction.unwrap_or(0.9);
    out.records.push(
        CheckRecord::new(Stage::Kam, "converged_fraction", Some(frac >= need), json!(frac))
            .bound(need)
            .detail(json!({ "converged": converged.len(), "attempted": attempted, "tol_r": kcfg.tol_r, "nu_max": kcfg.nu_max })),
    );
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for &i in &converged {
        let h = &batch.states[i].as_ref().expect("converged state").history;
        worst = h.iter().map(|x| x.ratio).fold(worst, f64::max);
        monotone &= h.windows(2).all(|p| p[1].ratio < p[0].ratio);
    }
    out.records.push(CheckRecord::new(Stage::Kam, "decay_ratio", Some(worst <= kcfg.decay_gate), json!(worst)).bound(kcfg.decay_gate));
    out.records.push(CheckRecord::new(Stage::Kam, "decay_ratio_decreasing", Some(monotone), json!(monotone)));

    let spectra: Vec<(Vec<f64>, crate::frequency::Spectrum)> = converged
        .iter()
        .map(|&i| {
            let s = batch.states[i].as_ref().expect("converged state");
            (s.omega.clone(), s.spectrum.clone())
        })
        .collect();
    if spectra.len() >= 2 {
        let gate = cfg.evolution.c_gate * cfg.run.epsilon;
        if let Ok(rep) = eigen_lipschitz_check(&spectra, kcfg.kappa, gate) {
            out.records.push(
                CheckRecord::new(Stage::Kam, "eigenvalue_lipschitz", Some(rep.passed), json!(rep.max))
                    .bound(gate)
                    .detail(json!(rep.per_cluster)),
            );
        }
    }

    if cfg.oracle.enabled {
        let mut m = Fbo::laplacian(model.clone(), w.d(), 0)
            .add(&w.scale_real(cfg.run.epsilon))
            .expect("same model");
        m.set_hermitian(true);
        let results: Vec<(usize, Result<crate::kam::OracleMatch>)> = converged
            .par_iter()
            .map(|&i| {
                let s = batch.states[i].as_ref().expect("converged state");
                let q = floquet_oracle(&m, &s.omega, cfg.oracle.radius, cfg.oracle.cap);
                (i, q.map(|q| match_quasi_energies(&s.spectrum, &q, &s.omega, cfg.oracle.radius, cfg.oracle.tol)))
            })
            .collect();
        let mut all = true;
        let mut worst: f64 = 0.0;
        for (i, r) in results {
            match r {
                Ok(mm) => {
                    all &= mm.passed;
                    worst = worst.max(mm.max_distance);
                    out.records.push(
                        CheckRecord::new(Stage::Kam, "oracle_match", Some(mm.passed), json!(mm.max_distance))
                            .bound(cfg.oracle.tol)
                            .detail(json!({ "omega_index": i, "matched": mm.matched, "total": mm.total })),
                    );
                }
                Err(e) => {
                    out.records.push(
                        CheckRecord::new(Stage::Kam, "oracle_match", None, Value::Null).detail(json!({ "omega_index": i, "skipped": e.to_string() })),
                    );
                }
            }
        }
        info!("oracle: all matched = {all}, worst distance {worst:.3e}");
    }
}

fn evolution_stage(
    cfg: &PipelineConfig,
    writer: &Writer,
    model: &Arc<SpectralModel>,
    w: &Fbo,
    out: &mut PipelineOutcome,
) -> Result<()> {
    let e = &cfg.evolution;
    let batch = out.kam.as_ref().expect("kam stage ran");
    let chosen: Vec<usize> = batch.converged().into_iter().take(e.samples).collect();
    let grid = EvolutionRun::uniform_grid(e.t_max, e.records.max(1));
    let phis: Vec<Vec<f64>> = (0..16)
        .map(|j| (0..cfg.run.d).map(|a| 2.0 * std::f64::consts::PI * ((j * (a + 3) + a) % 16) as f64 / 16.0).collect())
        .collect();
    let jobs: Vec<(usize, Result<Vec<EvolutionRun>>)> = chosen
        .par_iter()
        .map(|&i| {
            let st = batch.states[i].as_ref().expect("converged state");
            let mut tpl = EvolutionRun::new(w, cfg.run.epsilon, &st.omega, DVector::zeros(model.total_dim()), grid.clone());
            tpl.integrator = e.integrator;
            tpl.h = e.h;
            tpl.s_list = e.s_list.clone();
            let u0s = random_states(model, e.initial_states, e.s_check, cfg.run.seed.wrapping_mul(1000).wrapping_add(i as u64));
            (i, integrate_batch(tpl, u0s))
        })
        .collect();
    let mut evolutions = Vec::new();
    for (i, runs) in jobs {
        let runs = runs?;
        let st = batch.states[i].as_ref().expect("converged state");
        for (j, run) in runs.iter().enumerate() {
            let sob = sobolev_bound_check(run, e.s_check, e.c_gate)?;
            let conj = conjugacy_check(run, &st.composed, &st.z, &st.omega, e.s_check)?;
            out.records.push(
                CheckRecord::new(Stage::Evolution, "sobolev_ratio", Some(sob.passed), json!([sob.min_ratio, sob.max_ratio]))
                    .bound(e.c_gate * cfg.run.epsilon)
                    .detail(json!({ "omega_index": i, "state": j, "s": e.s_check })),
            );
            out.records.push(
                CheckRecord::new(Stage::Evolution, "l2_drift", Some(sob.l2_drift <= e.l2_tol), json!(sob.l2_drift))
                    .bound(e.l2_tol)
                    .detail(json!({ "omega_index": i, "state": j })),
            );
            out.records.push(
                CheckRecord::new(Stage::Evolution, "conjugacy_defect", Some(conj.sup <= e.conj_tol), json!(conj.sup))
                    .bound(e.conj_tol)
                    .detail(json!({ "omega_index": i, "state": j })),
            );
            writer.text(&format!("evolution_{i}_{j}.csv"), &evolution_csv(run, &conj.defects))?;
        }
        let tr = transform_bound_check(&st.composed, e.s_check, cfg.perturbation.delta, &phis);
        out.records.push(
            CheckRecord::new(Stage::Evolution, "transform_unitarity", Some(tr.unitarity_defect <= 1e-9), json!(tr.unitarity_defect))
                .bound(1e-9)
                .detail(json!({ "omega_index": i, "sup_minus_id": tr.sup_minus_id, "sup_norm": tr.sup_norm })),
        );
        if cfg.output.save_transforms {
            writer.fbo(&format!("z_inf_{i}.zkam"), &st.z)?;
            writer.fbo(&format!("phi_inf_{i}.zkam"), &st.composed)?;
        }
        evolutions.push((i, runs));
    }
    out.evolutions = evolutions;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ModelSpec;

    fn small() -> PipelineConfig {
        let mut c = PipelineConfig::reference();
        c.model = ModelSpec::Circle { k_max: 6 };
        c.run.n_max = 3;
        c.omega.count = 3;
        c.oracle.radius = 2;
        c.evolution.samples = 1;
        c.evolution.initial_states = 1;
        c.evolution.t_max = 2.0;
        c.evolution.records = 4;
        c
    }

    #[test]
    fn zero_epsilon_is_trivial() {
        let mut c = small();
        c.run.epsilon = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let o = run_pipeline(&c, Some(dir.path()), Stage::Evolution).unwrap();
        assert!(o.passed(), "{}", o.reports_jsonl());
        let b = o.kam.unwrap();
        for s in b.states.iter().flatten() {
            assert_eq!(s.nu, 0);
            assert_eq!(s.r.max_abs(), 0.0);
        }
        for f in ["reports.jsonl", "summary.json", "timing.json", "omega.csv", "w.zkam", "kam_history.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }

    #[test]
    fn small_run_converges_and_reports() {
        let dir = tempfile::tempdir().unwrap();
        let o = run_pipeline(&small(), Some(dir.path()), Stage::Evolution).unwrap();
        assert!(o.passed(), "{}", o.reports_jsonl());
        assert!(!o.kam.as_ref().unwrap().converged().is_empty());
        assert!(dir.path().join("evolution_0_0.csv").exists() || !o.evolutions.is_empty());
        let text = std::fs::read_to_string(dir.path().join("reports.jsonl")).unwrap();
        for line in text.lines() {
            let v: Value = serde_json::from_str(line).unwrap();
            assert!(v.get("stage").is_some() && v.get("check").is_some());
        }
    }

    #[test]
    fn failure_names_the_stage() {
        let mut c = small();
        c.omega.count = 0;
        c.omega.extra = vec![vec![1.0, 1.0]];
        let o = run_pipeline(&c, None, Stage::Kam).unwrap();
        assert_eq!(o.failed_stage.as_deref(), Some("excision"));
        assert!(!o.passed());
    }
}
