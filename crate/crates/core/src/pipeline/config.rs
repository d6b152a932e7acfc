use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolution::Integrator;
use crate::frequency::SampleScheme;
use crate::kam::KamConfig;
use crate::operator::Tolerances;
use crate::regularizer::RegularizerConfig;
use crate::spectral::SpectralModel;

use super::PerturbationSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Circle {
        k_max: usize,
    },
    Sphere {
        k_max: usize,
    },
    Synthetic {
        n: usize,
        lambda_shift: f64,
        k_max: usize,
        dim_constant: f64,
        eta_bar: f64,
        seed: u64,
        /// Explicit `d_k`; defaults to `max(1, floor(C k^{n-1}))`.
        #[serde(default)]
        dims: Option<Vec<usize>>,
    },
}

impl ModelSpec {
    pub fn build(&self) -> Result<SpectralModel> {
        match self {
            ModelSpec::Circle { k_max } => SpectralModel::circle(*k_max),
            ModelSpec::Sphere { k_max } => SpectralModel::sphere(*k_max),
            ModelSpec::Synthetic {
                n,
                lambda_shift,
                k_max,
                dim_constant,
                eta_bar,
                seed,
                dims,
            } => {
                if let Some(d) = dims {
                    if d.len() != k_max + 1 {
                        return Err(Error::Config(format!("dims lists {} entries for k_max = {k_max}", d.len())));
                    }
                }
                let profile = |k: usize| match dims {
                    Some(d) => d[k],
                    None => ((dim_constant * (k.max(1) as f64).powi(*n as i32 - 1)).floor() as usize).max(1),
                };
                SpectralModel::synthetic(*n, *lambda_shift, *k_max, profile, *dim_constant, *eta_bar, *seed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub d: usize,
    pub n_max: usize,
    pub epsilon: f64,
    /// `gamma = epsilon^alpha`.
    pub alpha: f64,
    /// Master seed for frequency samples and initial states.
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OmegaSection {
    pub count: usize,
    pub scheme: SampleScheme,
    /// Largest `|l|_inf` in the diophantine check; defaults to `n_max`.
    pub l_max: Option<usize>,
    /// Extra samples appended after the sampled ones.
    pub extra: Vec<Vec<f64>>,
}

impl Default for OmegaSection {
    fn default() -> Self {
        OmegaSection {
            count: 16,
            scheme: SampleScheme::LowDiscrepancy,
            l_max: None,
            extra: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerSection {
    pub target_order: f64,
    pub max_steps: usize,
    pub prune_tol: f64,
}

impl Default for RegularizerSection {
    fn default() -> Self {
        let d = RegularizerConfig::default();
        RegularizerSection {
            target_order: d.target_order,
            max_steps: d.max_steps,
            prune_tol: d.prune_tol,
        }
    }
}

/// Overrides of the dimension-dependent KAM defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KamSection {
    pub s0: Option<f64>,
    pub s: Option<f64>,
    pub b: Option<f64>,
    pub a: Option<f64>,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
    pub kappa: Option<f64>,
    pub n0: Option<f64>,
    pub chi: Option<f64>,
    pub nu_max: Option<usize>,
    pub tol_r: Option<f64>,
    pub decay_gate: Option<f64>,
    pub lie_tol: Option<f64>,
    pub lie_max_terms: Option<usize>,
    pub smallness_c: Option<f64>,
    /// Required fraction of diophantine survivors that must converge.
    pub min_converged_fraction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub enabled: bool,
    pub radius: usize,
    pub cap: usize,
    pub tol: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            enabled: true,
            radius: 3,
            cap: 4000,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvolutionSection {
    pub enabled: bool,
    /// Number of converged frequencies to evolve.
    pub samples: usize,
    pub initial_states: usize,
    pub t_max: f64,
    pub records: usize,
    pub s_list: Vec<f64>,
    /// Sobolev index of the norm-ratio and conjugacy checks.
    pub s_check: f64,
    pub integrator: Integrator,
    pub h: Option<f64>,
    pub c_gate: f64,
    pub conj_tol: f64,
    pub l2_tol: f64,
}

impl Default for EvolutionSection {
    fn default() -> Self {
        EvolutionSection {
            enabled: true,
            samples: 5,
            initial_states: 3,
            t_max: 1000.0,
            records: 1000,
            s_list: vec![0.0, 2.0],
            s_check: 2.0,
            integrator: Integrator::ExpMidpoint,
            h: None,
            c_gate: 10.0,
            conj_tol: 1e-6,
            l2_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<String>,
    /// Persist `Z_inf` and `Phi_inf` of the evolved samples.
    pub save_transforms: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub model: ModelSpec,
    pub run: RunSection,
    #[serde(default)]
    pub perturbation: PerturbationSpec,
    #[serde(default)]
    pub omega: OmegaSection,
    #[serde(default)]
    pub regularizer: RegularizerSection,
    #[serde(default)]
    pub kam: KamSection,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub evolution: EvolutionSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reference desk instance: circle, `k_max = 16`, `n_max = 6`, `d = 2`,
    /// `eps = 1e-3`, `alpha = 1/2`.
    pub fn reference() -> Self {
        PipelineConfig {
            model: ModelSpec::Circle { k_max: 16 },
            run: RunSection {
                d: 2,
                n_max: 6,
                epsilon: 1e-3,
                alpha: 0.5,
                seed: 1,
            },
            perturbation: PerturbationSpec {
                sigma_k: 8.0,
                ..Default::default()
            },
            omega: OmegaSection::default(),
            regularizer: RegularizerSection::default(),
            kam: KamSection::default(),
            tolerances: Tolerances::default(),
            oracle: OracleSection::default(),
            evolution: EvolutionSection::default(),
            output: OutputSection::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.run;
        if !(0.0..1.0).contains(&r.epsilon) {
            return Err(Error::Config(format!("epsilon must lie in [0,1), got {}", r.epsilon)));
        }
        if !(r.alpha > 0.0 && r.alpha < 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0,1), got {}", r.alpha)));
        }
        if r.d == 0 {
            return Err(Error::Config("d must be positive".into()));
        }
        let delta = self.perturbation.delta;
        if delta >= 1.0 {
            return Err(Error::Config(format!("delta must be below 1, got {delta}")));
        }
        if delta > 0.5 {
            warn!("delta = {delta} > 1/2: only the regularization stage is covered");
        }
        if self.omega.count == 0 && self.omega.extra.is_empty() {
            return Err(Error::Config("no frequency samples requested".into()));
        }
        if self.omega.extra.iter().any(|w| w.len() != r.d) {
            return Err(Error::Config("extra frequency has the wrong dimension".into()));
        }
        if self.evolution.s_list.iter().all(|&s| s != self.evolution.s_check) {
            return Err(Error::Config("evolution.s_check must appear in evolution.s_list".into()));
        }
        Ok(())
    }

    pub fn gamma(&self) -> f64 {
        if self.run.epsilon == 0.0 {
            0.0
        } else {
            self.run.epsilon.powf(self.run.alpha)
        }
    }

    pub fn kam_config(&self, n: usize) -> KamConfig {
        let mut c = KamConfig::new(self.run.d, n, self.perturbation.delta, self.gamma());
        let k = &self.kam;
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = k.$f { c.$f = v; } )* };
        }
        set!(s0, s, b, tau, rho, kappa, n0, chi, nu_max, tol_r, decay_gate, lie_tol, lie_max_terms, smallness_c);
        c.a = k.a.unwrap_or(c.b - 2.0);
        c.tolerances = self.tolerances;
        c
    }

    pub fn regularizer_config(&self, tau: f64) -> RegularizerConfig {
        RegularizerConfig {
            target_order: self.regularizer.target_order,
            max_steps: self.regularizer.max_steps,
            gamma: self.gamma(),
            tau,
            prune_tol: self.regularizer.prune_tol,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_roundtrips_through_toml() {
        let c = PipelineConfig::reference();
        let text = c.to_toml().unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = "[model]\nkind = \"circle\"\nk_max = 4\n[run]\nd = 1\nn_max = 2\nepsilon = 0.001\nalpha = 0.5\nepsilom = 3\n";
        assert!(matches!(PipelineConfig::from_toml(text), Err(Error::Config(_))));
        let text = "[model]\nkind = \"circle\"\nk_max = 4\nfoo = 1\n[run]\nd = 1\nn_max = 2\nepsilon = 0.001\nalpha = 0.5\n";
        assert!(PipelineConfig::from_toml(text).is_err());
        let ok = "[model]\nkind = \"circle\"\nk_max = 4\n[run]\nd = 1\nn_max = 2\nepsilon = 0.001\nalpha = 0.5\n[kam]\nn0 = 4.0\n";
        let c = PipelineConfig::from_toml(ok).unwrap();
        assert_eq!(c.kam_config(1).n0, 4.0);
        assert_eq!(c.kam_config(1).a, c.kam_config(1).b - 2.0);
    }
}
