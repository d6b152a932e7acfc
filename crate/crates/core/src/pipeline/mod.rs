//! Orchestration, configuration and persistence.

mod config;
mod container;
mod perturb;
mod run;
mod verify;

pub use config::{
    EvolutionSection, KamSection, ModelSpec, OmegaSection, OracleSection, OutputSection, PipelineConfig,
    RegularizerSection, RunSection,
};
pub use container::{decode_fbo, decode_header, encode_fbo, load_fbo, save_fbo, Header, MAGIC, VERSION};
pub use perturb::{generate_perturbation, NormTarget, PerturbationSpec};
pub use run::{random_states, run_pipeline, CheckRecord, PipelineOutcome, Stage};
pub use verify::{
    averaging_suite, calibrate_norm_constants, identity_suite, norm_suite, oracle_suite, random_hermitian_operator,
    random_operator, run_all, NormConstants, PropertyResult, FROZEN_NORM_CONSTANTS,
};
