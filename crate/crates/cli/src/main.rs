use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use zkam::pipeline::{run_all, run_pipeline, PipelineConfig, PipelineOutcome, Stage};

#[derive(Parser)]
#[command(name = "zkam", version, about = "Regularization and KAM reduction on Zoll cluster models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; the reference desk instance when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; falls back to `output.dir`, then `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the master and perturbation seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, env = "ZKAM_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the spectral model and certify its gaps.
    Model,
    /// Generate the perturbation and store it as `w.zkam`.
    Perturb,
    /// Sample frequencies and apply the diophantine excision.
    Excise,
    /// Run the regularizer on every surviving frequency.
    Reduce,
    /// Run the KAM iteration, the oracle and the eigenvalue checks.
    Kam,
    /// Everything up to and including the evolution checks.
    Evolve,
    /// Run the property suites.
    Verify,
    /// End-to-end run.
    Pipeline,
    /// Print the reference configuration as TOML.
    Config,
}

fn load_config(c: &Common) -> zkam::Result<PipelineConfig> {
    let mut cfg = match &c.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::reference(),
    };
    if let Some(s) = c.seed {
        cfg.run.seed = s;
        cfg.perturbation.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcome(o: &PipelineOutcome) {
    for r in &o.records {
        let mark = match r.passed {
            Some(true) => "ok  ",
            Some(false) => "FAIL",
            None => "    ",
        };
        println!("{mark} {:<15} {:<24} {}", r.stage, r.check, r.value);
    }
    if let (Some(stage), Some(err)) = (&o.failed_stage, &o.error) {
        println!("stage {stage} failed: {err}");
    }
    println!("{}", if o.passed() { "PASSED" } else { "FAILED" });
}

fn run(cli: Cli) -> zkam::Result<bool> {
    if let Some(n) = cli.common.threads {
        // a second initialisation is harmless, the first pool wins
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let until = match cli.command {
        Command::Config => {
            print!("{}", PipelineConfig::reference().to_toml()?);
            return Ok(true);
        }
        Command::Verify => {
            let seed = cli.common.seed.unwrap_or(1);
            let results = run_all(seed)?;
            let mut ok = true;
            let mut lines = String::new();
            for r in &results {
                ok &= r.passed();
                println!(
                    "{} {:<11} {:<26} n={:<4} worst={:.3e} bound={:.3e}",
                    if r.passed() { "ok  " } else { "FAIL" },
                    r.suite,
                    r.property,
                    r.samples,
                    r.worst,
                    r.bound
                );
                lines.push_str(&serde_json::to_string(r).expect("plain data"));
                lines.push('\n');
            }
            if let Some(dir) = &cli.common.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("verify.jsonl"), lines)?;
            }
            return Ok(ok);
        }
        Command::Model => Stage::Model,
        Command::Perturb => Stage::Perturbation,
        Command::Excise => Stage::Excision,
        Command::Reduce => Stage::Regularization,
        Command::Kam => Stage::Kam,
        Command::Evolve | Command::Pipeline => Stage::Evolution,
    };
    let cfg = load_config(&cli.common)?;
    let out = cli
        .common
        .out
        .clone()
        .or_else(|| cfg.output.dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let outcome = run_pipeline(&cfg, Some(&out), until)?;
    print_outcome(&outcome);
    Ok(outcome.passed())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
