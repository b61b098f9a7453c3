//! Command-line surface. Exit codes: 0 success, 1 usage, 2 config/validation,
//! 3 runtime failure.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::masks::{build_mask, render_grid, MaskSpec, Mechanism};
use crate::pipeline;

#[derive(Debug, Parser)]
#[command(
    name = "foleygen",
    version,
    about = "Desk-scale video-to-audio pipeline on a synthetic paired task",
    disable_help_subcommand = true
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file (flat `key = value` lines).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.lr=1e-3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Cap rayon worker threads.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Synthesize the paired audio/visual episode dataset.
    SynthData {
        /// Rebuild even if artifacts are up to date.
        #[arg(long)]
        force: bool,
    },
    /// Fit the residual vector quantizer on train-split latents.
    TrainCodec {
        #[arg(long)]
        force: bool,
    },
    /// Train the token language model for one attention mechanism.
    TrainLm {
        #[arg(long)]
        force: bool,
        /// Initialize from the existing checkpoint instead of from scratch.
        #[arg(long)]
        resume: bool,
        /// Attention mechanism (defaults to lm.mechanism from the config).
        #[arg(long)]
        mechanism: Option<Mechanism>,
    },
    /// Sample audio for the test split with classifier-free guidance.
    Generate {
        #[arg(long)]
        force: bool,
        #[arg(long)]
        mechanism: Option<Mechanism>,
        /// Debug aid: write the generation attention mask as a 0/1 grid to
        /// FILE and exit without generating.
        #[arg(long, value_name = "FILE")]
        dump_mask: Option<PathBuf>,
    },
    /// Score generated audio against the test split.
    Eval {
        #[arg(long)]
        force: bool,
        #[arg(long)]
        mechanism: Option<Mechanism>,
    },
    /// Train, generate, and evaluate all three attention mechanisms.
    CompareAttention {
        #[arg(long)]
        force: bool,
    },
}

impl clap::ValueEnum for Mechanism {
    fn value_variants<'a>() -> &'a [Self] {
        &[Mechanism::AllFrame, Mechanism::CausalVisual, Mechanism::FrameSpecific]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(self.name()))
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let Some(path) = &common.config else {
        return Err(Error::Config("--config FILE is required".into()));
    };
    if !path.exists() {
        return Err(Error::Config(format!("config file not found: {}", path.display())));
    }
    RunConfig::load(path, &common.set)
}

fn dump_mask_grid(cfg: &RunConfig, mechanism: Mechanism, path: &PathBuf) -> Result<()> {
    let fz = cfg.featurizer()?;
    let mask = build_mask(&MaskSpec {
        mechanism,
        t_visual: cfg.t_frames(),
        s_audio: cfg.s_steps(),
        frame_rate_a: fz.frame_rate_a(),
        frame_rate_v: cfg.visual_frame_rate,
    })?;
    std::fs::write(path, render_grid(&mask)).map_err(|e| Error::io(path, e))?;
    println!("generate[{mechanism}]: wrote {}x{} mask grid to {}", mask.n(), mask.n(), path.display());
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    match &cli.cmd {
        Cmd::SynthData { force } => pipeline::run_synth_data(&cfg, *force),
        Cmd::TrainCodec { force } => pipeline::run_train_codec(&cfg, *force),
        Cmd::TrainLm { force, resume, mechanism } => {
            let m = mechanism.unwrap_or(cfg.lm_mechanism);
            pipeline::run_train_lm(&cfg, m, *resume, *force)
        }
        Cmd::Generate { force, mechanism, dump_mask } => {
            let m = mechanism.unwrap_or(cfg.lm_mechanism);
            if let Some(path) = dump_mask {
                return dump_mask_grid(&cfg, m, path);
            }
            pipeline::run_generate(&cfg, m, *force)
        }
        Cmd::Eval { force, mechanism } => {
            let m = mechanism.unwrap_or(cfg.lm_mechanism);
            pipeline::run_eval(&cfg, m, *force).map(|_| ())
        }
        Cmd::CompareAttention { force } => pipeline::run_compare_attention(&cfg, *force).map(|_| ()),
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are "errors" to clap but successes to us.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(n) = cli.common.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return 1;
        }
        // Ignore failure: the global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run(["foleygen", "no-such-command"]), 1);
        assert_eq!(run(["foleygen", "synth-data", "--bogus-flag"]), 1);
        assert_eq!(run::<[&str; 0], &str>([]), 1);
    }

    #[test]
    fn help_and_version_exit_zero() {
        assert_eq!(run(["foleygen", "--help"]), 0);
        assert_eq!(run(["foleygen", "--version"]), 0);
        assert_eq!(run(["foleygen", "generate", "--help"]), 0);
    }

    #[test]
    fn missing_and_broken_configs_exit_two() {
        assert_eq!(run(["foleygen", "synth-data"]), 2);
        assert_eq!(run(["foleygen", "synth-data", "--config", "/no/such/file.cfg"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.cfg");
        std::fs::write(&path, "data.seed = 1\nnot_a_key = 2\n").unwrap();
        assert_eq!(run(["foleygen", "synth-data", "--config", path.to_str().unwrap()]), 2);
    }

    #[test]
    fn mechanism_values_parse() {
        use clap::ValueEnum;
        for m in [Mechanism::AllFrame, Mechanism::CausalVisual, Mechanism::FrameSpecific] {
            let v = m.to_possible_value().unwrap();
            assert_eq!(v.get_name(), m.name());
        }
    }
}
