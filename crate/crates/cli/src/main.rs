use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tcpl::LossVariant;
use tcpl_cli::{
    cmd_evaluate, cmd_generate, cmd_sweep, cmd_train, load_config, thread_budget, CliError, Overrides, SweepAxis,
    SweepSpec,
};

#[derive(Parser)]
#[command(name = "tcpl", version, about = "One-shot tracklet re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Full,
    Intra,
    Inter,
    CeOnly,
    Exclusive,
}

impl From<Variant> for LossVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Full => LossVariant::Full,
            Variant::Intra => LossVariant::IntraOnly,
            Variant::Inter => LossVariant::InterOnly,
            Variant::CeOnly => LossVariant::CeOnly,
            Variant::Exclusive => LossVariant::ExclusiveBaseline,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides both the corpus and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    variant: Option<Variant>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides { out: self.out.clone(), seed: self.seed, variant: self.variant.map(Into::into) }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus and its evaluation split.
    Generate(Common),
    /// Run the self-training schedule.
    Train(Common),
    /// Score a checkpoint on the evaluation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write one ranking line per probe here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Train over a grid of one hyperparameter and several seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// p, lambda or r.
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
    },
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".into(), |x| format!("{x:.4}"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(c) => {
            let s = cmd_generate(&load_config(&c.config, &c.overrides())?)?;
            println!(
                "M = {}, C = {}, |D| = {}, d_in = {}\n{}\n{}",
                s.identities,
                s.cameras,
                s.tracklets,
                s.feature_dim,
                s.corpus_path.display(),
                s.split_path.display()
            );
        }
        Command::Train(c) => {
            let s = cmd_train(&load_config(&c.config, &c.overrides())?)?;
            let e = s.best_eval;
            println!(
                "steps {}, best step {}: rank1 {} rank5 {} rank20 {} mAP {}; final label acc {}",
                s.steps,
                s.best_step,
                fmt(e.map(|e| e.rank1)),
                fmt(e.map(|e| e.rank5)),
                fmt(e.map(|e| e.rank20)),
                fmt(e.map(|e| e.map)),
                fmt(s.final_label_acc)
            );
        }
        Command::Evaluate { common, checkpoint, dump } => {
            let cfg = load_config(&common.config, &common.overrides())?;
            let report = cmd_evaluate(&cfg, &checkpoint, dump.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?);
        }
        Command::Sweep { common, axis, values, seeds } => {
            let cfg = load_config(&common.config, &common.overrides())?;
            let s = cmd_sweep(&cfg, &SweepSpec { axis, values, seeds }, thread_budget()?)?;
            for a in &s.aggregates {
                println!(
                    "{} = {}: {} ok, {} failed, rank1 {} ± {}, label acc {} ± {}",
                    axis.name(),
                    a.value,
                    a.succeeded,
                    a.failed,
                    fmt(a.rank1.map(|s| s.mean)),
                    fmt(a.rank1.and_then(|s| s.std)),
                    fmt(a.label_acc.map(|s| s.mean)),
                    fmt(a.label_acc.and_then(|s| s.std))
                );
            }
            println!("{}", s.csv_path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
