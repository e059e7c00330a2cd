//! `gatedistill`: data generation, the three training stages, routed
//! evaluation, sweeps, ablations and the gradient-check suite.
//!
//! Every subcommand reads its prerequisites from and writes its artifacts to
//! the `--out` directory. Failures print one `key=value` line on stderr and
//! exit with 2 (config), 3 (integrity), 4 (numerical) or 1 (anything else).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gatedistill::Error;

#[derive(Parser, Debug)]
#[command(name = "gatedistill", version, about = "Routed self-distillation on a synthetic control task")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// `key = value` config file applied over the defaults
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// master seed for the world, initialisation and every training stage
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// artifact directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// config override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test episode sets
    GenData,
    /// Train and freeze the teacher backbone
    TrainTeacher,
    /// Fit per-layer capsule encoders and auxiliary heads on the frozen teacher
    Stage1,
    /// Distil the routed student
    Stage2,
    /// Dense and routed evaluation at the configured threshold
    Eval,
    /// Success and FLOPs over a grid of thresholds
    SweepTau {
        #[arg(long, value_delimiter = ',', default_value = "0.4,0.5,0.6,0.7")]
        taus: Vec<f64>,
    },
    /// Success and FLOPs when skipping the n lowest-gated layers
    SweepSkip {
        /// skip counts; defaults to 0..layers
        #[arg(long, value_delimiter = ',')]
        ns: Vec<usize>,
    },
    /// Per-layer execution frequency at the configured threshold
    ActivationHist,
    /// Analytic gradients against central finite differences
    Gradcheck {
        /// random instances per check
        #[arg(long, default_value_t = 8)]
        instances: usize,
    },
    /// Retrain Stage II (and Stage I where needed) under config variants
    Ablate {
        /// encoder, losses, k or ratio
        #[arg(long)]
        kind: String,
        /// grid for k (e.g. 2,4,8) or ratio (e.g. 1:1,1:2)
        #[arg(long)]
        values: Option<String>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::Integrity { .. } | Error::Io(_) => 3,
        Error::Numerical { .. } | Error::NonFinite { .. } | Error::AffinityOverflow { .. } => 4,
        _ => 1,
    }
}

fn kind(e: &Error) -> String {
    match e {
        Error::Shape { .. } => "shape".into(),
        Error::NonFinite { .. } => "non-finite".into(),
        Error::AffinityOverflow { .. } => "affinity-overflow".into(),
        Error::Invalid(_) => "invalid".into(),
        Error::Config { line, .. } => format!("config line={line}"),
        Error::Integrity { kind, .. } => format!("integrity check={kind}"),
        Error::Numerical { stage, step, .. } => format!("numerical stage={stage} step={step}"),
        Error::Episode(_) => "episode".into(),
        Error::Io(_) => "io".into(),
    }
}

fn report(code: u8, kind: &str, msg: &str) -> ExitCode {
    eprintln!("error code={code} kind={kind} msg={msg:?}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            return report(2, "usage", first);
        }
    };
    let result = commands::load_config(&cli.common).and_then(|cfg| {
        let ctx = commands::Ctx::new(cfg, cli.common.out.clone(), cli.common.seed)?;
        match cli.command {
            Command::GenData => ctx.gen_data(),
            Command::TrainTeacher => ctx.train_teacher(),
            Command::Stage1 => ctx.stage1(),
            Command::Stage2 => ctx.stage2(),
            Command::Eval => ctx.eval(),
            Command::SweepTau { taus } => ctx.sweep_tau(&taus),
            Command::SweepSkip { ns } => ctx.sweep_skip(&ns),
            Command::ActivationHist => ctx.activation_hist(),
            Command::Gradcheck { instances } => ctx.gradcheck(instances),
            Command::Ablate { kind, values } => ctx.ablate(&kind, values.as_deref()),
        }
    });
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => report(1, "check-failed", "gradient check above tolerance"),
        Err(e) => report(exit_code(&e), &kind(&e), &e.to_string()),
    }
}
