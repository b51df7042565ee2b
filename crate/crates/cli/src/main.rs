//! Command-line front end: data generation, training, filtering, tuning and
//! evaluation.

mod commands;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ensfilter::Error;

use settings::Settings;

#[derive(Parser)]
#[command(name = "ensfilter", version, about = "Ensemble Kalman filters and a learned ensemble filter")]
struct Cli {
    /// Flat key=value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate truth trajectories and observations.
    GenData(GenData),
    /// Train a learned filter from scratch.
    Pretrain(Train),
    /// Retrain the heads of a checkpoint for a new ensemble size.
    Finetune(Train),
    /// Run a filter over a dataset and score it.
    RunFilter(RunFilter),
    /// Tune inflation and localization of a classical filter.
    GridSearch(GridSearch),
    /// Score estimated means against a dataset.
    Evaluate(Evaluate),
    /// Train under each loss setting on the linear-Gaussian system.
    LinearExp(LinearExp),
    /// Run the built-in consistency checks.
    Verify(Verify),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    traj: Option<String>,
    #[arg(long)]
    len: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    sigma_y: Option<String>,
    #[arg(long)]
    sigma_v: Option<String>,
    #[arg(long)]
    burn_in: Option<String>,
    #[arg(long)]
    dataset_mode: Option<String>,
    /// Output directory for the trajectory store.
    #[arg(long)]
    out: Option<String>,
}

#[derive(Args)]
struct Train {
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Starting checkpoint (fine-tuning only).
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    members: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    detach: Option<String>,
    #[arg(long)]
    loss: Option<String>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    bounded: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct RunFilter {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    members: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    radius: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    group: Option<String>,
    /// Switch off every learned head.
    #[arg(long)]
    zero_heads: bool,
    /// Switch off only the learned inflation.
    #[arg(long)]
    zero_inflation: bool,
}

#[derive(Args)]
struct GridSearch {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    members: Option<String>,
    #[arg(long)]
    alphas: Option<String>,
    #[arg(long)]
    radii: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct Evaluate {
    #[arg(long)]
    data: Option<String>,
    /// CSV with columns trajectory_id,step,x0,x1,...
    #[arg(long)]
    estimates: Option<String>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    label: Option<String>,
    #[arg(long)]
    members: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct LinearExp {
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    sigma_y: Option<String>,
    #[arg(long)]
    sigma_v: Option<String>,
    #[arg(long)]
    train_traj: Option<String>,
    #[arg(long)]
    train_len: Option<String>,
    #[arg(long)]
    test_traj: Option<String>,
    #[arg(long)]
    test_len: Option<String>,
    #[arg(long)]
    members: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    weight_decay: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    group: Option<String>,
    #[arg(long)]
    detach: Option<String>,
    #[arg(long)]
    settings: Option<String>,
    #[arg(long)]
    seed: Option<String>,
}

#[derive(Args)]
struct Verify {
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

fn on(b: bool) -> Option<String> {
    b.then(|| "true".to_string())
}

impl Command {
    fn defaults(&self) -> &'static [(&'static str, &'static str)] {
        match self {
            Command::GenData(_) => commands::GEN_DATA_DEFAULTS,
            Command::Pretrain(_) => commands::PRETRAIN_DEFAULTS,
            Command::Finetune(_) => commands::FINETUNE_DEFAULTS,
            Command::RunFilter(_) => commands::RUN_FILTER_DEFAULTS,
            Command::GridSearch(_) => commands::GRID_DEFAULTS,
            Command::Evaluate(_) => commands::EVALUATE_DEFAULTS,
            Command::LinearExp(_) => commands::LINEAR_DEFAULTS,
            Command::Verify(_) => commands::VERIFY_DEFAULTS,
        }
    }

    fn flags(&self) -> Vec<(&'static str, Option<String>)> {
        match self {
            Command::GenData(a) => vec![
                ("system", a.system.clone()),
                ("traj", a.traj.clone()),
                ("len", a.len.clone()),
                ("seed", a.seed.clone()),
                ("sigma_y", a.sigma_y.clone()),
                ("sigma_v", a.sigma_v.clone()),
                ("burn_in", a.burn_in.clone()),
                ("dataset_mode", a.dataset_mode.clone()),
                ("out", a.out.clone()),
            ],
            Command::Pretrain(a) | Command::Finetune(a) => vec![
                ("data", a.data.clone()),
                ("out", a.out.clone()),
                ("checkpoint", a.checkpoint.clone()),
                ("members", a.members.clone()),
                ("epochs", a.epochs.clone()),
                ("lr", a.lr.clone()),
                ("weight_decay", a.weight_decay.clone()),
                ("batch", a.batch.clone()),
                ("group", a.group.clone()),
                ("detach", a.detach.clone()),
                ("loss", a.loss.clone()),
                ("activation", a.activation.clone()),
                ("bounded", a.bounded.clone()),
                ("hidden", a.hidden.clone()),
                ("seed", a.seed.clone()),
            ],
            Command::RunFilter(a) => vec![
                ("method", a.method.clone()),
                ("data", a.data.clone()),
                ("out", a.out.clone()),
                ("checkpoint", a.checkpoint.clone()),
                ("members", a.members.clone()),
                ("alpha", a.alpha.clone()),
                ("radius", a.radius.clone()),
                ("seed", a.seed.clone()),
                ("group", a.group.clone()),
                ("zero_heads", on(a.zero_heads)),
                ("zero_inflation", on(a.zero_inflation)),
            ],
            Command::GridSearch(a) => vec![
                ("method", a.method.clone()),
                ("data", a.data.clone()),
                ("out", a.out.clone()),
                ("members", a.members.clone()),
                ("alphas", a.alphas.clone()),
                ("radii", a.radii.clone()),
                ("seed", a.seed.clone()),
            ],
            Command::Evaluate(a) => vec![
                ("data", a.data.clone()),
                ("estimates", a.estimates.clone()),
                ("out", a.out.clone()),
                ("label", a.label.clone()),
                ("members", a.members.clone()),
                ("seed", a.seed.clone()),
            ],
            Command::LinearExp(a) => vec![
                ("out", a.out.clone()),
                ("dim", a.dim.clone()),
                ("sigma_y", a.sigma_y.clone()),
                ("sigma_v", a.sigma_v.clone()),
                ("train_traj", a.train_traj.clone()),
                ("train_len", a.train_len.clone()),
                ("test_traj", a.test_traj.clone()),
                ("test_len", a.test_len.clone()),
                ("members", a.members.clone()),
                ("epochs", a.epochs.clone()),
                ("lr", a.lr.clone()),
                ("weight_decay", a.weight_decay.clone()),
                ("batch", a.batch.clone()),
                ("group", a.group.clone()),
                ("detach", a.detach.clone()),
                ("settings", a.settings.clone()),
                ("seed", a.seed.clone()),
            ],
            Command::Verify(a) => vec![("seed", a.seed.clone()), ("out", a.out.clone())],
        }
    }
}

/// 2: configuration, 3: data, 4: numerical divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::Divergence { .. }
        | Error::AllDiverged
        | Error::NonFinite(_)
        | Error::NotSpd { .. }
        | Error::EigFailure { .. } => 4,
        _ => 3,
    }
}

fn run(cli: Cli) -> Result<commands::Outcome, Error> {
    let mut settings = Settings::with_defaults(cli.command.defaults());
    if let Some(path) = &cli.config {
        settings.apply_file(path)?;
    }
    settings.apply_flags(&cli.command.flags())?;
    settings.apply_flags(&[("workers", cli.workers.map(|w| w.to_string()))])?;
    let workers = match settings.raw("workers")? {
        "auto" => 0,
        _ => settings.get::<usize>("workers")?,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {workers} workers: {e}")))?;
    pool.install(|| match &cli.command {
        Command::GenData(_) => commands::gen_data(&settings),
        Command::Pretrain(_) => commands::pretrain(&settings),
        Command::Finetune(_) => commands::finetune(&settings),
        Command::RunFilter(_) => commands::run_filter(&settings),
        Command::GridSearch(_) => commands::grid_search(&settings),
        Command::Evaluate(_) => commands::evaluate(&settings),
        Command::LinearExp(_) => commands::linear_exp(&settings),
        Command::Verify(_) => commands::verify(&settings),
    })
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(commands::Outcome::Success) => ExitCode::SUCCESS,
        Ok(commands::Outcome::Diverged(msg)) => {
            eprintln!("divergence: {msg}");
            ExitCode::from(4)
        }
        Ok(commands::Outcome::ChecksFailed(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
