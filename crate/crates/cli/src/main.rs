use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use cmtl::commands::format_table;
use cmtl::ExperimentConfig;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "cmtl", version, about = "Curriculum multi-task 3D CNN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Overrides `n_runs`.
    #[arg(long)]
    runs: Option<usize>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut c = ExperimentConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            c.override_seed(s);
        }
        if let Some(o) = &self.output {
            c.output_dir = o.clone();
        }
        if let Some(r) = self.runs {
            c.n_runs = r;
        }
        Ok(c)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic, OOD and pretraining cohorts with their splits.
    Generate(Common),
    /// Proxy-pretrain the backbone on sex classification.
    Pretrain(Common),
    /// Train the configured strategy for each run.
    Train(Common),
    /// Score test and OOD sets with thresholds chosen on validation.
    Evaluate(Common),
    /// Occlusion sensitivity map for one subject.
    Occlude {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        subject: String,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Random search over learning rate, optimizer and batch size.
    Search(Common),
    /// Merge every evaluated strategy into one table.
    Report(Common),
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let s = cmtl::cmd_generate(&c.load()?)?;
            println!(
                "train {} / val {} / test {}, ood {}, pretrain {}",
                s.n_train, s.n_val, s.n_test, s.n_ood, s.n_pretrain
            );
        }
        Command::Pretrain(c) => {
            let s = cmtl::cmd_pretrain(&c.load()?)?;
            println!("{} (val sex accuracy {:.3})", s.checkpoint.display(), s.val_sex_accuracy);
        }
        Command::Train(c) => {
            for s in cmtl::cmd_train(&c.load()?)? {
                let auc = s.final_val_auc.map_or("n/a".into(), |a| format!("{a:.3}"));
                println!("{} run {}: val loss {:.4}, val AUC {auc}", s.strategy, s.run, s.final_val_loss);
            }
        }
        Command::Evaluate(c) => print!("{}", format_table(&cmtl::cmd_evaluate(&c.load()?)?)),
        Command::Occlude { common, subject, run } => {
            let files = cmtl::cmd_occlude(&common.load()?, &subject, run)?;
            println!("{}", files.heatmap.display());
            for p in &files.slices {
                println!("{}", p.display());
            }
        }
        Command::Search(c) => {
            let r = cmtl::cmd_search(&c.load()?)?;
            for t in &r.trials {
                println!(
                    "trial {}: lr {:.2e} {} batch {} val AUC {:.3}",
                    t.index,
                    t.learning_rate,
                    t.optimizer.label(),
                    t.batch_size,
                    t.val_auc
                );
            }
            println!("best trial {}", r.best_trial);
        }
        Command::Report(c) => print!("{}", cmtl::cmd_report(&c.load()?)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
