use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ipgrepair::config::{PipelineConfig, RawConfig, DEFAULT_CONFIG};
use ipgrepair::pipeline::{run_pipeline, run_stage, write_manifest, Layout, Stage};
use ipgrepair::{Error, Result};

/// Characterize a classifier through inference provenance graphs and repair it
/// with inference-time activation overrides.
#[derive(Parser)]
#[command(name = "ipgrepair", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate or load the dataset, split it, and train (or load) the model.
    Train(Common),
    /// Craft adversarial versions of the characterization and evaluation splits.
    Attack(Common),
    /// Extract one IPG corpus per setting.
    ExtractIpg(Common),
    /// Per-node and per-layer activation statistics.
    Characterize(Common),
    /// Train the graph classifier that separates settings.
    TrainGnn(Common),
    /// Node and edge attributions and influential sets.
    Attribute(Common),
    /// Select nodes and build repair actions.
    GenActions(Common),
    /// Score actions, run the cumulative filter and the layer order search.
    EvalActions(Common),
    /// Accuracy before and after repair.
    Report(Common),
    /// Every stage in order.
    Run(Common),
    /// Print the default configuration.
    Defaults,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Per-key overrides: `--dotted.key value` or `--dotted.key=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, num_args = 0.., value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn apply_overrides(raw: &mut RawConfig, args: &[String]) -> Result<()> {
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("expected `--key value`, found '{arg}'")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it.next().ok_or_else(|| Error::config(format!("missing value for --{key}")))?;
                (key.to_string(), v.clone())
            }
        };
        raw.set(key, value);
    }
    Ok(())
}

fn load(common: &Common) -> Result<(PipelineConfig, RawConfig)> {
    let text = match &common.config {
        Some(path) => std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?,
        None => String::new(),
    };
    let mut user = RawConfig::parse(&text)?;
    apply_overrides(&mut user, &common.overrides)?;
    let raw = user.over_defaults();
    Ok((PipelineConfig::from_raw(&raw)?, raw))
}

fn execute(cli: Cli) -> Result<()> {
    let (stage, common) = match cli.command {
        Command::Defaults => {
            print!("{DEFAULT_CONFIG}");
            return Ok(());
        }
        Command::Run(common) => {
            let (cfg, raw) = load(&common)?;
            let report = run_pipeline(&cfg, &raw.to_text())?;
            let mre = &report.mre;
            println!(
                "{}: {:.4} -> {:.4}",
                mre.nominal.setting, mre.nominal.before, mre.nominal.after
            );
            for t in &mre.targets {
                println!("{}: {:.4} -> {:.4}", t.setting, t.before, t.after);
            }
            println!("tradeoff score {:.4} with {} actions", mre.tradeoff_score, mre.num_actions);
            println!("artifacts in {}", cfg.output_dir.display());
            return Ok(());
        }
        Command::Train(c) => (Stage::Train, c),
        Command::Attack(c) => (Stage::Attack, c),
        Command::ExtractIpg(c) => (Stage::ExtractIpg, c),
        Command::Characterize(c) => (Stage::Characterize, c),
        Command::TrainGnn(c) => (Stage::TrainGnn, c),
        Command::Attribute(c) => (Stage::Attribute, c),
        Command::GenActions(c) => (Stage::GenActions, c),
        Command::EvalActions(c) => (Stage::EvalActions, c),
        Command::Report(c) => (Stage::Report, c),
    };
    let (cfg, raw) = load(&common)?;
    let out = Layout::new(&cfg.output_dir);
    if stage == Stage::Train {
        std::fs::create_dir_all(out.root())?;
        std::fs::write(out.config(), raw.to_text())?;
    }
    run_stage(&cfg, stage)?;
    write_manifest(&out)?;
    println!("{} done", stage.name());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
