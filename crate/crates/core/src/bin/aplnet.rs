use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use aplnet::data::Split;
use aplnet::error::{Error, Result};
use aplnet::harness::{self, ExperimentConfig, Grid};

#[derive(Parser)]
#[command(name = "aplnet", version, about = "Train and inspect networks with adaptive piecewise linear units")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train `repetitions` models and report mean (std) test error.
    Train(ExperimentArgs),
    /// Evaluate a saved model on one split of a dataset manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test", value_parser = parse_split)]
        split: Split,
    },
    /// Compare ReLU against APL units with several hinge counts.
    SweepS {
        #[command(flatten)]
        experiment: ExperimentArgs,
        /// Hinge counts, comma-separated (default: `s_values` from the config).
        #[arg(long)]
        s: Option<String>,
        /// Leave out the frozen S=1 row.
        #[arg(long)]
        no_frozen: bool,
    },
    /// Write learned and initial APL curves of a saved model as CSV.
    ExportActivations {
        #[arg(long)]
        checkpoint: PathBuf,
        /// `all` or comma-separated layer indices.
        #[arg(long, default_value = "all")]
        layers: String,
        #[arg(long, default_value_t = -5.0, allow_hyphen_values = true)]
        x_min: f64,
        #[arg(long, default_value_t = 5.0, allow_hyphen_values = true)]
        x_max: f64,
        #[arg(long, default_value_t = 201)]
        points: usize,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Experiment config (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override a config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    #[arg(long)]
    activation: Option<String>,
    #[arg(long)]
    hinges: Option<usize>,
    #[arg(long)]
    frozen: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long)]
    output: Option<PathBuf>,
}

impl ExperimentArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.set.clone();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                overrides.push((k.to_string(), v));
            }
        };
        put("activation", self.activation.clone());
        put("hinges", self.hinges.map(|v| v.to_string()));
        put("frozen", self.frozen.then(|| "true".to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("repetitions", self.repetitions.map(|v| v.to_string()));
        put("precision", self.precision.clone());
        let mut cfg = ExperimentConfig::load(&self.config, &overrides)?;
        if let Some(out) = &self.output {
            cfg.output = out.clone();
        }
        Ok(cfg)
    }
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?}, expected train or test")),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let report = harness::cmd_train(&cfg)?;
            print!("{}", std::fs::read_to_string(cfg.output.join("report.txt")).unwrap_or_default());
            eprintln!("wrote {} files to {}", report.files.len(), cfg.output.display());
        }
        Command::Eval { checkpoint, data, split } => {
            let m = harness::cmd_eval(&checkpoint, &data, split)?;
            println!("loss {:.6}", m.loss);
            if let Some(e) = m.error_rate {
                println!("error {e:.6}");
            }
        }
        Command::SweepS { experiment, s, no_frozen } => {
            let cfg = experiment.load()?;
            let s_values = match s {
                Some(s) => s
                    .split(',')
                    .map(|w| w.trim().parse())
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| Error::Config(vec![format!("invalid --s {s:?}")]))?,
                None => cfg.s_values.clone(),
            };
            let table = harness::cmd_sweep_s(&cfg, &s_values, cfg.include_frozen && !no_frozen)?;
            print!("{}", table.to_text());
        }
        Command::ExportActivations { checkpoint, layers, x_min, x_max, points, out } => {
            let grid = Grid::new(x_min, x_max, points)?;
            for f in harness::cmd_export_activations(&checkpoint, &layers, grid, &out)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
