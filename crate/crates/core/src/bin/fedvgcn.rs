use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedvgcn::harness::{self, ExperimentConfig, HarnessError, IsolatedActivation, ScaleParam, Setting};

#[derive(Parser)]
#[command(name = "fedvgcn", version, about = "Vertically federated GraphSage experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one setting with five-fold cross-validation.
    Run(Box<RunArgs>),
    /// Render JSON-lines run records as a table.
    Compare {
        #[arg(required = true)]
        records: Vec<PathBuf>,
        /// Also append the records read to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print node, edge, feature and class counts of a dataset directory.
    Stats {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON file with base settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory holding `<name>.content` and `<name>.cites`.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, value_parser = parse::<Setting>)]
    setting: Option<Setting>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Append the run record to this JSON-lines file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    feature_ratio: Option<f64>,
    #[arg(long)]
    edge_ratio: Option<f64>,
    /// Iteration cap for federated runs; 0 removes it.
    #[arg(long)]
    federated_epoch_cap: Option<usize>,
    #[arg(long)]
    key_bits: Option<u64>,
    /// 2048-bit keys without the test-key allowance.
    #[arg(long)]
    full_crypto: bool,
    #[arg(long)]
    frac_bits: Option<u32>,
    /// `auto` or a positive number.
    #[arg(long, value_parser = parse::<ScaleParam>)]
    activation_scale: Option<ScaleParam>,
    /// `relu` or `quad`.
    #[arg(long, value_parser = parse::<IsolatedActivation>)]
    isolated_activation: Option<IsolatedActivation>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    unsup_weight: Option<f64>,
    /// Comma-separated hidden widths.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
}

fn parse<T: std::str::FromStr<Err = HarnessError>>(s: &str) -> Result<T, String> {
    s.parse().map_err(|e: HarnessError| e.to_string())
}

impl RunArgs {
    fn into_config(self) -> Result<(ExperimentConfig, Option<PathBuf>), HarnessError> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_json_file(p)?,
            None => ExperimentConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$( if let Some(v) = self.$field { c.$field = v; } )*};
        }
        set!(
            setting,
            seed,
            epochs,
            feature_ratio,
            edge_ratio,
            key_bits,
            frac_bits,
            activation_scale,
            isolated_activation,
            learning_rate,
            dropout,
            unsup_weight,
            hidden,
            folds
        );
        if let Some(d) = self.dataset {
            c.dataset_dir = d;
        }
        if self.name.is_some() {
            c.name = self.name;
        }
        if let Some(cap) = self.federated_epoch_cap {
            c.federated_epoch_cap = (cap > 0).then_some(cap);
        }
        if self.max_nodes.is_some() {
            c.max_nodes = self.max_nodes;
        }
        c.full_crypto |= self.full_crypto;
        if c.dataset_dir.as_os_str().is_empty() {
            return Err(HarnessError::Config("--dataset is required".into()));
        }
        Ok((c, self.out))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => args.into_config().and_then(|(cfg, out)| {
            let record = harness::run(&cfg)?;
            print!("{}", harness::render_table(std::slice::from_ref(&record)));
            println!(
                "folds: {}",
                record.fold_accuracies.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(" ")
            );
            println!("wall time: {:.1}s", record.wall_seconds);
            if let Some(c) = &record.counters {
                println!(
                    "messages: forward {} backward {} setup {}; encryptions {}, decryptions {}",
                    c.forward_messages(),
                    c.backward_messages(),
                    c.setup_messages,
                    c.layers.iter().map(|l| l.encryptions).sum::<u64>(),
                    c.layers.iter().map(|l| l.decryptions).sum::<u64>(),
                );
            }
            if let Some(p) = out {
                harness::append_records(&p, &[record])?;
            }
            Ok(())
        }),
        Command::Compare { records, out } => (|| {
            let mut all = Vec::new();
            for p in &records {
                all.extend(harness::read_records(p)?);
            }
            print!("{}", harness::compare(&all, out.as_deref())?);
            Ok(())
        })(),
        Command::Stats { dataset, name } => harness::stats(&dataset, name.as_deref()).map(|s| print!("{s}")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
