use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use fedmetanas::config::RunConfig;
use fedmetanas::data::label_entropy;
use fedmetanas::federation::{evaluate_supernet, score_logits, ServerState, Transport};
use fedmetanas::gradcheck;
use fedmetanas::meta::Params;
use fedmetanas::metrics::NdjsonSink;
use fedmetanas::prune::finalize;
use fedmetanas::search::SuperNet;
use fedmetanas::wire::Checkpoint;

mod run_dir;

#[derive(Parser)]
#[command(name = "fedmetanas", version, about = "Federated meta-learned architecture search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated search and write a run directory.
    Search {
        #[arg(short, long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        /// Output root (default: config `output_dir`, then $FEDMETANAS_OUT, then ./runs).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of a config's dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long)]
        config: PathBuf,
        /// Evaluate the finalized discrete network instead of the masked supernet.
        #[arg(long)]
        discrete: bool,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Print per-client class histograms as JSON lines.
    PartitionAudit {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the discrete architecture of a checkpoint as JSON.
    PruneExport {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Destination file; stdout if omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    clients_per_round: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, value_parser = parse_transport)]
    transport: Option<Transport>,
}

fn parse_transport(s: &str) -> Result<Transport, String> {
    match s {
        "channel" => Ok(Transport::Channel),
        "tcp" => Ok(Transport::Tcp),
        _ => Err(format!("expected `channel` or `tcp`, got `{s}`")),
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        let f = &mut cfg.federation;
        f.rounds = self.rounds.unwrap_or(f.rounds);
        f.clients_per_round = self.clients_per_round.unwrap_or(f.clients_per_round);
        f.workers = self.workers.unwrap_or(f.workers);
        f.transport = self.transport.unwrap_or(f.transport);
    }
}

/// An input file given on the command line that cannot be used.
#[derive(Debug)]
struct BadInput(String);

impl fmt::Display for BadInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for BadInput {}

fn exit_code(e: &anyhow::Error) -> u8 {
    let config = e.chain().any(|c| {
        c.is::<BadInput>() || matches!(c.downcast_ref::<fedmetanas::Error>(), Some(fedmetanas::Error::Config(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Search { config, overrides, out } => search(&config, &overrides, out.as_deref()),
        Command::Eval {
            checkpoint,
            config,
            discrete,
        } => eval(&checkpoint, &config, discrete),
        Command::Gradcheck { seed, seeds } => run_gradcheck(seed, seeds),
        Command::PartitionAudit { config, seed } => partition_audit(&config, seed),
        Command::PruneExport { checkpoint, output } => prune_export(&checkpoint, output.as_deref()),
    }
}

/// Parses, applies overrides, then validates.
fn load_config(path: &Path, overrides: Option<&Overrides>) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| BadInput(format!("cannot read {}: {e}", path.display())))?;
    let mut cfg = RunConfig::from_toml_str(&text).with_context(|| path.display().to_string())?;
    if let Some(base) = path.parent() {
        cfg.resolve_paths(base);
    }
    if let Some(o) = overrides {
        o.apply(&mut cfg);
    }
    cfg.validate().with_context(|| path.display().to_string())?;
    Ok(cfg)
}

fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| BadInput(format!("cannot read {}: {e}", path.display())))?;
    Checkpoint::decode(&bytes).with_context(|| format!("decoding {}", path.display()))
}

fn search(path: &Path, overrides: &Overrides, out: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(path, Some(overrides))?;
    let data = cfg.load_dataset().context("loading dataset")?;
    let root = run_dir::output_root(out, cfg.output_dir.as_deref());
    let dir = run_dir::create(&root, cfg.seed)?;
    std::fs::write(dir.join(run_dir::CONFIG_FILE), cfg.to_toml())?;

    let mut sink = NdjsonSink::create(&dir)?;
    let (net, outcome) = cfg.search(&data, &mut sink)?;
    sink.flush()?;

    let state = &outcome.state;
    let ckpt = Checkpoint {
        geometry: net.geometry,
        lambda: state.lambda,
        weights: state.params.w.clone(),
        alpha: state.params.alpha.clone(),
        mask: state.mask.clone(),
    };
    std::fs::write(dir.join(run_dir::CHECKPOINT_FILE), ckpt.encode())?;
    std::fs::write(
        dir.join(run_dir::ARCHITECTURE_FILE),
        outcome.discrete.architecture.to_json() + "\n",
    )?;

    if let Some(last) = outcome.rounds.last() {
        println!(
            "rounds {}  server acc {:.4}  loss {:.4}  open categoricals {}",
            outcome.rounds.len(),
            last.server_acc,
            last.server_loss,
            last.open_categoricals
        );
    }
    println!("{}", dir.display());
    Ok(ExitCode::SUCCESS)
}

fn eval(checkpoint: &Path, config: &Path, discrete: bool) -> Result<ExitCode> {
    let cfg = load_config(config, None)?;
    let ckpt = read_checkpoint(checkpoint)?;
    let data = cfg.load_dataset().context("loading dataset")?;
    let expected = cfg.geometry(&data);
    if expected.hash() != ckpt.geometry.hash() {
        anyhow::bail!(
            "checkpoint geometry {:?} does not match the dataset/config geometry {:?}",
            ckpt.geometry,
            expected
        );
    }
    let net = SuperNet::from_geometry(ckpt.geometry)?;
    let state = ServerState {
        params: Params {
            w: ckpt.weights,
            alpha: ckpt.alpha,
        },
        mask: ckpt.mask,
        lambda: ckpt.lambda,
        round: 0,
    };
    let test = data.test_batch();
    let score = if discrete {
        let model = finalize(&net, &state.params.w, &state.arch(&net), &state.mask)?;
        if test.is_empty() {
            anyhow::bail!("test split is empty");
        }
        score_logits(&model.forward(&test.inputs)?, &test.labels)?
    } else {
        evaluate_supernet(&net, &state, &test)?
    };
    println!(
        "{}",
        json!({
            "accuracy": score.accuracy,
            "loss": score.loss,
            "n": score.n,
            "fully_discrete": state.mask.is_fully_fixed(),
            "model": if discrete { "discrete" } else { "supernet" },
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(seed: u64, seeds: usize) -> Result<ExitCode> {
    let reports = gradcheck::run_suite(seed, seeds)?;
    let mut ok = true;
    for r in &reports {
        ok &= r.passed();
        println!(
            "{:<28} {:>10.3e}  {:>7} coords  {:>5} skipped  {}",
            r.op,
            r.max_rel_error,
            r.coordinates,
            r.skipped,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn partition_audit(path: &Path, seed: Option<u64>) -> Result<ExitCode> {
    let mut cfg = load_config(path, None)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let data = cfg.load_dataset().context("loading dataset")?;
    let plan = cfg.partition(&data)?;
    let mut entropies = Vec::with_capacity(plan.n_clients());
    for (k, shard) in plan.client_shards.iter().enumerate() {
        let h = label_entropy(&data.labels, shard);
        entropies.push(h);
        println!(
            "{}",
            json!({ "client": k, "n": shard.len(), "histogram": data.histogram(shard), "entropy": h })
        );
    }
    let mean = entropies.iter().sum::<f64>() / entropies.len().max(1) as f64;
    println!(
        "{}",
        json!({
            "summary": {
                "scheme": plan.scheme,
                "clients": plan.n_clients(),
                "mean_entropy": mean,
                "min_entropy": entropies.iter().cloned().fold(f64::INFINITY, f64::min),
                "max_entropy": entropies.iter().cloned().fold(0.0, f64::max),
            }
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn prune_export(checkpoint: &Path, output: Option<&Path>) -> Result<ExitCode> {
    let ckpt = read_checkpoint(checkpoint)?;
    let net = SuperNet::from_geometry(ckpt.geometry)?;
    let arch = fedmetanas::search::ArchParams {
        logits: ckpt.alpha,
        lambda: ckpt.lambda,
        combo_size: ckpt.geometry.combo_size,
    };
    let model = finalize(&net, &ckpt.weights, &arch, &ckpt.mask)?;
    let text = model.architecture.to_json() + "\n";
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
