// `!(x >= 0.0)` is deliberate: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::{ConfigError, RunConfig};
use hrmas::data::{self, SpikeDataset};
use hrmas::network::{Matrix, Network};
use hrmas::search::{
    self, ArchFile, Checkpoint, DiscreteArchitecture, Phase, RetrainReport, SearchError, FORMAT_VERSION,
};
use hrmas::verify;
use serde::{Deserialize, Serialize};
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "hrmas", version, about = "Spiking motif-layer architecture search")]
struct Cli {
    /// TOML run configuration; built-in toy defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Search seed (overrides `seed` in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; every artifact is written below it.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for batch evaluation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Override a config key, e.g. `--set search.iterations=50`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Search, fix the motif size, discretize, and export `arch.json`.
    Search,
    /// Retrain an architecture from fresh weights over the retrain seeds.
    Train {
        #[arg(long)]
        arch: PathBuf,
    },
    /// Report accuracy on a split: of a trained model, or of an
    /// architecture retrained over the retrain seeds.
    Eval {
        #[arg(long)]
        arch: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Compare soft-mode gradients with finite differences.
    Gradcheck,
    /// Search and retrain under one ablation, appending to `ablation.csv`.
    Ablate {
        /// One of: full, no_ip, no_motif, no_inter_motif, fully_connected.
        #[arg(long)]
        mode: String,
    },
    /// Discretize a search checkpoint into `arch.json`.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Valid,
    Test,
}

const ABLATIONS: [&str; 5] = ["full", "no_ip", "no_motif", "no_inter_motif", "fully_connected"];

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

/// A retrained network: architecture plus feedforward weights.
#[derive(Serialize, Deserialize)]
struct TrainedModel {
    format_version: u32,
    seed: u64,
    arch: ArchFile,
    ff: Vec<Matrix>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    format_version: u32,
    version: &'static str,
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

struct Splits {
    train: SpikeDataset,
    valid: SpikeDataset,
    test: SpikeDataset,
}

impl Splits {
    fn get(&self, s: SplitArg) -> &SpikeDataset {
        match s {
            SplitArg::Train => &self.train,
            SplitArg::Valid => &self.valid,
            SplitArg::Test => &self.test,
        }
    }
}

fn load_data(cfg: &RunConfig) -> Result<Splits, Failure> {
    let ds = match &cfg.data.events {
        Some(p) => data::load_events(p).map_err(runtime)?,
        None => data::gen_synthetic(&cfg.data.synthetic).map_err(|e| Failure::Validation(format!("data.synthetic: {e}")))?,
    };
    let n = &cfg.network;
    if ds.input_size != n.input_size || ds.horizon != n.horizon || ds.classes != n.classes {
        return Err(Failure::Validation(format!(
            "data.events: dataset is {} inputs x {} steps x {} classes, network expects {} x {} x {}",
            ds.input_size, ds.horizon, ds.classes, n.input_size, n.horizon, n.classes
        )));
    }
    let (train, valid, test) = data::split(&ds, cfg.data.ratios, cfg.data.split_seed).map_err(runtime)?;
    log::info!("data: {} train, {} valid, {} test", train.len(), valid.len(), test.len());
    Ok(Splits { train, valid, test })
}

/// `manifest.json` for searches, `manifest_<command>.json` otherwise, plus
/// the resolved configuration as TOML.
fn write_manifest(out: &Path, command: &str, cfg: &RunConfig) -> Result<(), Failure> {
    let stem = match command {
        "search" => "manifest".to_string(),
        c => format!("manifest_{c}"),
    };
    let m = Manifest {
        format_version: FORMAT_VERSION,
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed,
        config: cfg,
    };
    let mut text = serde_json::to_string_pretty(&m).map_err(runtime)?;
    text.push('\n');
    search::write_atomic(&out.join(format!("{stem}.json")), text.as_bytes()).map_err(runtime)?;
    search::write_atomic(&out.join(format!("{stem}.toml")), cfg.to_toml().as_bytes()).map_err(runtime)
}

fn print_table(label: &str, report: &RetrainReport) {
    println!("{:<16} {:>8} {:>8} {:>8}", "", "Mean", "Std", "Best");
    println!(
        "{:<16} {:>7.2}% {:>7.2}% {:>7.2}%",
        label,
        100.0 * report.mean,
        100.0 * report.std,
        100.0 * report.best
    );
}

fn load_arch(path: &Path, net: &Network) -> Result<DiscreteArchitecture, Failure> {
    let arch = search::load_arch(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    arch.validate(net).map_err(runtime)?;
    Ok(arch)
}

fn retrain_on(
    net: &Network,
    arch: &DiscreteArchitecture,
    cfg: &RunConfig,
    splits: &Splits,
    eval: SplitArg,
) -> Result<RetrainReport, Failure> {
    let mut runs = Vec::new();
    for &s in &cfg.retrain_seeds {
        let run = search::retrain_once(net, arch, &splits.train.examples, &splits.get(eval).examples, &cfg.retrain, s)
            .map_err(runtime)?;
        log::info!("retrain seed {s}: accuracy {:.4}", run.test_accuracy);
        runs.push(run);
    }
    let accs: Vec<f64> = runs.iter().map(|r| r.test_accuracy).collect();
    let (mean, std, best) = search::summarize(&accs);
    Ok(RetrainReport { runs, mean, std, best })
}

fn cmd_search(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let net = Network::new(cfg.network.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    let splits = load_data(cfg)?;
    write_manifest(out, "search", cfg)?;
    let outcome = search::run_search(
        &net,
        &splits.train.examples,
        &splits.valid.examples,
        &cfg.search,
        &cfg.ip,
        &cfg.optim,
        cfg.seed,
        Some(out),
    )
    .map_err(runtime)?;
    for l in &outcome.arch.layers {
        println!(
            "layer {}: motif size {}, {} edges kept",
            l.layer,
            l.motif_size,
            l.edges.len()
        );
    }
    println!("wrote {}", out.join("arch.json").display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, arch_path: &Path) -> Result<(), Failure> {
    let net = Network::new(cfg.network.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    let arch = load_arch(arch_path, &net)?;
    let splits = load_data(cfg)?;
    write_manifest(out, "train", cfg)?;
    let report = retrain_on(&net, &arch, cfg, &splits, SplitArg::Test)?;
    let models = out.join("models");
    fs::create_dir_all(&models).map_err(runtime)?;
    let mut csv = String::from("seed,train_accuracy,test_accuracy\n");
    for r in &report.runs {
        csv.push_str(&format!("{},{},{}\n", r.seed, r.train_accuracy, r.test_accuracy));
        let model = TrainedModel {
            format_version: FORMAT_VERSION,
            seed: r.seed,
            arch: ArchFile::from_arch(&r.trained).map_err(runtime)?,
            ff: r.weights.ff.clone(),
        };
        let text = serde_json::to_vec(&model).map_err(runtime)?;
        search::write_atomic(&models.join(format!("seed_{}.json", r.seed)), &text).map_err(runtime)?;
    }
    search::write_atomic(&out.join("retrain.csv"), csv.as_bytes()).map_err(runtime)?;
    print_table("test", &report);
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, arch_path: &Path, model: Option<&Path>, split: SplitArg) -> Result<(), Failure> {
    let net = Network::new(cfg.network.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    let arch = load_arch(arch_path, &net)?;
    let splits = load_data(cfg)?;
    let label = match split {
        SplitArg::Train => "train",
        SplitArg::Valid => "valid",
        SplitArg::Test => "test",
    };
    write_manifest(out, "eval", cfg)?;
    let report = match model {
        Some(p) => {
            let text = fs::read(p).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            let m: TrainedModel = serde_json::from_slice(&text).map_err(|e| runtime(format!("{}: {e}", p.display())))?;
            if m.format_version != FORMAT_VERSION {
                return Err(runtime(SearchError::FormatVersion(m.format_version)));
            }
            let trained = m.arch.into_arch().map_err(runtime)?;
            trained.validate(&net).map_err(runtime)?;
            if trained.layers.iter().map(|l| l.motif_size).ne(arch.layers.iter().map(|l| l.motif_size)) {
                return Err(runtime("model does not match the architecture file"));
            }
            let acc = search::accuracy(&net, &trained, &m.ff, &splits.get(split).examples).map_err(runtime)?;
            RetrainReport {
                runs: Vec::new(),
                mean: acc,
                std: 0.0,
                best: acc,
            }
        }
        None => retrain_on(&net, &arch, cfg, &splits, split)?,
    };
    let csv = format!("split,mean,std,best\n{label},{},{},{}\n", report.mean, report.std, report.best);
    search::write_atomic(&out.join("eval.csv"), csv.as_bytes()).map_err(runtime)?;
    print_table(label, &report);
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<(), Failure> {
    let net = Network::new(cfg.network.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    let splits = load_data(cfg)?;
    write_manifest(out, "gradcheck", cfg)?;
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(cfg.seed);
    let weights = net.init_weights(&mut rng);
    let mut arch = net.initial_arch();
    // move off the uniform point so the logit gradients are generic
    for (k, x) in arch
        .layers
        .iter_mut()
        .flatten()
        .filter(|a| a.conn_fixed.is_none())
        .flat_map(|a| a.conn_logits.iter_mut().flatten().flatten())
        .enumerate()
    {
        *x = ((k * 7919) % 13) as f64 / 13.0 - 0.5;
    }
    let batch: Vec<_> = splits.train.examples.iter().take(cfg.gradcheck.examples).collect();
    let gc = cfg.gradcheck.to_config(cfg.seed);
    let report = verify::gradcheck(
        &net,
        &arch,
        &weights,
        &net.default_intrinsics(),
        &batch,
        cfg.network.neuron.soft_mode(),
        &gc,
    )
    .map_err(runtime)?;
    report.write_csv(&out.join("gradcheck.csv")).map_err(runtime)?;
    print!("{}", report.table());
    if report.pass() {
        println!("gradcheck passed (tolerance {:e})", report.tolerance);
        Ok(())
    } else {
        Err(runtime(format!("gradcheck failed (tolerance {:e})", report.tolerance)))
    }
}

fn cmd_ablate(cfg: &RunConfig, out: &Path, mode: &str) -> Result<(), Failure> {
    let mut cfg = cfg.clone();
    match mode {
        "full" => {}
        "no_ip" => cfg.search.use_ip = false,
        "no_motif" => cfg.network.ablation.no_motif = true,
        "no_inter_motif" => cfg.network.ablation.no_inter_motif = true,
        "fully_connected" => cfg.network.ablation.fully_connected_fixed = true,
        other => {
            return Err(Failure::Validation(format!(
                "unknown ablation mode `{other}`; expected one of: {}",
                ABLATIONS.join(", ")
            )))
        }
    }
    let net = Network::new(cfg.network.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    let splits = load_data(&cfg)?;
    let dir = out.join(format!("ablate_{mode}"));
    fs::create_dir_all(&dir).map_err(runtime)?;
    write_manifest(&dir, "search", &cfg)?;
    let outcome = search::run_search(
        &net,
        &splits.train.examples,
        &splits.valid.examples,
        &cfg.search,
        &cfg.ip,
        &cfg.optim,
        cfg.seed,
        Some(&dir),
    )
    .map_err(runtime)?;
    let report = retrain_on(&net, &outcome.arch, &cfg, &splits, SplitArg::Test)?;
    let path = out.join("ablation.csv");
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(runtime)?;
    if fresh {
        writeln!(f, "mode,seed,mean,std,best,motif_size,edges").map_err(runtime)?;
    }
    writeln!(
        f,
        "{mode},{},{},{},{},{},{}",
        cfg.seed,
        report.mean,
        report.std,
        report.best,
        outcome.arch.layers.first().map_or(0, |l| l.motif_size),
        outcome.arch.edge_count()
    )
    .map_err(runtime)?;
    print_table(mode, &report);
    Ok(())
}

fn cmd_export(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<(), Failure> {
    let net = Network::new(cfg.network.clone()).map_err(|e| Failure::Validation(e.to_string()))?;
    let mut state = Checkpoint::load(checkpoint).map_err(runtime)?.into_state();
    net.check_shapes(&state.arch, &state.weights, &state.intr)
        .map_err(|e| runtime(format!("checkpoint does not fit the configured network: {e}")))?;
    if state.phase == Phase::AllParams {
        search::fix_motif_size(&net, &mut state).map_err(runtime)?;
    }
    let arch = search::discretize(&net, &state).map_err(runtime)?;
    write_manifest(out, "export", cfg)?;
    let path = out.join("arch.json");
    search::save_arch(&path, &arch).map_err(runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Failure::Validation("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(runtime)?;
    }
    fs::create_dir_all(&cli.out).map_err(|e| runtime(format!("{}: {e}", cli.out.display())))?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Search => cmd_search(&cfg, out),
        Command::Train { arch } => cmd_train(&cfg, out, arch),
        Command::Eval { arch, model, split } => cmd_eval(&cfg, out, arch, model.as_deref(), *split),
        Command::Gradcheck => cmd_gradcheck(&cfg, out),
        Command::Ablate { mode } => cmd_ablate(&cfg, out, mode),
        Command::Export { checkpoint } => cmd_export(&cfg, out, checkpoint),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
