//! `c2a` — deterministic federated PEFT experiments from the command line.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use c2a_cli::config::{load_config, Config};
use c2a_cli::runner::{acquire_corpus, execute_run, save_corpus};
use c2a_cli::sweep::{run_sweep, SweepSpec};

#[derive(Parser)]
#[command(
    name = "c2a",
    version,
    about = "Deterministic federated-learning simulator for parameter-efficient fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonArgs {
    /// TOML config file; omitted = documented defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set train.lr=0.003 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Output directory (else $C2A_OUT_DIR, else the config's run.out_dir)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one federated experiment and write its artifacts
    Run(CommonArgs),
    /// Run a method × beta × seed grid and write summary.csv
    Sweep(SweepArgs),
    /// Synthesize the configured corpus and save it as JSONL files
    Synth(SynthArgs),
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated methods (default: the config's method)
    #[arg(long, value_delimiter = ',')]
    methods: Vec<String>,
    /// Comma-separated Dirichlet betas (default: the config's beta)
    #[arg(long, value_delimiter = ',')]
    betas: Vec<f64>,
    /// Comma-separated seeds (default: the config's seed)
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Epochs-by-rounds grid holding E×R constant, e.g. "1x40,2x20,4x10"
    #[arg(long)]
    exr: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Directory for train.jsonl / test.jsonl / pretrain.jsonl
    #[arg(long)]
    dir: PathBuf,
}

fn out_dir(cfg: &Config, flag: &Option<PathBuf>) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    if let Ok(env) = std::env::var("C2A_OUT_DIR") {
        if !env.is_empty() {
            return PathBuf::from(env);
        }
    }
    PathBuf::from(&cfg.run.out_dir)
}

fn parse_exr(text: &str) -> anyhow::Result<Vec<(usize, usize)>> {
    let mut cells = Vec::new();
    for item in text.split(',') {
        let (e, r) = item
            .trim()
            .split_once(['x', 'X'])
            .with_context(|| format!("'{item}' is not of the form ExR (e.g. 2x20)"))?;
        cells.push((e.trim().parse()?, r.trim().parse()?));
    }
    if cells.is_empty() {
        bail!("empty epochs-rounds grid");
    }
    Ok(cells)
}

fn load(common: &CommonArgs) -> anyhow::Result<Config> {
    Ok(load_config(common.config.as_deref(), &common.sets)?)
}

fn cmd_run(args: &CommonArgs) -> anyhow::Result<()> {
    let cfg = load(args)?;
    let out = out_dir(&cfg, &args.out);
    let run = execute_run(&cfg, &out)?;
    let r = &run.report;
    println!(
        "{}: init {:.4} → final {:.4} (best {:.4}), {} trainable params ({:.3}%)",
        r.run_id,
        r.init_acc,
        r.final_acc,
        r.best_acc,
        r.trainable_params,
        r.trainable_fraction * 100.0
    );
    for t in &r.rounds_to_target {
        println!("  target {:.2}: round {}", t.target, t.display);
    }
    println!("  artifacts: {}", run.dir.display());
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let cfg = load(&args.common)?;
    let out = out_dir(&cfg, &args.common.out);
    let spec = SweepSpec {
        methods: args.methods.clone(),
        betas: args.betas.clone(),
        seeds: args.seeds.clone(),
        exr: args.exr.as_deref().map(parse_exr).transpose()?,
    };
    let sweep = run_sweep(&cfg, &spec, &out)?;
    for run in &sweep.runs {
        let r = &run.report;
        println!("{}: final {:.4}", r.run_id, r.final_acc);
    }
    println!("summary: {}", sweep.summary_csv.display());
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> anyhow::Result<()> {
    let cfg = load(&args.common)?;
    if !cfg.corpus.path.is_empty() {
        bail!("synth generates a corpus; corpus.path must stay unset");
    }
    let corpus = acquire_corpus(&cfg)?;
    save_corpus(&corpus, &args.dir)?;
    println!(
        "corpus written to {}: {} train / {} test / {} pretraining sequences",
        args.dir.display(),
        corpus.train.len(),
        corpus.test.len(),
        corpus.pretrain.len()
    );
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Run(args) => cmd_run(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
