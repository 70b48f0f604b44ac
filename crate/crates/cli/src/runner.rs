//! Single-experiment execution: corpus acquisition, cached backbone
//! pretraining, partitioning, the federated loop, and artifact emission
//! (round-log CSV, report JSON, config echo).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use c2a_core::data::{load_jsonl, save_jsonl, synthesize_corpus, Corpus, CorpusSpec, DataDims};
use c2a_core::error::{Error, Result};
use c2a_core::fed::partition::{dirichlet_partition, group_partition, ClientPartition};
use c2a_core::fed::{run_experiment, ExperimentLog, FedConfig, Federation};
use c2a_core::fed::local::LocalConfig;
use c2a_core::metrics::rounds_to_target;
use c2a_core::model::count_trainable;
use c2a_core::model::pretrain::{pretrain_backbone, PretrainConfig};
use c2a_core::params::ParamSet;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;

/// Rounds-to-target entry: `display` renders not-reached as "R↑" where R is
/// the round budget.
#[derive(Debug, Clone, Serialize)]
pub struct TargetReport {
    pub target: f64,
    pub rounds: Option<usize>,
    pub display: String,
}

/// Everything a finished run reports, echoing its exact configuration.
#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub run_id: String,
    pub config: Config,
    pub init_acc: f64,
    pub final_acc: f64,
    pub best_acc: f64,
    pub rounds_to_target: Vec<TargetReport>,
    pub trainable_params: usize,
    pub trainable_fraction: f64,
    pub total_bytes_up: u64,
    pub total_bytes_down: u64,
    pub pretrain_masked_acc: f64,
    pub backbone_cache: String,
    pub rounds_csv: String,
    /// Mean drift-probe similarity over all participants with defined values.
    pub mean_drift_cka: Option<f64>,
}

pub struct RunOutput {
    pub report: Report,
    pub log: ExperimentLog,
    pub dir: PathBuf,
    pub rounds_csv: PathBuf,
    pub report_json: PathBuf,
    pub config_echo: PathBuf,
}

/// Stable, filesystem-safe identifier for one run.
pub fn run_id(cfg: &Config) -> String {
    format!(
        "{}_{}-beta{}_K{}_E{}_R{}_seed{}",
        cfg.train.method,
        cfg.partition.scheme,
        cfg.partition.beta,
        cfg.partition.clients,
        cfg.train.local_epochs,
        cfg.train.rounds,
        cfg.run.seed
    )
}

fn corpus_spec(cfg: &Config) -> CorpusSpec {
    CorpusSpec {
        vocab_size: cfg.corpus.vocab_size,
        num_classes: cfg.corpus.num_classes,
        num_groups: cfg.corpus.num_groups,
        train_per_cell: cfg.corpus.train_per_cell,
        test_per_cell: cfg.corpus.test_per_cell,
        seq_len: cfg.corpus.seq_len,
        signal: cfg.corpus.signal,
        divergence: cfg.corpus.divergence,
        realization: cfg.corpus.realization,
        pretrain_examples: cfg.corpus.pretrain_examples,
        seed: cfg.corpus.seed,
    }
}

#[derive(Serialize, Deserialize)]
struct PoolLine {
    tokens: Vec<u32>,
}

/// Write a corpus as three JSONL files under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save_jsonl(&corpus.train, &dir.join("train.jsonl"))?;
    save_jsonl(&corpus.test, &dir.join("test.jsonl"))?;
    let mut text = String::new();
    for tokens in &corpus.pretrain {
        let line = serde_json::to_string(&PoolLine { tokens: tokens.clone() })
            .map_err(|e| Error::Data(e.to_string()))?;
        text.push_str(&line);
        text.push('\n');
    }
    std::fs::write(dir.join("pretrain.jsonl"), text)?;
    Ok(())
}

fn load_pool(path: &Path, vocab_size: usize) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut pool = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: PoolLine = serde_json::from_str(line)
            .map_err(|e| Error::ParseLine { line: i + 1, msg: e.to_string() })?;
        if let Some(&t) = row.tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::ParseLine {
                line: i + 1,
                msg: format!("token {t} outside vocabulary of {vocab_size}"),
            });
        }
        pool.push(row.tokens);
    }
    Ok(pool)
}

/// Synthesize the corpus, or load it from `corpus.path` checking that the
/// files agree with the dims declared in the config.
pub fn acquire_corpus(cfg: &Config) -> Result<Corpus> {
    if cfg.corpus.path.is_empty() {
        return synthesize_corpus(&corpus_spec(cfg));
    }
    let dir = Path::new(&cfg.corpus.path);
    let expect = DataDims {
        vocab_size: cfg.corpus.vocab_size,
        num_classes: cfg.corpus.num_classes,
        num_groups: cfg.corpus.num_groups,
        seq_len: cfg.corpus.seq_len,
    };
    let train = load_jsonl(&dir.join("train.jsonl"), Some(expect))?;
    let test = load_jsonl(&dir.join("test.jsonl"), Some(expect))?;
    let pretrain = load_pool(&dir.join("pretrain.jsonl"), expect.vocab_size)?;
    Ok(Corpus { train, test, pretrain })
}

#[derive(Serialize)]
struct CacheKey<'a> {
    corpus: &'a crate::config::CorpusSection,
    model: &'a crate::config::ModelSection,
    pretrain: &'a crate::config::PretrainSection,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct CacheMeta {
    masked_acc: f64,
}

fn cache_key(cfg: &Config) -> String {
    let key = CacheKey {
        corpus: &cfg.corpus,
        model: &cfg.model,
        pretrain: &cfg.pretrain,
        seed: cfg.run.seed,
    };
    let json = serde_json::to_string(&key).expect("cache key serializes");
    let digest = Sha256::digest(json.as_bytes());
    let mut hex = String::new();
    for b in &digest[..8] {
        let _ = write!(hex, "{b:02x}");
    }
    hex
}

/// Atomic-ish write: temp file in the same directory, then rename.
fn persist(path: &Path, write: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension(format!("tmp{}", std::process::id()));
    write(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Pretrain the backbone for this config, or reuse a cached one keyed by a
/// content hash of (corpus, model dims, pretraining hyperparameters, seed).
/// Sweeps over methods and betas therefore share one frozen backbone per
/// seed, isolating the fine-tuning comparison.
pub fn obtain_backbone(cfg: &Config, corpus: &Corpus, cache_dir: &Path) -> Result<(ParamSet, f64, String)> {
    let key = cache_key(cfg);
    let name = format!("backbone_{key}");
    std::fs::create_dir_all(cache_dir)?;
    let bin = cache_dir.join(format!("{name}.bin"));
    let meta = cache_dir.join(format!("{name}.json"));
    if bin.exists() && meta.exists() {
        let params = ParamSet::load(&bin)?;
        let text = std::fs::read_to_string(&meta)?;
        let m: CacheMeta = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("cache metadata: {e}")))?;
        return Ok((params, m.masked_acc, name));
    }
    let pcfg = PretrainConfig {
        steps: cfg.pretrain.steps,
        batch: cfg.pretrain.batch,
        lr: cfg.pretrain.lr,
        weight_decay: cfg.pretrain.weight_decay,
        mask_prob: cfg.pretrain.mask_prob,
    };
    let (backbone, masked_acc) =
        pretrain_backbone(&corpus.pretrain, &cfg.model_config(), &pcfg, cfg.run.seed)?;
    persist(&bin, |p| backbone.save(p))?;
    persist(&meta, |p| {
        let text = serde_json::to_string(&CacheMeta { masked_acc })
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        std::fs::write(p, text)?;
        Ok(())
    })?;
    Ok((backbone, masked_acc, name))
}

fn make_partitions(cfg: &Config, labels: &[usize], groups: &[usize]) -> Result<Vec<ClientPartition>> {
    match cfg.partition.scheme.as_str() {
        "dirichlet" => dirichlet_partition(
            labels,
            cfg.corpus.num_classes,
            cfg.partition.clients,
            cfg.partition.beta,
            cfg.run.seed,
        ),
        "group" => group_partition(
            labels,
            groups,
            cfg.corpus.num_classes,
            cfg.corpus.num_groups,
            cfg.partition.clients,
            cfg.partition.beta,
            cfg.run.seed,
        ),
        other => Err(Error::Config { field: "scheme".into(), msg: format!("unknown scheme '{other}'") }),
    }
}

/// Cell content for the CSV: empty when the value is absent or non-finite.
fn cell(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x}"),
        _ => String::new(),
    }
}

/// Render the per-round log as CSV. One row per sampled client plus an
/// aggregate `AGG` row per round; round 0 carries the initialization
/// accuracy. Client rows leave the aggregate-only columns empty.
pub fn rounds_csv(log: &ExperimentLog) -> String {
    let mut out = String::from("round,client_id,loss,test_acc,cka_drift,bytes_up,bytes_down\n");
    let _ = writeln!(out, "0,AGG,,{},,0,0", log.init_acc);
    for r in &log.rounds {
        for c in &r.clients {
            let loss = if c.aborted { None } else { Some(c.loss) };
            let _ = writeln!(out, "{},{},{},,{},,", r.round, c.client_id, cell(loss), cell(c.cka_drift));
        }
        let live: Vec<&c2a_core::fed::ClientRound> =
            r.clients.iter().filter(|c| !c.aborted).collect();
        let mean_loss = if live.is_empty() {
            None
        } else {
            Some(live.iter().map(|c| c.loss).sum::<f64>() / live.len() as f64)
        };
        let drifts: Vec<f64> = live.iter().filter_map(|c| c.cka_drift).collect();
        let mean_drift = if drifts.is_empty() {
            None
        } else {
            Some(drifts.iter().sum::<f64>() / drifts.len() as f64)
        };
        let _ = writeln!(
            out,
            "{},AGG,{},{},{},{},{}",
            r.round,
            cell(mean_loss),
            r.test_acc,
            cell(mean_drift),
            r.bytes_up,
            r.bytes_down
        );
    }
    out
}

/// Not-reached targets render as "R↑" with R the round budget.
pub fn target_reports(trace: &[f64], targets: &[f64], budget: usize) -> Vec<TargetReport> {
    targets
        .iter()
        .map(|&target| {
            let rounds = rounds_to_target(trace, target);
            let display = match rounds {
                Some(r) => r.to_string(),
                None => format!("{budget}\u{2191}"),
            };
            TargetReport { target, rounds, display }
        })
        .collect()
}

/// Run one experiment end to end and write its artifacts under
/// `out_root/<run_id>/`.
pub fn execute_run(cfg: &Config, out_root: &Path) -> Result<RunOutput> {
    let method = cfg.method()?;
    let corpus = acquire_corpus(cfg)?;
    let (backbone, masked_acc, cache_name) =
        obtain_backbone(cfg, &corpus, &out_root.join("cache"))?;

    let labels = corpus.train.labels();
    let groups: Vec<usize> = corpus.train.examples.iter().map(|e| e.group).collect();
    let parts = make_partitions(cfg, &labels, &groups)?;

    let fed_cfg = FedConfig {
        fraction: cfg.train.fraction,
        rounds: cfg.train.rounds,
        local: LocalConfig {
            epochs: cfg.train.local_epochs,
            batch_size: cfg.train.batch_size,
            lr: cfg.train.lr,
            weight_decay: cfg.train.weight_decay,
        },
        eval_chunk: cfg.run.eval_chunk,
        probe_size: cfg.run.probe_size,
        seed: cfg.run.seed,
    };
    let mut fed = Federation::new(
        cfg.model_config(),
        method,
        fed_cfg,
        &backbone,
        corpus.train,
        corpus.test,
        parts,
    )?;
    let log = run_experiment(&mut fed)?;

    let id = run_id(cfg);
    let dir = out_root.join(&id);
    std::fs::create_dir_all(&dir)?;
    let rounds_path = dir.join("rounds.csv");
    let report_path = dir.join("report.json");
    let echo_path = dir.join("config_echo.toml");

    std::fs::write(&rounds_path, rounds_csv(&log))?;
    std::fs::write(&echo_path, cfg.to_toml()?)?;

    let trace = log.accuracy_trace();
    let best_acc = trace
        .iter()
        .copied()
        .fold(log.init_acc, f64::max);
    let (count, fraction) = count_trainable(&cfg.model_config(), method);
    let (up, down) = log.total_bytes();
    let drifts: Vec<f64> = log
        .rounds
        .iter()
        .flat_map(|r| r.clients.iter().filter_map(|c| c.cka_drift))
        .collect();
    let mean_drift_cka = if drifts.is_empty() {
        None
    } else {
        Some(drifts.iter().sum::<f64>() / drifts.len() as f64)
    };
    let report = Report {
        run_id: id,
        config: cfg.clone(),
        init_acc: log.init_acc,
        final_acc: log.final_acc(),
        best_acc,
        rounds_to_target: target_reports(&trace, &cfg.run.targets, cfg.train.rounds),
        trainable_params: count,
        trainable_fraction: fraction,
        total_bytes_up: up,
        total_bytes_down: down,
        pretrain_masked_acc: masked_acc,
        backbone_cache: cache_name,
        rounds_csv: rounds_path.display().to_string(),
        mean_drift_cka,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Data(format!("report serialization: {e}")))?;
    std::fs::write(&report_path, json)?;

    Ok(RunOutput {
        report,
        log,
        dir,
        rounds_csv: rounds_path,
        report_json: report_path,
        config_echo: echo_path,
    })
}
