//! Sweep execution: a method × beta × seed (× epochs-rounds) grid of
//! independent runs, aggregated into a summary table with seed means,
//! rounds-to-target, and speedup versus the vanilla-adapter baseline.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use c2a_core::error::{Error, Result};
use c2a_core::model::Method;
use rayon::prelude::*;

use crate::config::Config;
use crate::runner::{execute_run, RunOutput};

/// Grid specification; empty axes fall back to the base config's value.
#[derive(Debug, Clone, Default)]
pub struct SweepSpec {
    pub methods: Vec<String>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Optional (local_epochs, rounds) axis; all products must match so the
    /// local-computation budget stays constant across cells.
    pub exr: Option<Vec<(usize, usize)>>,
}

/// Per-target aggregate within one summary row.
#[derive(Debug, Clone)]
pub struct SummaryTarget {
    pub target: f64,
    /// Mean rounds over seeds; `None` unless every seed reached the target.
    pub mean_rounds: Option<f64>,
    /// "12.5" or the not-reached convention "R↑".
    pub rounds_display: String,
    /// Ratio of the adapter baseline's mean rounds to this row's, "-" when
    /// either side is undefined.
    pub speedup_display: String,
}

/// One (method, beta, epochs, rounds) cell aggregated over seeds.
#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub method: String,
    pub beta: f64,
    pub epochs: usize,
    pub rounds: usize,
    pub seeds: usize,
    pub final_acc_mean: f64,
    pub final_acc_sd: f64,
    pub best_acc_mean: f64,
    pub mean_drift_cka: Option<f64>,
    pub param_pct: f64,
    pub targets: Vec<SummaryTarget>,
}

pub struct SweepOutput {
    /// One entry per grid cell, in deterministic grid order.
    pub runs: Vec<RunOutput>,
    pub rows: Vec<SummaryRow>,
    pub summary_csv: PathBuf,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Expand the grid into per-cell configs, in deterministic order
/// (method-major, then beta, then epochs×rounds, then seed).
fn expand(base: &Config, spec: &SweepSpec) -> Result<Vec<Config>> {
    let methods = if spec.methods.is_empty() {
        vec![base.train.method.clone()]
    } else {
        spec.methods.clone()
    };
    for m in &methods {
        Method::parse(m)?;
    }
    let betas = if spec.betas.is_empty() { vec![base.partition.beta] } else { spec.betas.clone() };
    for &b in &betas {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::Config { field: "beta".into(), msg: format!("{b} must be positive") });
        }
    }
    let seeds = if spec.seeds.is_empty() { vec![base.run.seed] } else { spec.seeds.clone() };
    let exr = spec
        .exr
        .clone()
        .unwrap_or_else(|| vec![(base.train.local_epochs, base.train.rounds)]);
    if exr.is_empty() {
        return Err(Error::Config { field: "exr".into(), msg: "empty epochs-rounds grid".into() });
    }
    let budget = exr[0].0 * exr[0].1;
    for &(e, r) in &exr {
        if e == 0 || r == 0 {
            return Err(Error::Config { field: "exr".into(), msg: format!("degenerate cell {e}x{r}") });
        }
        if e * r != budget {
            return Err(Error::Config {
                field: "exr".into(),
                msg: format!("cell {e}x{r} breaks the constant epochs×rounds budget {budget}"),
            });
        }
    }

    // Per-seed corpora: the corpus tracks the experiment seed unless the
    // base config pinned it to something else.
    let corpus_follows_seed = base.corpus.seed == base.run.seed;

    let mut cells = Vec::new();
    for m in &methods {
        for &beta in &betas {
            for &(epochs, rounds) in &exr {
                for &seed in &seeds {
                    let mut c = base.clone();
                    c.train.method = m.clone();
                    c.train.lr = if spec.methods.is_empty() {
                        base.train.lr
                    } else {
                        // method axis active → per-method default unless the
                        // sweep base pinned a non-default lr
                        let base_method = Method::parse(&base.train.method)?;
                        if base.train.lr == crate::config::default_lr(base_method) {
                            crate::config::default_lr(Method::parse(m)?)
                        } else {
                            base.train.lr
                        }
                    };
                    c.partition.beta = beta;
                    c.train.local_epochs = epochs;
                    c.train.rounds = rounds;
                    c.run.seed = seed;
                    if corpus_follows_seed {
                        c.corpus.seed = seed;
                    }
                    cells.push(c);
                }
            }
        }
    }
    Ok(cells)
}

/// Render one summary row group from its seed runs.
fn summarize(cell_runs: &[&RunOutput], targets: &[f64]) -> SummaryRow {
    let first = &cell_runs[0].report;
    let finals: Vec<f64> = cell_runs.iter().map(|r| r.report.final_acc).collect();
    let bests: Vec<f64> = cell_runs.iter().map(|r| r.report.best_acc).collect();
    let drifts: Vec<f64> =
        cell_runs.iter().filter_map(|r| r.report.mean_drift_cka).collect();
    let budget = first.config.train.rounds;

    let targets = targets
        .iter()
        .enumerate()
        .map(|(i, &target)| {
            let per_seed: Vec<Option<usize>> =
                cell_runs.iter().map(|r| r.report.rounds_to_target[i].rounds).collect();
            let mean_rounds = if per_seed.iter().all(|r| r.is_some()) {
                Some(mean(per_seed.iter().map(|r| r.unwrap() as f64)))
            } else {
                None
            };
            let rounds_display = match mean_rounds {
                Some(m) => format!("{m:.1}"),
                None => format!("{budget}\u{2191}"),
            };
            SummaryTarget { target, mean_rounds, rounds_display, speedup_display: "-".into() }
        })
        .collect();

    SummaryRow {
        method: first.config.train.method.clone(),
        beta: first.config.partition.beta,
        epochs: first.config.train.local_epochs,
        rounds: budget,
        seeds: cell_runs.len(),
        final_acc_mean: mean(finals.iter().copied()),
        final_acc_sd: sample_sd(&finals),
        best_acc_mean: mean(bests.iter().copied()),
        mean_drift_cka: if drifts.is_empty() { None } else { Some(mean(drifts.iter().copied())) },
        param_pct: first.trainable_fraction * 100.0,
        targets,
    }
}

/// Fill speedup columns: baseline = the "adapter" row with the same
/// (beta, epochs, rounds); speedup = baseline mean rounds / row mean rounds.
fn fill_speedups(rows: &mut [SummaryRow]) {
    let baselines: Vec<(f64, usize, usize, Vec<Option<f64>>)> = rows
        .iter()
        .filter(|r| r.method == "adapter")
        .map(|r| (r.beta, r.epochs, r.rounds, r.targets.iter().map(|t| t.mean_rounds).collect()))
        .collect();
    for row in rows.iter_mut() {
        let base = baselines
            .iter()
            .find(|(b, e, rr, _)| *b == row.beta && *e == row.epochs && *rr == row.rounds);
        for (i, t) in row.targets.iter_mut().enumerate() {
            let base_rounds = base.and_then(|(_, _, _, m)| m[i]);
            t.speedup_display = match (base_rounds, t.mean_rounds) {
                (Some(b), Some(m)) if m > 0.0 => format!("{:.2}", b / m),
                _ => "-".into(),
            };
        }
    }
}

/// Summary table: one row per (method, beta, epochs, rounds) with seed
/// aggregates and per-target rounds/speedup columns.
pub fn summary_csv(rows: &[SummaryRow], targets: &[f64]) -> String {
    let mut out = String::from("method,beta,epochs,rounds,seeds,param_pct,final_acc_mean,final_acc_sd,best_acc_mean,mean_drift_cka");
    for t in targets {
        let _ = write!(out, ",rounds_to_{t},speedup_{t}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{:.3},{:.4},{:.4},{:.4},{}",
            r.method,
            r.beta,
            r.epochs,
            r.rounds,
            r.seeds,
            r.param_pct,
            r.final_acc_mean,
            r.final_acc_sd,
            r.best_acc_mean,
            r.mean_drift_cka.map(|d| format!("{d:.4}")).unwrap_or_default(),
        );
        for t in &r.targets {
            let _ = write!(out, ",{},{}", t.rounds_display, t.speedup_display);
        }
        out.push('\n');
    }
    out
}

/// Run every cell of the grid (in parallel), then write `summary.csv` under
/// `out_root`.
pub fn run_sweep(base: &Config, spec: &SweepSpec, out_root: &Path) -> Result<SweepOutput> {
    let cells = expand(base, spec)?;
    let runs: Vec<RunOutput> = cells
        .par_iter()
        .map(|cfg| execute_run(cfg, out_root))
        .collect::<Result<_>>()?;

    // group runs by (method, beta, epochs, rounds) preserving grid order
    let mut rows: Vec<SummaryRow> = Vec::new();
    let mut groups: Vec<(String, f64, usize, usize)> = Vec::new();
    for run in &runs {
        let k = (
            run.report.config.train.method.clone(),
            run.report.config.partition.beta,
            run.report.config.train.local_epochs,
            run.report.config.train.rounds,
        );
        if !groups.contains(&k) {
            groups.push(k);
        }
    }
    let targets = &base.run.targets;
    for (m, b, e, r) in &groups {
        let cell_runs: Vec<&RunOutput> = runs
            .iter()
            .filter(|run| {
                let c = &run.report.config;
                &c.train.method == m
                    && c.partition.beta == *b
                    && c.train.local_epochs == *e
                    && c.train.rounds == *r
            })
            .collect();
        rows.push(summarize(&cell_runs, targets));
    }
    fill_speedups(&mut rows);

    std::fs::create_dir_all(out_root)?;
    let path = out_root.join("summary.csv");
    std::fs::write(&path, summary_csv(&rows, targets))?;
    Ok(SweepOutput { runs, rows, summary_csv: path })
}
