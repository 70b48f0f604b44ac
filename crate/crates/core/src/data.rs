//! Synthetic multi-domain text-classification corpus plus JSONL ingestion.
//!
//! The synthetic corpus stands in for a multilingual topic-classification
//! dataset: each *group* (domain/language) owns a disjoint band of token ids
//! with its own base unigram distribution, and each *class* injects
//! class-indicative tokens at a configurable rate. Class indicators are
//! realized per (class, group) cell — the same topic surfaces through
//! different tokens in different domains, the way a topic is worded
//! differently across languages — with a `realization` dial controlling how
//! strictly an example's class tokens stay within its own group's cell.
//! Every class token identifies its class from the id alone regardless of
//! the dial. Sequences are fixed-length; token 0 is reserved for padding and
//! token 1 for masking.

use std::io::{BufRead, BufReader, Write as IoWrite};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::substream;

/// Reserved padding token id.
pub const PAD_TOKEN: u32 = 0;
/// Reserved mask token id (masked-token pretraining).
pub const MASK_TOKEN: u32 = 1;
/// Number of indicator tokens dedicated to each (class, group) cell.
pub const CLASS_TOKENS_PER_CELL: usize = 2;
/// First token id available for class indicators.
pub const FIRST_CLASS_TOKEN: usize = 2;

/// One classification instance: a fixed-length token sequence with a class
/// label and a domain/group id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: usize,
    pub group: usize,
}

/// Shape limits for a dataset; every example must satisfy them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataDims {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    pub seq_len: usize,
}

/// An immutable set of validated examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub dims: DataDims,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(dims: DataDims, examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            validate_example(ex, &dims).map_err(|msg| Error::Data(format!("example {i}: {msg}")))?;
        }
        Ok(Dataset { dims, examples })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

fn validate_example(ex: &Example, dims: &DataDims) -> std::result::Result<(), String> {
    if ex.tokens.len() != dims.seq_len {
        return Err(format!(
            "sequence length {} != required {}",
            ex.tokens.len(),
            dims.seq_len
        ));
    }
    if let Some(t) = ex.tokens.iter().find(|&&t| t as usize >= dims.vocab_size) {
        return Err(format!("token {} out of vocab range {}", t, dims.vocab_size));
    }
    if ex.label >= dims.num_classes {
        return Err(format!("label {} out of range {}", ex.label, dims.num_classes));
    }
    if ex.group >= dims.num_groups {
        return Err(format!("group {} out of range {}", ex.group, dims.num_groups));
    }
    Ok(())
}

/// Recipe for a synthetic corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub num_groups: usize,
    /// Training examples per (class, group) cell.
    pub train_per_cell: usize,
    /// Test examples per (class, group) cell.
    pub test_per_cell: usize,
    pub seq_len: usize,
    /// Probability that a position carries a class-indicative token; in (0, 1)
    /// (0 allowed for the no-signal control).
    pub signal: f64,
    /// Probability that a non-class token is drawn from the group's own band
    /// rather than the shared mixture over all bands.
    pub divergence: f64,
    /// Probability that a class-indicative token is realized through the
    /// example's own (class, group) cell rather than the cell of a uniformly
    /// random group for that class. At 0 class tokens are group-agnostic; at
    /// 1 every domain words each topic entirely in its own vocabulary.
    pub realization: f64,
    /// Label-free sequences reserved for backbone pretraining.
    pub pretrain_examples: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            vocab_size: 256,
            num_classes: 8,
            num_groups: 5,
            train_per_cell: 200,
            test_per_cell: 50,
            seq_len: 16,
            signal: 0.35,
            divergence: 0.8,
            realization: 0.9,
            pretrain_examples: 2000,
            seed: 0,
        }
    }
}

/// Token-id layout induced by a spec: `[pad, mask, class region, group bands]`.
#[derive(Debug, Clone, Copy)]
pub struct VocabLayout {
    pub class_region_start: usize,
    pub band_region_start: usize,
    pub band_width: usize,
    pub num_classes: usize,
    pub num_groups: usize,
}

impl VocabLayout {
    pub fn from_spec(spec: &CorpusSpec) -> Result<Self> {
        let class_region_start = FIRST_CLASS_TOKEN;
        let band_region_start = class_region_start
            + spec.num_classes * spec.num_groups * CLASS_TOKENS_PER_CELL;
        if band_region_start >= spec.vocab_size {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "{} leaves no room for group bands after {} class tokens",
                    spec.vocab_size,
                    spec.num_classes * spec.num_groups * CLASS_TOKENS_PER_CELL
                ),
            ));
        }
        let band_width = (spec.vocab_size - band_region_start) / spec.num_groups;
        if band_width < 2 {
            return Err(Error::config(
                "vocab_size",
                format!(
                    "{} too small for {} disjoint group bands",
                    spec.vocab_size, spec.num_groups
                ),
            ));
        }
        Ok(VocabLayout {
            class_region_start,
            band_region_start,
            band_width,
            num_classes: spec.num_classes,
            num_groups: spec.num_groups,
        })
    }

    /// Inclusive-exclusive id range of all class-indicator tokens for
    /// `class`, across every group's realization cell (cells are laid out
    /// class-major, so the per-class region is contiguous).
    pub fn class_tokens(&self, class: usize) -> std::ops::Range<usize> {
        let lo = self.class_region_start + class * self.num_groups * CLASS_TOKENS_PER_CELL;
        lo..lo + self.num_groups * CLASS_TOKENS_PER_CELL
    }

    /// Inclusive-exclusive id range of `class`'s indicator tokens as realized
    /// in `group`'s domain.
    pub fn cell_tokens(&self, class: usize, group: usize) -> std::ops::Range<usize> {
        let lo = self.class_region_start
            + (class * self.num_groups + group) * CLASS_TOKENS_PER_CELL;
        lo..lo + CLASS_TOKENS_PER_CELL
    }

    /// The class a token indicates, if it is a class-indicator token.
    pub fn class_of_token(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        if t < self.class_region_start || t >= self.band_region_start {
            return None;
        }
        Some((t - self.class_region_start) / (self.num_groups * CLASS_TOKENS_PER_CELL))
    }

    /// Inclusive-exclusive id range of `group`'s band.
    pub fn band(&self, group: usize) -> std::ops::Range<usize> {
        let lo = self.band_region_start + group * self.band_width;
        lo..lo + self.band_width
    }

    /// The group whose band contains `token`, if any.
    pub fn group_of_token(&self, token: u32) -> Option<usize> {
        let t = token as usize;
        if t < self.band_region_start {
            return None;
        }
        let g = (t - self.band_region_start) / self.band_width;
        (g < self.num_groups).then_some(g)
    }
}

/// A synthesized corpus: disjoint train/test splits plus a label-free
/// pretraining pool.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub test: Dataset,
    pub pretrain: Vec<Vec<u32>>,
}

fn validate_spec(spec: &CorpusSpec) -> Result<()> {
    if spec.num_classes < 2 {
        return Err(Error::config("num_classes", "must be at least 2"));
    }
    if spec.num_groups == 0 {
        return Err(Error::config("num_groups", "must be positive"));
    }
    if spec.train_per_cell == 0 || spec.test_per_cell == 0 {
        return Err(Error::config("counts", "per-cell counts must be positive"));
    }
    if spec.seq_len == 0 {
        return Err(Error::config("seq_len", "must be positive"));
    }
    if !(0.0..1.0).contains(&spec.signal) {
        return Err(Error::config("signal", "must lie in [0, 1)"));
    }
    if !(0.0..=1.0).contains(&spec.divergence) {
        return Err(Error::config("divergence", "must lie in [0, 1]"));
    }
    if !(0.0..=1.0).contains(&spec.realization) {
        return Err(Error::config("realization", "must lie in [0, 1]"));
    }
    Ok(())
}

fn gen_sequence<R: Rng>(
    rng: &mut R,
    spec: &CorpusSpec,
    layout: &VocabLayout,
    class: usize,
    group: usize,
) -> Vec<u32> {
    let shared_span = layout.band_width * spec.num_groups;
    (0..spec.seq_len)
        .map(|_| {
            if rng.gen::<f64>() < spec.signal {
                let realized_in = if rng.gen::<f64>() < spec.realization {
                    group
                } else {
                    rng.gen_range(0..spec.num_groups)
                };
                let r = layout.cell_tokens(class, realized_in);
                rng.gen_range(r.start..r.end) as u32
            } else if rng.gen::<f64>() < spec.divergence {
                let r = layout.band(group);
                rng.gen_range(r.start..r.end) as u32
            } else {
                (layout.band_region_start + rng.gen_range(0..shared_span)) as u32
            }
        })
        .collect()
}

/// Generate train/test/pretrain data deterministically from the spec.
///
/// Per (group, class) cell, `train_per_cell` + `test_per_cell` sequences are
/// drawn from a dedicated substream, so cell contents do not depend on the
/// iteration order of other cells. The pretraining pool is drawn label-free
/// from the class-marginalized mixture.
pub fn synthesize_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    validate_spec(spec)?;
    let layout = VocabLayout::from_spec(spec)?;
    let dims = DataDims {
        vocab_size: spec.vocab_size,
        num_classes: spec.num_classes,
        num_groups: spec.num_groups,
        seq_len: spec.seq_len,
    };

    let mut train = Vec::with_capacity(spec.num_groups * spec.num_classes * spec.train_per_cell);
    let mut test = Vec::with_capacity(spec.num_groups * spec.num_classes * spec.test_per_cell);
    for group in 0..spec.num_groups {
        for class in 0..spec.num_classes {
            let mut rng = substream(spec.seed, "corpus", &[group as u64, class as u64]);
            for _ in 0..spec.train_per_cell {
                let tokens = gen_sequence(&mut rng, spec, &layout, class, group);
                train.push(Example { tokens, label: class, group });
            }
            for _ in 0..spec.test_per_cell {
                let tokens = gen_sequence(&mut rng, spec, &layout, class, group);
                test.push(Example { tokens, label: class, group });
            }
        }
    }

    let mut rng = substream(spec.seed, "corpus-pretrain", &[]);
    let pretrain = (0..spec.pretrain_examples)
        .map(|_| {
            let group = rng.gen_range(0..spec.num_groups);
            let class = rng.gen_range(0..spec.num_classes);
            gen_sequence(&mut rng, spec, &layout, class, group)
        })
        .collect();

    Ok(Corpus {
        train: Dataset::new(dims, train)?,
        test: Dataset::new(dims, test)?,
        pretrain,
    })
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    tokens: Vec<i64>,
    label: i64,
    group: i64,
}

/// Write a dataset as one JSON record per line.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for ex in &ds.examples {
        let rec = JsonlRecord {
            tokens: ex.tokens.iter().map(|&t| t as i64).collect(),
            label: ex.label as i64,
            group: ex.group as i64,
        };
        let line = serde_json::to_string(&rec)
            .map_err(|e| Error::Data(format!("serialize: {e}")))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Load a JSONL dataset, optionally validating against known dims.
///
/// Without `expect`, dims are inferred (vocab/classes/groups from maxima,
/// seq_len from the longest line; shorter sequences are padded with token 0).
/// With `expect`, any out-of-range index is an error naming the 1-indexed
/// offending line. An empty file yields an empty dataset and a warning on
/// stderr.
pub fn load_jsonl(path: &Path, expect: Option<DataDims>) -> Result<Dataset> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut raw: Vec<(usize, JsonlRecord)> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| Error::ParseLine {
            line: lineno,
            msg: e.to_string(),
        })?;
        if rec.tokens.is_empty() {
            return Err(Error::ParseLine { line: lineno, msg: "empty token list".into() });
        }
        if let Some(&t) = rec.tokens.iter().find(|&&t| t < 0) {
            return Err(Error::ParseLine { line: lineno, msg: format!("negative token {t}") });
        }
        if rec.label < 0 || rec.group < 0 {
            return Err(Error::ParseLine { line: lineno, msg: "negative label or group".into() });
        }
        raw.push((lineno, rec));
    }

    if raw.is_empty() {
        eprintln!("warning: {} contains no records", path.display());
        let dims = expect.unwrap_or(DataDims {
            vocab_size: 2,
            num_classes: 2,
            num_groups: 1,
            seq_len: 1,
        });
        return Ok(Dataset { dims, examples: Vec::new() });
    }

    let dims = match expect {
        Some(d) => d,
        None => DataDims {
            vocab_size: raw
                .iter()
                .flat_map(|(_, r)| r.tokens.iter())
                .max()
                .map(|&t| t as usize + 1)
                .unwrap_or(2)
                .max(2),
            num_classes: raw.iter().map(|(_, r)| r.label as usize + 1).max().unwrap().max(2),
            num_groups: raw.iter().map(|(_, r)| r.group as usize + 1).max().unwrap(),
            seq_len: raw.iter().map(|(_, r)| r.tokens.len()).max().unwrap(),
        },
    };

    let mut examples = Vec::with_capacity(raw.len());
    for (lineno, rec) in raw {
        if rec.tokens.len() > dims.seq_len {
            return Err(Error::ParseLine {
                line: lineno,
                msg: format!("sequence length {} exceeds {}", rec.tokens.len(), dims.seq_len),
            });
        }
        let mut tokens: Vec<u32> = rec.tokens.iter().map(|&t| t as u32).collect();
        tokens.resize(dims.seq_len, PAD_TOKEN);
        let ex = Example { tokens, label: rec.label as usize, group: rec.group as usize };
        validate_example(&ex, &dims)
            .map_err(|msg| Error::ParseLine { line: lineno, msg })?;
        examples.push(ex);
    }
    Ok(Dataset { dims, examples })
}

/// Stratified train/test split: within every (class, group) cell the test
/// share is `round(fraction * cell size)`, order shuffled per-cell.
pub fn split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
        return Err(Error::config("test_fraction", "must lie in (0, 1)"));
    }
    let mut cells: std::collections::BTreeMap<(usize, usize), Vec<usize>> =
        std::collections::BTreeMap::new();
    for (i, ex) in ds.examples.iter().enumerate() {
        cells.entry((ex.label, ex.group)).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for ((label, group), mut idx) in cells {
        let mut rng = substream(seed, "split", &[label as u64, group as u64]);
        // Fisher-Yates
        for i in (1..idx.len()).rev() {
            let j = rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
        let n_test = n_test.min(idx.len());
        test_idx.extend_from_slice(&idx[..n_test]);
        train_idx.extend_from_slice(&idx[n_test..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| Dataset {
        dims: ds.dims,
        examples: idx.iter().map(|&i| ds.examples[i].clone()).collect(),
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            train_per_cell: 30,
            test_per_cell: 10,
            pretrain_examples: 50,
            seed: 7,
            ..CorpusSpec::default()
        }
    }

    /// Laplace-smoothed unigram naive-Bayes: an implementation-independent
    /// classifier used as the signal oracle.
    fn unigram_accuracy(train: &Dataset, test: &Dataset) -> f64 {
        let v = train.dims.vocab_size;
        let c = train.dims.num_classes;
        let mut counts = vec![1.0f64; c * v]; // Laplace prior
        let mut totals = vec![v as f64; c];
        for ex in &train.examples {
            for &t in &ex.tokens {
                counts[ex.label * v + t as usize] += 1.0;
                totals[ex.label] += 1.0;
            }
        }
        let mut hits = 0usize;
        for ex in &test.examples {
            let mut best = (f64::NEG_INFINITY, 0usize);
            for class in 0..c {
                let mut ll = 0.0;
                for &t in &ex.tokens {
                    ll += (counts[class * v + t as usize] / totals[class]).ln();
                }
                if ll > best.0 {
                    best = (ll, class);
                }
            }
            if best.1 == ex.label {
                hits += 1;
            }
        }
        hits as f64 / test.examples.len() as f64
    }

    #[test]
    fn high_signal_corpus_is_easily_classifiable() {
        let spec = CorpusSpec { signal: 0.95, ..small_spec() };
        let corpus = synthesize_corpus(&spec).unwrap();
        let acc = unigram_accuracy(&corpus.train, &corpus.test);
        assert!(acc > 0.95, "unigram oracle accuracy {acc} <= 0.95");
    }

    #[test]
    fn zero_signal_corpus_is_chance_level() {
        let spec = CorpusSpec { signal: 0.0, ..small_spec() };
        let corpus = synthesize_corpus(&spec).unwrap();
        let acc = unigram_accuracy(&corpus.train, &corpus.test);
        let p = 1.0 / spec.num_classes as f64;
        let n = corpus.test.len() as f64;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!(
            (acc - p).abs() <= 3.0 * sigma,
            "accuracy {acc} outside {p} +- {}",
            3.0 * sigma
        );
    }

    #[test]
    fn equal_seeds_give_identical_corpora() {
        let spec = small_spec();
        let a = synthesize_corpus(&spec).unwrap();
        let b = synthesize_corpus(&spec).unwrap();
        assert_eq!(a, b);
        let other = synthesize_corpus(&CorpusSpec { seed: 8, ..spec }).unwrap();
        assert_ne!(a.train, other.train);
    }

    #[test]
    fn default_spec_counts_and_ranges() {
        let spec = CorpusSpec { pretrain_examples: 10, ..CorpusSpec::default() };
        let corpus = synthesize_corpus(&spec).unwrap();
        assert_eq!(corpus.train.len(), 8 * 5 * 200);
        assert_eq!(corpus.test.len(), 8 * 5 * 50);
        assert!(corpus
            .train
            .examples
            .iter()
            .all(|e| e.tokens.len() == 16 && e.tokens.iter().all(|&t| (t as usize) < 256)));
    }

    #[test]
    fn group_bands_are_disjoint_and_identify_groups() {
        let spec = CorpusSpec { divergence: 1.0, signal: 0.0, ..small_spec() };
        let layout = VocabLayout::from_spec(&spec).unwrap();
        for g in 0..spec.num_groups {
            for h in 0..spec.num_groups {
                if g != h {
                    let (a, b) = (layout.band(g), layout.band(h));
                    assert!(a.end <= b.start || b.end <= a.start, "bands {g}/{h} overlap");
                }
            }
        }
        // with divergence 1 and no class signal, every token stays in-band
        let corpus = synthesize_corpus(&spec).unwrap();
        for ex in &corpus.train.examples {
            for &t in &ex.tokens {
                assert_eq!(layout.group_of_token(t), Some(ex.group));
            }
        }
    }

    #[test]
    fn class_conditional_distributions_differ_when_signal_positive() {
        let spec = small_spec(); // signal 0.35
        let corpus = synthesize_corpus(&spec).unwrap();
        let v = spec.vocab_size;
        let mut hist = vec![vec![1.0f64; v]; spec.num_classes];
        for ex in &corpus.train.examples {
            for &t in &ex.tokens {
                hist[ex.label][t as usize] += 1.0;
            }
        }
        let norm: Vec<Vec<f64>> = hist
            .iter()
            .map(|h| {
                let s: f64 = h.iter().sum();
                h.iter().map(|x| x / s).collect()
            })
            .collect();
        let kl = |p: &[f64], q: &[f64]| -> f64 {
            p.iter().zip(q).map(|(a, b)| a * (a / b).ln()).sum()
        };
        for c1 in 0..spec.num_classes {
            for c2 in 0..spec.num_classes {
                if c1 != c2 {
                    assert!(kl(&norm[c1], &norm[c2]) > 0.1, "classes {c1}/{c2} indistinct");
                }
            }
        }
    }

    #[test]
    fn vocab_too_small_for_bands_is_a_config_error() {
        let spec = CorpusSpec { vocab_size: 36, ..CorpusSpec::default() };
        assert!(matches!(synthesize_corpus(&spec), Err(Error::Config { .. })));
        // enough room for class cells but not for two-token bands
        let spec = CorpusSpec { vocab_size: 88, ..CorpusSpec::default() };
        assert!(matches!(synthesize_corpus(&spec), Err(Error::Config { .. })));
    }

    #[test]
    fn realization_cells_are_disjoint_and_class_identifying() {
        let layout = VocabLayout::from_spec(&small_spec()).unwrap();
        let spec = small_spec();
        let mut seen = std::collections::HashSet::new();
        for c in 0..spec.num_classes {
            for g in 0..spec.num_groups {
                for t in layout.cell_tokens(c, g) {
                    assert!(seen.insert(t), "token {t} in two cells");
                    assert!(layout.class_tokens(c).contains(&t));
                    assert_eq!(layout.class_of_token(t as u32), Some(c));
                    assert_eq!(layout.group_of_token(t as u32), None);
                }
            }
        }
        assert_eq!(seen.len(), spec.num_classes * spec.num_groups * CLASS_TOKENS_PER_CELL);
        assert_eq!(layout.class_of_token(PAD_TOKEN), None);
        assert_eq!(layout.class_of_token(layout.band_region_start as u32), None);
    }

    #[test]
    fn full_realization_keeps_class_tokens_in_own_group_cell() {
        let spec = CorpusSpec { realization: 1.0, ..small_spec() };
        let layout = VocabLayout::from_spec(&spec).unwrap();
        let corpus = synthesize_corpus(&spec).unwrap();
        for ex in &corpus.train.examples {
            let own = layout.cell_tokens(ex.label, ex.group);
            for &t in &ex.tokens {
                if layout.class_of_token(t).is_some() {
                    assert!(own.contains(&(t as usize)), "token {t} outside own cell");
                }
            }
        }
    }

    #[test]
    fn zero_realization_spreads_class_tokens_across_groups() {
        let spec = CorpusSpec { realization: 0.0, ..small_spec() };
        let layout = VocabLayout::from_spec(&spec).unwrap();
        let corpus = synthesize_corpus(&spec).unwrap();
        // each (label, group) cell's examples should draw class tokens from
        // several groups' cells, not only their own
        let mut used: Vec<std::collections::HashSet<usize>> =
            vec![std::collections::HashSet::new(); spec.num_classes * spec.num_groups];
        for ex in &corpus.train.examples {
            for &t in &ex.tokens {
                if layout.class_of_token(t) == Some(ex.label) {
                    let off = (t as usize - layout.cell_tokens(ex.label, 0).start)
                        / CLASS_TOKENS_PER_CELL;
                    used[ex.label * spec.num_groups + ex.group].insert(off);
                }
            }
        }
        let spread = used.iter().filter(|s| s.len() >= 3).count();
        assert!(
            spread as f64 >= 0.9 * used.len() as f64,
            "only {spread}/{} cells drew from 3+ groups",
            used.len()
        );
    }

    #[test]
    fn jsonl_round_trip_preserves_examples() {
        let spec = small_spec();
        let corpus = synthesize_corpus(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.jsonl");
        save_jsonl(&corpus.test, &path).unwrap();
        let loaded = load_jsonl(&path, Some(corpus.test.dims)).unwrap();
        assert_eq!(loaded.examples, corpus.test.examples);
        assert_eq!(loaded.dims, corpus.test.dims);
    }

    #[test]
    fn jsonl_rejects_out_of_range_label_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[1,2],\"label\":0,\"group\":0}\n{\"tokens\":[1,2],\"label\":3,\"group\":0}\n",
        )
        .unwrap();
        let dims = DataDims { vocab_size: 8, num_classes: 3, num_groups: 1, seq_len: 2 };
        let err = load_jsonl(&path, Some(dims)).unwrap_err();
        match err {
            Error::ParseLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn jsonl_rejects_malformed_line_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"tokens\":[1],\"label\":0,\"group\":0}\nnot json\n").unwrap();
        let err = load_jsonl(&path, None).unwrap_err();
        match err {
            Error::ParseLine { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn jsonl_empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let ds = load_jsonl(&path, None).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn jsonl_pads_short_sequences() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pad.jsonl");
        std::fs::write(
            &path,
            "{\"tokens\":[5,6,7],\"label\":0,\"group\":0}\n{\"tokens\":[3],\"label\":1,\"group\":0}\n",
        )
        .unwrap();
        let ds = load_jsonl(&path, None).unwrap();
        assert_eq!(ds.dims.seq_len, 3);
        assert_eq!(ds.examples[1].tokens, vec![3, PAD_TOKEN, PAD_TOKEN]);
    }

    #[test]
    fn split_is_stratified_disjoint_and_covering() {
        let spec = small_spec();
        let corpus = synthesize_corpus(&spec).unwrap();
        let (train, test) = split(&corpus.train, 0.5, 3).unwrap();
        assert_eq!(train.len() + test.len(), corpus.train.len());
        // per-cell proportions within one example of the fraction
        let count = |ds: &Dataset, label: usize, group: usize| {
            ds.examples.iter().filter(|e| e.label == label && e.group == group).count() as f64
        };
        for label in 0..spec.num_classes {
            for group in 0..spec.num_groups {
                let total = count(&corpus.train, label, group);
                let t = count(&test, label, group);
                assert!(
                    (t - total * 0.5).abs() <= 1.0,
                    "cell ({label},{group}) test count {t} vs expected {}",
                    total * 0.5
                );
            }
        }
        // disjoint + covering as multisets: cell counts add up (checked above);
        // identical split under the same seed
        let (train2, test2) = split(&corpus.train, 0.5, 3).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
    }
}
