//! Computation-graph assembly for every fine-tuning mode.
//!
//! One entry point, [`build_graph`], resolves named parameters against a
//! trainable set (bound as gradient-carrying leaves) and a frozen set (bound
//! as plain inputs, trainable names shadow frozen ones), then assembles the
//! encoder, the method-specific adaptation, and the classifier head on a
//! fresh tape. Conditioned-adapter methods generate their adapter weights
//! inside the same graph, so the classification gradient reaches the
//! generator and the conditioning projections end-to-end.

use std::collections::BTreeMap;

use crate::data::Dataset;
use crate::embed::{
    batch_label_distribution, compose_client_embedding, context_embedding,
    inference_label_distribution, label_embedding,
};
use crate::error::{Error, Result};
use crate::hypernet::{compose_weight, generate_adapter, generate_adapter_untied, C2aVariant};
use crate::model::{Method, ModelConfig};
use crate::params::ParamSet;
use crate::tensor::{PoolMode, Tape, TensorId};

/// A flattened mini-batch of token sequences.
#[derive(Debug, Clone)]
pub struct Batch {
    /// Row-major `[b, l]` token indices.
    pub tokens: Vec<usize>,
    /// One label per sequence; may be empty for unlabeled forward passes.
    pub labels: Vec<usize>,
    pub b: usize,
    pub l: usize,
}

impl Batch {
    pub fn from_dataset(ds: &Dataset, idx: &[usize]) -> Result<Batch> {
        if idx.is_empty() {
            return Err(Error::invalid("Batch::from_dataset", "empty index list"));
        }
        let l = ds.dims.seq_len;
        let mut tokens = Vec::with_capacity(idx.len() * l);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let ex = ds
                .examples
                .get(i)
                .ok_or_else(|| Error::IndexOutOfRange(format!("example {i}")))?;
            tokens.extend(ex.tokens.iter().map(|&t| t as usize));
            labels.push(ex.label);
        }
        Ok(Batch { tokens, labels, b: idx.len(), l })
    }
}

/// Whether conditioning uses the batch's real label distribution (training)
/// or the uniform substitute (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Inference,
}

/// The assembled graph: output ids plus the name → leaf-id map for every
/// bound parameter (trainable leaves carry gradients after `backward`).
pub struct Graph {
    pub logits: TensorId,
    pub loss: Option<TensorId>,
    pub binds: BTreeMap<String, TensorId>,
    /// Hidden states entering each block, `[b, l, d]` each.
    pub hiddens: Vec<TensorId>,
}

/// Resolve a parameter: trainable set first (gradient leaf), frozen second.
fn bind(
    tape: &mut Tape,
    binds: &mut BTreeMap<String, TensorId>,
    trainable: &ParamSet,
    frozen: &ParamSet,
    name: &str,
) -> Result<TensorId> {
    if let Some(&id) = binds.get(name) {
        return Ok(id);
    }
    let id = if trainable.contains(name) {
        tape.param(trainable.get(name)?)
    } else if frozen.contains(name) {
        tape.input(frozen.get(name)?)
    } else {
        return Err(Error::config(
            "parameters",
            format!("{name} found in neither trainable nor frozen set"),
        ));
    };
    binds.insert(name.to_string(), id);
    Ok(id)
}

fn id_of(binds: &BTreeMap<String, TensorId>, name: &str) -> Result<TensorId> {
    binds
        .get(name)
        .copied()
        .ok_or_else(|| Error::config("parameters", format!("{name} not bound")))
}

/// `[b*l, d] → [b*h, l, dh]`
fn to_heads(tape: &mut Tape, x: TensorId, b: usize, l: usize, h: usize, dh: usize) -> Result<TensorId> {
    let r1 = tape.reshape(x, vec![b, l, h, dh])?;
    let p = tape.permute(r1, &[0, 2, 1, 3])?;
    tape.reshape(p, vec![b * h, l, dh])
}

/// `[b*h, l, dh] → [b*l, d]`
fn from_heads(tape: &mut Tape, x: TensorId, b: usize, l: usize, h: usize, dh: usize) -> Result<TensorId> {
    let r1 = tape.reshape(x, vec![b, h, l, dh])?;
    let p = tape.permute(r1, &[0, 2, 1, 3])?;
    tape.reshape(p, vec![b * l, h * dh])
}

/// Residual bottleneck adapter: `x + GeLU(x Dᵀ) Uᵀ` with `D ∈ [r, d]`,
/// `U ∈ [d, r]` (the row-major transcription of `U GeLU(D x) + x`).
pub fn apply_adapter(
    tape: &mut Tape,
    x: TensorId,
    down: TensorId,
    up: TensorId,
) -> Result<TensorId> {
    let xs = tape.shape(x);
    let d = *xs.last().ok_or_else(|| Error::invalid("apply_adapter", "scalar input"))?;
    let (ds_, us) = (tape.shape(down).to_vec(), tape.shape(up).to_vec());
    if ds_.len() != 2 || us.len() != 2 || ds_[1] != d || us[0] != d || ds_[0] != us[1] {
        return Err(Error::ShapeMismatch {
            op: "apply_adapter",
            lhs: ds_,
            rhs: us,
        });
    }
    let dt = tape.transpose(down)?; // [d, r]
    let hidden = tape.matmul(x, dt)?; // [n, r]
    let act = tape.gelu(hidden);
    let ut = tape.transpose(up)?; // [r, d]
    let out = tape.matmul(act, ut)?; // [n, d]
    tape.add(out, x)
}

struct LoraIds {
    q: (TensorId, TensorId),
    v: (TensorId, TensorId),
}

fn attention(
    tape: &mut Tape,
    binds: &BTreeMap<String, TensorId>,
    cfg: &ModelConfig,
    block: usize,
    x2: TensorId,
    b: usize,
    l: usize,
    lora: Option<&LoraIds>,
) -> Result<TensorId> {
    let base = format!("backbone.block{block}.attn");
    let (h, dh) = (cfg.n_heads, cfg.head_dim());
    let project = |tape: &mut Tape, w: &str, bias: &str, lo: Option<(TensorId, TensorId)>| -> Result<TensorId> {
        let wid = id_of(binds, &format!("{base}.{w}"))?;
        let bid = id_of(binds, &format!("{base}.{bias}"))?;
        let mut p = tape.matmul(x2, wid)?;
        if let Some((a, bup)) = lo {
            let dp = tape.matmul(x2, a)?;
            let delta = tape.matmul(dp, bup)?;
            p = tape.add(p, delta)?;
        }
        tape.add_row_broadcast(p, bid)
    };
    let q = project(tape, "wq", "bq", lora.map(|lo| lo.q))?;
    let k = project(tape, "wk", "bk", None)?;
    let v = project(tape, "wv", "bv", lora.map(|lo| lo.v))?;

    let qh = to_heads(tape, q, b, l, h, dh)?;
    let kh = to_heads(tape, k, b, l, h, dh)?;
    let vh = to_heads(tape, v, b, l, h, dh)?;
    let scores = tape.bmm(qh, kh, true)?; // [b*h, l, l]
    let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
    let flat = tape.reshape(scaled, vec![b * h * l, l])?;
    let probs = tape.softmax_rows(flat);
    let p3 = tape.reshape(probs, vec![b * h, l, l])?;
    let ctx = tape.bmm(p3, vh, false)?; // [b*h, l, dh]
    let merged = from_heads(tape, ctx, b, l, h, dh)?;
    let wo = id_of(binds, &format!("{base}.wo"))?;
    let bo = id_of(binds, &format!("{base}.bo"))?;
    let out = tape.matmul(merged, wo)?;
    tape.add_row_broadcast(out, bo)
}

fn feed_forward(
    tape: &mut Tape,
    binds: &BTreeMap<String, TensorId>,
    block: usize,
    x2: TensorId,
) -> Result<TensorId> {
    let base = format!("backbone.block{block}.ffn");
    let w1 = id_of(binds, &format!("{base}.w1"))?;
    let b1 = id_of(binds, &format!("{base}.b1"))?;
    let w2 = id_of(binds, &format!("{base}.w2"))?;
    let b2 = id_of(binds, &format!("{base}.b2"))?;
    let h = tape.matmul(x2, w1)?;
    let h = tape.add_row_broadcast(h, b1)?;
    let act = tape.gelu(h);
    let out = tape.matmul(act, w2)?;
    tape.add_row_broadcast(out, b2)
}

/// Per-method adaptation state assembled once per graph.
enum Plan {
    Plain,
    FixedAdapters,
    Lora,
    Generated {
        /// Composed generation weight `[d, r*t]`, when factorized.
        composed: Option<TensorId>,
        /// Label-embedding summand, when enabled.
        label: Option<TensorId>,
        variant: C2aVariant,
    },
}

/// Adapter pair (down `[r, d]`, up `[d, r]`) for both sites of one block.
type BlockAdapters = (Option<(TensorId, TensorId)>, Option<(TensorId, TensorId)>);

fn block_adapters(
    tape: &mut Tape,
    binds: &BTreeMap<String, TensorId>,
    cfg: &ModelConfig,
    plan: &Plan,
    block: usize,
    hidden3: TensorId,
) -> Result<BlockAdapters> {
    match plan {
        Plan::Plain | Plan::Lora => Ok((None, None)),
        Plan::FixedAdapters => {
            let mut pair = Vec::with_capacity(2);
            for site in [2 * block, 2 * block + 1] {
                let down = id_of(binds, &format!("adapter.site{site}.down"))?;
                let up = id_of(binds, &format!("adapter.site{site}.up"))?;
                pair.push(Some((down, up)));
            }
            Ok((pair[0], pair[1]))
        }
        Plan::Generated { composed, label, variant } => {
            let context = if variant.use_context {
                let w = id_of(binds, "embed.ctx.w")?;
                let bb = id_of(binds, "embed.ctx.b")?;
                Some(context_embedding(tape, hidden3, w, bb)?)
            } else {
                None
            };
            let site_table = id_of(binds, "embed.site")?;
            let mut pair = Vec::with_capacity(2);
            for site in [2 * block, 2 * block + 1] {
                let site_row = tape.gather_rows(site_table, &[site])?;
                let cond = compose_client_embedding(tape, *label, context, site_row)?;
                let (u, dn) = if variant.factorized {
                    let composed = composed.ok_or_else(|| {
                        Error::config("hypernet", "factorized plan missing composed weight")
                    })?;
                    generate_adapter(tape, composed, cond, cfg.d, cfg.r, cfg.t)?
                } else {
                    let wu = id_of(binds, "hyper.w_u")?;
                    let wd = id_of(binds, "hyper.w_d")?;
                    generate_adapter_untied(tape, wu, wd, cond, cfg.d, cfg.r, cfg.t)?
                };
                pair.push(Some((dn, u)));
            }
            Ok((pair[0], pair[1]))
        }
    }
}

fn maybe_adapter(tape: &mut Tape, x: TensorId, a: Option<(TensorId, TensorId)>) -> Result<TensorId> {
    match a {
        Some((down, up)) => apply_adapter(tape, x, down, up),
        None => Ok(x),
    }
}

/// All parameter names a forward pass of `method` consults.
fn needed_names(cfg: &ModelConfig, method: Method, with_head: bool) -> Vec<String> {
    let mut names = vec!["backbone.tok_embed".to_string(), "backbone.pos_embed".to_string()];
    for i in 0..cfg.n_layers {
        let b = format!("backbone.block{i}");
        for w in ["wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo"] {
            names.push(format!("{b}.attn.{w}"));
        }
        for w in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
            names.push(format!("{b}.{w}"));
        }
        for w in ["w1", "b1", "w2", "b2"] {
            names.push(format!("{b}.ffn.{w}"));
        }
    }
    if with_head {
        names.push("head.weight".into());
        names.push("head.bias".into());
    }
    match method {
        Method::Adapter => {
            for k in 0..cfg.n_sites() {
                names.push(format!("adapter.site{k}.down"));
                names.push(format!("adapter.site{k}.up"));
            }
        }
        Method::Lora => {
            for i in 0..cfg.n_layers {
                for proj in ["q", "v"] {
                    names.push(format!("lora.block{i}.{proj}.a"));
                    names.push(format!("lora.block{i}.{proj}.b"));
                }
            }
        }
        Method::BitFit | Method::Full => {}
        m => {
            let variant = m.c2a_variant().expect("conditioned-adapter method");
            if variant.factorized {
                names.push("hyper.factor".into());
                names.push("hyper.scale".into());
            } else {
                names.push("hyper.w_u".into());
                names.push("hyper.w_d".into());
            }
            if variant.use_label {
                names.push("embed.label.w".into());
                names.push("embed.label.b".into());
            }
            if variant.use_context {
                names.push("embed.ctx.w".into());
                names.push("embed.ctx.b".into());
            }
            names.push("embed.site".into());
        }
    }
    names
}

/// Assemble the full classification graph for one mini-batch.
///
/// `trainable` names shadow `frozen` ones; gradient leaves are exactly the
/// parameters found in `trainable`. With labels present a mean cross-entropy
/// loss node is added. `mode` picks the conditioning label distribution:
/// the batch's own in training, uniform at inference.
pub fn build_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    method: Method,
    frozen: &ParamSet,
    trainable: &ParamSet,
    batch: &Batch,
    mode: Mode,
) -> Result<Graph> {
    cfg.validate()?;
    let (b, l) = (batch.b, batch.l);
    if b == 0 || l == 0 || batch.tokens.len() != b * l {
        return Err(Error::invalid("build_graph", "inconsistent batch shape"));
    }
    if l > cfg.max_seq_len {
        return Err(Error::invalid(
            "build_graph",
            format!("sequence length {l} exceeds max {}", cfg.max_seq_len),
        ));
    }
    if let Some(&t) = batch.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::IndexOutOfRange(format!("token {t} out of vocab range")));
    }
    if mode == Mode::Train && batch.labels.len() != b {
        return Err(Error::invalid("build_graph", "training batch needs one label per row"));
    }

    let mut binds = BTreeMap::new();
    for name in needed_names(cfg, method, true) {
        bind(tape, &mut binds, trainable, frozen, &name)?;
    }

    // token + position embeddings
    let tok = id_of(&binds, "backbone.tok_embed")?;
    let pos = id_of(&binds, "backbone.pos_embed")?;
    let emb = tape.gather_rows(tok, &batch.tokens)?; // [b*l, d]
    let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pose = tape.gather_rows(pos, &pos_idx)?;
    let mut x2 = tape.add(emb, pose)?;

    // method plan
    let plan = match method {
        Method::BitFit | Method::Full => Plan::Plain,
        Method::Adapter => Plan::FixedAdapters,
        Method::Lora => Plan::Lora,
        m => {
            let variant = m.c2a_variant().expect("conditioned-adapter method");
            let composed = if variant.factorized {
                let f = id_of(&binds, "hyper.factor")?;
                let s = id_of(&binds, "hyper.scale")?;
                Some(compose_weight(tape, f, s, variant.normalized)?) // [d, r*t]
            } else {
                None
            };
            let label = if variant.use_label {
                let dist = match mode {
                    Mode::Train => batch_label_distribution(&batch.labels, cfg.num_classes)?,
                    Mode::Inference => inference_label_distribution(cfg.num_classes),
                };
                let did = tape.input_from(vec![1, cfg.num_classes], dist)?;
                let w = id_of(&binds, "embed.label.w")?;
                let bb = id_of(&binds, "embed.label.b")?;
                Some(label_embedding(tape, did, w, bb)?)
            } else {
                None
            };
            Plan::Generated { composed, label, variant }
        }
    };

    let lora_ids: Option<Vec<LoraIds>> = match method {
        Method::Lora => {
            let mut v = Vec::with_capacity(cfg.n_layers);
            for i in 0..cfg.n_layers {
                v.push(LoraIds {
                    q: (
                        id_of(&binds, &format!("lora.block{i}.q.a"))?,
                        id_of(&binds, &format!("lora.block{i}.q.b"))?,
                    ),
                    v: (
                        id_of(&binds, &format!("lora.block{i}.v.a"))?,
                        id_of(&binds, &format!("lora.block{i}.v.b"))?,
                    ),
                });
            }
            Some(v)
        }
        _ => None,
    };

    // encoder blocks
    let mut hiddens = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let h3 = tape.reshape(x2, vec![b, l, cfg.d])?;
        hiddens.push(h3);
        let (site0, site1) = block_adapters(tape, &binds, cfg, &plan, i, h3)?;

        let lora = lora_ids.as_ref().map(|v| &v[i]);
        let attn = attention(tape, &binds, cfg, i, x2, b, l, lora)?;
        let attn = maybe_adapter(tape, attn, site0)?;
        let s1 = tape.add(x2, attn)?;
        let g1 = id_of(&binds, &format!("backbone.block{i}.ln1.gain"))?;
        let b1 = id_of(&binds, &format!("backbone.block{i}.ln1.bias"))?;
        let x = tape.layer_norm(s1, g1, b1)?;

        let ff = feed_forward(tape, &binds, i, x)?;
        let ff = maybe_adapter(tape, ff, site1)?;
        let s2 = tape.add(x, ff)?;
        let g2 = id_of(&binds, &format!("backbone.block{i}.ln2.gain"))?;
        let b2 = id_of(&binds, &format!("backbone.block{i}.ln2.bias"))?;
        x2 = tape.layer_norm(s2, g2, b2)?;
    }

    // mean-pooled classifier head
    let h3 = tape.reshape(x2, vec![b, l, cfg.d])?;
    let pooled = tape.pool(h3, 1, PoolMode::Mean)?; // [b, d]
    let hw = id_of(&binds, "head.weight")?;
    let hb = id_of(&binds, "head.bias")?;
    let proj = tape.matmul(pooled, hw)?;
    let logits = tape.add_row_broadcast(proj, hb)?;

    let loss = if batch.labels.len() == b {
        Some(tape.softmax_cross_entropy(logits, &batch.labels)?)
    } else {
        None
    };

    Ok(Graph { logits, loss, binds, hiddens })
}

/// Encode masked tokens and score every masked position against the token
/// embedding table (tied output weights) for the pretraining objective.
///
/// With `trainable = true` the whole backbone binds as gradient leaves and a
/// mean cross-entropy loss over `targets` is added; otherwise the pass is
/// evaluation-only and `loss` is `None`. `masked` lists flat positions into
/// `[b*l]` and `targets` their original token ids.
pub fn build_masked_token_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    backbone: &ParamSet,
    trainable: bool,
    tokens_masked: &[usize],
    b: usize,
    l: usize,
    masked: &[usize],
    targets: &[usize],
) -> Result<(TensorId, Option<TensorId>, BTreeMap<String, TensorId>)> {
    if masked.is_empty() || masked.len() != targets.len() {
        return Err(Error::invalid(
            "build_masked_token_graph",
            "need equal, nonempty masked positions and targets",
        ));
    }
    if tokens_masked.len() != b * l {
        return Err(Error::invalid("build_masked_token_graph", "inconsistent batch shape"));
    }
    let empty = ParamSet::new();
    let mut binds = BTreeMap::new();
    for name in needed_names(cfg, Method::Full, false) {
        if trainable {
            bind(tape, &mut binds, backbone, &empty, &name)?;
        } else {
            bind(tape, &mut binds, &empty, backbone, &name)?;
        }
    }
    let tok = id_of(&binds, "backbone.tok_embed")?;
    let pos = id_of(&binds, "backbone.pos_embed")?;
    let emb = tape.gather_rows(tok, tokens_masked)?;
    let pos_idx: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pose = tape.gather_rows(pos, &pos_idx)?;
    let mut x2 = tape.add(emb, pose)?;
    for i in 0..cfg.n_layers {
        let attn = attention(tape, &binds, cfg, i, x2, b, l, None)?;
        let s1 = tape.add(x2, attn)?;
        let g1 = id_of(&binds, &format!("backbone.block{i}.ln1.gain"))?;
        let b1 = id_of(&binds, &format!("backbone.block{i}.ln1.bias"))?;
        let x = tape.layer_norm(s1, g1, b1)?;
        let ff = feed_forward(tape, &binds, i, x)?;
        let s2 = tape.add(x, ff)?;
        let g2 = id_of(&binds, &format!("backbone.block{i}.ln2.gain"))?;
        let b2 = id_of(&binds, &format!("backbone.block{i}.ln2.bias"))?;
        x2 = tape.layer_norm(s2, g2, b2)?;
    }
    let picked = tape.gather_rows(x2, masked)?; // [m, d]
    let tok_t = tape.transpose(tok)?; // [d, V]
    let logits = tape.matmul(picked, tok_t)?; // [m, V]
    let loss = if trainable {
        Some(tape.softmax_cross_entropy(logits, targets)?)
    } else {
        None
    };
    Ok((logits, loss, binds))
}
