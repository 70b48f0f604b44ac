//! Micro-transformer encoder classifier with pluggable fine-tuning modes.
//!
//! The backbone is a post-layer-norm transformer encoder. Each block carries
//! two residual-adapter sites (after attention, after the feed-forward), so a
//! model with `n_layers` blocks has `2 * n_layers` sites, indexed
//! `2*block + {0: post-attention, 1: post-ffn}`.

pub mod eval;
pub mod forward;
pub mod pretrain;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypernet::C2aVariant;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Which parameter subset trains and how adapters are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Client-conditioned generated adapters (tied, factorized, normalized).
    C2a,
    /// Ablation: direct (unfactorized, untied) generation weights.
    C2aUnfactorized,
    /// Ablation: label embedding removed from the conditioning vector.
    C2aNoLe,
    /// Ablation: context embedding removed from the conditioning vector.
    C2aNoCe,
    /// Ablation: composed generation weight not Frobenius-normalized.
    C2aNoNorm,
    /// Plain trainable residual adapters at every site.
    Adapter,
    /// Low-rank additive factors on the attention query/value projections.
    Lora,
    /// Bias-only fine-tuning.
    BitFit,
    /// Every parameter trains.
    Full,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::C2a,
        Method::C2aUnfactorized,
        Method::C2aNoLe,
        Method::C2aNoCe,
        Method::C2aNoNorm,
        Method::Adapter,
        Method::Lora,
        Method::BitFit,
        Method::Full,
    ];

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "c2a" => Ok(Method::C2a),
            "c2a_unfactorized" => Ok(Method::C2aUnfactorized),
            "c2a_no_le" => Ok(Method::C2aNoLe),
            "c2a_no_ce" => Ok(Method::C2aNoCe),
            "c2a_no_norm" => Ok(Method::C2aNoNorm),
            "adapter" => Ok(Method::Adapter),
            "lora" => Ok(Method::Lora),
            "bitfit" => Ok(Method::BitFit),
            "full" => Ok(Method::Full),
            other => Err(Error::config("method", format!("unknown method {other}"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Method::C2a => "c2a",
            Method::C2aUnfactorized => "c2a_unfactorized",
            Method::C2aNoLe => "c2a_no_le",
            Method::C2aNoCe => "c2a_no_ce",
            Method::C2aNoNorm => "c2a_no_norm",
            Method::Adapter => "adapter",
            Method::Lora => "lora",
            Method::BitFit => "bitfit",
            Method::Full => "full",
        }
    }

    pub fn is_c2a(&self) -> bool {
        self.c2a_variant().is_some()
    }

    /// The generation variant for conditioned-adapter methods, `None` for
    /// the baselines.
    pub fn c2a_variant(&self) -> Option<C2aVariant> {
        let base = C2aVariant {
            factorized: true,
            tied: true,
            normalized: true,
            use_label: true,
            use_context: true,
        };
        match self {
            Method::C2a => Some(base),
            Method::C2aUnfactorized => Some(C2aVariant { factorized: false, tied: false, ..base }),
            Method::C2aNoLe => Some(C2aVariant { use_label: false, ..base }),
            Method::C2aNoCe => Some(C2aVariant { use_context: false, ..base }),
            Method::C2aNoNorm => Some(C2aVariant { normalized: false, ..base }),
            _ => None,
        }
    }
}

/// Static architecture dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Hidden width.
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Feed-forward inner width.
    pub ffn: usize,
    /// Adapter bottleneck width.
    pub r: usize,
    pub num_classes: usize,
    /// Conditioning-vector width (conditioned-adapter methods).
    pub t: usize,
    /// Latent factor width of the factorized generator.
    pub s: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: 256,
            max_seq_len: 16,
            d: 32,
            n_layers: 2,
            n_heads: 2,
            ffn: 48,
            r: 4,
            num_classes: 8,
            t: 8,
            s: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_layers == 0 || self.n_heads == 0 || self.ffn == 0 {
            return Err(Error::config("model", "all dimensions must be positive"));
        }
        if self.d % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("hidden dim {} not divisible by {} heads", self.d, self.n_heads),
            ));
        }
        if self.r == 0 || self.r >= self.d {
            return Err(Error::config("r", format!("bottleneck {} must be in (0, {})", self.r, self.d)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.vocab_size < 2 || self.max_seq_len == 0 {
            return Err(Error::config("model", "vocab_size >= 2 and max_seq_len >= 1 required"));
        }
        if self.t == 0 || self.s == 0 {
            return Err(Error::config("model", "t and s must be positive"));
        }
        Ok(())
    }

    /// Number of adapter sites (two per block).
    pub fn n_sites(&self) -> usize {
        2 * self.n_layers
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Initialize the frozen-able encoder parameters (no classifier head).
///
/// Weights draw from N(0, 0.02^2) in a fixed name order; biases start at
/// zero; layer-norm gains at one.
pub fn init_backbone(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamSet {
    const STD: f64 = 0.02;
    let mut p = ParamSet::new();
    p.insert("backbone.tok_embed", Tensor::randn(vec![cfg.vocab_size, cfg.d], STD, rng));
    p.insert("backbone.pos_embed", Tensor::randn(vec![cfg.max_seq_len, cfg.d], STD, rng));
    for i in 0..cfg.n_layers {
        let b = format!("backbone.block{i}");
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(format!("{b}.attn.{w}"), Tensor::randn(vec![cfg.d, cfg.d], STD, rng));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            p.insert(format!("{b}.attn.{bias}"), Tensor::zeros(vec![cfg.d]));
        }
        p.insert(format!("{b}.ln1.gain"), Tensor::new(vec![cfg.d], vec![1.0; cfg.d]).unwrap());
        p.insert(format!("{b}.ln1.bias"), Tensor::zeros(vec![cfg.d]));
        p.insert(format!("{b}.ffn.w1"), Tensor::randn(vec![cfg.d, cfg.ffn], STD, rng));
        p.insert(format!("{b}.ffn.b1"), Tensor::zeros(vec![cfg.ffn]));
        p.insert(format!("{b}.ffn.w2"), Tensor::randn(vec![cfg.ffn, cfg.d], STD, rng));
        p.insert(format!("{b}.ffn.b2"), Tensor::zeros(vec![cfg.d]));
        p.insert(format!("{b}.ln2.gain"), Tensor::new(vec![cfg.d], vec![1.0; cfg.d]).unwrap());
        p.insert(format!("{b}.ln2.bias"), Tensor::zeros(vec![cfg.d]));
    }
    p
}

/// Initialize the classifier head (trainable and shared by every method).
pub fn init_head(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("head.weight", Tensor::randn(vec![cfg.d, cfg.num_classes], 0.02, rng));
    p.insert("head.bias", Tensor::zeros(vec![cfg.num_classes]));
    p
}

/// Initialize the method-specific extra parameters.
///
/// Vanilla adapters and LoRA zero-initialize their up/output factors so the
/// initial forward pass equals the frozen backbone. Conditioned-adapter
/// methods initialize generator and embedding weights from N(0, 0.02^2)
/// (the normalized composed weight is scale-free, so zero init would be
/// degenerate).
pub fn init_peft(cfg: &ModelConfig, method: Method, rng: &mut impl Rng) -> ParamSet {
    const STD: f64 = 0.02;
    let mut p = ParamSet::new();
    match method {
        Method::Adapter => {
            for k in 0..cfg.n_sites() {
                p.insert(format!("adapter.site{k}.down"), Tensor::randn(vec![cfg.r, cfg.d], STD, rng));
                p.insert(format!("adapter.site{k}.up"), Tensor::zeros(vec![cfg.d, cfg.r]));
            }
        }
        Method::Lora => {
            for i in 0..cfg.n_layers {
                for proj in ["q", "v"] {
                    p.insert(
                        format!("lora.block{i}.{proj}.a"),
                        Tensor::randn(vec![cfg.d, cfg.r], STD, rng),
                    );
                    p.insert(format!("lora.block{i}.{proj}.b"), Tensor::zeros(vec![cfg.r, cfg.d]));
                }
            }
        }
        Method::BitFit | Method::Full => {}
        m => {
            let variant = m.c2a_variant().expect("conditioned-adapter method");
            if variant.factorized {
                p.insert("hyper.factor", Tensor::randn(vec![cfg.d, cfg.s], STD, rng));
                p.insert("hyper.scale", Tensor::randn(vec![cfg.s, cfg.r * cfg.t], STD, rng));
            } else {
                p.insert("hyper.w_u", Tensor::randn(vec![cfg.d * cfg.r, cfg.t], STD, rng));
                p.insert("hyper.w_d", Tensor::randn(vec![cfg.r * cfg.d, cfg.t], STD, rng));
            }
            p.insert("embed.label.w", Tensor::randn(vec![cfg.num_classes, cfg.t], STD, rng));
            p.insert("embed.label.b", Tensor::zeros(vec![cfg.t]));
            p.insert("embed.ctx.w", Tensor::randn(vec![cfg.d, cfg.t], STD, rng));
            p.insert("embed.ctx.b", Tensor::zeros(vec![cfg.t]));
            p.insert("embed.site", Tensor::randn(vec![cfg.n_sites(), cfg.t], STD, rng));
        }
    }
    p
}

/// Names of the parameters that train (and federate) for a method.
///
/// The classifier head always trains. Ablations that drop a conditioning
/// component also drop its projection parameters from the trainable set.
pub fn trainable_names(cfg: &ModelConfig, method: Method) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    match method {
        Method::Full => {
            names.push("backbone.tok_embed".into());
            names.push("backbone.pos_embed".into());
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
        }
        Method::BitFit => {
            for i in 0..cfg.n_layers {
                let b = format!("backbone.block{i}");
                for w in ["bq", "bk", "bv", "bo"] {
                    names.push(format!("{b}.attn.{w}"));
                }
                names.push(format!("{b}.ln1.bias"));
                names.push(format!("{b}.ln2.bias"));
                names.push(format!("{b}.ffn.b1"));
                names.push(format!("{b}.ffn.b2"));
            }
        }
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
    names.push("head.weight".into());
    names.push("head.bias".into());
    names.sort();
    names
}

/// Assemble the per-method parameter split from a (typically pretrained)
/// backbone: initialize the classifier head and method-specific parameters
/// from substreams of `seed`, then divide everything into a frozen and a
/// trainable [`ParamSet`] according to [`trainable_names`].
pub fn init_for_method(
    cfg: &ModelConfig,
    method: Method,
    backbone: &ParamSet,
    seed: u64,
) -> Result<(ParamSet, ParamSet)> {
    let mut all = backbone.clone();
    for (n, t) in init_head(cfg, &mut crate::rng::substream(seed, "init-head", &[])).iter() {
        all.insert(n, t.clone());
    }
    let peft = init_peft(cfg, method, &mut crate::rng::substream(seed, "init-peft", &[]));
    for (n, t) in peft.iter() {
        all.insert(n, t.clone());
    }
    let names = trainable_names(cfg, method);
    let mut trainable = all.subset(&names)?;
    trainable.set_trainable(true);
    let mut frozen = ParamSet::new();
    for (n, t) in all.iter() {
        if !names.iter().any(|x| x == n) {
            frozen.insert(n, t.clone());
        }
    }
    frozen.set_trainable(false);
    Ok((frozen, trainable))
}

/// Exact trainable-scalar count and its share of the model total.
pub fn count_trainable(cfg: &ModelConfig, method: Method) -> (usize, f64) {
    let mut rng = crate::rng::substream(0, "count-scratch", &[]);
    let mut all = init_backbone(cfg, &mut rng);
    for (n, t) in init_head(cfg, &mut rng).iter() {
        all.insert(n, t.clone());
    }
    for (n, t) in init_peft(cfg, method, &mut rng).iter() {
        all.insert(n, t.clone());
    }
    let total = all.scalar_count();
    let trainable: usize = trainable_names(cfg, method)
        .iter()
        .map(|n| all.get(n).map(|t| t.numel()).unwrap_or(0))
        .sum();
    (trainable, trainable as f64 / total as f64)
}
