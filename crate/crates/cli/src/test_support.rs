//! Shared fixtures for the crate's unit tests.

/// A deliberately tiny experiment: 48 training examples, 4 clients,
/// 2 rounds, 10 pretraining steps — fast enough for every unit test.
pub(crate) const TINY: &str = r#"
[corpus]
vocab_size = 64
num_classes = 4
num_groups = 2
train_per_cell = 6
test_per_cell = 2
seq_len = 8
pretrain_examples = 40

[model]
d = 16
n_layers = 1
n_heads = 2
ffn = 24
r = 2
t = 4
s = 4

[pretrain]
steps = 10
batch = 8

[partition]
clients = 4
beta = 1.0

[train]
method = "c2a"
rounds = 2
fraction = 0.5
batch_size = 8

[run]
probe_size = 8
eval_chunk = 16
targets = [0.2, 0.99]
"#;
