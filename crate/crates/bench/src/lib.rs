//! Fixtures shared by the benchmarks.

use ffkv_core::lm::{Model, ModelConfig, Tokenizer};
use ffkv_core::numerics::{Matrix, RngStream};

/// An untrained model at desk shape (2 layers, d_model 64, d_FF 256).
pub fn desk_model(seed: u64) -> Model {
    let tok = Tokenizer::byte_level();
    let mut cfg = ModelConfig::desk(tok.vocab_size());
    cfg.seed = seed;
    Model::random_init(&cfg, tok).expect("desk config is valid")
}

/// Standard-normal rows standing in for captured sublayer inputs.
pub fn inputs(rows: usize, cols: usize, seed: u64) -> Matrix {
    RngStream::new(seed, 0xbe).normal_matrix(rows, cols, 1.0)
}

/// Two noisy linearly separable classes.
pub fn probe_data(rows: usize, cols: usize, seed: u64) -> (Matrix, Vec<usize>) {
    let mut x = inputs(rows, cols, seed);
    let y: Vec<usize> = (0..rows).map(|r| r % 2).collect();
    for (r, &c) in y.iter().enumerate() {
        x.set(r, 0, x.get(r, 0) + if c == 1 { 1.5 } else { -1.5 });
    }
    (x, y)
}
