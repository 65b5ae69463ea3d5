//! Synthetic fixtures shared by the benchmarks.

use langmerge_core::{Tensor, TensorMap};

/// `tensors` square matrices of side `dim`, filled with a cheap
/// deterministic pattern offset by `salt`.
pub fn synthetic_checkpoint(tensors: usize, dim: usize, salt: u64) -> TensorMap {
    (0..tensors)
        .map(|t| {
            let values = (0..dim * dim)
                .map(|i| ((i as u64 * 7919 + t as u64 * 104_729 + salt) % 2000) as f64 / 1000.0 - 1.0)
                .collect();
            let tensor = Tensor::f32(vec![dim, dim], values).expect("square shape");
            (format!("layers.{t}.q_proj.weight"), tensor)
        })
        .collect()
}

/// Whitespace-joined pseudo-words over a small vocabulary.
pub fn synthetic_sentence(words: usize, salt: usize) -> Vec<String> {
    const VOCAB: [&str; 8] = ["ka", "mu", "ntu", "ba", "li", "ye", "wa", "zo"];
    (0..words).map(|i| VOCAB[(i * 5 + salt * 3 + i / 3) % VOCAB.len()].to_string()).collect()
}
