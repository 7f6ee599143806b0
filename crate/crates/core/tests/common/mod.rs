#![allow(dead_code)]

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mpl_core::data_synth::{build_vocab, generate_corpus, CorpusSpec, Domain, Vocabulary};
use mpl_core::model::ModelConfig;
use mpl_core::numeric::Tensor;
use mpl_core::training::{encode_all, Example};

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Central difference of `f` with respect to each listed coordinate of `x`.
pub fn central_diff(x: &mut [f64], coords: &[usize], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let keep = x[i];
            x[i] = keep + FD_STEP;
            let up = f(x);
            x[i] = keep - FD_STEP;
            let down = f(x);
            x[i] = keep;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Gradients smaller than this are compared in absolute terms. Some are exactly
/// zero by symmetry (a bias shared by every attention key), where both sides
/// are round-off; the difference quotient alone carries about
/// `f64::EPSILON · |L| / FD_STEP ≈ 1e-11` of it.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `‖a − b‖ / max(‖a‖, ‖b‖, GRAD_FLOOR)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(GRAD_FLOOR)
}

/// Up to `k` distinct indices below `n`, sorted, fixed by `seed`.
pub fn sample_coords(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = sample(&mut rng, n, k.min(n)).into_vec();
    v.sort_unstable();
    v
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::normal(shape, 1.0, &mut rng).with_grad(true)
}

/// Two-layer, d = 16, two prompts per bank.
pub fn grad_model(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d: 16,
        n_heads: 2,
        n_enc_layers: 2,
        n_dec_layers: 2,
        ffn_width: 32,
        vocab_size,
        max_title_len: 12,
        max_input_len: 16,
        image_feature_dim: 6,
        image_seq_len: 4,
        n_prompts: 2,
        dropout: 0.1,
        align_scale: 1.0,
    }
}

pub fn small_spec(n_products: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_products,
        image_feature_dim: 6,
        image_seq_len: 4,
        domain: Domain::Novel,
        seed,
        ..CorpusSpec::default()
    }
}

/// Encoded examples of a small novel-domain corpus, its vocabulary, and a model sized for it.
pub fn small_task(n_products: usize, seed: u64) -> (Vec<Example>, Vocabulary, ModelConfig) {
    let records = generate_corpus(&small_spec(n_products, seed)).unwrap();
    let vocab = build_vocab(&records);
    let model = grad_model(vocab.len());
    let examples = encode_all(&records, &vocab, &model).unwrap();
    (examples, vocab, model)
}
