//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use maskris::model::{backward, forward, init_params, ModelConfig, ModelState};
use maskris::text::{TokenSequence, Vocabulary, PAD};
use maskris::{ImageBuffer, RngStream};

/// Entries smaller than this are compared on an absolute scale: central
/// differences of an O(1) probe carry ~1e-11 of rounding error.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn small_config() -> ModelConfig {
    ModelConfig {
        image_height: 16,
        image_width: 16,
        ..Default::default()
    }
}

/// Random 16×16 instance with a 4-word expression. Odd seeds zero one whole
/// patch so the blank-patch branch of the encoder is exercised.
pub fn random_instance(seed: u64) -> (ModelState, ImageBuffer, TokenSequence, Vec<f64>) {
    let cfg = small_config();
    let mut rng = RngStream::new(seed, "gradcheck");
    let mut state = init_params(cfg, &mut rng).unwrap();
    // Spread the parameters so attention and tanh are away from their
    // linear regimes.
    for p in state.params.iter_mut() {
        *p += rng.uniform_range(-0.3, 0.3);
    }
    let mut data: Vec<f32> = (0..16 * 16 * 3)
        .map(|_| if rng.bernoulli(0.2) { 0.0 } else { rng.uniform() as f32 })
        .collect();
    if seed % 2 == 1 {
        let (py, px) = (rng.below(2) * 8, rng.below(2) * 8);
        for y in py..py + 8 {
            for x in px..px + 8 {
                data[(y * 16 + x) * 3..(y * 16 + x) * 3 + 3].fill(0.0);
            }
        }
    }
    let img = ImageBuffer::from_raw(16, 16, data).unwrap();
    let vocab = Vocabulary::standard();
    let mut ids: Vec<u16> = (0..4).map(|_| rng.between(1, vocab.len() - 1) as u16).collect();
    ids.resize(20, PAD);
    let toks = TokenSequence::new(ids, 4).unwrap();
    let w = (0..256).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
    (state, img, toks, w)
}

/// Scalar probe `Σ w_i · p_i` evaluated by a fresh forward pass.
fn probe(state: &ModelState, img: &ImageBuffer, toks: &TokenSequence, w: &[f64]) -> f64 {
    let (pred, _) = forward(state, img, toks).unwrap();
    pred.probs().iter().zip(w).map(|(p, w)| p * w).sum()
}

/// Largest relative error between analytic and central-difference
/// gradients (h = 1e-4) over all parameters.
pub fn max_rel_error(seed: u64) -> f64 {
    let (state, img, toks, w) = random_instance(seed);
    let (_, cache) = forward(&state, &img, &toks).unwrap();
    let grads = backward(&state, &cache, &w).unwrap();
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut probe_state = state.clone();
    for i in 0..state.num_params() {
        let orig = state.params[i];
        probe_state.params[i] = orig + h;
        let up = probe(&probe_state, &img, &toks, &w);
        probe_state.params[i] = orig - h;
        let down = probe(&probe_state, &img, &toks, &w);
        probe_state.params[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads.0[i];
        let denom = analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max((analytic - numeric).abs() / denom);
    }
    worst
}
