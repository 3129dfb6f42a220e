//! Compares the analytic backward pass with central differences on one
//! small random instance.

use maskris::model::{backward, forward, init_params, ModelConfig};
use maskris::text::{tokenize, Vocabulary};
use maskris::{ImageBuffer, RngStream};

fn main() -> maskris::Result<()> {
    let cfg = ModelConfig {
        image_height: 16,
        image_width: 16,
        ..Default::default()
    };
    let mut rng = RngStream::new(5, "example/gradcheck");
    let state = init_params(cfg, &mut rng)?;
    let data = (0..16 * 16 * 3).map(|_| rng.uniform() as f32).collect();
    let img = ImageBuffer::from_raw(16, 16, data)?;
    let toks = tokenize("left red square", &Vocabulary::standard(), 20);
    let w: Vec<f64> = (0..256).map(|_| rng.uniform_range(-1.0, 1.0)).collect();

    let probe = |s: &maskris::model::ModelState| -> f64 {
        let (p, _) = forward(s, &img, &toks).unwrap();
        p.probs().iter().zip(&w).map(|(p, w)| p * w).sum()
    };
    let (_, cache) = forward(&state, &img, &toks)?;
    let grads = backward(&state, &cache, &w)?;

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut s = state.clone();
    for i in 0..state.num_params() {
        s.params[i] = state.params[i] + h;
        let up = probe(&s);
        s.params[i] = state.params[i] - h;
        let down = probe(&s);
        s.params[i] = state.params[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = grads.0[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((grads.0[i] - numeric).abs() / denom);
    }
    println!("{} parameters, max relative error {worst:.2e}", state.num_params());
    Ok(())
}
