//! Samples image masks with each strategy on a 64x64 image and prints the
//! patch grid.
//!
//!     cargo run --release --example patch_masking -- 0.75

use maskris::masking::{sample_image_mask, MaskStrategy};
use maskris::RngStream;

fn main() -> maskris::Result<()> {
    let ratio: f64 = std::env::args().nth(1).map_or(Ok(0.75), |s| s.parse()).expect("ratio");
    let (size, patch) = (64, 8);
    for strategy in MaskStrategy::ALL {
        let mut rng = RngStream::new(7, format!("example/{strategy}"));
        let mask = sample_image_mask(strategy, size, size, patch, ratio, &mut rng)?;
        println!(
            "{strategy}: {:.1}% of pixels masked",
            100.0 * mask.count() as f64 / (size * size) as f64
        );
        // One character per 8x8 patch, sampled at the patch center.
        for r in 0..size / patch {
            let row: String = (0..size / patch)
                .map(|c| if mask.get(r * patch + patch / 2, c * patch + patch / 2) { '#' } else { '.' })
                .collect();
            println!("  {row}");
        }
    }
    Ok(())
}
