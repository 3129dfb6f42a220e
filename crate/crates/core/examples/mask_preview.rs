//! Writes PGM previews of one sample under every masking strategy.
//!
//!     cargo run --release --example mask_preview -- /tmp/previews

use std::fs;
use std::path::PathBuf;

use maskris::masking::{apply_image_mask, pgm_bytes, sample_image_mask, MaskStrategy};
use maskris::synthdata::{generate_dataset, SceneConfig};
use maskris::RngStream;

fn main() -> maskris::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "mask_previews".into()));
    fs::create_dir_all(&dir)?;
    let data = generate_dataset(0, 4, &SceneConfig::default())?;
    let rec = &data.records[0];
    let (h, w) = (data.height, data.width);
    fs::write(dir.join("original.pgm"), pgm_bytes(w, h, &rec.image.to_gray_u8()))?;
    for strategy in MaskStrategy::ALL {
        let mut rng = RngStream::new(0, "preview");
        let mask = sample_image_mask(strategy, h, w, 8, 0.75, &mut rng)?;
        let masked = apply_image_mask(&rec.image, &mask)?;
        fs::write(dir.join(format!("{strategy}_mask.pgm")), mask.to_pgm())?;
        fs::write(dir.join(format!("{strategy}_masked.pgm")), pgm_bytes(w, h, &masked.to_gray_u8()))?;
    }
    println!("\"{}\" -> {}", rec.expression, dir.display());
    Ok(())
}
