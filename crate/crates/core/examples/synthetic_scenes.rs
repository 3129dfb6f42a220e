//! Generates a few scenes and prints each expression with a coarse picture
//! of the image and its target mask.

use maskris::synthdata::{generate_dataset, SceneConfig, Tag};

fn main() -> maskris::Result<()> {
    let cfg = SceneConfig::default();
    let data = generate_dataset(3, 6, &cfg)?;
    for rec in &data.records {
        let tags: Vec<&str> = Tag::ALL.iter().filter(|t| rec.tags.contains(**t)).map(|t| t.name()).collect();
        println!("\"{}\" [{}]", rec.expression, tags.join(", "));
        // Every fourth pixel: image luma on the left, target on the right.
        let gray = rec.image.to_gray_u8();
        for y in (0..data.height).step_by(4) {
            let img: String = (0..data.width)
                .step_by(4)
                .map(|x| b" .:-=+*#%@"[gray[y * data.width + x] as usize * 9 / 255] as char)
                .collect();
            let gt: String = (0..data.width)
                .step_by(4)
                .map(|x| if rec.gt_mask.get(y, x) { '#' } else { '.' })
                .collect();
            println!("  {img}   {gt}");
        }
    }
    Ok(())
}
