//! Trains the three modes on a small dataset and compares validation
//! metrics, overall and on samples with occluded referents.
//!
//!     cargo run --release --example train_dcl -- 1000 10

use maskris::metrics::evaluate;
use maskris::synthdata::{generate_dataset, SceneConfig, Tag};
use maskris::trainer::{train, TrainConfig, TrainMode};

fn main() -> maskris::Result<()> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map_or(800, |s| s.parse().expect("count"));
    let epochs: usize = args.next().map_or(8, |s| s.parse().expect("epochs"));

    let data = generate_dataset(1, count, &SceneConfig::default())?;
    let occluded: Vec<_> = data.val().into_iter().filter(|s| s.tags.contains(Tag::Occlusion)).collect();
    println!("{} train, {} val ({} occluded)", data.train().len(), data.val().len(), occluded.len());

    for mode in TrainMode::ALL {
        let mut cfg = TrainConfig::for_mode(mode);
        cfg.epochs = epochs;
        let (state, stats) = train(&cfg, &data)?;
        let last = stats.last_val().expect("validation row");
        let occ = evaluate(&state, &occluded)?;
        println!(
            "{mode:>8}: val mIoU {:.4}  oIoU {:.4}  occluded mIoU {:.4}",
            last.val_miou.unwrap_or(f64::NAN),
            last.val_oiou.unwrap_or(f64::NAN),
            occ.miou
        );
    }
    Ok(())
}
