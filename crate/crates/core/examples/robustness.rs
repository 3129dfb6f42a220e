//! Trains a short baseline run and prints the corruption and tag report.

use maskris::metrics::{robustness_report, text_table};
use maskris::synthdata::{generate_dataset, CorruptionKind, SceneConfig};
use maskris::trainer::{train, TrainConfig, TrainMode};

fn main() -> maskris::Result<()> {
    let data = generate_dataset(2, 600, &SceneConfig::default())?;
    let mut cfg = TrainConfig::for_mode(TrainMode::Baseline);
    cfg.epochs = 6;
    let (state, _) = train(&cfg, &data)?;
    let report = robustness_report(&state, &data.val(), &CorruptionKind::ALL, 0)?;
    print!("{}", text_table(&report));
    println!("mean corrupted oIoU {:.4}", report.mean_corrupted_oiou());
    Ok(())
}
