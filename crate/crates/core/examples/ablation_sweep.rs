//! Sweeps the distillation weight over a few values with three seeds each.
//! A weight of 1 drops the masked path, which matches baseline training.

use maskris::cli::{mean_sd, sweep, SweepArgs, SweepParam};
use maskris::synthdata::{generate_dataset, SceneConfig};
use maskris::trainer::{TrainConfig, TrainMode};

fn main() -> maskris::Result<()> {
    let data = generate_dataset(4, 400, &SceneConfig::default())?;
    let mut base = TrainConfig::for_mode(TrainMode::MaskRis);
    base.epochs = 4;
    let args = SweepArgs {
        param: SweepParam::Lambda,
        values: vec!["0.1".into(), "0.5".into(), "1.0".into()],
        seeds: vec![0, 1, 2],
        base,
        data: "unused".into(),
        out: "unused".into(),
        parallel: false,
    };
    for row in sweep(&args, &data)? {
        let (m, ms) = mean_sd(&row.miou);
        let (o, os) = mean_sd(&row.oiou);
        println!("lambda {:>4}: mIoU {m:.4} ± {ms:.4}  oIoU {o:.4} ± {os:.4}", row.value);
    }
    Ok(())
}
