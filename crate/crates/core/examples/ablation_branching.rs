//! Shares one classification-only warm-up between several loss presets.

use plda::synthdata::{generate_dataset, DatasetSpec};
use plda::trainer::{TrainConfig, Trainer};

fn main() -> plda::Result<()> {
    let spec = DatasetSpec {
        num_train: 48,
        num_val: 16,
        ..DatasetSpec::default()
    };
    let (train_set, val_set) = generate_dataset(&spec)?;
    let small = |preset: &str| -> plda::Result<TrainConfig> {
        Ok(TrainConfig {
            epochs: 4,
            cls_warmup_epochs: 2,
            widths: vec![8, 16, 16, 16],
            eval_every: 0,
            ..TrainConfig::preset(preset)?
        })
    };
    let base = small("baseline")?;
    let mut warm = Trainer::for_dataset(&base, &train_set)?;
    warm.run_until(&train_set, &val_set, base.cls_warmup_epochs, |_| {})?;
    for preset in ["baseline", "uda", "full"] {
        let mut t = warm.branch(&small(preset)?)?;
        let (_, eval) = t.run_until(&train_set, &val_set, base.epochs, |_| {})?;
        println!("{preset:<9} mIoU {:.4}", eval.expect("final epoch is evaluated").best.mean);
    }
    Ok(())
}
