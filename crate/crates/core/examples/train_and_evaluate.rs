//! Trains a small model with every loss on, evaluates its CAMs with the
//! background-threshold sweep and round-trips it through a checkpoint.

use plda::checkpoint::Checkpoint;
use plda::evalviz::default_grid;
use plda::synthdata::{generate_dataset, DatasetSpec};
use plda::trainer::{evaluate, train, TrainConfig};

fn main() -> plda::Result<()> {
    let spec = DatasetSpec {
        num_train: 48,
        num_val: 16,
        ..DatasetSpec::default()
    };
    let (train_set, val_set) = generate_dataset(&spec)?;
    let cfg = TrainConfig {
        epochs: 4,
        cls_warmup_epochs: 2,
        widths: vec![8, 16, 16, 16],
        ..TrainConfig::preset("full")?
    };
    let out = train(&train_set, &val_set, &cfg)?;
    for r in &out.log {
        println!(
            "epoch {} lr {:.4}: cls {:.4} uda {:.4} cps_s {:.4} cps_t {:.4}",
            r.epoch, r.lr, r.cls, r.uda, r.cps_s, r.cps_t
        );
    }
    let sweep = out.final_eval.expect("final epoch is evaluated");
    println!("val mIoU {:.4} at background threshold {:.2}", sweep.best.mean, sweep.best_threshold);

    let path = std::env::temp_dir().join("plda-example-checkpoint.json");
    Checkpoint::from_model(&out.model, &cfg).save(&path)?;
    let restored = Checkpoint::load(&path)?.to_model()?;
    let again = evaluate(&restored, &val_set, &default_grid())?;
    println!("reloaded checkpoint: mIoU {:.4}", again.best.mean);
    Ok(())
}
