//! Histograms of normalized centroid similarity for pixels in the confident
//! (source) and remaining (target) object regions.

use plda::synthdata::{generate_dataset, DatasetSpec};
use plda::trainer::{similarity_diagnostic, train, TrainConfig};

fn main() -> plda::Result<()> {
    let spec = DatasetSpec {
        num_train: 48,
        num_val: 16,
        ..DatasetSpec::default()
    };
    let (train_set, val_set) = generate_dataset(&spec)?;
    let cfg = TrainConfig {
        epochs: 3,
        cls_warmup_epochs: 1,
        widths: vec![8, 16, 16, 16],
        eval_every: 0,
        ..TrainConfig::preset("baseline")?
    };
    let out = train(&train_set, &val_set, &cfg)?;
    let r = similarity_diagnostic(&out.model, &val_set, cfg.alpha, 64, 10, 0)?;
    println!("classes used {:?}", r.classes_used);
    println!("source mean {:.4}, target mean {:.4}, gap {:.4}", r.source_mean, r.target_mean, r.gap());
    println!("source {:?}", r.source_hist.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("target {:?}", r.target_hist.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>());
    Ok(())
}
