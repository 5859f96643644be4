//! Generates the synthetic dataset, prints its statistics and writes it to disk.
//!
//! `cargo run --example synthetic_dataset -- [out_dir]`

use plda::synthdata::{dataset_stats, generate_dataset, save_dataset, DatasetSpec, PART_BODY, PART_CORE};

fn main() -> plda::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("plda-data").display().to_string());
    let spec = DatasetSpec {
        num_train: 40,
        num_val: 10,
        ..DatasetSpec::default()
    };
    let (train, val) = generate_dataset(&spec)?;
    let stats = dataset_stats(&train)?;
    println!("{} train / {} val images, {} objects", train.len(), val.len(), stats.num_objects);
    println!("images per class: {:?}", stats.class_image_counts);
    println!("mean object area {:.1} px, mean core area {:.1} px", stats.mean_object_area, stats.mean_core_area);

    let s = &train[0];
    let core = s.part_mask.iter().filter(|&&p| p == PART_CORE).count();
    let body = s.part_mask.iter().filter(|&&p| p == PART_BODY).count();
    println!("sample 0: label {:?}, core {core} px, body {body} px", s.image_label);

    save_dataset(out.as_ref(), &spec, &train, &val)?;
    println!("wrote {out}");
    Ok(())
}
