//! Refines a CAM into pseudo-labels and scores a prediction on the confident pixels.

use plda::cps::{confident_pixels, cps_loss, dynamic_threshold, pixel_prediction, refine_cam, PseudoOrigin, RefineConfig};
use plda::synthdata::{generate_sample, DatasetSpec};
use plda::trainer::{PldaModel, TrainConfig};

fn main() -> plda::Result<()> {
    let spec = DatasetSpec::default();
    let sample = generate_sample(&spec, 3);
    let model = PldaModel::new(&TrainConfig::default(), spec.num_classes)?;
    let (_, cam) = model.cams(&[&sample])?.remove(0);

    let refine = RefineConfig::default();
    let p = refine_cam(&cam, &sample.image, &refine, PseudoOrigin::Original)?;
    let beta = dynamic_threshold(&p, 0.6)?;
    let (h, w) = p.spatial();
    let all: Vec<usize> = (0..h * w).collect();
    let confident = confident_pixels(&p, &all, &beta)?;
    let bg = confident.iter().filter(|c| c.1 == 0).count();
    println!("{} of {} pixels confident ({bg} background)", confident.len(), h * w);

    let pred = pixel_prediction(&cam, &sample.image_label, 10.0, refine.bg_power);
    println!("cross-entropy on the confident set: {:.4}", cps_loss(&pred, &p, &all, &beta)?);
    Ok(())
}
