//! Computes CAMs of an untrained model for one image and writes an overlay PNG.

use plda::evalviz::{cam_to_mask, miou, upsample_bilinear};
use plda::plot::render_cam_overlay;
use plda::synthdata::{generate_sample, DatasetSpec};
use plda::trainer::{PldaModel, TrainConfig};

fn main() -> plda::Result<()> {
    let spec = DatasetSpec::default();
    let sample = generate_sample(&spec, 1);
    let model = PldaModel::new(&TrainConfig::default(), spec.num_classes)?;
    let (_, cam) = model.cams(&[&sample])?.remove(0);
    let (c, h, w) = cam.normalized.dim();
    println!("{c} maps on a {h}x{w} grid for a {}x{} image", sample.height(), sample.width());

    let full = upsample_bilinear(&cam.normalized, sample.height(), sample.width());
    let pred = cam_to_mask(&full, 0.5, &sample.image_label)?;
    let r = miou(&[pred], &[sample.gt_mask.clone()], spec.num_classes)?;
    println!("mIoU at threshold 0.5: {:.4}", r.mean);

    let path = std::env::temp_dir().join("plda-cam-overlay.png");
    render_cam_overlay(&path, &sample.image, &full)?;
    println!("wrote {}", path.display());
    Ok(())
}
