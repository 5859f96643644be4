//! Erases the confident CAM region and splits pixels into source and target
//! sets with both assignment rules.

use ndarray::Array3;
use plda::assign::{mask_assign, mask_image, simple_assign};
use plda::netcore::CamMap;

fn main() -> plda::Result<()> {
    // one class on a 4x4 grid: a sharp peak at the top and a weaker tail below
    let raw = Array3::from_shape_vec(
        (1, 4, 4),
        vec![
            0.1, 0.9, 1.0, 0.1, //
            0.1, 0.7, 0.8, 0.1, //
            0.0, 0.4, 0.5, 0.0, //
            0.0, 0.2, 0.3, 0.0,
        ],
    )
    .unwrap();
    let label = [1u8];
    let cam = CamMap::from_raw(raw, &label)?;

    let image = Array3::from_elem((3, 16, 16), 0.5);
    let erased = mask_image(&image, &cam, 0.6, &label)?;
    let zeroed = erased.index_axis(ndarray::Axis(0), 0).iter().filter(|&&v| v == 0.0).count();
    println!("erased {zeroed} of 256 image pixels");

    // pretend the erased pass found the tail
    let masked_raw = Array3::from_shape_vec(
        (1, 4, 4),
        vec![
            0.0, 0.0, 0.0, 0.0, //
            0.0, 0.1, 0.1, 0.0, //
            0.1, 0.9, 1.0, 0.1, //
            0.0, 0.6, 0.7, 0.0,
        ],
    )
    .unwrap();
    let masked = CamMap::from_raw(masked_raw, &label)?;
    let m = mask_assign(&cam, &masked, 0.6, &label)?;
    println!("MaskAssign   source {:?} target {:?}", m.source_idx, m.target_idx);
    let s = simple_assign(&cam, 0.6, 0.4, &label)?;
    println!("SimpleAssign source {:?} target {:?}", s.source_idx, s.target_idx);
    Ok(())
}
