//! Source / target pixel assignment.
//!
//! MaskAssign thresholds the CAM to get the source set, erases those pixels
//! from the image, and thresholds the CAM of the erased image to get the
//! target set. SimpleAssign uses two thresholds on a single CAM instead.
//!
//! All thresholds apply to max-normalized maps of the classes present in the
//! image label; ties in the per-pixel argmax go to the lowest class index.

use ndarray::Array3;

use crate::domadv::DomainAssignment;
use crate::error::{Error, Result};
use crate::netcore::CamMap;

fn check_alpha(alpha: f64, field: &'static str) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::config(field, format!("{alpha} must lie in (0, 1)")));
    }
    Ok(())
}

/// Best present class at `pixel` of a normalized `[C,h,w]` map, or `None`
/// when no class is present.
pub fn present_argmax(normalized: &Array3<f64>, label: &[u8], pixel: usize) -> Option<(usize, f64)> {
    let (c, _, w) = normalized.dim();
    let (y, x) = (pixel / w, pixel % w);
    let mut best: Option<(usize, f64)> = None;
    for ci in 0..c {
        if label.get(ci).copied().unwrap_or(0) == 0 {
            continue;
        }
        let v = normalized[[ci, y, x]];
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((ci, v));
        }
    }
    best
}

/// Coarse erase mask `U` on the CAM grid: any present class above `alpha`.
pub fn erase_mask(cam: &CamMap, alpha: f64, label: &[u8]) -> Result<Vec<bool>> {
    check_alpha(alpha, "alpha")?;
    if label.len() != cam.num_classes() {
        return Err(Error::shape("erase_mask label", cam.num_classes().to_string(), label.len().to_string()));
    }
    let (h, w) = cam.spatial();
    Ok((0..h * w)
        .map(|p| present_argmax(&cam.normalized, label, p).is_some_and(|(_, v)| v > alpha))
        .collect())
}

/// `x~ = (1 - U) * x` with `U` upsampled to image resolution by nearest neighbor.
pub fn mask_image(image: &Array3<f64>, cam: &CamMap, alpha: f64, label: &[u8]) -> Result<Array3<f64>> {
    let coarse = erase_mask(cam, alpha, label)?;
    let (_, hh, ww) = image.dim();
    let (h, w) = cam.spatial();
    if h == 0 || w == 0 || hh % h != 0 || ww % w != 0 || hh / h != ww / w {
        return Err(Error::shape(
            "mask_image",
            format!("image size a multiple of {h}x{w}"),
            format!("{hh}x{ww}"),
        ));
    }
    let s = hh / h;
    let mut out = image.clone();
    for y in 0..hh {
        for x in 0..ww {
            if coarse[(y / s) * w + x / s] {
                for ch in 0..out.dim().0 {
                    out[[ch, y, x]] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// MaskAssign: `D_s = {i : m_i > alpha}`, `D_t = {i : m~_i > alpha}`.
/// The two sets are not made disjoint.
pub fn mask_assign(cam: &CamMap, masked_cam: &CamMap, alpha: f64, label: &[u8]) -> Result<DomainAssignment> {
    check_alpha(alpha, "alpha")?;
    if cam.raw.dim() != masked_cam.raw.dim() {
        return Err(Error::shape(
            "mask_assign",
            format!("{:?}", cam.raw.dim()),
            format!("{:?}", masked_cam.raw.dim()),
        ));
    }
    if label.len() != cam.num_classes() {
        return Err(Error::shape("mask_assign label", cam.num_classes().to_string(), label.len().to_string()));
    }
    let (h, w) = cam.spatial();
    let mut out = DomainAssignment::default();
    for p in 0..h * w {
        if let Some((c, v)) = present_argmax(&cam.normalized, label, p) {
            if v > alpha {
                out.source_idx.push(p);
                out.source_class.push(c);
            }
        }
        if let Some((c, v)) = present_argmax(&masked_cam.normalized, label, p) {
            if v > alpha {
                out.target_idx.push(p);
                out.target_class.push(c);
            }
        }
    }
    Ok(out)
}

/// SimpleAssign: source where the map exceeds `alpha_hi`, target where it lies
/// in `(alpha_lo, alpha_hi]`.
pub fn simple_assign(cam: &CamMap, alpha_hi: f64, alpha_lo: f64, label: &[u8]) -> Result<DomainAssignment> {
    if !(0.0 < alpha_lo && alpha_lo < alpha_hi && alpha_hi < 1.0) {
        return Err(Error::config(
            "simple_alpha_lo",
            format!("need 0 < lo ({alpha_lo}) < hi ({alpha_hi}) < 1"),
        ));
    }
    if label.len() != cam.num_classes() {
        return Err(Error::shape("simple_assign label", cam.num_classes().to_string(), label.len().to_string()));
    }
    let (h, w) = cam.spatial();
    let mut out = DomainAssignment::default();
    for p in 0..h * w {
        if let Some((c, v)) = present_argmax(&cam.normalized, label, p) {
            if v > alpha_hi {
                out.source_idx.push(p);
                out.source_class.push(c);
            } else if v > alpha_lo {
                out.target_idx.push(p);
                out.target_class.push(c);
            }
        }
    }
    Ok(out)
}
