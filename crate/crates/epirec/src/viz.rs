//! Grayscale PNG emission for images, field maps and difference maps.
//! Convenience outputs; the numeric reports are the source of truth.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::tensor::RTensor;

fn to_gray(img: &RTensor, lo: f64, hi: f64) -> Result<GrayImage> {
    if img.shape.len() != 2 {
        return Err(Error::validation("png output expects a 2-D image"));
    }
    let (ny, nx) = (img.shape[0], img.shape[1]);
    let span = (hi - lo).max(1e-300);
    let mut out = GrayImage::new(nx as u32, ny as u32);
    for y in 0..ny {
        for x in 0..nx {
            let v = ((img.at2(y, x) - lo) / span).clamp(0.0, 1.0);
            out.put_pixel(x as u32, y as u32, Luma([(v * 255.0).round() as u8]));
        }
    }
    Ok(out)
}

/// Magnitude-style image: black at zero, white at the image peak.
pub fn save_magnitude_png(path: &Path, img: &RTensor) -> Result<()> {
    let g = to_gray(img, 0.0, img.max_abs())?;
    g.save(path)
        .map_err(|e| Error::validation(format!("png write failed: {e}")))?;
    Ok(())
}

/// Signed map (fields, differences): symmetric range, mid-gray at zero.
pub fn save_signed_png(path: &Path, img: &RTensor, amplitude: f64) -> Result<()> {
    let a = if amplitude > 0.0 { amplitude } else { img.max_abs() };
    let g = to_gray(img, -a, a)?;
    g.save(path)
        .map_err(|e| Error::validation(format!("png write failed: {e}")))?;
    Ok(())
}
