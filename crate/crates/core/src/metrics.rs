//! Image-quality metrics on 8-bit images.

use crate::data::{to_model_range, RgbImage};
use crate::error::{Error, Result};
use crate::losses::{ssim, SsimParams};

fn same_dims(a: &RgbImage, b: &RgbImage) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::InvalidInput(alloc::format!(
            "metric inputs differ in size: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

/// `10·log10(255² / MSE)` over all channels; `+∞` for identical images.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    if a.data.is_empty() {
        return Err(Error::InvalidInput("psnr of an empty image".into()));
    }
    let sse: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64) * (x as f64 - y as f64)).sum();
    if sse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let mse = sse / a.data.len() as f64;
    Ok(10.0 * libm::log10(255.0 * 255.0 / mse))
}

/// SSIM of two 8-bit images through the training loss implementation,
/// evaluated in double precision on the `[-1, 1]` mapping.
pub fn ssim_u8(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    same_dims(a, b)?;
    ssim(&to_model_range::<f64>(a), &to_model_range::<f64>(b), &SsimParams::default())
}
