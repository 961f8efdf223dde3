//! In-memory paired images, cropping, range conversion and the synthetic
//! bokeh generator. Directory ingestion lives in the std crate.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// 8-bit RGB image, row-major interleaved (`HWC`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!("{width}x{height} RGB image needs {} bytes, got {}", width * height * 3, data.len())));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        RgbImage { width, height, data }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width {
            return Err(Error::InvalidInput(format!(
                "crop {h}x{w} at ({y0}, {x0}) exceeds {}x{} image",
                self.height, self.width
            )));
        }
        let mut data = Vec::with_capacity(h * w * 3);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[row..row + w * 3]);
        }
        Ok(RgbImage { width: w, height: h, data })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairedSample {
    pub id: String,
    /// Narrow-aperture (all-in-focus) input.
    pub source: RgbImage,
    /// Shallow depth-of-field ground truth.
    pub target: RgbImage,
}

impl PairedSample {
    pub fn new(id: impl Into<String>, source: RgbImage, target: RgbImage) -> Result<Self> {
        let id = id.into();
        if (source.width, source.height) != (target.width, target.height) {
            return Err(Error::InvalidInput(format!(
                "pair {id}: source is {}x{}, target is {}x{}",
                source.width, source.height, target.width, target.height
            )));
        }
        Ok(PairedSample { id, source, target })
    }
}

/// Applies one random `h × w` window to both images of the pair.
pub fn random_crop_pair<R: Rng + ?Sized>(p: &PairedSample, h: usize, w: usize, rng: &mut R) -> Result<PairedSample> {
    let (ih, iw) = (p.source.height, p.source.width);
    if h == 0 || w == 0 || h > ih || w > iw {
        return Err(Error::InvalidInput(format!("crop {h}x{w} does not fit {ih}x{iw} pair {}", p.id)));
    }
    let y0 = rng.random_range(0..=ih - h);
    let x0 = rng.random_range(0..=iw - w);
    Ok(PairedSample { id: p.id.clone(), source: p.source.crop(y0, x0, h, w)?, target: p.target.crop(y0, x0, h, w)? })
}

/// `[1, 3, H, W]` tensor with values `v / 127.5 − 1`.
pub fn to_model_range<T: Real>(img: &RgbImage) -> Tensor<T> {
    let w = img.width;
    Tensor::from_fn([1, 3, img.height, w], |[_, c, y, x]| T::lit(img.data[(y * w + x) * 3 + c] as f64 / 127.5 - 1.0))
}

/// Inverse of [`to_model_range`] for sample `n` of a batch: rounds to the
/// nearest level and clamps to `0..=255`.
pub fn from_model_range_at<T: Real>(t: &Tensor<T>, n: usize) -> Result<RgbImage> {
    let s = t.shape();
    if s.c() != 3 || n >= s.n() {
        return Err(Error::InvalidShape { op: "from_model_range", reason: format!("sample {n} of {s} is not an RGB image") });
    }
    let (h, w) = (s.h(), s.w());
    let mut data = vec![0u8; h * w * 3];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (t.at([n, c, y, x]).as_f64() + 1.0) * 127.5;
                // NaN maps to 0 through the saturating cast.
                data[(y * w + x) * 3 + c] = libm::round(v).clamp(0.0, 255.0) as u8;
            }
        }
    }
    Ok(RgbImage { width: w, height: h, data })
}

pub fn from_model_range<T: Real>(t: &Tensor<T>) -> Result<RgbImage> {
    if t.shape().n() != 1 {
        return Err(Error::InvalidShape { op: "from_model_range", reason: format!("expected a single image, got {}", t.shape()) });
    }
    from_model_range_at(t, 0)
}

/// Checks the image-tensor contract: 3 channels, finite, within `[-1, 1]`.
pub fn check_image_tensor<T: Real>(t: &Tensor<T>) -> Result<()> {
    if t.shape().c() != 3 {
        return Err(Error::InvalidShape { op: "image tensor", reason: format!("expected 3 channels, got {}", t.shape()) });
    }
    if let Some(v) = t.data().iter().find(|v| !v.is_finite() || v.abs() > T::one()) {
        return Err(Error::InvalidInput(format!("image tensor value {v:?} outside [-1, 1]")));
    }
    Ok(())
}

/// A synthetic pair plus the foreground mask it was built with.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub pair: PairedSample,
    /// `true` where the sharp foreground layer covers the pixel (`H·W`, row-major).
    pub foreground: Vec<bool>,
}

struct Plane {
    w: usize,
    h: usize,
    rgb: [Vec<f64>; 3],
}

impl Plane {
    fn new(w: usize, h: usize) -> Self {
        Plane { w, h, rgb: [vec![0.0; w * h], vec![0.0; w * h], vec![0.0; w * h]] }
    }
}

fn gaussian_blur(src: &[f64], w: usize, h: usize, sigma: f64) -> Vec<f64> {
    let r = libm::ceil(3.0 * sigma) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| libm::exp(-((i * i) as f64) / (2.0 * sigma * sigma))).collect();
    let norm: f64 = taps.iter().sum();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * src[y * w + clampi(x as isize + k as isize - r, w)];
            }
            tmp[y * w + x] = acc / norm;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, t) in taps.iter().enumerate() {
                acc += t * tmp[clampi(y as isize + k as isize - r, h) * w + x];
            }
            out[y * w + x] = acc / norm;
        }
    }
    out
}

/// Colored, striped and checkered texture.
fn texture(rng: &mut ChaCha8Rng, w: usize, h: usize, amplitude: f64) -> Plane {
    let base: [f64; 3] = core::array::from_fn(|_| rng.random_range(50.0..205.0));
    let tint: [f64; 3] = core::array::from_fn(|_| rng.random_range(0.3..1.0));
    let theta = rng.random_range(0.0..core::f64::consts::PI);
    let period = rng.random_range(3.0..9.0);
    let cell = rng.random_range(2..7usize);
    let (ct, st) = (libm::cos(theta), libm::sin(theta));
    let mut p = Plane::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let phase = 2.0 * core::f64::consts::PI * (x as f64 * ct + y as f64 * st) / period;
            let stripe = libm::sin(phase);
            let check = if (x / cell + y / cell) % 2 == 0 { 0.5 } else { -0.5 };
            for c in 0..3 {
                p.rgb[c][y * w + x] = base[c] + amplitude * tint[c] * (0.7 * stripe + 0.6 * check);
            }
        }
    }
    p
}

/// Random disc or axis-aligned box covering a reasonable share of the frame.
fn shape_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, min_frac: f64, max_frac: f64) -> Vec<bool> {
    let side = w.min(h) as f64;
    let size = rng.random_range(min_frac..max_frac) * side;
    let cx = rng.random_range(0.2..0.8) * w as f64;
    let cy = rng.random_range(0.2..0.8) * h as f64;
    let disc = rng.random_bool(0.5);
    let aspect = rng.random_range(0.6..1.6);
    let mut m = vec![false; w * h];
    for y in 0..h {
        for x in 0..w {
            let dx = (x as f64 + 0.5 - cx) / (size * aspect);
            let dy = (y as f64 + 0.5 - cy) / size;
            m[y * w + x] = if disc { dx * dx + dy * dy <= 1.0 } else { dx.abs() <= 1.0 && dy.abs() <= 1.0 };
        }
    }
    m
}

fn quantize(p: &Plane) -> RgbImage {
    let mut data = vec![0u8; p.w * p.h * 3];
    for i in 0..p.w * p.h {
        for c in 0..3 {
            data[i * 3 + c] = libm::round(p.rgb[c][i]).clamp(0.0, 255.0) as u8;
        }
    }
    RgbImage { width: p.w, height: p.h, data }
}

/// Layered synthetic scenes with a known bokeh rendering.
///
/// Each scene has a textured far background, an optional middle layer of
/// shapes and one sharp foreground shape. The source is the sharp
/// composite. The target blurs the background (σ ≈ 3) and the middle layer
/// (σ ≈ 1.3, alpha blurred with it) and pastes the foreground unchanged, so
/// source and target agree exactly on the foreground mask.
pub fn synth_bokeh_dataset(n: usize, size: (usize, usize), seed: u64) -> Result<Vec<SynthSample>> {
    let (h, w) = size;
    if n == 0 {
        return Err(Error::InvalidInput("synthetic dataset needs at least one sample".into()));
    }
    if h < 8 || w < 8 {
        return Err(Error::InvalidInput(format!("synthetic images must be at least 8x8, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let far = texture(&mut rng, w, h, 45.0);
        let sigma_far = rng.random_range(2.5..3.5);
        let mut sharp = Plane::new(w, h);
        let mut soft = Plane::new(w, h);
        for c in 0..3 {
            sharp.rgb[c].clone_from(&far.rgb[c]);
            soft.rgb[c] = gaussian_blur(&far.rgb[c], w, h, sigma_far);
        }
        if rng.random_bool(0.5) {
            let mid = texture(&mut rng, w, h, 30.0);
            let sigma_mid = rng.random_range(1.0..1.6);
            let mut alpha = vec![false; w * h];
            for _ in 0..rng.random_range(1..=3) {
                for (a, b) in alpha.iter_mut().zip(shape_mask(&mut rng, w, h, 0.1, 0.25)) {
                    *a |= b;
                }
            }
            let alpha_f: Vec<f64> = alpha.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
            let alpha_soft = gaussian_blur(&alpha_f, w, h, sigma_mid);
            for c in 0..3 {
                let pre: Vec<f64> = mid.rgb[c].iter().zip(&alpha_f).map(|(v, a)| v * a).collect();
                let pre_soft = gaussian_blur(&pre, w, h, sigma_mid);
                for j in 0..w * h {
                    if alpha[j] {
                        sharp.rgb[c][j] = mid.rgb[c][j];
                    }
                    soft.rgb[c][j] = soft.rgb[c][j] * (1.0 - alpha_soft[j]) + pre_soft[j];
                }
            }
        }
        let fg = texture(&mut rng, w, h, 20.0);
        let mask = shape_mask(&mut rng, w, h, 0.18, 0.32);
        for c in 0..3 {
            for j in 0..w * h {
                if mask[j] {
                    sharp.rgb[c][j] = fg.rgb[c][j];
                    soft.rgb[c][j] = fg.rgb[c][j];
                }
            }
        }
        let pair = PairedSample::new(format!("synth_{i:04}"), quantize(&sharp), quantize(&soft))?;
        out.push(SynthSample { pair, foreground: mask });
    }
    Ok(out)
}
