//! Inference with reflection padding and directory evaluation.

use std::path::Path;

use bokeh_core::data::{from_model_range, to_model_range, RgbImage};
use bokeh_core::glassnet::{pad_reflect_to_multiple, Generator};
use bokeh_core::metrics::{psnr, ssim_u8};
use bokeh_core::trainer::generator_from_checkpoint;
use serde::Serialize;

use crate::ckpt::load_checkpoint;
use crate::dataset::{load_pairs, read_image, write_image, DatasetSpec};
use crate::error::{AppError, Result};

/// Pads to the generator's size multiple, renders, crops back and quantizes.
pub fn render_image(g: &Generator<f32>, img: &RgbImage) -> Result<RgbImage> {
    let x = to_model_range::<f32>(img);
    let (padded, crop) = pad_reflect_to_multiple(&x, g.config.size_multiple())?;
    let y = crop.apply(&g.render(&padded)?)?;
    Ok(from_model_range(&y)?)
}

pub fn infer(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let g = generator_from_checkpoint(&load_checkpoint(ckpt)?)?;
    let img = read_image(input)?;
    write_image(output, &render_image(&g, &img)?)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImageRecord {
    pub id: String,
    /// `+∞` for a perfect match; serialized as `"inf"`.
    #[serde(serialize_with = "ser_db")]
    pub psnr: f64,
    pub ssim: f64,
}

fn ser_db<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else if *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_str(&v.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub images: Vec<ImageRecord>,
    pub count: usize,
    #[serde(serialize_with = "ser_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// `(id, reason)` for pairs left out.
    pub skipped: Vec<(String, String)>,
    pub config: std::collections::BTreeMap<String, String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Scores `g` on every loadable pair of `spec`, in id order.
pub fn evaluate(g: &Generator<f32>, spec: &DatasetSpec) -> Result<EvalReport> {
    let (samples, load) = load_pairs(spec)?;
    let mut images = Vec::new();
    let mut skipped = load.skipped;
    for p in &samples {
        let scored = render_image(g, &p.source).and_then(|out| Ok((psnr(&out, &p.target)?, ssim_u8(&out, &p.target)?)));
        match scored {
            Ok((psnr, ssim)) => images.push(ImageRecord { id: p.id.clone(), psnr, ssim }),
            Err(e) => skipped.push((p.id.clone(), e.to_string())),
        }
    }
    if images.is_empty() {
        return Err(AppError::Dataset("every pair was skipped during evaluation".into()));
    }
    let n = images.len() as f64;
    let config = g.config.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    Ok(EvalReport {
        count: images.len(),
        mean_psnr: images.iter().map(|r| r.psnr).sum::<f64>() / n,
        mean_ssim: images.iter().map(|r| r.ssim).sum::<f64>() / n,
        images,
        skipped,
        config,
    })
}

pub fn evaluate_dir(ckpt: &Path, spec: &DatasetSpec) -> Result<EvalReport> {
    let g = generator_from_checkpoint(&load_checkpoint(ckpt)?)?;
    evaluate(&g, spec)
}
