//! Training objectives.
//!
//! The stage-2 objective is
//! `0.5·L1 + 0.05·L_SSIM + 0.1·L_VGG + 1.0·L_adv`, and the ablation without
//! a critic drops the last term. "Negative SSIM" is implemented as
//! `1 − SSIM`: same gradient as `−SSIM`, but bounded below by zero.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::critic::MultiCritic;
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_l1: f64,
    pub w_ssim: f64,
    pub w_vgg: f64,
    pub w_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w_l1: 0.5, w_ssim: 0.05, w_vgg: 0.1, w_adv: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.w_l1, self.w_ssim, self.w_vgg, self.w_adv].iter().all(|w| w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(alloc::format!("loss weights must be finite: {self:?}")))
        }
    }
}

/// Scalar loss value with its breakdown: `total = Σ weights[k]·per_term[k]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LossReport {
    pub total: f64,
    pub per_term: BTreeMap<String, f64>,
    pub weights: BTreeMap<String, f64>,
}

impl LossReport {
    pub fn new(total: f64, per_term: BTreeMap<String, f64>, weights: BTreeMap<String, f64>) -> Self {
        LossReport { total, per_term, weights }
    }

    pub fn weighted_sum(&self) -> f64 {
        self.per_term.iter().map(|(k, v)| self.weights.get(k).copied().unwrap_or(0.0) * v).sum()
    }

    pub fn term(&self, name: &str) -> Option<f64> {
        self.per_term.get(name).copied()
    }
}

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

/// Mean absolute difference over all elements.
pub fn l1_loss<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("l1_loss", a, b)?;
    Ok(a.sub(b)?.abs().mean_all())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Value range of the inputs; 2.0 for images in `[-1, 1]`.
    pub dynamic_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { window: 11, sigma: 1.5, k1: 0.01, k2: 0.03, dynamic_range: 2.0 }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.dynamic_range) * (self.k1 * self.dynamic_range)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.dynamic_range) * (self.k2 * self.dynamic_range)
    }

    /// Normalized 2-D Gaussian window, row-major `window × window`.
    pub fn kernel(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..self.window).map(|i| libm::exp(-((i as f64 - r) * (i as f64 - r)) / (2.0 * self.sigma * self.sigma))).collect();
        let s: f64 = g.iter().sum();
        let mut k = Vec::with_capacity(self.window * self.window);
        for a in &g {
            for b in &g {
                k.push(a * b / (s * s));
            }
        }
        k
    }
}

/// Mean SSIM over all valid (unpadded) Gaussian windows and channels.
pub fn ssim_var<T: Real>(a: &Var<T>, b: &Var<T>, p: &SsimParams) -> Result<Var<T>> {
    same_shape("ssim", a, b)?;
    let s = a.shape();
    if s.h() < p.window || s.w() < p.window {
        return Err(Error::TooSmall { got_h: s.h(), got_w: s.w(), min_h: p.window, min_w: p.window });
    }
    let planes = Shape::new(s.n() * s.c(), 1, s.h(), s.w());
    let (a, b) = (a.reshape(planes)?, b.reshape(planes)?);
    let kernel = Tensor::new([1, 1, p.window, p.window], p.kernel().into_iter().map(T::lit).collect())?;
    let k = Var::constant(kernel);
    let blur = |x: &Var<T>| x.conv2d(&k, 1, 0);
    let mu_a = blur(&a)?;
    let mu_b = blur(&b)?;
    let mu_aa = mu_a.square();
    let mu_bb = mu_b.square();
    let mu_ab = mu_a.mul(&mu_b)?;
    let var_a = blur(&a.square())?.sub(&mu_aa)?;
    let var_b = blur(&b.square())?.sub(&mu_bb)?;
    let cov = blur(&a.mul(&b)?)?.sub(&mu_ab)?;
    let (c1, c2) = (T::lit(p.c1()), T::lit(p.c2()));
    let two = T::lit(2.0);
    let num = mu_ab.mul_scalar(two).add_scalar(c1).mul(&cov.mul_scalar(two).add_scalar(c2))?;
    let den = mu_aa.add(&mu_bb)?.add_scalar(c1).mul(&var_a.add(&var_b)?.add_scalar(c2))?;
    Ok(num.div(&den)?.mean_all())
}

pub fn ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, p: &SsimParams) -> Result<T> {
    Ok(ssim_var(&Var::constant(a.clone()), &Var::constant(b.clone()), p)?.item())
}

/// `1 − SSIM`, in `[0, 2]`.
pub fn neg_ssim_loss<T: Real>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    Ok(ssim_var(a, b, &SsimParams::default())?.neg().add_scalar(T::one()))
}

/// Mean absolute difference between extractor features of `gen` and `gt`.
pub fn perceptual_loss<T: Real>(fx: &FeatureExtractor<T>, gen: &Var<T>, gt: &Var<T>) -> Result<Var<T>> {
    same_shape("perceptual_loss", gen, gt)?;
    let f_gen = fx.forward(gen)?;
    let f_gt = fx.forward(&gt.detach())?;
    Ok(f_gen.sub(&f_gt)?.abs().mean_all())
}

/// `−mean D(fake)`, averaged uniformly over the critics.
pub fn adversarial_gen_loss<T: Real>(mc: &MultiCritic<T>, fake: &Var<T>) -> Result<Var<T>> {
    Ok(mc.mean_score(fake)?.neg())
}

/// Loss parts for the hybrid objective; each a scalar variable.
#[derive(Clone, Debug, Default)]
pub struct HybridParts<T: Real> {
    pub l1: Option<Var<T>>,
    pub ssim: Option<Var<T>>,
    pub vgg: Option<Var<T>>,
    pub adv: Option<Var<T>>,
}

impl<T: Real> HybridParts<T> {
    pub fn from_values(l1: f64, ssim: f64, vgg: f64, adv: Option<f64>) -> Self {
        HybridParts {
            l1: Some(Var::scalar(T::lit(l1))),
            ssim: Some(Var::scalar(T::lit(ssim))),
            vgg: Some(Var::scalar(T::lit(vgg))),
            adv: adv.map(|v| Var::scalar(T::lit(v))),
        }
    }
}

fn weighted_sum<T: Real>(terms: &[(&str, f64, &Option<Var<T>>)]) -> Result<(Var<T>, LossReport)> {
    let mut total: Option<Var<T>> = None;
    let mut per_term = BTreeMap::new();
    let mut weights = BTreeMap::new();
    for (name, w, part) in terms {
        let v = part.as_ref().ok_or_else(|| Error::InvalidInput(alloc::format!("missing loss part {name}")))?;
        if v.value().numel() != 1 {
            return Err(Error::InvalidShape { op: "hybrid_loss", reason: alloc::format!("part {name} is not scalar") });
        }
        let term = v.mul_scalar(T::lit(*w));
        total = Some(match total {
            None => term,
            Some(t) => t.add(&term)?,
        });
        per_term.insert(String::from(*name), v.item().as_f64());
        weights.insert(String::from(*name), *w);
    }
    let total = total.ok_or_else(|| Error::InvalidInput("no loss parts".into()))?;
    let report = LossReport::new(total.item().as_f64(), per_term, weights);
    Ok((total, report))
}

/// `w_l1·L1 + w_ssim·L_SSIM + w_vgg·L_VGG + w_adv·L_adv`.
pub fn hybrid_loss<T: Real>(w: &LossWeights, parts: &HybridParts<T>) -> Result<(Var<T>, LossReport)> {
    w.validate()?;
    weighted_sum(&[("l1", w.w_l1, &parts.l1), ("ssim", w.w_ssim, &parts.ssim), ("vgg", w.w_vgg, &parts.vgg), ("adv", w.w_adv, &parts.adv)])
}

/// The critic-free ablation: `w_l1·L1 + w_ssim·L_SSIM + w_vgg·L_VGG`.
pub fn hybrid_loss_no_adv<T: Real>(w: &LossWeights, parts: &HybridParts<T>) -> Result<(Var<T>, LossReport)> {
    w.validate()?;
    weighted_sum(&[("l1", w.w_l1, &parts.l1), ("ssim", w.w_ssim, &parts.ssim), ("vgg", w.w_vgg, &parts.vgg)])
}

/// Stage-1 objective `w_l1·L1 + w_ssim·(1 − SSIM)`.
pub fn stage1_loss_weighted<T: Real>(w: &LossWeights, gen: &Var<T>, gt: &Var<T>) -> Result<(Var<T>, LossReport)> {
    let l1 = l1_loss(gen, gt)?;
    let s = neg_ssim_loss(gen, gt)?;
    weighted_sum(&[("l1", w.w_l1, &Some(l1)), ("ssim", w.w_ssim, &Some(s))])
}

pub fn stage1_loss<T: Real>(gen: &Var<T>, gt: &Var<T>) -> Result<(Var<T>, LossReport)> {
    stage1_loss_weighted(&LossWeights::default(), gen, gt)
}
