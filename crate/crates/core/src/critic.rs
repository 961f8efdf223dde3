//! Patch critics of several depths, scored jointly for WGAN-GP training.
//!
//! A critic of depth `d` is `d` stride-2 4×4 conv blocks (64·2^k channels,
//! capped at 512, instance norm on all but the first, leaky ReLU 0.2), one
//! stride-1 4×4 conv block and a 1-channel stride-1 4×4 output conv with no
//! output nonlinearity. Depth 3 is the classic 70×70 PatchGAN.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad, Var};
use crate::error::{Error, Result};
use crate::innorm::{instance_norm, InConfig, InMode};
use crate::losses::LossReport;
use crate::nn::{Conv2d, Param};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

const KERNEL: usize = 4;
const PAD: usize = 1;
const SLOPE: f64 = 0.2;
const MAX_CHANNELS: usize = 512;

/// Anything that maps an image batch to a per-sample score map `[N, 1, h, w]`.
pub trait Critic<T: Real> {
    fn score(&self, x: &Var<T>) -> Result<Var<T>>;

    fn params(&self) -> Vec<&Param<T>>;

    /// Smallest accepted `(height, width)`.
    fn min_input(&self) -> (usize, usize) {
        (1, 1)
    }

    fn receptive_field(&self) -> Option<usize> {
        None
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CriticConfig {
    pub depths: Vec<usize>,
    pub base_channels: usize,
    /// Gradient penalty weight λ.
    pub gp_lambda: f64,
    pub norm_mode: InMode,
    /// Every critic must produce a non-empty score map at this input size.
    pub min_input_hw: (usize, usize),
}

impl Default for CriticConfig {
    fn default() -> Self {
        CriticConfig {
            depths: alloc::vec![2, 3, 4],
            base_channels: 64,
            gp_lambda: 10.0,
            norm_mode: InMode::AvgPool,
            min_input_hw: (64, 64),
        }
    }
}

impl CriticConfig {
    /// Narrower critics (16 base channels) for CPU-scale runs.
    pub fn desk() -> Self {
        CriticConfig { base_channels: 16, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() || self.depths.contains(&0) {
            return Err(Error::Config(alloc::format!("critic depths must be non-empty and positive: {:?}", self.depths)));
        }
        if self.base_channels == 0 {
            return Err(Error::Config("critic base_channels must be positive".into()));
        }
        if !(self.gp_lambda >= 0.0 && self.gp_lambda.is_finite()) {
            return Err(Error::Config(alloc::format!("gp_lambda must be non-negative, got {}", self.gp_lambda)));
        }
        Ok(())
    }
}

/// Layer strides from input to output for a critic of the given depth.
fn strides(depth: usize) -> Vec<usize> {
    let mut s = alloc::vec![2; depth];
    s.extend([1, 1]);
    s
}

/// Receptive field via `r ← r·s + (k − s)`, walking from the output back to the input.
pub fn receptive_field(depth: usize) -> usize {
    strides(depth).iter().rev().fold(1, |r, &s| r * s + (KERNEL - s))
}

fn out_len(mut n: usize, depth: usize) -> Option<usize> {
    for s in strides(depth) {
        if n + 2 * PAD < KERNEL {
            return None;
        }
        n = (n + 2 * PAD - KERNEL) / s + 1;
    }
    Some(n)
}

/// Score-map size for an `h × w` input, or `None` if the map would be empty.
pub fn score_map_size(depth: usize, h: usize, w: usize) -> Option<(usize, usize)> {
    Some((out_len(h, depth)?, out_len(w, depth)?))
}

/// Smallest side length that yields at least a 1×1 score map.
pub fn min_side(depth: usize) -> usize {
    (1..).find(|&n| out_len(n, depth).is_some()).expect("some size works")
}

#[derive(Debug)]
pub struct PatchCritic<T: Real> {
    depth: usize,
    blocks: Vec<(Conv2d<T>, bool)>,
    output: Conv2d<T>,
    norm: InConfig,
}

impl<T: Real> PatchCritic<T> {
    pub fn new(prefix: &str, depth: usize, base: usize, norm: InMode, rng: &mut ChaCha8Rng) -> Self {
        let mut blocks = Vec::with_capacity(depth + 1);
        let mut c_in = 3;
        for (k, s) in strides(depth).into_iter().take(depth + 1).enumerate() {
            let c_out = (base << k.min(16)).min(MAX_CHANNELS);
            blocks.push((Conv2d::new(&alloc::format!("{prefix}.conv{k}"), c_in, c_out, KERNEL, s, PAD, rng), k > 0));
            c_in = c_out;
        }
        let output = Conv2d::new(&alloc::format!("{prefix}.out"), c_in, 1, KERNEL, 1, PAD, rng);
        PatchCritic { depth, blocks, output, norm: InConfig::with_mode(norm) }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn output_layer(&self) -> &Conv2d<T> {
        &self.output
    }
}

impl<T: Real> Critic<T> for PatchCritic<T> {
    fn score(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        let min = min_side(self.depth);
        if s.h() < min || s.w() < min {
            return Err(Error::TooSmall { got_h: s.h(), got_w: s.w(), min_h: min, min_w: min });
        }
        let mut h = x.clone();
        for (conv, norm) in &self.blocks {
            h = conv.forward(&h)?;
            if *norm {
                h = instance_norm(&h, &self.norm)?;
            }
            h = h.leaky_relu(T::lit(SLOPE));
        }
        self.output.forward(&h)
    }

    fn params(&self) -> Vec<&Param<T>> {
        let mut p: Vec<&Param<T>> = self.blocks.iter().flat_map(|(c, _)| c.params()).collect();
        p.extend(self.output.params());
        p
    }

    fn min_input(&self) -> (usize, usize) {
        let m = min_side(self.depth);
        (m, m)
    }

    fn receptive_field(&self) -> Option<usize> {
        Some(receptive_field(self.depth))
    }
}

/// `D(x) = ⟨w, x⟩` per sample, a 1×1 score map. Its input gradient is `w`
/// everywhere, which makes the gradient penalty analytic.
pub struct LinearCritic<T: Real> {
    pub weight: Param<T>,
}

impl<T: Real> LinearCritic<T> {
    /// `weight` has shape `[1, C, H, W]`.
    pub fn new(weight: Tensor<T>) -> Self {
        LinearCritic { weight: Param::new("linear.weight", weight) }
    }
}

impl<T: Real> Critic<T> for LinearCritic<T> {
    fn score(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.shape().n();
        x.mul(&self.weight.var())?.sum_to(Shape::new(n, 1, 1, 1))
    }

    fn params(&self) -> Vec<&Param<T>> {
        alloc::vec![&self.weight]
    }
}

/// Emits a constant score map of the given size regardless of input.
pub struct ConstantCritic<T: Real> {
    pub value: T,
    pub map: (usize, usize),
}

impl<T: Real> Critic<T> for ConstantCritic<T> {
    fn score(&self, x: &Var<T>) -> Result<Var<T>> {
        Ok(Var::constant(Tensor::full([x.shape().n(), 1, self.map.0, self.map.1], self.value)))
    }

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
}

/// Scores `D(real)` and `D(fake)` from fixed lookup: inputs whose first element
/// matches `real_marker` get `real_score`, others `fake_score`.
pub struct TableCritic<T: Real> {
    pub real_marker: T,
    pub real_score: T,
    pub fake_score: T,
}

impl<T: Real> Critic<T> for TableCritic<T> {
    fn score(&self, x: &Var<T>) -> Result<Var<T>> {
        let n = x.shape().n();
        let v = if x.value().item() == self.real_marker { self.real_score } else { self.fake_score };
        Ok(Var::constant(Tensor::full([n, 1, 2, 2], v)))
    }

    fn params(&self) -> Vec<&Param<T>> {
        Vec::new()
    }
}

pub struct MultiCritic<T: Real> {
    pub critics: Vec<Box<dyn Critic<T>>>,
    pub config: CriticConfig,
}

impl<T: Real> core::fmt::Debug for MultiCritic<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("MultiCritic").field("critics", &self.critics.len()).field("config", &self.config).finish()
    }
}

impl<T: Real> MultiCritic<T> {
    pub fn build(cfg: &CriticConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let (h, w) = cfg.min_input_hw;
        for &d in &cfg.depths {
            if score_map_size(d, h, w).is_none() {
                let m = min_side(d);
                return Err(Error::TooSmall { got_h: h, got_w: w, min_h: m, min_w: m });
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let critics = cfg
            .depths
            .iter()
            .map(|&d| {
                Box::new(PatchCritic::<T>::new(&alloc::format!("critic_d{d}"), d, cfg.base_channels, cfg.norm_mode, &mut rng))
                    as Box<dyn Critic<T>>
            })
            .collect();
        Ok(MultiCritic { critics, config: cfg.clone() })
    }

    /// Wraps arbitrary critics (test stubs, custom networks).
    pub fn from_critics(critics: Vec<Box<dyn Critic<T>>>, gp_lambda: f64) -> Self {
        let config = CriticConfig { gp_lambda, ..CriticConfig::default() };
        MultiCritic { critics, config }
    }

    pub fn scores(&self, img: &Var<T>) -> Result<Vec<Var<T>>> {
        self.critics.iter().map(|c| c.score(img)).collect()
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.critics.iter().flat_map(|c| c.params()).collect()
    }

    /// Mean over critics of the mean score.
    pub fn mean_score(&self, img: &Var<T>) -> Result<Var<T>> {
        let k = self.critics.len();
        if k == 0 {
            return Err(Error::Config("no critics".into()));
        }
        let mut acc: Option<Var<T>> = None;
        for s in self.scores(img)? {
            let m = s.mean_all();
            acc = Some(match acc {
                None => m,
                Some(a) => a.add(&m)?,
            });
        }
        Ok(acc.expect("non-empty").mul_scalar(T::one() / T::lit(k as f64)))
    }
}

pub fn critic_scores<T: Real>(mc: &MultiCritic<T>, img: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    Ok(mc.scores(&Var::constant(img.clone()))?.into_iter().map(|v| v.value().clone()).collect())
}

fn interpolate<T: Real, R: Rng + ?Sized>(real: &Tensor<T>, fake: &Tensor<T>, rng: &mut R) -> Result<Tensor<T>> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch { op: "gradient_penalty", lhs: real.shape(), rhs: fake.shape() });
    }
    let s = real.shape();
    let u: Vec<T> = (0..s.n()).map(|_| T::lit(rng.random::<f64>())).collect();
    Ok(Tensor::from_fn(s, |idx| {
        let t = u[idx[0]];
        t * real.at(idx) + (T::one() - t) * fake.at(idx)
    }))
}

/// Two-sided gradient penalty `E[(‖∇_x̂ D(x̂)‖₂ − 1)²]` on per-sample random
/// interpolates `x̂ = u·real + (1 − u)·fake`, averaged over critics and samples.
/// `D(x̂)` is the per-sample mean of the score map. Returned without λ and
/// differentiable with respect to the critic parameters.
pub fn gradient_penalty<T: Real, R: Rng + ?Sized>(mc: &MultiCritic<T>, real: &Tensor<T>, fake: &Tensor<T>, rng: &mut R) -> Result<Var<T>> {
    let x_hat = Var::param(interpolate(real, fake, rng)?);
    let n = real.shape().n();
    let per_sample = Shape::new(n, 1, 1, 1);
    let mut total: Option<Var<T>> = None;
    for c in &mc.critics {
        let s = c.score(&x_hat)?;
        let d = s.sum_all().mul_scalar(T::one() / T::lit(s.shape().hw() as f64));
        let g = grad(&d, &[&x_hat], true)?.remove(0);
        // Tiny offset keeps sqrt differentiable at an exactly zero gradient.
        let norm = g.square().sum_to(per_sample)?.add_scalar(T::lit(1e-12)).sqrt();
        let pen = norm.add_scalar(-T::one()).square().mean_all();
        total = Some(match total {
            None => pen,
            Some(t) => t.add(&pen)?,
        });
    }
    let total = total.ok_or_else(|| Error::Config("no critics".into()))?;
    Ok(total.mul_scalar(T::one() / T::lit(mc.critics.len() as f64)))
}

/// WGAN-GP critic objective: mean over critics of `mean D(fake) − mean D(real)`,
/// plus `gp_lambda` times the gradient penalty.
pub fn critic_loss<T: Real, R: Rng + ?Sized>(mc: &MultiCritic<T>, real: &Tensor<T>, fake: &Tensor<T>, rng: &mut R) -> Result<(Var<T>, LossReport)> {
    if real.shape() != fake.shape() {
        return Err(Error::ShapeMismatch { op: "critic_loss", lhs: real.shape(), rhs: fake.shape() });
    }
    let d_real = mc.mean_score(&Var::constant(real.clone()))?;
    let d_fake = mc.mean_score(&Var::constant(fake.clone()))?;
    let wasserstein = d_fake.sub(&d_real)?;
    let lambda = mc.config.gp_lambda;
    let mut total = wasserstein.clone();
    let mut per_term = BTreeMap::new();
    let mut weights = BTreeMap::new();
    per_term.insert(String::from("d_real"), d_real.item().as_f64());
    per_term.insert(String::from("d_fake"), d_fake.item().as_f64());
    weights.insert(String::from("d_real"), -1.0);
    weights.insert(String::from("d_fake"), 1.0);
    // Recorded even when λ = 0.
    let gp = gradient_penalty(mc, real, fake, rng)?;
    if lambda > 0.0 {
        total = total.add(&gp.mul_scalar(T::lit(lambda)))?;
    }
    per_term.insert(String::from("gp"), gp.item().as_f64());
    weights.insert(String::from("gp"), lambda);
    let report = LossReport::new(total.item().as_f64(), per_term, weights);
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn receptive_fields() {
        assert_eq!(receptive_field(2), 34);
        assert_eq!(receptive_field(3), 70);
        assert_eq!(receptive_field(4), 142);
        assert!(receptive_field(1) < receptive_field(2));
    }

    #[test]
    fn score_map_sizes() {
        assert_eq!(score_map_size(3, 128, 128), Some((14, 14)));
        let c = PatchCritic::<f32>::new("c", 3, 8, InMode::AvgPool, &mut ChaCha8Rng::seed_from_u64(0));
        let s = c.score(&Var::constant(Tensor::zeros([1, 3, 128, 128]))).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 1, 14, 14));
    }

    #[test]
    fn undersized_input_is_rejected() {
        let c = PatchCritic::<f32>::new("c", 4, 8, InMode::AvgPool, &mut ChaCha8Rng::seed_from_u64(0));
        let m = min_side(4);
        assert!(score_map_size(4, m, m).is_some() && score_map_size(4, m - 1, m - 1).is_none());
        let err = c.score(&Var::constant(Tensor::zeros([1, 3, m - 1, 64]))).unwrap_err();
        assert!(matches!(err, Error::TooSmall { .. }));
    }

    #[test]
    fn build_rejects_collapsing_depth() {
        let cfg = CriticConfig { depths: alloc::vec![3, 6], min_input_hw: (64, 64), ..CriticConfig::default() };
        match MultiCritic::<f32>::build(&cfg, 0) {
            Err(Error::TooSmall { min_h, .. }) => assert_eq!(min_h, min_side(6)),
            other => panic!("{other:?}"),
        }
        let bad = CriticConfig { depths: alloc::vec![], ..CriticConfig::default() };
        assert!(MultiCritic::<f32>::build(&bad, 0).is_err());
    }

    #[test]
    fn constant_stub_scores() {
        let mc = MultiCritic::<f64>::from_critics(alloc::vec![Box::new(ConstantCritic { value: 2.5, map: (3, 4) })], 10.0);
        let s = critic_scores(&mc, &Tensor::zeros([2, 3, 8, 8])).unwrap();
        assert_eq!(s[0].shape(), Shape::new(2, 1, 3, 4));
        assert!(s[0].data().iter().all(|&v| v == 2.5));
    }

    #[test]
    fn linear_critic_penalty_is_analytic() {
        let w = Tensor::<f64>::from_fn([1, 3, 4, 4], |[_, c, h, x]| ((c * 16 + h * 4 + x) as f64 * 0.3).sin() * 0.2);
        let norm: f64 = w.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        let mc = MultiCritic::from_critics(alloc::vec![Box::new(LinearCritic::new(w.clone()))], 10.0);
        let real = Tensor::from_fn([3, 3, 4, 4], |[n, c, h, x]| ((n + c + h + x) as f64).cos());
        let fake = Tensor::zeros([3, 3, 4, 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gp = gradient_penalty(&mc, &real, &fake, &mut rng).unwrap().item();
        assert!((gp - (norm - 1.0).powi(2)).abs() < 1e-4, "{gp}");
    }

    #[test]
    fn unit_norm_linear_critic_has_zero_penalty() {
        let w = Tensor::<f64>::full([1, 3, 2, 2], 1.0 / (12f64).sqrt());
        let mc = MultiCritic::from_critics(alloc::vec![Box::new(LinearCritic::new(w))], 10.0);
        let real = Tensor::full([2, 3, 2, 2], 0.5);
        let fake = Tensor::full([2, 3, 2, 2], -0.5);
        let gp = gradient_penalty(&mc, &real, &fake, &mut ChaCha8Rng::seed_from_u64(2)).unwrap().item();
        assert!(gp.abs() < 1e-10);
    }

    #[test]
    fn penalty_gradient_reaches_critic_weights() {
        // d/dw (‖w‖ − 1)² = 2(‖w‖ − 1) w/‖w‖
        let w = Tensor::<f64>::from_fn([1, 1, 2, 2], |[_, _, h, x]| (h * 2 + x) as f64 + 1.0);
        let norm = 30f64.sqrt();
        let critic = LinearCritic::new(w.clone());
        let wv = critic.weight.var();
        let mc = MultiCritic::from_critics(alloc::vec![Box::new(critic)], 10.0);
        let gp = gradient_penalty(&mc, &Tensor::zeros([1, 1, 2, 2]), &Tensor::full([1, 1, 2, 2], 1.0), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let g = gp.backward();
        let gw = g.get(&wv).unwrap();
        for (gi, wi) in gw.data().iter().zip(w.data()) {
            assert!((gi - 2.0 * (norm - 1.0) * wi / norm).abs() < 1e-9);
        }
    }

    #[test]
    fn critic_loss_stub_cases() {
        let real = Tensor::<f64>::full([1, 3, 4, 4], 1.0);
        let fake = Tensor::<f64>::full([1, 3, 4, 4], 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let table = |r: f64, f: f64| {
            MultiCritic::from_critics(alloc::vec![Box::new(TableCritic { real_marker: 1.0, real_score: r, fake_score: f })], 0.0)
        };
        let (l, report) = critic_loss(&table(1.0, 0.0), &real, &fake, &mut rng).unwrap();
        assert_eq!(l.item(), -1.0);
        assert!((report.weighted_sum() - report.total).abs() < 1e-12);
        let (l, _) = critic_loss(&table(0.3, 0.3), &real, &fake, &mut rng).unwrap();
        assert_eq!(l.item(), 0.0);
        let mismatched = Tensor::<f64>::zeros([1, 3, 4, 5]);
        assert!(critic_loss(&table(0.0, 0.0), &real, &mismatched, &mut rng).is_err());
    }

    #[test]
    fn output_scaling_scales_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = PatchCritic::<f64>::new("c", 2, 4, InMode::AvgPool, &mut rng);
        let x = Var::constant(Tensor::from_fn([1, 3, 40, 40], |[_, ch, h, w]| ((ch * 7 + h * 3 + w) as f64 * 0.1).sin()));
        let before = c.score(&x).unwrap().value().clone();
        let out = c.output_layer();
        out.weight.set(out.weight.value().map(|v| v * 3.0));
        out.bias.set(out.bias.value().map(|v| v * 3.0));
        let after = c.score(&x).unwrap().value().clone();
        for (a, b) in after.data().iter().zip(before.data()) {
            assert!((a - 3.0 * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}
