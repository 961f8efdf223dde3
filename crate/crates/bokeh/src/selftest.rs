//! Quick end-to-end sanity checks behind `bokeh selftest`.

use bokeh_core::autograd::{OpCategory, Var};
use bokeh_core::data::synth_bokeh_dataset;
use bokeh_core::features::FeatureExtractor;
use bokeh_core::gradcheck;
use bokeh_core::innorm::{instance_norm, instance_norm_tensor, InConfig, InMode};
use bokeh_core::losses::{hybrid_loss, hybrid_loss_no_adv, l1_loss, neg_ssim_loss, perceptual_loss, HybridParts, LossWeights};
use bokeh_core::trainer::{Session, TrainConfig};
use bokeh_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn uniform(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn in_equivalence() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let shape = [rng.random_range(1..=4), rng.random_range(1..=8), rng.random_range(1..=32), rng.random_range(1..=32)];
        let x: Tensor<f32> = uniform(shape, &mut rng).map(|v| v * 3.0).cast();
        let a = instance_norm_tensor(&x, &InConfig::with_mode(InMode::AvgPool))?;
        let d = instance_norm_tensor(&x, &InConfig::with_mode(InMode::Direct))?;
        worst = worst.max(a.max_abs_diff(&d));
    }
    Ok((worst <= 1e-5, format!("max |avgpool - direct| = {worst:.2e}")))
}

fn in_audit() -> Result<(bool, String)> {
    let x = Var::param(Tensor::<f32>::zeros([1, 2, 4, 4]));
    let cats = instance_norm(&x, &InConfig::with_mode(InMode::AvgPool))?.op_categories();
    Ok((!cats.contains(&OpCategory::Reduction), format!("{cats:?}")))
}

fn gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x0 = uniform([2, 3, 16, 16], &mut rng);
    let b = Var::constant(uniform([2, 3, 16, 16], &mut rng));
    let fx = FeatureExtractor::<f64>::desk(3);
    let w = LossWeights::default();
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    let cases: [(&str, Box<dyn Fn(&Var<f64>) -> Result<Var<f64>>>); 4] = [
        ("l1", Box::new(|x| l1_loss(x, &b))),
        ("neg_ssim", Box::new(|x| neg_ssim_loss(x, &b))),
        ("perceptual", Box::new(|x| perceptual_loss(&fx, x, &b))),
        (
            "hybrid_no_adv",
            Box::new(|x| {
                let parts = HybridParts { l1: Some(l1_loss(x, &b)?), ssim: Some(neg_ssim_loss(x, &b)?), vgg: Some(perceptual_loss(&fx, x, &b)?), adv: None };
                Ok(hybrid_loss_no_adv(&w, &parts)?.0)
            }),
        ),
    ];
    for (name, f) in &cases {
        let r = gradcheck::check(f, &x0, 1e-6, 4, 2)?;
        worst = worst.max(r.max_rel_err);
        detail.push(format!("{name} {:.1e}", r.max_rel_err));
    }
    Ok((worst <= 1e-3, detail.join(", ")))
}

fn weight_probes() -> Result<(bool, String)> {
    let w = LossWeights::default();
    let base = [0.3, 0.7, 1.1, -0.4];
    let total = |p: [f64; 4]| -> Result<f64> { Ok(hybrid_loss(&w, &HybridParts::<f64>::from_values(p[0], p[1], p[2], Some(p[3])))?.0.item()) };
    let t0 = total(base)?;
    let delta = 0.25;
    let mut worst = 0.0f64;
    for (i, coef) in [0.5, 0.05, 0.1, 1.0].into_iter().enumerate() {
        let mut p = base;
        p[i] += delta;
        worst = worst.max(((total(p)? - t0) - coef * delta).abs());
    }
    Ok((worst <= 1e-9, format!("max coefficient error {worst:.1e}")))
}

fn training_smoke() -> Result<(bool, String)> {
    let data = synth_bokeh_dataset(4, (48, 48), 5)?.into_iter().map(|s| s.pair).collect();
    let mut cfg = TrainConfig::desk();
    cfg.schedule.crop = (48, 48);
    cfg.schedule.max_steps = Some(50);
    let mut s = Session::new(cfg, data, FeatureExtractor::desk(0))?;
    let h = s.run(50)?;
    let finite = h.iter().all(|r| r.generator.total.is_finite());
    let (first, last) = (h[0].generator.total, h[h.len() - 1].generator.total);
    Ok((finite && h.len() == 50, format!("{} steps, loss {first:.4} -> {last:.4}", h.len())))
}

pub fn run() -> Vec<Check> {
    let checks: [(&'static str, fn() -> Result<(bool, String)>); 5] = [
        ("instance-norm equivalence", in_equivalence),
        ("instance-norm op audit", in_audit),
        ("loss gradients", gradients),
        ("hybrid coefficient probes", weight_probes),
        ("training smoke", training_smoke),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check { name, passed: false, detail: e.to_string() },
        })
        .collect()
}
