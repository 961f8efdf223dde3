//! Instance normalization, two ways.
//!
//! * [`InMode::Direct`] computes per-(sample, channel) moments with an axis
//!   reduction, exactly as the textbook definition.
//! * [`InMode::AvgPool`] uses only full-extent spatial average pooling plus
//!   elementwise arithmetic and broadcasting. Mobile GPU delegates that lack
//!   axis reductions can run this form because the pooling window is static
//!   once the feature-map size is known.
//!
//! The two paths agree to within single-precision rounding.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum InMode {
    Direct,
    #[default]
    AvgPool,
}

impl InMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            InMode::Direct => "direct",
            InMode::AvgPool => "avgpool",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "direct" => Some(InMode::Direct),
            "avgpool" => Some(InMode::AvgPool),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InConfig {
    /// Variance stabilizer, added before the square root.
    pub epsilon: f64,
    pub mode: InMode,
}

impl Default for InConfig {
    fn default() -> Self {
        InConfig { epsilon: 1e-5, mode: InMode::AvgPool }
    }
}

impl InConfig {
    pub fn with_mode(mode: InMode) -> Self {
        InConfig { mode, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(alloc::format!("epsilon must be positive, got {}", self.epsilon)));
        }
        Ok(())
    }
}

/// Per-(sample, channel) moments, each shaped `[N, C, 1, 1]`.
#[derive(Clone, Debug)]
pub struct ChannelStats<T: Real> {
    pub mean: Tensor<T>,
    /// Population variance (divisor `H·W`).
    pub variance: Tensor<T>,
}

fn check_extent<T: Real>(x: &Var<T>) -> Result<()> {
    if x.shape().hw() == 0 {
        return Err(Error::InvalidInput(alloc::format!("empty spatial extent in {}", x.shape())));
    }
    Ok(())
}

/// Moments via axis reductions.
pub fn moments_direct<T: Real>(x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    check_extent(x)?;
    let mean = x.reduce_mean_hw();
    let centered = x.sub(&mean)?;
    let var = centered.square().reduce_mean_hw();
    Ok((mean, var))
}

/// Moments via two full-extent average pools: mean first, then the pooled
/// square of the centered tensor. No axis-reduction primitive is used.
pub fn moments_avgpool<T: Real>(x: &Var<T>) -> Result<(Var<T>, Var<T>)> {
    check_extent(x)?;
    let s = x.shape();
    let (h, w) = (s.h(), s.w());
    let mean = x.avg_pool2d(h, w, h, w)?;
    let centered = x.sub(&mean)?;
    let var = centered.square().avg_pool2d(h, w, h, w)?;
    Ok((mean, var))
}

pub fn channel_stats_direct<T: Real>(x: &Tensor<T>) -> Result<ChannelStats<T>> {
    let (m, v) = moments_direct(&Var::constant(x.clone()))?;
    Ok(ChannelStats { mean: m.value().clone(), variance: v.value().clone() })
}

pub fn channel_stats_avgpool<T: Real>(x: &Tensor<T>) -> Result<ChannelStats<T>> {
    let (m, v) = moments_avgpool(&Var::constant(x.clone()))?;
    Ok(ChannelStats { mean: m.value().clone(), variance: v.value().clone() })
}

/// `y = (x − μ) / sqrt(σ² + ε)` per sample and channel, no affine parameters.
pub fn instance_norm<T: Real>(x: &Var<T>, cfg: &InConfig) -> Result<Var<T>> {
    cfg.validate()?;
    let (mean, var) = match cfg.mode {
        InMode::Direct => moments_direct(x)?,
        InMode::AvgPool => moments_avgpool(x)?,
    };
    let denom = var.add_scalar(T::lit(cfg.epsilon)).sqrt();
    x.sub(&mean)?.div(&denom)
}

pub fn instance_norm_tensor<T: Real>(x: &Tensor<T>, cfg: &InConfig) -> Result<Tensor<T>> {
    Ok(instance_norm(&Var::constant(x.clone()), cfg)?.value().clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::OpCategory;
    use crate::gradcheck;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn example() -> Tensor<f32> {
        Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap()
    }

    fn random(shape: [usize; 4], seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-3.0..3.0))
    }

    #[test]
    fn hand_computed_stats() {
        for stats in [channel_stats_direct(&example()).unwrap(), channel_stats_avgpool(&example()).unwrap()] {
            assert_eq!(stats.mean.item(), 4.0);
            assert_eq!(stats.variance.item(), 5.0);
        }
    }

    #[test]
    fn constant_channel_has_zero_variance() {
        let x = Tensor::<f32>::full([2, 3, 5, 7], 0.731);
        let d = channel_stats_direct(&x).unwrap();
        let a = channel_stats_avgpool(&x).unwrap();
        for s in [&d, &a] {
            assert!(s.mean.data().iter().all(|&m| (m - 0.731).abs() < 1e-6));
            assert!(s.variance.data().iter().all(|&v| v.abs() <= 1e-7));
        }
        let y = instance_norm_tensor(&x, &InConfig::default()).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-3));
    }

    #[test]
    fn stats_do_not_mix_samples() {
        let one = random([1, 2, 4, 4], 3);
        let two = Tensor::stack(&[one.clone(), one.clone()]).unwrap();
        for f in [channel_stats_direct::<f32>, channel_stats_avgpool::<f32>] {
            let s = f(&two).unwrap();
            assert_eq!(s.mean.data()[..2], s.mean.data()[2..]);
            assert_eq!(s.variance.data()[..2], s.variance.data()[2..]);
        }
    }

    #[test]
    fn avgpool_stats_match_direct_on_random_tensor() {
        let x = random([3, 4, 8, 8], 11);
        let d = channel_stats_direct(&x).unwrap();
        let a = channel_stats_avgpool(&x).unwrap();
        assert!(d.mean.max_abs_diff(&a.mean) <= 1e-5);
        assert!(d.variance.max_abs_diff(&a.variance) <= 1e-5);
    }

    #[test]
    fn normalizes_the_worked_example() {
        let denom = (5.0f64 + 1e-5).sqrt();
        let expect = [-3.0 / denom, -1.0 / denom, 1.0 / denom, 3.0 / denom];
        for mode in [InMode::Direct, InMode::AvgPool] {
            let y = instance_norm_tensor(&example(), &InConfig::with_mode(mode)).unwrap();
            for (got, want) in y.data().iter().zip(expect) {
                assert!((*got as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn empty_extent_is_rejected() {
        let x = Tensor::<f32>::zeros([1, 2, 0, 4]);
        assert!(matches!(channel_stats_direct(&x), Err(Error::InvalidInput(_))));
        assert!(matches!(channel_stats_avgpool(&x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn bad_epsilon_is_rejected() {
        let cfg = InConfig { epsilon: 0.0, mode: InMode::Direct };
        assert!(instance_norm_tensor(&example(), &cfg).is_err());
    }

    #[test]
    fn output_is_standardized() {
        let x = random([2, 3, 8, 8], 5);
        let y = instance_norm_tensor(&x, &InConfig::default()).unwrap();
        let s = channel_stats_direct(&y.cast::<f64>()).unwrap();
        assert!(s.mean.data().iter().all(|m| m.abs() < 1e-6));
        assert!(s.variance.data().iter().all(|v| (v - 1.0).abs() < 1e-4));
    }

    #[test]
    fn avgpool_graph_avoids_axis_reductions() {
        let x = Var::param(random([1, 2, 4, 4], 1));
        let cats = instance_norm(&x, &InConfig::with_mode(InMode::AvgPool)).unwrap().op_categories();
        assert!(!cats.contains(&OpCategory::Reduction));
        let cats = instance_norm(&x, &InConfig::with_mode(InMode::Direct)).unwrap().op_categories();
        assert!(cats.contains(&OpCategory::Reduction));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x0 = Tensor::<f64>::from_fn([2, 2, 4, 4], |_| rng.random_range(-1.0..1.0));
        for mode in [InMode::Direct, InMode::AvgPool] {
            let cfg = InConfig::with_mode(mode);
            // A weighted sum; the plain sum of a normalized map has identically zero gradient.
            let weights = Tensor::<f64>::from_fn([2, 2, 4, 4], |[n, c, h, w]| ((n + 2 * c + 3 * h + 5 * w) as f64).sin());
            let wv = Var::constant(weights);
            let report = gradcheck::check(|x| Ok(instance_norm(x, &cfg)?.mul(&wv)?.sum_all()), &x0, 1e-3, 64, 3).unwrap();
            assert!(report.max_rel_err <= 1e-3, "{mode:?}: {report:?}");
            let plain = gradcheck::check(|x| Ok(instance_norm(x, &cfg)?.sum_all()), &x0, 1e-3, 16, 3).unwrap();
            assert!(plain.max_abs_analytic < 1e-9 && plain.max_abs_err < 1e-6, "{plain:?}");
        }
    }
}
