//! Central finite-difference gradient checking.
//!
//! The check compares reverse-mode gradients of a scalar function against
//! `(f(x + h·d) − f(x − h·d)) / 2h` along coordinate directions and random
//! ±1 directions. It shares no code with the backward rules it verifies.

use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    /// `max |a − n| / max(|a|, |n|)` over probes whose magnitude exceeds the noise floor.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_analytic: f64,
}

/// Probes below this magnitude are compared in absolute terms only.
const FLOOR: f64 = 1e-9;

pub fn check<F>(f: F, x0: &Tensor<f64>, step: f64, coord_probes: usize, dir_probes: usize) -> Result<GradCheckReport>
where
    F: Fn(&Var<f64>) -> Result<Var<f64>>,
{
    let x = Var::param(x0.clone());
    let y = f(&x)?;
    let analytic = match y.backward().get(&x) {
        Some(g) => g.clone(),
        None => Tensor::zeros(x0.shape()),
    };
    let eval = |dir: &[f64], h: f64| -> Result<f64> {
        let data: Vec<f64> = x0.data().iter().zip(dir).map(|(v, d)| v + h * d).collect();
        Ok(f(&Var::constant(Tensor::new(x0.shape(), data)?))?.item())
    };
    let n = x0.numel();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6772_6164);
    let mut report = GradCheckReport::default();
    let mut record = |a: f64, num: f64| {
        let err = (a - num).abs();
        let scale = a.abs().max(num.abs());
        report.probes += 1;
        report.max_abs_err = report.max_abs_err.max(err);
        report.max_abs_analytic = report.max_abs_analytic.max(a.abs());
        if scale > FLOOR {
            report.max_rel_err = report.max_rel_err.max(err / scale);
        }
    };
    let coords: Vec<usize> = if coord_probes >= n { (0..n).collect() } else { sample(&mut rng, n, coord_probes).into_vec() };
    let mut dir = alloc::vec![0.0; n];
    for i in coords {
        dir[i] = 1.0;
        let num = (eval(&dir, step)? - eval(&dir, -step)?) / (2.0 * step);
        dir[i] = 0.0;
        record(analytic.data()[i], num);
    }
    for _ in 0..dir_probes {
        for d in dir.iter_mut() {
            *d = if rng.random::<bool>() { 1.0 } else { -1.0 };
        }
        let a: f64 = analytic.data().iter().zip(&dir).map(|(g, d)| g * d).sum();
        let num = (eval(&dir, step)? - eval(&dir, -step)?) / (2.0 * step);
        record(a, num);
    }
    Ok(report)
}
