//! The two-stage generator.
//!
//! Stage 1 maps the sharp input `I` to a residual `R̂ ≈ I − O`; `I − R̂`
//! (clamped to the model range) is a rough bokeh estimate that stage 2
//! refines. Both stages are U-shaped encoder/decoder networks:
//!
//! ```text
//! conv3x3 s1 ─────────────────────────────────────────────┐ concat
//!   conv3x3 s2 ─────────────────────────────────────┐     │
//!     ...                                            concat│
//!       n_resblocks × [conv ReLU norm conv ReLU] + skip     │
//!     tconv4x4 s2 ──────────────────────────────────┘     │
//!   tconv4x4 s2 ─────────────────────────────────────────┘
//! conv3x3 s1 → tanh
//! ```

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{param_count, Conv2d, ConvTranspose2d, NormKind, Param};
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub stage1_base_channels: usize,
    pub stage1_max_channels: usize,
    pub stage2_base_channels: usize,
    pub stage2_max_channels: usize,
    pub n_resblocks: usize,
    /// Number of stride-2 downsamples per stage.
    pub n_scales: usize,
    pub norm_mode: NormKind,
    pub norm_epsilon: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl GeneratorConfig {
    /// Full-size network: 16→128 and 32→256 channels, nine residual blocks.
    pub fn full() -> Self {
        GeneratorConfig {
            stage1_base_channels: 16,
            stage1_max_channels: 128,
            stage2_base_channels: 32,
            stage2_max_channels: 256,
            n_resblocks: 9,
            n_scales: 3,
            norm_mode: NormKind::AvgPool,
            norm_epsilon: 1e-5,
        }
    }

    /// Reduced network for CPU-scale runs.
    pub fn desk() -> Self {
        GeneratorConfig {
            stage1_base_channels: 8,
            stage1_max_channels: 64,
            stage2_base_channels: 16,
            stage2_max_channels: 128,
            n_resblocks: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_scales == 0 || self.n_scales > 16 {
            return Err(Error::Config(alloc::format!("n_scales must be in 1..=16, got {}", self.n_scales)));
        }
        for (stage, base, max) in [
            (1, self.stage1_base_channels, self.stage1_max_channels),
            (2, self.stage2_base_channels, self.stage2_max_channels),
        ] {
            if base == 0 || base > max {
                return Err(Error::Config(alloc::format!("stage {stage}: base {base} must be in 1..={max}")));
            }
            if base << self.n_scales != max {
                return Err(Error::Config(alloc::format!(
                    "stage {stage}: max channels {max} != base {base} * 2^{}",
                    self.n_scales
                )));
            }
        }
        if !(self.norm_epsilon > 0.0) {
            return Err(Error::Config("norm_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Encoder widths of one stage, from the full-resolution conv to the bottleneck.
    pub fn encoder_widths(&self, stage: u8) -> Vec<usize> {
        let (base, max) = if stage == 1 {
            (self.stage1_base_channels, self.stage1_max_channels)
        } else {
            (self.stage2_base_channels, self.stage2_max_channels)
        };
        (0..=self.n_scales).map(|k| (base << k).min(max)).collect()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.n_scales
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        alloc::vec![
            ("stage1_base_channels", alloc::format!("{}", self.stage1_base_channels)),
            ("stage1_max_channels", alloc::format!("{}", self.stage1_max_channels)),
            ("stage2_base_channels", alloc::format!("{}", self.stage2_base_channels)),
            ("stage2_max_channels", alloc::format!("{}", self.stage2_max_channels)),
            ("n_resblocks", alloc::format!("{}", self.n_resblocks)),
            ("n_scales", alloc::format!("{}", self.n_scales)),
            ("norm_mode", String::from(self.norm_mode.as_str())),
            ("norm_epsilon", alloc::format!("{:e}", self.norm_epsilon)),
        ]
    }

    /// Inverse of [`GeneratorConfig::to_pairs`]; unknown keys are ignored and
    /// missing keys keep their defaults.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = Self::full();
        for (k, v) in pairs {
            let int = || v.parse::<usize>().map_err(|_| Error::Config(alloc::format!("{k}: expected integer, got {v:?}")));
            match k {
                "stage1_base_channels" => cfg.stage1_base_channels = int()?,
                "stage1_max_channels" => cfg.stage1_max_channels = int()?,
                "stage2_base_channels" => cfg.stage2_base_channels = int()?,
                "stage2_max_channels" => cfg.stage2_max_channels = int()?,
                "n_resblocks" => cfg.n_resblocks = int()?,
                "n_scales" => cfg.n_scales = int()?,
                "norm_mode" => {
                    cfg.norm_mode = NormKind::parse(v).ok_or_else(|| Error::Config(alloc::format!("unknown norm_mode {v:?}")))?
                }
                "norm_epsilon" => {
                    cfg.norm_epsilon = v.parse().map_err(|_| Error::Config(alloc::format!("norm_epsilon: bad value {v:?}")))?
                }
                _ => {}
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// conv / ReLU / norm / conv / ReLU with an additive identity skip.
#[derive(Debug)]
pub struct ResBlock<T: Real> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
}

impl<T: Real> ResBlock<T> {
    fn forward(&self, x: &Var<T>, norm: NormKind, eps: f64) -> Result<Var<T>> {
        let h = self.conv1.forward(x)?.relu();
        let h = norm.apply(&h, eps)?;
        let h = self.conv2.forward(&h)?.relu();
        x.add(&h)
    }
}

#[derive(Debug)]
pub struct EncoderDecoder<T: Real> {
    input: Conv2d<T>,
    down: Vec<Conv2d<T>>,
    res: Vec<ResBlock<T>>,
    up: Vec<ConvTranspose2d<T>>,
    output: Conv2d<T>,
    norm: NormKind,
    eps: f64,
}

impl<T: Real> EncoderDecoder<T> {
    fn new(prefix: &str, widths: &[usize], n_res: usize, norm: NormKind, eps: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = widths.len() - 1;
        let input = Conv2d::new(&alloc::format!("{prefix}.enc0"), 3, widths[0], 3, 1, 1, rng);
        let down = (0..n)
            .map(|k| Conv2d::new(&alloc::format!("{prefix}.enc{}", k + 1), widths[k], widths[k + 1], 3, 2, 1, rng))
            .collect();
        let res = (0..n_res)
            .map(|r| ResBlock {
                conv1: Conv2d::new(&alloc::format!("{prefix}.res{r}.conv1"), widths[n], widths[n], 3, 1, 1, rng),
                conv2: Conv2d::new(&alloc::format!("{prefix}.res{r}.conv2"), widths[n], widths[n], 3, 1, 1, rng),
            })
            .collect();
        // Decoder level k upsamples into scale k-1; every level but the deepest
        // consumes a concatenation of its own output and the mirrored skip.
        let up = (1..=n)
            .rev()
            .map(|k| {
                let c_in = if k == n { widths[n] } else { 2 * widths[k] };
                ConvTranspose2d::new(&alloc::format!("{prefix}.dec{k}"), c_in, widths[k - 1], 4, 2, 1, rng)
            })
            .collect();
        let output = Conv2d::new(&alloc::format!("{prefix}.out"), 2 * widths[0], 3, 3, 1, 1, rng);
        EncoderDecoder { input, down, res, up, output, norm, eps }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let mut skips = Vec::with_capacity(self.down.len() + 1);
        let mut h = self.input.forward(x)?.relu();
        for d in &self.down {
            skips.push(h.clone());
            h = d.forward(&h)?.relu();
        }
        for r in &self.res {
            h = r.forward(&h, self.norm, self.eps)?;
        }
        for (u, skip) in self.up.iter().zip(skips.iter().rev()) {
            let s = skip.shape();
            h = u.forward(&h, s.h(), s.w())?.relu();
            h = Var::concat_channels(&[h, skip.clone()])?;
        }
        Ok(self.output.forward(&h)?.tanh())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.input.params();
        for d in &self.down {
            p.extend(d.params());
        }
        for r in &self.res {
            p.extend(r.conv1.params());
            p.extend(r.conv2.params());
        }
        for u in &self.up {
            p.extend(u.params());
        }
        p.extend(self.output.params());
        p
    }

    /// Channel widths along the encoder path.
    pub fn encoder_widths(&self) -> Vec<usize> {
        let mut w = alloc::vec![self.input.out_channels()];
        w.extend(self.down.iter().map(|d| d.out_channels()));
        w
    }
}

/// One stage of the generator.
#[derive(Debug)]
pub enum Stage<T: Real> {
    Network(EncoderDecoder<T>),
    /// Passes its input through unchanged (diagnostic stub).
    Identity,
    /// Outputs zeros of the input's shape (diagnostic stub).
    Zero,
}

impl<T: Real> Stage<T> {
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        match self {
            Stage::Network(net) => net.forward(x),
            Stage::Identity => Ok(x.clone()),
            Stage::Zero => Ok(Var::constant(Tensor::zeros(x.shape()))),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Stage::Network(net) => net.params(),
            _ => Vec::new(),
        }
    }
}

/// Outputs of a full generator pass.
#[derive(Clone, Debug)]
pub struct GeneratorOutput<T: Real> {
    pub final_image: Var<T>,
    pub residual: Var<T>,
    pub rough: Var<T>,
}

#[derive(Debug)]
pub struct Generator<T: Real> {
    pub stage1: Stage<T>,
    pub stage2: Stage<T>,
    pub config: GeneratorConfig,
}

impl<T: Real> Generator<T> {
    /// Builds both stages with N(0, 0.02) weights and zero biases drawn from a
    /// seeded stream; the same `(cfg, seed)` always yields identical weights.
    pub fn build(cfg: &GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stage1 = EncoderDecoder::new("stage1", &cfg.encoder_widths(1), cfg.n_resblocks, cfg.norm_mode, cfg.norm_epsilon, &mut rng);
        let stage2 = EncoderDecoder::new("stage2", &cfg.encoder_widths(2), cfg.n_resblocks, cfg.norm_mode, cfg.norm_epsilon, &mut rng);
        Ok(Generator { stage1: Stage::Network(stage1), stage2: Stage::Network(stage2), config: cfg.clone() })
    }

    /// A generator that returns its input unchanged.
    pub fn passthrough(cfg: &GeneratorConfig) -> Self {
        Generator { stage1: Stage::Zero, stage2: Stage::Identity, config: cfg.clone() }
    }

    fn check_input(&self, x: &Var<T>) -> Result<()> {
        let s = x.shape();
        let m = self.config.size_multiple();
        if s.c() != 3 {
            return Err(Error::InvalidShape { op: "generator", reason: alloc::format!("expected 3 channels, got {s}") });
        }
        if s.h() == 0 || s.w() == 0 || s.h() % m != 0 || s.w() % m != 0 {
            return Err(Error::InvalidShape {
                op: "generator",
                reason: alloc::format!("spatial size {}x{} is not a positive multiple of {m}; pad first", s.h(), s.w()),
            });
        }
        Ok(())
    }

    /// Predicted residual `R̂`.
    pub fn stage1_forward(&self, input: &Var<T>) -> Result<Var<T>> {
        self.check_input(input)?;
        self.stage1.forward(input)
    }

    pub fn stage2_forward(&self, rough: &Var<T>) -> Result<Var<T>> {
        self.check_input(rough)?;
        self.stage2.forward(rough)
    }

    pub fn forward(&self, input: &Var<T>) -> Result<GeneratorOutput<T>> {
        let residual = self.stage1_forward(input)?;
        let rough = input.sub(&residual)?.clamp(-T::one(), T::one());
        let final_image = self.stage2_forward(&rough)?;
        Ok(GeneratorOutput { final_image, residual, rough })
    }

    /// Inference on a constant input.
    pub fn render(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(&Var::constant(input.clone()))?.final_image.value().clone())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.stage1.params();
        p.extend(self.stage2.params());
        p
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params())
    }
}

/// Records how to undo [`pad_reflect_to_multiple`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub height: usize,
    pub width: usize,
}

impl CropSpec {
    pub fn apply<T: Real>(&self, t: &Tensor<T>) -> Result<Tensor<T>> {
        t.crop(0, 0, self.height, self.width)
    }
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Pads bottom/right by reflection so height and width become the smallest
/// multiples of `m` that are at least the original size.
pub fn pad_reflect_to_multiple<T: Real>(img: &Tensor<T>, m: usize) -> Result<(Tensor<T>, CropSpec)> {
    if m == 0 {
        return Err(Error::InvalidInput("padding multiple must be at least 1".into()));
    }
    let s = img.shape();
    if s.h() == 0 || s.w() == 0 {
        return Err(Error::InvalidInput(alloc::format!("cannot pad an empty image {s}")));
    }
    let (h, w) = (s.h().div_ceil(m) * m, s.w().div_ceil(m) * m);
    let spec = CropSpec { height: s.h(), width: s.w() };
    if (h, w) == (s.h(), s.w()) {
        return Ok((img.clone(), spec));
    }
    let out = Tensor::from_fn(Shape::new(s.n(), s.c(), h, w), |[n, c, y, x]| img.at([n, c, reflect(y, s.h()), reflect(x, s.w())]));
    Ok((out, spec))
}
