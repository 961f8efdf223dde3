//! Frozen convolutional feature extractors for the perceptual loss.

use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::gaussian;
use crate::real::Real;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightsSource {
    /// Loaded from an external weights file.
    PretrainedFile,
    /// Small network with seeded random weights; needs no downloads.
    SeededRandom,
    /// No layers: features are the input itself.
    Identity,
}

#[derive(Clone, Debug)]
enum Layer<T: Real> {
    Conv { weight: Var<T>, bias: Var<T>, stride: usize },
    Relu,
    MaxPool,
    /// Per-channel `x·scale + shift`.
    Affine { scale: Var<T>, shift: Var<T> },
}

/// Output channels of the 16 convolutions of a 19-layer VGG, with `0` for max pooling.
const VGG19: [usize; 20] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 256, 0, 512, 512, 512, 512, 0, 512, 512, 512, 512];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Clone, Debug)]
pub struct FeatureExtractor<T: Real> {
    layers: Vec<Layer<T>>,
    pub tap_point: String,
    pub source: WeightsSource,
    min_input: usize,
}

impl<T: Real> FeatureExtractor<T> {
    pub fn identity() -> Self {
        FeatureExtractor { layers: Vec::new(), tap_point: "input".into(), source: WeightsSource::Identity, min_input: 1 }
    }

    /// Three 3×3 convolutions (3→16, 16→32 stride 2, 32→32) with ReLU,
    /// He-normal weights from `seed`; taps the last ReLU.
    pub fn desk(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for (c_in, c_out, stride) in [(3, 16, 1), (16, 32, 2), (32, 32, 1)] {
            let std = libm::sqrt(2.0 / (c_in * 9) as f64);
            layers.push(Layer::Conv {
                weight: Var::constant(gaussian(Shape::new(c_out, c_in, 3, 3), std, &mut rng)),
                bias: Var::constant(Tensor::zeros([1, c_out, 1, 1])),
                stride,
            });
            layers.push(Layer::Relu);
        }
        FeatureExtractor { layers, tap_point: "relu3".into(), source: WeightsSource::SeededRandom, min_input: 2 }
    }

    /// The convolutional stack of a 19-layer VGG up to and including `relu5_4`.
    ///
    /// `lookup(name, shape)` supplies each array; names follow the usual
    /// `features.<index>.weight` / `features.<index>.bias` layout where
    /// `index` counts conv, ReLU and pooling modules alike. Biases may be
    /// stored flat (`[C]`) as long as the element count matches. Inputs are
    /// expected in `[-1, 1]` and are mapped to ImageNet-normalized `[0, 1]`.
    pub fn vgg19_relu5_4(mut lookup: impl FnMut(&str) -> Option<Tensor<T>>) -> Result<Self> {
        let scale = Tensor::from_fn([1, 3, 1, 1], |[_, c, _, _]| T::lit(0.5 / IMAGENET_STD[c]));
        let shift = Tensor::from_fn([1, 3, 1, 1], |[_, c, _, _]| T::lit((0.5 - IMAGENET_MEAN[c]) / IMAGENET_STD[c]));
        let mut layers = alloc::vec![Layer::Affine { scale: Var::constant(scale), shift: Var::constant(shift) }];
        let mut fetch = |name: String, shape: Shape| -> Result<Var<T>> {
            let t = lookup(&name).ok_or_else(|| Error::InvalidInput(alloc::format!("missing extractor weight {name}")))?;
            if t.numel() != shape.numel() {
                return Err(Error::InvalidInput(alloc::format!("{name}: expected {shape}, got {}", t.shape())));
            }
            Ok(Var::constant(t.reshape(shape)?))
        };
        let (mut index, mut c_in) = (0, 3);
        for &c_out in VGG19.iter() {
            if c_out == 0 {
                layers.push(Layer::MaxPool);
                index += 1;
                continue;
            }
            let weight = fetch(alloc::format!("features.{index}.weight"), Shape::new(c_out, c_in, 3, 3))?;
            let bias = fetch(alloc::format!("features.{index}.bias"), Shape::new(1, c_out, 1, 1))?;
            layers.push(Layer::Conv { weight, bias, stride: 1 });
            layers.push(Layer::Relu);
            index += 2;
            c_in = c_out;
        }
        Ok(FeatureExtractor { layers, tap_point: "relu5_4".into(), source: WeightsSource::PretrainedFile, min_input: 16 })
    }

    pub fn min_input(&self) -> usize {
        self.min_input
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let s = x.shape();
        if s.h() < self.min_input || s.w() < self.min_input {
            return Err(Error::TooSmall { got_h: s.h(), got_w: s.w(), min_h: self.min_input, min_w: self.min_input });
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Conv { weight, bias, stride } => h.conv2d(weight, *stride, 1)?.add(bias)?,
                Layer::Relu => h.relu(),
                Layer::MaxPool => h.max_pool2d(2, 2)?,
                Layer::Affine { scale, shift } => h.mul(scale)?.add(shift)?,
            };
        }
        Ok(h)
    }
}
