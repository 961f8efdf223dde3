//! In-memory training snapshot. The on-disk codec lives in the std crate.

use alloc::collections::BTreeMap;
use alloc::string::String;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::Param;
use crate::real::Real;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "bggan-ckpt-1";

/// Named `f32` arrays plus string metadata (schedule position, config snapshot).
#[derive(Clone, Debug, Default)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub arrays: BTreeMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| Error::Checkpoint(alloc::format!("missing metadata {key}")))
    }

    pub fn meta_parse<V: FromStr>(&self, key: &str) -> Result<V> {
        let s = self.meta_str(key)?;
        s.parse().map_err(|_| Error::Checkpoint(alloc::format!("metadata {key}: cannot parse {s:?}")))
    }

    pub fn insert_params<T: Real>(&mut self, prefix: &str, params: &[&Param<T>]) {
        for p in params {
            self.arrays.insert(alloc::format!("{prefix}.{}", p.name()), p.value().cast());
        }
    }

    /// Overwrites every parameter from `<prefix>.<name>`; all must be present with matching shapes.
    pub fn load_params<T: Real>(&self, prefix: &str, params: &[&Param<T>]) -> Result<()> {
        for p in params {
            let key = alloc::format!("{prefix}.{}", p.name());
            let arr = self.arrays.get(&key).ok_or_else(|| Error::Checkpoint(alloc::format!("missing array {key}")))?;
            if arr.shape() != p.shape() {
                return Err(Error::Checkpoint(alloc::format!("array {key}: expected {}, found {}", p.shape(), arr.shape())));
            }
            p.set(arr.cast());
        }
        Ok(())
    }

    /// Bitwise equality of metadata and every array.
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.meta == other.meta
            && self.arrays.len() == other.arrays.len()
            && self.arrays.iter().zip(&other.arrays).all(|((ka, a), (kb, b))| {
                ka == kb && a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
