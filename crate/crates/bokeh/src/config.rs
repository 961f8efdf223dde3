//! Flat TOML configuration: one `key = value` per field of
//! [`TrainConfig`]. Keys left out keep the values of the chosen preset.

use std::path::Path;

use bokeh_core::trainer::TrainConfig;

use crate::error::{AppError, Result};

/// Parses config text on top of `base`. A `preset = "desk" | "full"` key
/// swaps the base before the other keys are applied.
pub fn parse_config(text: &str, base: &TrainConfig) -> Result<TrainConfig> {
    let err = |reason: String| AppError::Config { path: "<text>".into(), reason };
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| err(e.to_string()))?;
    let mut base = base.clone();
    let mut pairs = Vec::new();
    for (k, v) in &table {
        let s = match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => format!("{f:?}"),
            toml::Value::Boolean(b) => b.to_string(),
            toml::Value::Array(items) => items
                .iter()
                .map(|i| i.as_integer().map(|n| n.to_string()).ok_or_else(|| err(format!("{k}: arrays must hold integers"))))
                .collect::<Result<Vec<_>>>()?
                .join(","),
            other => return Err(err(format!("{k}: unsupported value {other}"))),
        };
        if k == "preset" {
            base = match s.as_str() {
                "desk" => TrainConfig::desk(),
                "full" => TrainConfig::default(),
                _ => return Err(err(format!("unknown preset {s:?}"))),
            };
        } else {
            pairs.push((k.clone(), s));
        }
    }
    TrainConfig::from_pairs(&base, pairs.iter().map(|(k, v)| (k.as_str(), v.as_str()))).map_err(|e| err(e.to_string()))
}

pub fn load_config(path: &Path, base: &TrainConfig) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    parse_config(&text, base).map_err(|e| match e {
        AppError::Config { reason, .. } => AppError::Config { path: path.into(), reason },
        other => other,
    })
}

/// Renders every field as TOML; `parse_config` reads it back unchanged.
pub fn render_config(cfg: &TrainConfig) -> String {
    let mut out = String::new();
    for (k, v) in cfg.to_pairs() {
        let value = match k.as_str() {
            "critic_depths" => format!("[{}]", v.replace(',', ", ")),
            "norm_mode" | "critic_norm_mode" | "extractor" | "extractor_weights" => toml::Value::String(v).to_string(),
            _ => v,
        };
        out.push_str(&format!("{k} = {value}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_parse_roundtrip() {
        let mut cfg = TrainConfig::desk();
        cfg.extractor_weights = "/data/vgg 19.ckpt".into();
        cfg.critic.min_input_hw = cfg.schedule.crop;
        let text = render_config(&cfg);
        assert_eq!(parse_config(&text, &TrainConfig::default()).unwrap(), cfg);
    }

    #[test]
    fn preset_and_overrides() {
        let cfg = parse_config("preset = \"desk\"\nseed = 7\ncrop_height = 64\ncrop_width = 96\nw_adv = 0.0\ncritic_depths = [2, 3]\n", &TrainConfig::default())
            .unwrap();
        assert_eq!(cfg.generator.stage1_base_channels, 8);
        assert_eq!(cfg.schedule.seed, 7);
        assert_eq!(cfg.critic.depths, vec![2, 3]);
        assert_eq!(cfg.loss.w_adv, 0.0);
        assert!(parse_config("nope = 1", &TrainConfig::default()).is_err());
        assert!(parse_config("n_scales = 2", &TrainConfig::default()).is_err());
    }
}
