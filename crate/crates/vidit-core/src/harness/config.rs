//! Run configuration files.
//!
//! Line-oriented `key = value` text using the same key names as checkpoint
//! manifests, so a config file is a subset of a manifest. Missing keys keep
//! their defaults; `#` starts a comment.

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig};
use crate::train::TrainConfig;

use super::checkpoint::parse_placement;

pub fn parse_config(text: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = ModelConfig::default();
    let mut train = TrainConfig::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: {raw:?} is not `key = value`", i + 1))
        })?;
        apply(&mut model, &mut train, key.trim(), value.trim())
            .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn apply(model: &mut ModelConfig, train: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse::<T>()
            .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
    }
    match key {
        "model.layers" => model.layers = num(key, value)?,
        "model.model_dim" => model.model_dim = num(key, value)?,
        "model.heads" => model.heads = num(key, value)?,
        "model.patch" => {
            let dims: Vec<usize> = value
                .split_whitespace()
                .map(|t| num(key, t))
                .collect::<Result<_>>()?;
            let [pt, ph, pw] = dims.as_slice() else {
                return Err(Error::Config(format!(
                    "model.patch wants three extents, got {value:?}"
                )));
            };
            model.patch = (*pt, *ph, *pw);
        }
        "model.text_buckets" => model.text_buckets = num(key, value)?,
        "model.max_text_tokens" => model.max_text_tokens = num(key, value)?,
        "model.mode" => model.mode = value.parse::<Mode>()?,
        "model.placement" => {
            model.placement = parse_placement(value)
                .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))?
        }
        "model.temporal_stride" => model.codec.temporal_stride = num(key, value)?,
        "model.spatial_stride" => model.codec.spatial_stride = num(key, value)?,
        "model.decoupled" => model.decoupled = num(key, value)?,
        "train.learning_rate" => train.learning_rate = num(key, value)?,
        "train.weight_decay" => train.weight_decay = num(key, value)?,
        "train.steps" => train.steps = num(key, value)?,
        "train.warmup_steps" => train.warmup_steps = num(key, value)?,
        "train.batch_size" => train.batch_size = num(key, value)?,
        "train.p_zero" => train.p_zero = num(key, value)?,
        "train.shift" => train.shift = num(key, value)?,
        "train.seed" => train.seed = num(key, value)?,
        "train.eval_every" => train.eval_every = num(key, value)?,
        "train.grad_clip" => {
            train.grad_clip = match value {
                "none" => None,
                v => Some(num(key, v)?),
            }
        }
        "train.skip_invalid" => train.skip_invalid = num(key, value)?,
        other => return Err(Error::Config(format!("unknown key {other:?}"))),
    }
    Ok(())
}
