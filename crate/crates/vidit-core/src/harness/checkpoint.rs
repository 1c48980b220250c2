//! Binary checkpoint persistence.
//!
//! File layout: magic "VCKP", u32 format version, u64 manifest byte length,
//! the manifest as UTF-8 text, then one raw little-endian f32 buffer per
//! parameter, in manifest order. The manifest is line-oriented
//! `key = value` covering the model and trainer configuration, the step
//! counter, and the trainer RNG state, followed by one
//! `param = <name> <trainable> <dims...>` line per tensor.
//!
//! Floats in the manifest use Rust's shortest-roundtrip rendering, so a
//! save/load cycle reproduces every value bit-for-bit. Optimizer moments
//! are deliberately not persisted: a loaded checkpoint resumes with fresh
//! moment buffers.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Mode, ModelConfig, ParamStore, PlacementSpec};
use crate::tensor::Tensor;
use crate::train::{TrainConfig, TrainState};
use crate::CodecConfig;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"VCKP";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub step: usize,
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn from_state(
        state: &TrainState,
        model: &ModelConfig,
        train: &TrainConfig,
    ) -> Checkpoint {
        Checkpoint {
            params: state.params.clone(),
            model: model.clone(),
            train: train.clone(),
            step: state.step,
            rng_state: state.rng_state,
        }
    }

    /// Rebuild a trainer state around the stored parameters. Moment buffers
    /// start at zero; only forward behavior is persisted exactly.
    pub fn into_state(self) -> Result<TrainState> {
        let mut moment1 = BTreeMap::new();
        let mut moment2 = BTreeMap::new();
        for name in crate::model::trainable_mask(&self.model, &self.params) {
            let shape = self.params.get(&name)?.shape().to_vec();
            moment1.insert(name.clone(), Tensor::zeros(&shape));
            moment2.insert(name, Tensor::zeros(&shape));
        }
        Ok(TrainState {
            params: self.params,
            moment1,
            moment2,
            step: self.step,
            rng_state: self.rng_state,
            log: Vec::new(),
        })
    }
}

fn placement_text(p: &PlacementSpec) -> String {
    match p {
        PlacementSpec::ContinuousFirst(k) => format!("continuous_first {k}"),
        PlacementSpec::DistributedEven(k) => format!("distributed_even {k}"),
        PlacementSpec::Explicit(list) => {
            let items: Vec<String> = list.iter().map(usize::to_string).collect();
            format!("explicit {}", items.join(" "))
        }
    }
}

pub(crate) fn parse_placement(text: &str) -> Result<PlacementSpec> {
    let mut it = text.split_whitespace();
    let kind = it.next().unwrap_or("");
    let rest: Vec<usize> = it
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad placement index {t:?}")))
        })
        .collect::<Result<_>>()?;
    match (kind, rest.as_slice()) {
        ("continuous_first", [k]) => Ok(PlacementSpec::ContinuousFirst(*k)),
        ("distributed_even", [k]) => Ok(PlacementSpec::DistributedEven(*k)),
        ("explicit", list) if !list.is_empty() => Ok(PlacementSpec::Explicit(list.to_vec())),
        _ => Err(Error::Checkpoint(format!("bad placement {text:?}"))),
    }
}

/// The `model.*` and `train.*` manifest lines. This is the canonical text
/// form of a run's configuration; reports digest it to identify arms.
pub fn config_lines(model: &ModelConfig, train: &TrainConfig) -> String {
    let grad_clip = match train.grad_clip {
        None => "none".to_string(),
        Some(v) => v.to_string(),
    };
    format!(
        "model.layers = {}\n\
         model.model_dim = {}\n\
         model.heads = {}\n\
         model.patch = {} {} {}\n\
         model.text_buckets = {}\n\
         model.max_text_tokens = {}\n\
         model.mode = {}\n\
         model.placement = {}\n\
         model.temporal_stride = {}\n\
         model.spatial_stride = {}\n\
         model.decoupled = {}\n\
         train.learning_rate = {}\n\
         train.weight_decay = {}\n\
         train.steps = {}\n\
         train.warmup_steps = {}\n\
         train.batch_size = {}\n\
         train.p_zero = {}\n\
         train.shift = {}\n\
         train.seed = {}\n\
         train.eval_every = {}\n\
         train.grad_clip = {}\n\
         train.skip_invalid = {}\n",
        model.layers,
        model.model_dim,
        model.heads,
        model.patch.0,
        model.patch.1,
        model.patch.2,
        model.text_buckets,
        model.max_text_tokens,
        model.mode,
        placement_text(&model.placement),
        model.codec.temporal_stride,
        model.codec.spatial_stride,
        model.decoupled,
        train.learning_rate,
        train.weight_decay,
        train.steps,
        train.warmup_steps,
        train.batch_size,
        train.p_zero,
        train.shift,
        train.seed,
        train.eval_every,
        grad_clip,
        train.skip_invalid,
    )
}

/// Hex SHA-256 of the canonical configuration text.
pub fn config_digest(model: &ModelConfig, train: &TrainConfig) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(config_lines(model, train).as_bytes());
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn render_manifest(ckpt: &Checkpoint) -> String {
    let mut text = format!(
        "step = {}\nrng_state = {}\n{}",
        ckpt.step,
        ckpt.rng_state,
        config_lines(&ckpt.model, &ckpt.train)
    );
    for (name, tensor, trainable) in ckpt.params.iter() {
        let dims: Vec<String> = tensor.shape().iter().map(usize::to_string).collect();
        text.push_str(&format!(
            "param = {} {} {}\n",
            name,
            u8::from(trainable),
            dims.join(" ")
        ));
    }
    text
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let manifest = render_manifest(ckpt);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(manifest.as_bytes());
    for (_, tensor, _) in ckpt.params.iter() {
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct ManifestData {
    step: usize,
    rng_state: u64,
    model: ModelConfig,
    train: TrainConfig,
    params: Vec<(String, bool, Vec<usize>)>,
}

fn parse_manifest(text: &str) -> Result<ManifestData> {
    let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
    let mut params = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Checkpoint(format!("manifest line {line:?} is not key = value")))?;
        let (key, value) = (key.trim(), value.trim());
        if key == "param" {
            let mut it = value.split_whitespace();
            let name = it
                .next()
                .ok_or_else(|| Error::Checkpoint("param line without a name".into()))?;
            let trainable = match it.next() {
                Some("0") => false,
                Some("1") => true,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "param {name}: bad trainable flag {other:?}"
                    )))
                }
            };
            let dims: Vec<usize> = it
                .map(|t| {
                    t.parse::<usize>().map_err(|_| {
                        Error::Checkpoint(format!("param {name}: bad dimension {t:?}"))
                    })
                })
                .collect::<Result<_>>()?;
            params.push((name.to_string(), trainable, dims));
        } else {
            fields.insert(key, value);
        }
    }

    fn get<'a>(fields: &BTreeMap<&str, &'a str>, key: &str) -> Result<&'a str> {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("manifest is missing `{key}`")))
    }
    fn num<T: std::str::FromStr>(fields: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
        get(fields, key)?
            .parse::<T>()
            .map_err(|_| Error::Checkpoint(format!("manifest `{key}` is malformed")))
    }

    let patch_text = get(&fields, "model.patch")?;
    let patch: Vec<usize> = patch_text
        .split_whitespace()
        .map(|t| {
            t.parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad patch extent {t:?}")))
        })
        .collect::<Result<_>>()?;
    let [pt, ph, pw] = patch.as_slice() else {
        return Err(Error::Checkpoint(format!("bad patch {patch_text:?}")));
    };
    let grad_clip = match get(&fields, "train.grad_clip")? {
        "none" => None,
        v => Some(v.parse::<f64>().map_err(|_| {
            Error::Checkpoint(format!("manifest `train.grad_clip` {v:?} is malformed"))
        })?),
    };

    let model = ModelConfig {
        layers: num(&fields, "model.layers")?,
        model_dim: num(&fields, "model.model_dim")?,
        heads: num(&fields, "model.heads")?,
        patch: (*pt, *ph, *pw),
        text_buckets: num(&fields, "model.text_buckets")?,
        max_text_tokens: num(&fields, "model.max_text_tokens")?,
        mode: get(&fields, "model.mode")?.parse::<Mode>()?,
        placement: parse_placement(get(&fields, "model.placement")?)?,
        codec: CodecConfig {
            temporal_stride: num(&fields, "model.temporal_stride")?,
            spatial_stride: num(&fields, "model.spatial_stride")?,
        },
        decoupled: num(&fields, "model.decoupled")?,
    };
    let train = TrainConfig {
        learning_rate: num(&fields, "train.learning_rate")?,
        weight_decay: num(&fields, "train.weight_decay")?,
        steps: num(&fields, "train.steps")?,
        warmup_steps: num(&fields, "train.warmup_steps")?,
        batch_size: num(&fields, "train.batch_size")?,
        p_zero: num(&fields, "train.p_zero")?,
        shift: num(&fields, "train.shift")?,
        seed: num(&fields, "train.seed")?,
        eval_every: num(&fields, "train.eval_every")?,
        grad_clip,
        skip_invalid: num(&fields, "train.skip_invalid")?,
    };
    Ok(ManifestData {
        step: num(&fields, "step")?,
        rng_state: num(&fields, "rng_state")?,
        model,
        train,
        params,
    })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::Checkpoint(format!(
            "{}: file too short for a header",
            path.display()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic, not a checkpoint",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let manifest_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.len() - 16;
    if manifest_len > body {
        return Err(Error::Checkpoint(format!(
            "manifest claims {manifest_len} bytes, file holds {body}"
        )));
    }
    let manifest = std::str::from_utf8(&bytes[16..16 + manifest_len])
        .map_err(|_| Error::Checkpoint("manifest is not valid UTF-8".into()))?;
    let m = parse_manifest(manifest)?;

    let mut pos = 16 + manifest_len;
    let mut params = ParamStore::new();
    for (name, trainable, dims) in &m.params {
        let numel: usize = dims.iter().product();
        let need = numel * 4;
        if pos + need > bytes.len() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: buffer needs {need} bytes, {} remain",
                bytes.len() - pos
            )));
        }
        let data: Vec<f32> = bytes[pos..pos + need]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        pos += need;
        params.insert(name, Tensor::from_vec(dims, data)?, *trainable)?;
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} bytes of buffer data not claimed by any manifest parameter",
            bytes.len() - pos
        )));
    }
    Ok(Checkpoint {
        params,
        model: m.model,
        train: m.train,
        step: m.step,
        rng_state: m.rng_state,
    })
}
