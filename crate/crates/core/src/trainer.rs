//! Epoch/batch training loop on the auxiliary set and the checkpoint format.
//!
//! Checkpoint layout:
//!
//! ```text
//! PILOTCKPT\n
//! <version>\n
//! <manifest byte length>\n
//! <manifest JSON>
//! <little-endian f64 payload, tensors back to back in manifest order>
//! ```

use std::path::Path;
use std::sync::Arc;

use log::info;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{PilotError, Result};
use crate::grad::{clip_global_norm, loss_and_grad, optimizer_step, AdamConfig, AdamState, ParamSet};
use crate::model::{init_model, ModelConfig, ModelState, TrainObjective};
use crate::numerics::{RngState, RngStream, Tensor};
use crate::objective::ScoringConfig;
use crate::prompts::BranchNoise;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Gumbel noise scale on the attribute logits.
    pub gumbel_scale: f64,
    /// Global-norm gradient clip; off when `None`.
    pub clip_norm: Option<f64>,
    pub scoring: ScoringConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            gumbel_scale: 1.0,
            clip_norm: None,
            scoring: ScoringConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PilotError::config("epochs and batch size must be at least 1"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(PilotError::config("lr and weight decay must be non-negative"));
        }
        if !(self.gumbel_scale >= 0.0) {
            return Err(PilotError::config("gumbel scale must be non-negative"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(PilotError::config("clip norm must be positive"));
            }
        }
        self.scoring.validate()
    }
}

/// Gumbel draws for one image at one optimizer step.
pub fn training_noise(model: &ModelState, seed: u64, step: u64, item: usize, scale: f64) -> BranchNoise {
    let mut rng = RngStream::named(seed, "gumbel").substream(step).substream(item as u64);
    BranchNoise::sample(&model.bank, scale, &mut rng)
}

/// Batch order of one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    RngStream::named(seed.wrapping_add(epoch as u64), "shuffle").permutation(n)
}

pub fn train(mut model: ModelState, aux: &Dataset, cfg: &TrainConfig) -> Result<ModelState> {
    cfg.validate()?;
    if aux.is_empty() {
        return Err(PilotError::config("training set is empty"));
    }
    aux.validate()?;
    let feats = model.frozen_features(aux)?;
    let masks: Vec<Arc<Vec<bool>>> = aux.records.iter().map(|r| Arc::new(r.mask.clone())).collect();
    let batch_size = cfg.batch_size.min(aux.len());

    let mut params = model.param_set();
    let mut adam = model.optimizer.take().unwrap_or_else(|| AdamState::new(&params));
    let first_epoch = model.loss_log.len();

    for epoch in 0..cfg.epochs {
        let order = epoch_order(cfg.seed, first_epoch + epoch, aux.len());
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let step = adam.step;
            let batch = chunk
                .iter()
                .map(|&i| {
                    let noise = training_noise(&model, cfg.seed, step, i, cfg.gumbel_scale);
                    (i, aux.records[i].label, masks[i].clone(), noise)
                })
                .collect();
            let obj = TrainObjective::new(&model, &feats, batch, cfg.scoring);
            let items: Vec<usize> = (0..chunk.len()).collect();
            let (loss, mut grads) = loss_and_grad(&obj, &params, &items).map_err(|e| match e {
                PilotError::NumericalBlowup { location } => PilotError::NumericalBlowup {
                    location: format!("epoch {epoch}, batch {b}, {location}"),
                },
                other => other,
            })?;
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            optimizer_step(&mut params, &grads, cfg.lr, cfg.weight_decay, &mut adam, AdamConfig::default())?;
            if params.entries().iter().any(|e| !e.value.is_finite()) {
                return Err(PilotError::NumericalBlowup {
                    location: format!("epoch {epoch}, batch {b}, parameter update"),
                });
            }
            epoch_loss += loss * chunk.len() as f64;
        }
        let mean = epoch_loss / aux.len() as f64;
        info!("epoch {} loss {:.6}", first_epoch + epoch + 1, mean);
        model.loss_log.push(mean);
    }
    model.apply_param_set(&params)?;
    model.optimizer = Some(adam);
    let last = first_epoch + cfg.epochs;
    model.rng = vec![
        ("shuffle".into(), RngStream::named(cfg.seed.wrapping_add(last as u64), "shuffle").state()),
        ("gumbel".into(), RngStream::named(cfg.seed, "gumbel").state()),
    ];
    Ok(model)
}

const MAGIC: &str = "PILOTCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// In `f64` units from the start of the payload.
    offset: usize,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    rng: Vec<(String, RngState)>,
}

fn unsupported(msg: impl Into<String>) -> PilotError {
    PilotError::UnsupportedCheckpoint(msg.into())
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    let params = model.param_set();
    let mut tensors: Vec<(String, &Tensor, bool)> =
        params.entries().iter().map(|e| (e.name.clone(), &e.value, true)).collect();
    if let Some(adam) = &model.optimizer {
        for (i, e) in params.entries().iter().enumerate() {
            tensors.push((format!("adam.first.{}", e.name), &adam.first[i], false));
        }
        for (i, e) in params.entries().iter().enumerate() {
            tensors.push((format!("adam.second.{}", e.name), &adam.second[i], false));
        }
    }
    let log = Tensor::vector(model.loss_log.clone())?;
    tensors.push(("log.loss".into(), &log, false));

    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    let mut offset = 0;
    for (name, t, trainable) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            trainable: *trainable,
        });
        offset += t.len();
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        config: model.config.clone(),
        tensors: entries,
        optimizer_step: model.optimizer.as_ref().map(|a| a.step),
        rng: model.rng.clone(),
    };
    let json = serde_json::to_string(&manifest).map_err(|e| PilotError::format(path, e.to_string()))?;
    let mut bytes = format!("{MAGIC}\n{VERSION}\n{}\n{json}", json.len()).into_bytes();
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes).map_err(|e| PilotError::io(path, e))
}

fn next_line<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str> {
    let rest = bytes.get(*pos..).unwrap_or(&[]);
    let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| unsupported("truncated header"))?;
    *pos += end + 1;
    std::str::from_utf8(&rest[..end]).map_err(|_| unsupported("header is not text"))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = std::fs::read(path).map_err(|e| PilotError::io(path, e))?;
    let mut pos = 0;
    if next_line(&bytes, &mut pos)? != MAGIC {
        return Err(unsupported("missing PILOTCKPT magic"));
    }
    let version: u32 = next_line(&bytes, &mut pos)?.parse().map_err(|_| unsupported("bad version line"))?;
    if version != VERSION {
        return Err(unsupported(format!("version {version}, this build reads {VERSION}")));
    }
    let len: usize = next_line(&bytes, &mut pos)?.parse().map_err(|_| unsupported("bad manifest length"))?;
    let json = bytes.get(pos..pos + len).ok_or_else(|| unsupported("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| unsupported(format!("manifest: {e}")))?;
    let payload = &bytes[pos + len..];

    let total: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != total * 8 {
        return Err(unsupported(format!(
            "payload holds {} bytes, manifest describes {}",
            payload.len(),
            total * 8
        )));
    }
    let read = |e: &TensorEntry| -> Result<Tensor> {
        let n: usize = e.shape.iter().product();
        let data = payload[e.offset * 8..(e.offset + n) * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(e.shape.clone(), data).map_err(|_| unsupported(format!("tensor '{}' is malformed", e.name)))
    };
    for e in &manifest.tensors {
        if e.offset + e.shape.iter().product::<usize>() > total {
            return Err(unsupported(format!("tensor '{}' lies outside the payload", e.name)));
        }
    }

    let mut model = init_model(&manifest.config).map_err(|e| unsupported(format!("config: {e}")))?;
    let mut params = ParamSet::new();
    let by_name = |name: &str| manifest.tensors.iter().find(|t| t.name == name);
    for e in model.param_set().entries() {
        let t = by_name(&e.name).ok_or_else(|| unsupported(format!("missing tensor '{}'", e.name)))?;
        params.push(e.name.clone(), read(t)?, t.trainable)?;
    }
    model.apply_param_set(&params).map_err(|e| unsupported(e.to_string()))?;
    if let Some(step) = manifest.optimizer_step {
        let mut adam = AdamState::new(&params);
        adam.step = step;
        for (i, e) in params.entries().iter().enumerate() {
            for (kind, slot) in [("first", &mut adam.first[i]), ("second", &mut adam.second[i])] {
                let t = by_name(&format!("adam.{kind}.{}", e.name))
                    .ok_or_else(|| unsupported(format!("missing optimizer moment for '{}'", e.name)))?;
                *slot = read(t)?;
            }
        }
        model.optimizer = Some(adam);
    }
    let log = by_name("log.loss").ok_or_else(|| unsupported("missing loss log"))?;
    model.loss_log = read(log)?.into_data();
    model.rng = manifest.rng;
    Ok(model)
}
