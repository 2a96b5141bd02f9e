//! Image scores, per-layer anomaly maps and the losses trained on them.

use serde::{Deserialize, Serialize};

use crate::error::{PilotError, Result};
use crate::grad::upsample_bilinear;
use crate::numerics::{cosine_sim, sigmoid};
use crate::prompts::FusedPromptPair;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringConfig {
    pub temperature: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub prob_eps: f64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            dice_smooth: 1.0,
            prob_eps: 1e-7,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(PilotError::config("scoring temperature must be positive"));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(PilotError::config("focal gamma must be non-negative"));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(PilotError::config("focal alpha must lie in (0, 1]"));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(PilotError::config("dice smoothing must be positive"));
        }
        if !(self.prob_eps > 0.0 && self.prob_eps < 0.5) {
            return Err(PilotError::config("probability clamp must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Temperature-scaled similarity difference (anomalous minus normal), squashed.
pub fn score_feature(x: &[f64], t_n_fus: &[f64], t_a_fus: &[f64], cfg: &ScoringConfig) -> Result<f64> {
    let diff = cosine_sim(x, t_a_fus)? - cosine_sim(x, t_n_fus)?;
    Ok(sigmoid(diff / cfg.temperature))
}

pub fn image_score(x_cls: &[f64], pair: &FusedPromptPair, cfg: &ScoringConfig) -> Result<f64> {
    score_feature(x_cls, &pair.t_n_fus, &pair.t_a_fus, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    pub grid: (usize, usize),
    /// One `Hp x Wp` probability grid per tapped layer.
    pub layers: Vec<Vec<f64>>,
    pub size: (usize, usize),
    /// Layer mean, upsampled to `H x W`.
    pub fused: Vec<f64>,
}

impl AnomalyMap {
    /// Layer `m` resized to the image size.
    pub fn upsampled_layer(&self, m: usize) -> Vec<f64> {
        let ((hp, wp), (h, w)) = (self.grid, self.size);
        upsample_bilinear(&self.layers[m], hp, wp, h, w)
    }
}

/// Per-patch scores for every tapped layer.
///
/// `maps[m][patch]` is a projected patch feature, raster order over the
/// `grid`; `size` is the output image size.
pub fn anomaly_map(
    maps: &[Vec<Vec<f64>>],
    grid: (usize, usize),
    size: (usize, usize),
    pair: &FusedPromptPair,
    cfg: &ScoringConfig,
) -> Result<AnomalyMap> {
    if maps.is_empty() {
        return Err(PilotError::config("anomaly map needs at least one layer"));
    }
    let mut layers = Vec::with_capacity(maps.len());
    for layer in maps {
        if layer.len() != grid.0 * grid.1 {
            return Err(PilotError::config(format!(
                "layer has {} patches, grid is {}x{}",
                layer.len(),
                grid.0,
                grid.1
            )));
        }
        let scores = layer
            .iter()
            .map(|x| score_feature(x, &pair.t_n_fus, &pair.t_a_fus, cfg))
            .collect::<Result<Vec<f64>>>()?;
        layers.push(scores);
    }
    let n = layers.len() as f64;
    let mean: Vec<f64> = (0..grid.0 * grid.1)
        .map(|i| layers.iter().map(|l| l[i]).sum::<f64>() / n)
        .collect();
    let fused = upsample_bilinear(&mean, grid.0, grid.1, size.0, size.1);
    Ok(AnomalyMap {
        grid,
        layers,
        size,
        fused,
    })
}

pub fn bce(p: f64, y: bool, cfg: &ScoringConfig) -> f64 {
    let pc = p.clamp(cfg.prob_eps, 1.0 - cfg.prob_eps);
    if y {
        -pc.ln()
    } else {
        -(1.0 - pc).ln()
    }
}

/// Pixel-mean focal loss on raw slices.
pub fn focal_from_slices(p: &[f64], mask: &[bool], gamma: f64, alpha: f64, eps: f64) -> f64 {
    let total: f64 = p
        .iter()
        .zip(mask)
        .map(|(&v, &m)| {
            let pc = v.clamp(eps, 1.0 - eps);
            let pt = if m { pc } else { 1.0 - pc };
            let w = if gamma == 0.0 { 1.0 } else { (1.0 - pt).powf(gamma) };
            -alpha * w * pt.ln()
        })
        .sum();
    total / p.len() as f64
}

pub fn dice_from_slices(p: &[f64], mask: &[bool], smooth: f64) -> f64 {
    let inter: f64 = p.iter().zip(mask).filter(|(_, &m)| m).map(|(v, _)| v).sum();
    let psum: f64 = p.iter().sum();
    let gsum = mask.iter().filter(|&&m| m).count() as f64;
    1.0 - (2.0 * inter + smooth) / (psum + gsum + smooth)
}

fn check_shapes(p: &[f64], mask: &[bool]) -> Result<()> {
    if p.len() != mask.len() || p.is_empty() {
        return Err(PilotError::config(format!(
            "map has {} pixels, mask has {}",
            p.len(),
            mask.len()
        )));
    }
    Ok(())
}

pub fn focal(p: &[f64], mask: &[bool], cfg: &ScoringConfig) -> Result<f64> {
    check_shapes(p, mask)?;
    Ok(focal_from_slices(p, mask, cfg.focal_gamma, cfg.focal_alpha, cfg.prob_eps))
}

pub fn dice(p: &[f64], mask: &[bool], cfg: &ScoringConfig) -> Result<f64> {
    check_shapes(p, mask)?;
    Ok(dice_from_slices(p, mask, cfg.dice_smooth))
}

/// Forward outputs of one image needed by the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemPrediction {
    pub score: f64,
    /// Per-layer maps already upsampled to the mask size.
    pub layer_maps: Vec<Vec<f64>>,
}

/// Image term plus layer-averaged focal and dice terms for one image.
pub fn item_loss(pred: &ItemPrediction, label: bool, mask: &[bool], cfg: &ScoringConfig) -> Result<f64> {
    if pred.layer_maps.is_empty() {
        return Err(PilotError::config("prediction carries no layer maps"));
    }
    let mut pixel = 0.0;
    for m in &pred.layer_maps {
        pixel += focal(m, mask, cfg)? + dice(m, mask, cfg)?;
    }
    Ok(bce(pred.score, label, cfg) + pixel / pred.layer_maps.len() as f64)
}

pub fn total_loss(preds: &[ItemPrediction], labels: &[bool], masks: &[Vec<bool>], cfg: &ScoringConfig) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() || preds.len() != masks.len() {
        return Err(PilotError::config("inconsistent batch"));
    }
    let mut sum = 0.0;
    for ((p, &y), g) in preds.iter().zip(labels).zip(masks) {
        sum += item_loss(p, y, g, cfg)?;
    }
    Ok(sum / preds.len() as f64)
}
