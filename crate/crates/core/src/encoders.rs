//! Seeded stand-ins for the frozen vision and text towers.
//!
//! The vision side turns an `H x W` grayscale image into patch features at a
//! set of tapped depths plus a global feature, all mapped through one
//! trainable projection. The text side is a stack of mean-context layers that
//! accepts learnable prefix vectors in its first `J` layers.

use serde::{Deserialize, Serialize};

use crate::error::{PilotError, Result};
use crate::numerics::{fnv1a, l2_normalize, matvec, RngStream, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Joint embedding width.
    pub dim: usize,
    /// Width before the vision projection.
    pub pre_dim: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Tapped vision depths; 0 is the patch embedding itself.
    pub layers: Vec<usize>,
    /// Total text layers (J').
    pub text_depth: usize,
    /// Layers receiving prefixes (J).
    pub prefix_layers: usize,
    /// Prefix vectors per layer (L').
    pub prefix_len: usize,
    pub vision_seed: u64,
    pub text_seed: u64,
    pub vocab_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            pre_dim: 48,
            image_h: 32,
            image_w: 32,
            patch_h: 8,
            patch_w: 8,
            layers: vec![1, 2],
            text_depth: 2,
            prefix_layers: 1,
            prefix_len: 4,
            vision_seed: 11,
            text_seed: 12,
            vocab_seed: 13,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(PilotError::config(m.to_string()));
        if self.dim == 0 || self.pre_dim == 0 {
            return fail("encoder widths must be positive");
        }
        if self.patch_h == 0 || self.patch_w == 0 {
            return fail("patch dims must be positive");
        }
        if !self.image_h.is_multiple_of(self.patch_h) || !self.image_w.is_multiple_of(self.patch_w) {
            return fail("image dims must be divisible by patch dims");
        }
        if self.layers.is_empty() {
            return fail("at least one vision layer must be tapped");
        }
        if self.prefix_layers > self.text_depth {
            return fail("prefix layers J must not exceed text depth J'");
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_h, self.image_w / self.patch_w)
    }

    pub fn n_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn vision_depth(&self) -> usize {
        self.layers.iter().copied().max().unwrap_or(0)
    }
}

/// Frozen part of the vision tower output: everything before the projection.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenFeatures {
    /// Mean patch feature of the deepest layer.
    pub cls: Vec<f64>,
    /// For each tapped layer (in config order) the per-patch features,
    /// raster order over the patch grid.
    pub patches: Vec<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoding {
    pub x_cls: Vec<f64>,
    /// For each tapped layer, per-patch projected features.
    pub maps: Vec<Vec<Vec<f64>>>,
}

/// Weights of a patch and of its 4-neighbour mean when mixing a layer.
const MIX_OWN: f64 = 1.5;
const MIX_NEIGHBOUR: f64 = -1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    cfg: EncoderConfig,
    w_patch: Tensor,
    mix: Vec<(Tensor, Tensor)>,
    /// `dim x pre_dim`; the only trainable piece.
    pub w_proj: Tensor,
}

impl VisionEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let patch_len = cfg.patch_h * cfg.patch_w;
        let base = RngStream::named(cfg.vision_seed, "vision");
        let w_patch = Tensor::randn(
            vec![cfg.pre_dim, patch_len],
            1.5 / (patch_len as f64).sqrt(),
            &mut base.substream(0),
        );
        let mix = (1..=cfg.vision_depth())
            .map(|layer| {
                let mut rng = base.substream(layer as u64);
                let mut a = Tensor::randn(
                    vec![cfg.pre_dim, cfg.pre_dim],
                    1.0 / (cfg.pre_dim as f64).sqrt(),
                    &mut rng,
                );
                for i in 0..cfg.pre_dim {
                    a.data_mut()[i * cfg.pre_dim + i] += 0.5;
                }
                let b = Tensor::randn(vec![cfg.pre_dim], 0.1, &mut rng);
                (a, b)
            })
            .collect();
        let mut rng = RngStream::named(cfg.vision_seed, "vision.proj");
        let mut w_proj = Tensor::randn(
            vec![cfg.dim, cfg.pre_dim],
            0.1 / (cfg.pre_dim as f64).sqrt(),
            &mut rng,
        );
        for i in 0..cfg.dim.min(cfg.pre_dim) {
            w_proj.data_mut()[i * cfg.pre_dim + i] += 1.0;
        }
        Ok(Self {
            cfg: cfg.clone(),
            w_patch,
            mix,
            w_proj,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    /// The seeded fixed matrices, for freeze checks.
    pub fn fixed_weights(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.w_patch];
        for (a, b) in &self.mix {
            out.push(a);
            out.push(b);
        }
        out
    }

    /// Replace the patch embedding (test fixtures with hand-set weights).
    pub fn with_patch_matrix(mut self, w_patch: Tensor) -> Result<Self> {
        if w_patch.shape() != self.w_patch.shape() {
            return Err(PilotError::config("patch matrix shape mismatch"));
        }
        self.w_patch = w_patch;
        Ok(self)
    }

    fn check_image(&self, img: &[f64]) -> Result<()> {
        if img.len() != self.cfg.image_h * self.cfg.image_w {
            return Err(PilotError::config(format!(
                "image has {} pixels, encoder expects {}x{}",
                img.len(),
                self.cfg.image_h,
                self.cfg.image_w
            )));
        }
        Ok(())
    }

    /// Runs the fixed part of the tower.
    pub fn frozen_features(&self, img: &[f64]) -> Result<FrozenFeatures> {
        self.check_image(img)?;
        let cfg = &self.cfg;
        let (gh, gw) = cfg.grid();
        let patch_len = cfg.patch_h * cfg.patch_w;

        let mut h: Vec<Vec<f64>> = Vec::with_capacity(gh * gw);
        let mut patch = Vec::with_capacity(patch_len);
        for pr in 0..gh {
            for pc in 0..gw {
                patch.clear();
                for r in 0..cfg.patch_h {
                    let row = (pr * cfg.patch_h + r) * cfg.image_w + pc * cfg.patch_w;
                    patch.extend_from_slice(&img[row..row + cfg.patch_w]);
                }
                let z = matvec(&self.w_patch, cfg.pre_dim, patch_len, &patch);
                h.push(z.into_iter().map(f64::tanh).collect());
            }
        }

        let mut depths = vec![h.clone()];
        for (a, b) in &self.mix {
            let prev = depths.last().unwrap();
            let mut next = Vec::with_capacity(prev.len());
            for pr in 0..gh {
                for pc in 0..gw {
                    let mut nbr = vec![0.0; cfg.pre_dim];
                    let mut count = 0.0;
                    let mut visit = |r: usize, c: usize| {
                        for (acc, v) in nbr.iter_mut().zip(&prev[r * gw + c]) {
                            *acc += v;
                        }
                        count += 1.0;
                    };
                    if pr > 0 {
                        visit(pr - 1, pc);
                    }
                    if pr + 1 < gh {
                        visit(pr + 1, pc);
                    }
                    if pc > 0 {
                        visit(pr, pc - 1);
                    }
                    if pc + 1 < gw {
                        visit(pr, pc + 1);
                    }
                    let own = &prev[pr * gw + pc];
                    let mixed: Vec<f64> = if count > 0.0 {
                        own.iter().zip(&nbr).map(|(o, n)| MIX_OWN * o + MIX_NEIGHBOUR * n / count).collect()
                    } else {
                        own.clone()
                    };
                    let z = matvec(a, cfg.pre_dim, cfg.pre_dim, &mixed);
                    next.push(z.iter().zip(b.iter()).map(|(zi, bi)| (zi + bi).tanh()).collect());
                }
            }
            depths.push(next);
        }

        let deepest = &depths[cfg.vision_depth()];
        let mut cls = vec![0.0; cfg.pre_dim];
        for p in deepest {
            for (acc, v) in cls.iter_mut().zip(p) {
                *acc += v;
            }
        }
        let n = deepest.len() as f64;
        cls.iter_mut().for_each(|v| *v /= n);

        let patches = cfg.layers.iter().map(|&m| depths[m].clone()).collect();
        Ok(FrozenFeatures { cls, patches })
    }

    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        matvec(&self.w_proj, self.cfg.dim, self.cfg.pre_dim, v)
    }

    pub fn project_features(&self, f: &FrozenFeatures) -> ImageEncoding {
        ImageEncoding {
            x_cls: self.project(&f.cls),
            maps: f
                .patches
                .iter()
                .map(|layer| layer.iter().map(|p| self.project(p)).collect())
                .collect(),
        }
    }

    pub fn encode_image(&self, img: &[f64]) -> Result<ImageEncoding> {
        Ok(self.project_features(&self.frozen_features(img)?))
    }
}

/// Deterministic unit vector standing in for a tokenizer lookup.
pub fn word_embedding(word: &str, vocab_seed: u64, dim: usize) -> Vec<f64> {
    let mut rng = RngStream::new(vocab_seed, fnv1a(word.as_bytes()));
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Word embeddings of a whitespace-separated phrase.
pub fn phrase_tokens(text: &str, vocab_seed: u64, dim: usize) -> Vec<Vec<f64>> {
    text.split_whitespace()
        .map(|w| word_embedding(w, vocab_seed, dim))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextLayer {
    pub token_mix: Tensor,
    pub context_mix: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoder {
    dim: usize,
    prefix_layers: usize,
    prefix_len: usize,
    vocab_seed: u64,
    layers: Vec<TextLayer>,
}

impl TextEncoder {
    pub fn new(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let base = RngStream::named(cfg.text_seed, "text");
        let std = 1.0 / (cfg.dim as f64).sqrt();
        let layers = (0..cfg.text_depth)
            .map(|j| {
                let mut rng = base.substream(j as u64);
                TextLayer {
                    token_mix: Tensor::randn(vec![cfg.dim, cfg.dim], std, &mut rng),
                    context_mix: Tensor::randn(vec![cfg.dim, cfg.dim], std, &mut rng),
                }
            })
            .collect();
        Ok(Self {
            dim: cfg.dim,
            prefix_layers: cfg.prefix_layers,
            prefix_len: cfg.prefix_len,
            vocab_seed: cfg.vocab_seed,
            layers,
        })
    }

    /// Encoder with explicit layer matrices (fixtures and hand traces).
    pub fn from_layers(dim: usize, prefix_layers: usize, prefix_len: usize, vocab_seed: u64, layers: Vec<TextLayer>) -> Result<Self> {
        if prefix_layers > layers.len() {
            return Err(PilotError::config("prefix layers exceed depth"));
        }
        Ok(Self {
            dim,
            prefix_layers,
            prefix_len,
            vocab_seed,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn prefix_layers(&self) -> usize {
        self.prefix_layers
    }

    pub fn prefix_len(&self) -> usize {
        self.prefix_len
    }

    pub fn vocab_seed(&self) -> u64 {
        self.vocab_seed
    }

    pub fn layers(&self) -> &[TextLayer] {
        &self.layers
    }

    pub fn word(&self, w: &str) -> Vec<f64> {
        word_embedding(w, self.vocab_seed, self.dim)
    }

    pub fn phrase(&self, text: &str) -> Vec<Vec<f64>> {
        phrase_tokens(text, self.vocab_seed, self.dim)
    }

    /// Encode `tokens` with one `prefix_len x dim` prefix tensor for each of
    /// the first `J` layers.
    pub fn encode_text(&self, tokens: &[Vec<f64>], prefixes: &[Tensor]) -> Result<Vec<f64>> {
        if !prefixes.is_empty() && prefixes.len() != self.prefix_layers {
            return Err(PilotError::config(format!(
                "expected prefixes for {} layers, got {}",
                self.prefix_layers,
                prefixes.len()
            )));
        }
        for p in prefixes {
            if p.shape() != [self.prefix_len, self.dim] {
                return Err(PilotError::config(format!("prefix shape {:?}", p.shape())));
            }
        }
        self.encode_inner(tokens, prefixes)
    }

    /// Encoding without any learnable prefix.
    pub fn encode_text_frozen(&self, tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.encode_inner(tokens, &[])
    }

    fn encode_inner(&self, tokens: &[Vec<f64>], prefixes: &[Tensor]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(PilotError::config("text encoder needs at least one token"));
        }
        if tokens.iter().any(|t| t.len() != self.dim) {
            return Err(PilotError::config("token width mismatch"));
        }
        let d = self.dim;
        let mut toks: Vec<Vec<f64>> = tokens.to_vec();
        for (j, layer) in self.layers.iter().enumerate() {
            let mut ctx = vec![0.0; d];
            let mut count = 0usize;
            for t in &toks {
                ctx.iter_mut().zip(t).for_each(|(c, v)| *c += v);
                count += 1;
            }
            if let Some(pre) = prefixes.get(j) {
                for l in 0..self.prefix_len {
                    ctx.iter_mut().zip(pre.row(l)).for_each(|(c, v)| *c += v);
                    count += 1;
                }
            }
            let n = count as f64;
            ctx.iter_mut().for_each(|c| *c /= n);
            let bc = matvec(&layer.context_mix, d, d, &ctx);
            for t in toks.iter_mut() {
                let at = matvec(&layer.token_mix, d, d, t);
                *t = at.iter().zip(&bc).map(|(a, b)| (a + b).tanh()).collect();
            }
        }
        l2_normalize(toks.last().unwrap())
    }
}
