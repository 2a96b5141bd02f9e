//! Model assembly: learnable state, the frozen towers, the plain forward pass
//! used for evaluation, and the taped forward pass used for gradients.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::encoders::{EncoderConfig, FrozenFeatures, TextEncoder, VisionEncoder};
use crate::error::{PilotError, Result};
use crate::grad::{AdamState, Objective, ParamSet, Tape, Var};
use crate::numerics::{RngState, RngStream, Tensor};
use crate::objective::{anomaly_map, image_score, item_loss, AnomalyMap, ItemPrediction, ScoringConfig};
use crate::prompts::{
    build_attribute_bank, forward_prompt_branch, AttributeBank, AttributeTemplates, BranchNoise, FusedPromptPair,
    PromptPool, Suffixes, PROMPT_INIT_STD,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// K.
    pub pool_size: usize,
    /// L.
    pub prompt_len: usize,
    pub class_name: String,
    pub normal_suffix: String,
    pub anomalous_suffix: String,
    pub templates: AttributeTemplates,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            pool_size: 5,
            prompt_len: 12,
            class_name: "object".into(),
            normal_suffix: "normal object".into(),
            anomalous_suffix: "damaged object".into(),
            templates: AttributeTemplates::default(),
            init_seed: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.pool_size == 0 || self.prompt_len == 0 {
            return Err(PilotError::config("prompt pool size and prompt length must be positive"));
        }
        if self.normal_suffix.trim().is_empty() || self.anomalous_suffix.trim().is_empty() {
            return Err(PilotError::config("prompt suffixes must be non-empty"));
        }
        Ok(())
    }
}

/// Everything that defines a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    pub pool: PromptPool,
    pub bank: AttributeBank,
    /// One `L' x d` tensor per prefixed text layer.
    pub prefixes: Vec<Tensor>,
    pub suffixes: Suffixes,
    pub optimizer: Option<AdamState>,
    /// Mean training loss per epoch.
    pub loss_log: Vec<f64>,
    /// Named random streams as last used, for resumption.
    pub rng: Vec<(String, RngState)>,
}

/// Positions of each parameter group inside [`ModelState::param_set`].
#[derive(Clone, Debug)]
struct Layout {
    k: usize,
    n_normal: usize,
    n_attr: usize,
    n_prefix: usize,
}

impl Layout {
    fn of(m: &ModelState) -> Self {
        Self {
            k: m.pool.len(),
            n_normal: m.bank.normal.len(),
            n_attr: m.bank.len(),
            n_prefix: m.prefixes.len(),
        }
    }
    fn pool(&self, k: usize) -> [usize; 4] {
        [4 * k, 4 * k + 1, 4 * k + 2, 4 * k + 3]
    }
    fn attr(&self, c: usize) -> usize {
        4 * self.k + c
    }
    fn prefix(&self, j: usize) -> usize {
        4 * self.k + self.n_attr + j
    }
    fn proj(&self) -> usize {
        4 * self.k + self.n_attr + self.n_prefix
    }
}

pub fn init_model(config: &ModelConfig) -> Result<ModelState> {
    config.validate()?;
    let enc = &config.encoder;
    let vision = VisionEncoder::new(enc)?;
    let text = TextEncoder::new(enc)?;
    let root = RngStream::named(config.init_seed, "init");
    let pool = PromptPool::init(config.pool_size, config.prompt_len, enc.dim, &mut root.substream(0));
    let mut prng = root.substream(1);
    let prefixes = (0..enc.prefix_layers)
        .map(|_| Tensor::randn(vec![enc.prefix_len, enc.dim], PROMPT_INIT_STD, &mut prng))
        .collect();
    let bank = build_attribute_bank(&config.templates, &text, &config.class_name)?;
    let suffixes = Suffixes::new(&text, &config.normal_suffix, &config.anomalous_suffix);
    Ok(ModelState {
        config: config.clone(),
        vision,
        text,
        pool,
        bank,
        prefixes,
        suffixes,
        optimizer: None,
        loss_log: Vec::new(),
        rng: Vec::new(),
    })
}

/// Output of the plain forward pass for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x_cls: Vec<f64>,
    pub score: f64,
    pub map: AnomalyMap,
    pub pair: FusedPromptPair,
}

impl ModelState {
    /// All learnable tensors, every entry flagged trainable.
    ///
    /// Names: `pool.{k}.normal|anomalous|modulation|reference`,
    /// `bank.{normal|anomalous}.{c}.modulation`, `text.prefix.{j}`,
    /// `vision.proj`.
    pub fn param_set(&self) -> ParamSet {
        let mut ps = ParamSet::new();
        let mut push = |name: String, t: Tensor| {
            ps.push(name, t, true).expect("parameter names are unique by construction");
        };
        for k in 0..self.pool.len() {
            push(format!("pool.{k}.normal"), self.pool.normal[k].clone());
            push(format!("pool.{k}.anomalous"), self.pool.anomalous[k].clone());
            push(format!("pool.{k}.modulation"), self.pool.modulation[k].clone());
            push(format!("pool.{k}.reference"), self.pool.reference[k].clone());
        }
        for (c, a) in self.bank.normal.iter().enumerate() {
            push(format!("bank.normal.{c}.modulation"), Tensor::vector(a.modulation.clone()).expect("finite"));
        }
        for (c, a) in self.bank.anomalous.iter().enumerate() {
            push(format!("bank.anomalous.{c}.modulation"), Tensor::vector(a.modulation.clone()).expect("finite"));
        }
        for (j, p) in self.prefixes.iter().enumerate() {
            push(format!("text.prefix.{j}"), p.clone());
        }
        push("vision.proj".into(), self.vision.w_proj.clone());
        ps
    }

    /// Writes parameter values back into the model.
    pub fn apply_param_set(&mut self, ps: &ParamSet) -> Result<()> {
        let expected = self.param_set();
        if expected.len() != ps.len() {
            return Err(PilotError::config(format!(
                "parameter set has {} entries, model expects {}",
                ps.len(),
                expected.len()
            )));
        }
        for (a, b) in expected.entries().iter().zip(ps.entries()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(PilotError::config(format!("parameter '{}' does not match '{}'", b.name, a.name)));
            }
        }
        let lay = Layout::of(self);
        for k in 0..lay.k {
            let [n, a, s, r] = lay.pool(k);
            self.pool.normal[k] = ps.get(n).clone();
            self.pool.anomalous[k] = ps.get(a).clone();
            self.pool.modulation[k] = ps.get(s).clone();
            self.pool.reference[k] = ps.get(r).clone();
        }
        for (c, attr) in self.bank.iter_mut().enumerate() {
            attr.modulation = ps.get(lay.attr(c)).data().to_vec();
        }
        for j in 0..lay.n_prefix {
            self.prefixes[j] = ps.get(lay.prefix(j)).clone();
        }
        self.vision.w_proj = ps.get(lay.proj()).clone();
        Ok(())
    }

    /// Frozen tower outputs for every image, computed in parallel.
    pub fn frozen_features(&self, ds: &Dataset) -> Result<Vec<FrozenFeatures>> {
        let enc = self.vision.config();
        if (ds.height, ds.width) != (enc.image_h, enc.image_w) {
            return Err(PilotError::config(format!(
                "dataset images are {}x{}, encoder expects {}x{}",
                ds.height, ds.width, enc.image_h, enc.image_w
            )));
        }
        ds.records.par_iter().map(|r| self.vision.frozen_features(&r.image)).collect()
    }

    pub fn predict(&self, feats: &FrozenFeatures, noise: &BranchNoise, cfg: &ScoringConfig) -> Result<Prediction> {
        let enc = self.vision.project_features(feats);
        let pair = forward_prompt_branch(
            &enc.x_cls,
            &self.pool,
            &self.bank,
            &self.text,
            &self.prefixes,
            &self.suffixes,
            noise,
        )?;
        let score = image_score(&enc.x_cls, &pair, cfg)?;
        let ec = self.vision.config();
        let map = anomaly_map(&enc.maps, ec.grid(), (ec.image_h, ec.image_w), &pair, cfg)?;
        Ok(Prediction {
            x_cls: enc.x_cls,
            score,
            map,
            pair,
        })
    }

    /// Noise-free predictions for a whole feature set, in index order.
    pub fn predict_all(&self, feats: &[FrozenFeatures], cfg: &ScoringConfig) -> Result<Vec<Prediction>> {
        let noise = BranchNoise::zeros(&self.bank);
        feats.par_iter().map(|f| self.predict(f, &noise, cfg)).collect()
    }

    /// Training loss of one image through the plain forward pass.
    pub fn plain_item_loss(
        &self,
        feats: &FrozenFeatures,
        label: bool,
        mask: &[bool],
        noise: &BranchNoise,
        cfg: &ScoringConfig,
    ) -> Result<f64> {
        let p = self.predict(feats, noise, cfg)?;
        let pred = ItemPrediction {
            score: p.score,
            layer_maps: (0..p.map.layers.len()).map(|m| p.map.upsampled_layer(m)).collect(),
        };
        item_loss(&pred, label, mask, cfg)
    }
}

/// Per-tape constants shared by every forward recording.
struct TapedForward<'a> {
    model: &'a ModelState,
    lay: Layout,
    scoring: ScoringConfig,
}

struct TapedOutputs {
    score: Var,
    layer_maps: Vec<Var>,
}

impl<'a> TapedForward<'a> {
    fn new(model: &'a ModelState, scoring: ScoringConfig) -> Self {
        Self {
            model,
            lay: Layout::of(model),
            scoring,
        }
    }

    fn encode_text(&self, tape: &mut Tape, tokens: Vec<Var>, prefixes: &[Var], layers: &[(Var, Var)]) -> Var {
        let text = &self.model.text;
        let d = text.dim();
        let mut toks = tokens;
        for (j, &(a, b)) in layers.iter().enumerate() {
            let mut ctx_items = toks.clone();
            if let Some(&p) = prefixes.get(j) {
                for l in 0..text.prefix_len() {
                    ctx_items.push(tape.slice(p, l * d, d));
                }
            }
            let ctx = tape.mean(ctx_items);
            let bc = tape.matvec(b, ctx, d, d);
            toks = toks
                .iter()
                .map(|&t| {
                    let at = tape.matvec(a, t, d, d);
                    let s = tape.add(at, bc);
                    tape.tanh(s)
                })
                .collect();
        }
        tape.l2_normalize(*toks.last().expect("non-empty token list"))
    }

    fn score(&self, tape: &mut Tape, x: Var, t_n: Var, t_a: Var) -> Var {
        let ca = tape.cosine(x, t_a);
        let cn = tape.cosine(x, t_n);
        let diff = tape.sub(ca, cn);
        let z = tape.scale(diff, 1.0 / self.scoring.temperature);
        tape.sigmoid(z)
    }

    fn record(
        &self,
        tape: &mut Tape,
        leaves: &[Var],
        feats: &FrozenFeatures,
        noise: &BranchNoise,
        with_maps: bool,
    ) -> TapedOutputs {
        let m = self.model;
        let lay = &self.lay;
        let enc = m.vision.config();
        let (d, d0) = (enc.dim, enc.pre_dim);
        let w_proj = leaves[lay.proj()];

        let cls = tape.constant(feats.cls.clone());
        let x = tape.matvec(w_proj, cls, d, d0);

        // prompt pool
        let alphas: Vec<Var> = (0..lay.k)
            .map(|k| {
                let [_, _, s, r] = lay.pool(k);
                let xm = tape.mul(x, leaves[s]);
                tape.cosine(xm, leaves[r])
            })
            .collect();
        let alpha = tape.concat(alphas);
        let normal_seq = tape.weighted_sum(alpha, (0..lay.k).map(|k| leaves[lay.pool(k)[0]]).collect());
        let anomalous_seq = tape.weighted_sum(alpha, (0..lay.k).map(|k| leaves[lay.pool(k)[1]]).collect());

        let text_layers: Vec<(Var, Var)> = m
            .text
            .layers()
            .iter()
            .map(|l| (tape.constant(l.token_mix.data().to_vec()), tape.constant(l.context_mix.data().to_vec())))
            .collect();
        let prefixes: Vec<Var> = (0..lay.n_prefix).map(|j| leaves[lay.prefix(j)]).collect();
        let branch = |seq: Var, suffix: &[Vec<f64>], tape: &mut Tape| {
            let len = m.pool.prompt_len();
            let mut toks: Vec<Var> = (0..len).map(|l| tape.slice(seq, l * d, d)).collect();
            toks.extend(suffix.iter().map(|s| tape.constant(s.clone())));
            self.encode_text(tape, toks, &prefixes, &text_layers)
        };
        let t_n = branch(normal_seq, &m.suffixes.normal, tape);
        let t_a = branch(anomalous_seq, &m.suffixes.anomalous, tape);

        // attribute bank
        let anchor = |range: std::ops::Range<usize>, noise: &[f64], tape: &mut Tape| {
            let attrs: Vec<&crate::prompts::Attribute> = m.bank.iter().skip(range.start).take(range.len()).collect();
            let mut betas = Vec::with_capacity(range.len());
            let mut embs = Vec::with_capacity(range.len());
            for (i, c) in range.enumerate() {
                let u = tape.constant(attrs[i].embedding.clone());
                let xm = tape.mul(x, leaves[lay.attr(c)]);
                betas.push(tape.cosine(xm, u));
                embs.push(u);
            }
            let beta = tape.concat(betas);
            let eps = tape.constant(noise.to_vec());
            let logits = tape.add(beta, eps);
            let phi = tape.entmax(logits);
            tape.weighted_sum(phi, embs)
        };
        let att_n = anchor(0..lay.n_normal, &noise.normal, tape);
        let att_a = anchor(lay.n_normal..lay.n_attr, &noise.anomalous, tape);
        let t_n_fus = tape.fuse(att_n, t_n);
        let t_a_fus = tape.fuse(att_a, t_a);

        let score = self.score(tape, x, t_n_fus, t_a_fus);
        let mut layer_maps = Vec::new();
        if with_maps {
            let (hp, wp) = enc.grid();
            for layer in &feats.patches {
                let cells: Vec<Var> = layer
                    .iter()
                    .map(|p| {
                        let pc = tape.constant(p.clone());
                        let xp = tape.matvec(w_proj, pc, d, d0);
                        self.score(tape, xp, t_n_fus, t_a_fus)
                    })
                    .collect();
                let grid = tape.concat(cells);
                layer_maps.push(tape.upsample(grid, hp, wp, enc.image_h, enc.image_w));
            }
        }
        TapedOutputs { score, layer_maps }
    }
}

/// Joint image and pixel loss over a batch of dataset items.
pub struct TrainObjective<'a> {
    fwd: TapedForward<'a>,
    feats: &'a [FrozenFeatures],
    /// (dataset index, label, mask, noise) per batch position.
    batch: Vec<(usize, bool, Arc<Vec<bool>>, BranchNoise)>,
}

impl<'a> TrainObjective<'a> {
    pub fn new(
        model: &'a ModelState,
        feats: &'a [FrozenFeatures],
        batch: Vec<(usize, bool, Arc<Vec<bool>>, BranchNoise)>,
        scoring: ScoringConfig,
    ) -> Self {
        Self {
            fwd: TapedForward::new(model, scoring),
            feats,
            batch,
        }
    }

    pub fn batch_len(&self) -> usize {
        self.batch.len()
    }
}

impl Objective for TrainObjective<'_> {
    fn item_loss(&self, tape: &mut Tape, leaves: &[Var], _params: &ParamSet, item: usize) -> Result<Var> {
        let (idx, label, mask, noise) = &self.batch[item];
        let out = self.fwd.record(tape, leaves, &self.feats[*idx], noise, true);
        let cfg = &self.fwd.scoring;
        let bce = tape.bce(out.score, *label, cfg.prob_eps);
        let pixel: Vec<Var> = out
            .layer_maps
            .iter()
            .map(|&mp| {
                let f = tape.focal(mp, mask.clone(), cfg.focal_gamma, cfg.focal_alpha, cfg.prob_eps);
                let d = tape.dice(mp, mask.clone(), cfg.dice_smooth);
                tape.add(f, d)
            })
            .collect();
        let pixel = tape.mean(pixel);
        Ok(tape.add(bce, pixel))
    }
}

/// Image-level BCE against fixed pseudo-labels, noise-free.
pub struct PseudoLabelObjective<'a> {
    fwd: TapedForward<'a>,
    feats: &'a [FrozenFeatures],
    /// (dataset index, pseudo-label) per batch position.
    batch: Vec<(usize, bool)>,
    noise: BranchNoise,
}

impl<'a> PseudoLabelObjective<'a> {
    pub fn new(model: &'a ModelState, feats: &'a [FrozenFeatures], batch: Vec<(usize, bool)>, scoring: ScoringConfig) -> Self {
        Self {
            fwd: TapedForward::new(model, scoring),
            feats,
            batch,
            noise: BranchNoise::zeros(&model.bank),
        }
    }
}

impl Objective for PseudoLabelObjective<'_> {
    fn item_loss(&self, tape: &mut Tape, leaves: &[Var], _params: &ParamSet, item: usize) -> Result<Var> {
        let (idx, label) = self.batch[item];
        let out = self.fwd.record(tape, leaves, &self.feats[idx], &self.noise, false);
        Ok(tape.bce(out.score, label, self.fwd.scoring.prob_eps))
    }
}
