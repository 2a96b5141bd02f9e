//! Interpretability and diversity probes over a trained model: isolated
//! prompt embeddings, pairwise similarity, contributions, nearest
//! descriptors, projection residuals and selection frequencies.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::encoders::{FrozenFeatures, TextEncoder};
use crate::error::{PilotError, Result};
use crate::numerics::{cosine_sim, l2_normalize};
use crate::objective::ScoringConfig;
use crate::prompts::{encode_prompt_pair, projection_residual, query_prompts, tokenize, FusedPromptPair};
use crate::model::ModelState;

/// Anomaly-state words probed by nearest-neighbour retrieval.
pub const DESCRIPTORS: &[&str] = &[
    "damaged", "scratched", "cracked", "chipped", "broken", "bent", "punctured", "fractured",
    "delaminated", "weld defect", "loose component", "misaligned", "deformed", "twisted",
    "buckled", "rusty", "corroded", "oxidized", "pitted", "eroded", "paint peeling", "stained",
    "contaminated", "oil leak", "grease smear", "overheated", "burnt", "scorched", "melted",
    "short-circuited", "electrical arcing", "voltage spike damage", "leaking", "sealing failure",
    "gasket blown", "under-pressure", "over-pressure", "gas leak", "worn bearing",
    "surface fatigue crack", "abrasion mark", "material fatigue", "delamination", "loose screw",
    "missing bolt", "stripped thread", "cross-threaded", "flange misfit", "clogged",
    "blocked channel", "foreign particle inclusion", "scale buildup", "slag inclusion",
    "vibration damage", "impact dent", "surface blistering", "vacuum leak", "structural crack",
];

pub const DESCRIPTOR_TEMPLATE: &str = "a photo of a {} object";

#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorBank {
    pub entries: Vec<(String, Vec<f64>)>,
}

impl DescriptorBank {
    /// Encodes each descriptor in [`DESCRIPTOR_TEMPLATE`] with the frozen
    /// text tower.
    pub fn build(text: &TextEncoder, descriptors: &[&str]) -> Result<Self> {
        let mut entries: Vec<(String, Vec<f64>)> = Vec::with_capacity(descriptors.len());
        for &d in descriptors {
            if entries.iter().any(|(w, _)| w == d) {
                return Err(PilotError::config(format!("duplicate descriptor '{d}'")));
            }
            let sentence = DESCRIPTOR_TEMPLATE.replace("{}", d);
            let tokens: Vec<Vec<f64>> = tokenize(&sentence).iter().map(|w| text.word(w)).collect();
            let e = l2_normalize(&text.encode_text_frozen(&tokens)?)?;
            entries.push((d.to_string(), e));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `(T_n(k), T_a(k))` for each prompt, encoded with a one-hot pool weight.
pub fn prompt_embeddings_isolated(model: &ModelState) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
    let k = model.pool.len();
    (0..k)
        .map(|i| {
            let mut alpha = vec![0.0; k];
            alpha[i] = 1.0;
            encode_prompt_pair(&model.pool, &alpha, &model.text, &model.prefixes, &model.suffixes)
        })
        .collect()
}

/// `(k1, k2, |cos|)` for every unordered pair, `k1 < k2`.
pub fn prompt_pair_similarity(emb: &[Vec<f64>]) -> Result<Vec<(usize, usize, f64)>> {
    if emb.len() < 2 {
        return Err(PilotError::config("pairwise similarity needs at least two prompts"));
    }
    let mut out = Vec::with_capacity(emb.len() * (emb.len() - 1) / 2);
    for i in 0..emb.len() {
        for j in (i + 1)..emb.len() {
            out.push((i, j, cosine_sim(&emb[i], &emb[j])?.abs().min(1.0)));
        }
    }
    Ok(out)
}

/// Pool weights of every image, noise-free.
pub fn image_alphas(model: &ModelState, feats: &[FrozenFeatures]) -> Result<Vec<Vec<f64>>> {
    feats
        .par_iter()
        .map(|f| query_prompts(&model.vision.project_features(f).x_cls, &model.pool))
        .collect()
}

/// Mean `|alpha_k|` over images, normalised to sum to one.
pub fn prompt_contributions(alphas: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = alphas.first().ok_or_else(|| PilotError::config("no images"))?;
    let mut acc = vec![0.0; first.len()];
    for a in alphas {
        if a.len() != acc.len() {
            return Err(PilotError::config("pool weights differ in length"));
        }
        acc.iter_mut().zip(a).for_each(|(s, v)| *s += v.abs());
    }
    let n = alphas.len() as f64;
    acc.iter_mut().for_each(|s| *s /= n);
    let total: f64 = acc.iter().sum();
    if total == 0.0 {
        return Err(PilotError::UndefinedContribution);
    }
    Ok(acc.into_iter().map(|s| s / total).collect())
}

/// Top `top_n` bank entries by cosine to `query`, descending; equal
/// similarities keep bank order.
pub fn nn_descriptors(query: &[f64], bank: &DescriptorBank, top_n: usize) -> Result<Vec<(usize, f64)>> {
    if bank.is_empty() || top_n > bank.len() {
        return Err(PilotError::config(format!(
            "cannot take {top_n} neighbours from a bank of {}",
            bank.len()
        )));
    }
    let mut sims: Vec<(usize, f64)> = bank
        .entries
        .iter()
        .enumerate()
        .map(|(i, (_, e))| cosine_sim(query, e).map(|c| (i, c)))
        .collect::<Result<_>>()?;
    sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    sims.truncate(top_n);
    Ok(sims)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualHistogram {
    pub bins: usize,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
}

pub fn residual_bin(r: f64, bins: usize) -> usize {
    ((r * bins as f64).floor() as usize).min(bins - 1)
}

/// Histogram of `||T - proj(T)|| / ||T||` per branch over `[0, 1]`.
pub fn residual_histogram(pairs: &[FusedPromptPair], bins: usize) -> Result<ResidualHistogram> {
    if bins == 0 {
        return Err(PilotError::config("histogram needs at least one bin"));
    }
    let mut h = ResidualHistogram {
        bins,
        normal: vec![0; bins],
        anomalous: vec![0; bins],
    };
    for p in pairs {
        h.normal[residual_bin(projection_residual(&p.t_n, &p.t_att_n)?, bins)] += 1;
        h.anomalous[residual_bin(projection_residual(&p.t_a, &p.t_att_a)?, bins)] += 1;
    }
    Ok(h)
}

/// Per-image argmax tallies of `alpha` (ties to the smaller index) and
/// support-membership tallies of `phi`, normal attributes first.
pub fn selection_frequency(pairs: &[FusedPromptPair]) -> (Vec<usize>, Vec<usize>) {
    let k = pairs.first().map_or(0, |p| p.alphas.len());
    let c = pairs.first().map_or(0, |p| p.phis_n.len() + p.phis_a.len());
    let mut prompts = vec![0; k];
    let mut attrs = vec![0; c];
    for p in pairs {
        let mut best = 0;
        for (i, &a) in p.alphas.iter().enumerate() {
            if a > p.alphas[best] {
                best = i;
            }
        }
        prompts[best] += 1;
        for (i, &phi) in p.phis_n.iter().chain(&p.phis_a).enumerate() {
            if phi > 0.0 {
                attrs[i] += 1;
            }
        }
    }
    (prompts, attrs)
}

/// Every analysis table for `feats`, rendered as CSV text keyed by file name.
pub fn analysis_tables(model: &ModelState, feats: &[FrozenFeatures], scoring: &ScoringConfig) -> Result<Vec<(String, String)>> {
    if feats.is_empty() {
        return Err(PilotError::config("analysis needs at least one image"));
    }
    let iso = prompt_embeddings_isolated(model)?;
    let mut sim = String::from("branch,k1,k2,abs_cos\n");
    if iso.len() >= 2 {
        for (branch, pick) in [("normal", 0usize), ("anomalous", 1)] {
            let emb: Vec<Vec<f64>> = iso.iter().map(|(n, a)| if pick == 0 { n.clone() } else { a.clone() }).collect();
            for (i, j, v) in prompt_pair_similarity(&emb)? {
                writeln!(sim, "{branch},{i},{j},{v}").expect("write to string");
            }
        }
    }

    let alphas = image_alphas(model, feats)?;
    let mut contrib = String::from("prompt,contribution\n");
    match prompt_contributions(&alphas) {
        Ok(c) => c.iter().enumerate().for_each(|(k, v)| writeln!(contrib, "{k},{v}").expect("write to string")),
        Err(PilotError::UndefinedContribution) => {}
        Err(e) => return Err(e),
    }

    let bank = DescriptorBank::build(&model.text, DESCRIPTORS)?;
    let mut nn = String::from("prompt,rank,descriptor,cos\n");
    for (k, (_, t_a)) in iso.iter().enumerate() {
        for (rank, (i, c)) in nn_descriptors(t_a, &bank, 3)?.into_iter().enumerate() {
            writeln!(nn, "{k},{},{},{c}", rank + 1, bank.entries[i].0).expect("write to string");
        }
    }

    let pairs: Vec<FusedPromptPair> = model.predict_all(feats, scoring)?.into_iter().map(|p| p.pair).collect();
    let hist = residual_histogram(&pairs, 20)?;
    let mut rh = String::from("bin_lo,bin_hi,count_n,count_a\n");
    for b in 0..hist.bins {
        let (lo, hi) = (b as f64 / hist.bins as f64, (b + 1) as f64 / hist.bins as f64);
        writeln!(rh, "{lo},{hi},{},{}", hist.normal[b], hist.anomalous[b]).expect("write to string");
    }

    let (pc, ac) = selection_frequency(&pairs);
    let mut sf = String::from("kind,index,count\n");
    pc.iter().enumerate().for_each(|(i, c)| writeln!(sf, "prompt,{i},{c}").expect("write to string"));
    let n_normal = model.bank.normal.len();
    for (i, c) in ac.iter().enumerate() {
        let (kind, j) = if i < n_normal { ("attribute_normal", i) } else { ("attribute_anomalous", i - n_normal) };
        writeln!(sf, "{kind},{j},{c}").expect("write to string");
    }

    Ok(vec![
        ("pair_similarity.csv".into(), sim),
        ("contributions.csv".into(), contrib),
        ("nn_matches.csv".into(), nn),
        ("residual_hist.csv".into(), rh),
        ("selection_freq.csv".into(), sf),
    ])
}

pub fn write_tables(tables: &[(String, String)], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PilotError::io(dir, e))?;
    for (name, body) in tables {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| PilotError::io(&path, e))?;
    }
    Ok(())
}
