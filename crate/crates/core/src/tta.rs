//! Label-free test-time adaptation: score the target set, pseudo-label its
//! most and least anomalous fractions, and update only the prompt pool.

use std::collections::BTreeMap;

use log::info;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::encoders::FrozenFeatures;
use crate::error::{PilotError, Result};
use crate::grad::{loss_and_grad, optimizer_step, AdamConfig, AdamState};
use crate::model::{ModelState, PseudoLabelObjective};
use crate::objective::ScoringConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub rho: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub scoring: ScoringConfig,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            rho: 0.25,
            epochs: 1,
            lr: 1e-3,
            seed: 0,
            scoring: ScoringConfig::default(),
        }
    }
}

impl TtaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 0.5) {
            return Err(PilotError::config("rho must lie in (0, 0.5)"));
        }
        if self.epochs == 0 {
            return Err(PilotError::config("TTA needs at least one epoch"));
        }
        if !(self.lr >= 0.0) {
            return Err(PilotError::config("TTA learning rate must be non-negative"));
        }
        self.scoring.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoSelection {
    /// Pseudo-anomalous indices, highest score first.
    pub anomalous: Vec<usize>,
    /// Pseudo-normal indices, lowest score first.
    pub normal: Vec<usize>,
    pub scores: Vec<f64>,
}

impl PseudoSelection {
    /// `(index, pseudo-label)` over both sets, anomalous first.
    pub fn labelled(&self) -> Vec<(usize, bool)> {
        self.anomalous
            .iter()
            .map(|&i| (i, true))
            .chain(self.normal.iter().map(|&i| (i, false)))
            .collect()
    }
}

/// `ceil(rho * b)`, tolerant of representation error in `rho * b`.
pub fn selection_size(rho: f64, b: usize) -> usize {
    let x = rho * b as f64;
    let r = x.round();
    if (x - r).abs() <= 1e-9 * x.abs().max(1.0) {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Image scores of precomputed features, noise-free.
pub fn score_features(model: &ModelState, feats: &[FrozenFeatures], scoring: &ScoringConfig) -> Result<Vec<f64>> {
    Ok(model.predict_all(feats, scoring)?.into_iter().map(|p| p.score).collect())
}

pub fn score_all(model: &ModelState, target: &Dataset, scoring: &ScoringConfig) -> Result<Vec<f64>> {
    if target.is_empty() {
        return Err(PilotError::config("target set is empty"));
    }
    score_features(model, &model.frozen_features(target)?, scoring)
}

/// Top and bottom `ceil(rho B)` indices; ties go to the smaller index.
pub fn select_pseudo(scores: &[f64], rho: f64) -> Result<PseudoSelection> {
    let b = scores.len();
    let k = selection_size(rho, b);
    if 2 * k > b {
        return Err(PilotError::Overlap { k, batch: b });
    }
    let mut desc: Vec<usize> = (0..b).collect();
    desc.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let anomalous: Vec<usize> = desc[..k].to_vec();
    let mut asc: Vec<usize> = (0..b).collect();
    asc.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let normal: Vec<usize> = asc.into_iter().filter(|i| !anomalous.contains(i)).take(k).collect();
    Ok(PseudoSelection {
        anomalous,
        normal,
        scores: scores.to_vec(),
    })
}

pub fn is_pool_param(name: &str) -> bool {
    name.starts_with("pool.")
}

pub fn tta_adapt(mut model: ModelState, target: &Dataset, cfg: &TtaConfig) -> Result<ModelState> {
    cfg.validate()?;
    if target.is_empty() {
        return Err(PilotError::config("target set is empty"));
    }
    let feats = model.frozen_features(target)?;
    let mut params = model.param_set();
    params.set_trainable(is_pool_param);
    let mut adam = AdamState::new(&params);
    for epoch in 0..cfg.epochs {
        let scores = score_features(&model, &feats, &cfg.scoring)?;
        let sel = select_pseudo(&scores, cfg.rho)?;
        let batch = sel.labelled();
        let obj = PseudoLabelObjective::new(&model, &feats, batch, cfg.scoring);
        let items: Vec<usize> = (0..2 * sel.anomalous.len()).collect();
        let (loss, grads) = loss_and_grad(&obj, &params, &items).map_err(|e| match e {
            PilotError::NumericalBlowup { location } => PilotError::NumericalBlowup {
                location: format!("TTA epoch {epoch}, {location}"),
            },
            other => other,
        })?;
        optimizer_step(&mut params, &grads, cfg.lr, 0.0, &mut adam, AdamConfig::default())?;
        if params.entries().iter().any(|e| !e.value.is_finite()) {
            return Err(PilotError::NumericalBlowup {
                location: format!("TTA epoch {epoch}, parameter update"),
            });
        }
        model.apply_param_set(&params)?;
        info!("tta epoch {} pseudo-label loss {:.6}", epoch + 1, loss);
    }
    Ok(model)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Shannon evenness of the class histogram of the selected set.
    pub evenness: f64,
    /// Coefficient of variation of the same histogram.
    pub cv: f64,
    /// Fraction of selected images whose pseudo-label is wrong.
    pub noisy_rate: f64,
}

/// Class balance and label noise of a selection; evaluation only.
pub fn selection_stats(sel: &PseudoSelection, true_labels: &[bool], categories: &[usize]) -> Result<SelectionStats> {
    if true_labels.len() != sel.scores.len() || categories.len() != sel.scores.len() {
        return Err(PilotError::config("labels and categories must cover every scored image"));
    }
    let chosen = sel.labelled();
    if chosen.is_empty() {
        return Err(PilotError::config("empty selection"));
    }
    let mut counts: BTreeMap<usize, f64> = categories.iter().map(|&c| (c, 0.0)).collect();
    for &(i, _) in &chosen {
        *counts.get_mut(&categories[i]).expect("category present") += 1.0;
    }
    let n = chosen.len() as f64;
    let g: Vec<f64> = counts.values().map(|c| c / n).collect();
    let classes = g.len();
    let evenness = if classes == 1 {
        1.0
    } else {
        let plogp: f64 = g.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum();
        (0.0 - plogp) / (classes as f64).ln()
    };
    let mean = 1.0 / classes as f64;
    let var = g.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / classes as f64;
    let noisy = chosen.iter().filter(|&&(i, y)| true_labels[i] != y).count() as f64;
    Ok(SelectionStats {
        evenness,
        cv: var.sqrt() / mean,
        noisy_rate: noisy / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_dataset, DataGenConfig, Split};
    use crate::model::{init_model, tests::toy_config};
    use crate::numerics::{RngStream, Tensor};
    use crate::objective::image_score;
    use crate::prompts::{forward_prompt_branch, BranchNoise};
    use proptest::prelude::*;

    fn toy_target() -> Dataset {
        gen_dataset(
            &DataGenConfig {
                height: 8,
                width: 8,
                defect_min: 2,
                defect_max: 4,
                images_per_category: 4,
                n_categories_target: 2,
                ..DataGenConfig::default()
            },
            Split::Target,
        )
        .unwrap()
    }

    #[test]
    fn score_all_matches_loop() {
        let m = init_model(&toy_config()).unwrap();
        let ds = toy_target();
        let sc = ScoringConfig::default();
        let got = score_all(&m, &ds, &sc).unwrap();
        let noise = BranchNoise::zeros(&m.bank);
        for (r, g) in ds.records.iter().zip(&got) {
            let enc = m.vision.project_features(&m.vision.frozen_features(&r.image).unwrap());
            let pair = forward_prompt_branch(&enc.x_cls, &m.pool, &m.bank, &m.text, &m.prefixes, &m.suffixes, &noise).unwrap();
            assert_eq!(*g, image_score(&enc.x_cls, &pair, &sc).unwrap());
        }
        let one = score_all(&m, &ds.subset(&[3]), &sc).unwrap();
        assert_eq!(one, vec![got[3]]);
    }

    #[test]
    fn zero_lr_is_identity() {
        let m = init_model(&toy_config()).unwrap();
        let cfg = TtaConfig {
            lr: 0.0,
            epochs: 2,
            ..TtaConfig::default()
        };
        assert_eq!(tta_adapt(m.clone(), &toy_target(), &cfg).unwrap(), m);
    }

    #[test]
    fn silent_prompt_gets_no_token_gradient() {
        let mut m = init_model(&toy_config()).unwrap();
        let ds = toy_target();
        let feats = m.frozen_features(&ds).unwrap();
        let xs: Vec<Vec<f64>> = feats.iter().map(|f| m.vision.project_features(f).x_cls).collect();
        let d = xs[0].len();
        let onehot = |i: usize, s: f64| {
            let mut v = vec![0.0; d];
            v[i] = s;
            Tensor::vector(v).unwrap()
        };
        // a coordinate whose sign agrees across images gives alpha_0 = 1 everywhere
        let j = (0..d)
            .find(|&j| xs.iter().all(|x| x[j] > 0.0) || xs.iter().all(|x| x[j] < 0.0))
            .expect("some coordinate keeps its sign");
        m.pool.modulation[0] = onehot(j, 1.0);
        m.pool.reference[0] = onehot(j, xs[0][j].signum());
        m.pool.modulation[1] = onehot(0, 1.0);
        m.pool.reference[1] = onehot(1, 1.0);
        for x in &xs {
            let a = crate::prompts::query_prompts(x, &m.pool).unwrap();
            assert_eq!(a, vec![1.0, 0.0]);
        }
        let sel = select_pseudo(&score_all(&m, &ds, &ScoringConfig::default()).unwrap(), 0.25).unwrap();
        let obj = PseudoLabelObjective::new(&m, &feats, sel.labelled(), ScoringConfig::default());
        let mut params = m.param_set();
        params.set_trainable(is_pool_param);
        let items: Vec<usize> = (0..sel.labelled().len()).collect();
        let (_, g) = loss_and_grad(&obj, &params, &items).unwrap();
        let norm = |name: &str| g.get(params.position(name).unwrap()).data().iter().map(|v| v * v).sum::<f64>();
        assert_eq!(norm("pool.1.normal"), 0.0);
        assert_eq!(norm("pool.1.anomalous"), 0.0);
        assert!(norm("pool.0.normal") > 0.0);
        assert!(norm("pool.0.anomalous") > 0.0);
    }

    #[test]
    fn wider_selection_is_noisier() {
        let mut wins = 0;
        for seed in 0..5 {
            let mut rng = RngStream::named(seed, "overlap");
            let b = 400;
            let labels: Vec<bool> = (0..b).map(|i| i % 2 == 1).collect();
            let scores: Vec<f64> = labels.iter().map(|&y| rng.normal() + if y { 1.0 } else { 0.0 }).collect();
            let cats: Vec<usize> = (0..b).map(|i| i % 4).collect();
            let noisy = |rho| selection_stats(&select_pseudo(&scores, rho).unwrap(), &labels, &cats).unwrap().noisy_rate;
            let (lo, mid, hi) = (noisy(0.05), noisy(0.25), noisy(0.45));
            if hi >= lo {
                wins += 1;
            }
            assert!(mid <= hi + 0.05, "{lo} {mid} {hi}");
        }
        assert!(wins >= 4, "{wins} of 5");
    }

    #[test]
    fn ramp_selection() {
        let s: Vec<f64> = (0..8).map(|i| i as f64).collect();
        let sel = select_pseudo(&s, 0.25).unwrap();
        assert_eq!(sel.anomalous, vec![7, 6]);
        assert_eq!(sel.normal, vec![0, 1]);
    }

    #[test]
    fn equal_scores_tie_break() {
        let sel = select_pseudo(&[0.3; 4], 0.25).unwrap();
        assert_eq!(sel.anomalous, vec![0]);
        assert_eq!(sel.normal, vec![1]);
    }

    #[test]
    fn boundary_rho() {
        let mut rng = RngStream::named(1, "b");
        let s: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
        let sel = select_pseudo(&s, 0.49).unwrap();
        assert_eq!(sel.anomalous.len(), 5);
        let mut all: Vec<usize> = sel.anomalous.iter().chain(&sel.normal).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert!(matches!(select_pseudo(&s[..3], 0.49), Err(PilotError::Overlap { k: 2, batch: 3 })));
    }

    #[test]
    fn selection_size_is_exact_on_products() {
        assert_eq!(selection_size(0.1, 30), 3);
        assert_eq!(selection_size(0.25, 8), 2);
        assert_eq!(selection_size(0.25, 9), 3);
        assert_eq!(selection_size(0.49, 10), 5);
    }

    #[test]
    fn stats_examples() {
        let cats = vec![0, 0, 1, 1, 2, 2, 3, 3];
        let labels = vec![false, true, false, true, false, true, false, true];
        let sel = PseudoSelection {
            anomalous: vec![1, 3, 5, 7],
            normal: vec![0, 2, 4, 6],
            scores: vec![0.0; 8],
        };
        let st = selection_stats(&sel, &labels, &cats).unwrap();
        assert!((st.evenness - 1.0).abs() < 1e-15);
        assert!(st.cv.abs() < 1e-15);
        assert_eq!(st.noisy_rate, 0.0);

        let sel = PseudoSelection {
            anomalous: vec![1],
            normal: vec![0],
            scores: vec![0.0; 8],
        };
        let st = selection_stats(&sel, &labels, &cats).unwrap();
        assert_eq!(st.evenness, 0.0);

        let one = selection_stats(&sel, &labels, &[5; 8]).unwrap();
        assert_eq!(one.evenness, 1.0);
    }

    proptest! {
        #[test]
        fn selection_contract(scores in prop::collection::vec(0u8..6, 1..60), rho in 0.01f64..0.49) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 5.0).collect();
            let b = s.len();
            let k = selection_size(rho, b);
            match select_pseudo(&s, rho) {
                Err(PilotError::Overlap { .. }) => prop_assert!(2 * k > b),
                Err(e) => prop_assert!(false, "{e}"),
                Ok(sel) => {
                    prop_assert!(2 * k <= b);
                    prop_assert_eq!(sel.anomalous.len(), k);
                    prop_assert_eq!(sel.normal.len(), k);
                    prop_assert!(sel.anomalous.iter().all(|i| !sel.normal.contains(i)));
                    let key_hi = |i: usize| (s[i], std::cmp::Reverse(i));
                    let worst_a = sel.anomalous.iter().map(|&i| key_hi(i)).min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).unwrap();
                    for i in (0..b).filter(|i| !sel.anomalous.contains(i)) {
                        let o = key_hi(i);
                        prop_assert!(o.0 < worst_a.0 || (o.0 == worst_a.0 && o.1 < worst_a.1));
                    }
                    let rest: Vec<usize> = (0..b).filter(|i| !sel.anomalous.contains(i)).collect();
                    let worst_n = sel.normal.iter().map(|&i| (s[i], i)).max_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))).unwrap();
                    for i in rest.into_iter().filter(|i| !sel.normal.contains(i)) {
                        prop_assert!(s[i] > worst_n.0 || (s[i] == worst_n.0 && i > worst_n.1));
                    }
                }
            }
        }
    }
}
