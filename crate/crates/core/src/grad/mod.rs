//! Named parameter sets, batch gradients and the optimizers that consume them.

mod tape;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{PilotError, Result};
use crate::numerics::Tensor;

pub use tape::{bilinear_source, upsample_bilinear, Gradients, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(PilotError::config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].value)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn set_value(&mut self, i: usize, value: Tensor) -> Result<()> {
        if value.shape() != self.entries[i].value.shape() {
            return Err(PilotError::config(format!(
                "shape change for {}: {:?} -> {:?}",
                self.entries[i].name,
                self.entries[i].value.shape(),
                value.shape()
            )));
        }
        self.entries[i].value = value;
        Ok(())
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.entries[i].value
    }

    /// Marks exactly the entries accepted by `keep` as trainable.
    pub fn set_trainable(&mut self, keep: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            e.trainable = keep(&e.name);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn zeros_like(&self) -> GradMap {
        GradMap {
            grads: self
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape().to_vec()))
                .collect(),
        }
    }
}

/// Gradients aligned with a [`ParamSet`]; frozen entries hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    grads: Vec<Tensor>,
}

impl GradMap {
    pub fn get(&self, i: usize) -> &Tensor {
        &self.grads[i]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
}

/// A per-item scalar loss that can be recorded on a [`Tape`].
pub trait Objective: Sync {
    /// Record the loss of batch item `item`; `leaves[i]` is the tape node for
    /// parameter entry `i` (a constant when the entry is frozen).
    fn item_loss(&self, tape: &mut Tape, leaves: &[Var], params: &ParamSet, item: usize) -> Result<Var>;
}

/// Mean loss over `items` and its exact gradient with respect to every
/// trainable entry of `params`.
///
/// Items are evaluated in parallel on the current rayon pool; the reduction
/// runs sequentially in item order so the result does not depend on the
/// number of worker threads.
/// Loss of one item and the gradient of each parameter it touched.
type ItemGrad = (f64, Vec<Option<Vec<f64>>>);

pub fn loss_and_grad<O: Objective>(objective: &O, params: &ParamSet, items: &[usize]) -> Result<(f64, GradMap)> {
    if items.is_empty() {
        return Err(PilotError::config("loss_and_grad on an empty batch"));
    }
    let per_item: Vec<Result<ItemGrad>> = items
        .par_iter()
        .map(|&item| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = params
                .entries()
                .iter()
                .map(|e| {
                    if e.trainable {
                        tape.leaf(e.value.data().to_vec())
                    } else {
                        tape.constant(e.value.data().to_vec())
                    }
                })
                .collect();
            let root = objective.item_loss(&mut tape, &leaves, params, item)?;
            let loss = tape.scalar(root);
            if !loss.is_finite() {
                return Err(PilotError::NumericalBlowup {
                    location: format!("batch item {item}"),
                });
            }
            let grads = tape.backward(root);
            let leaf_grads = leaves.iter().map(|v| grads.get(*v).map(|g| g.to_vec())).collect();
            Ok((loss, leaf_grads))
        })
        .collect();

    let mut total = 0.0;
    let mut out = params.zeros_like();
    for r in per_item {
        let (loss, leaf_grads) = r?;
        total += loss;
        for (i, g) in leaf_grads.into_iter().enumerate() {
            if let (Some(g), true) = (g, params.entries()[i].trainable) {
                for (acc, v) in out.grads[i].data_mut().iter_mut().zip(&g) {
                    *acc += v;
                }
            }
        }
    }
    let n = items.len() as f64;
    out.scale(1.0 / n);
    Ok((total / n, out))
}

/// First and second moment estimates, one pair per parameter entry.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params
            .entries()
            .iter()
            .map(|e| Tensor::zeros(e.value.shape().to_vec()))
            .collect();
        Self {
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One AdamW step with decoupled weight decay; frozen entries are untouched.
pub fn optimizer_step(
    params: &mut ParamSet,
    grads: &GradMap,
    lr: f64,
    weight_decay: f64,
    state: &mut AdamState,
    cfg: AdamConfig,
) -> Result<()> {
    if lr < 0.0 || weight_decay < 0.0 {
        return Err(PilotError::config("lr and weight_decay must be non-negative"));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        if !params.entries()[i].trainable {
            continue;
        }
        let g = grads.get(i).data();
        let m = state.first[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.second[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.first[i].data(), state.second[i].data());
        let p = params.value_mut(i).data_mut();
        for j in 0..p.len() {
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            p[j] -= lr * (update + weight_decay * p[j]);
        }
    }
    Ok(())
}

/// Plain gradient descent on trainable entries.
pub fn sgd_step(params: &mut ParamSet, grads: &GradMap, lr: f64) {
    for i in 0..params.len() {
        if !params.entries()[i].trainable {
            continue;
        }
        let g = grads.get(i).data().to_vec();
        for (p, gj) in params.value_mut(i).data_mut().iter_mut().zip(g) {
            *p -= lr * gj;
        }
    }
}

/// Rescales `grads` so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) {
    let n = grads.global_norm();
    if n > max_norm && n > 0.0 {
        grads.scale(max_norm / n);
    }
}

/// Largest relative disagreement `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, sigmoid, RngStream};

    /// Logistic regression with BCE on a handful of samples.
    struct Logistic {
        xs: Vec<Vec<f64>>,
        ys: Vec<bool>,
    }

    impl Objective for Logistic {
        fn item_loss(&self, tape: &mut Tape, leaves: &[Var], _p: &ParamSet, item: usize) -> Result<Var> {
            let x = tape.constant(self.xs[item].clone());
            let z = tape.mul(leaves[0], x);
            let ones = tape.constant(vec![1.0; self.xs[item].len()]);
            let z = tape.matvec(ones, z, 1, self.xs[item].len());
            let p = tape.sigmoid(z);
            Ok(tape.bce(p, self.ys[item], 1e-7))
        }
    }

    fn logistic_loss(w: &[f64], x: &[f64], y: bool) -> f64 {
        let p = sigmoid(w.iter().zip(x).map(|(a, b)| a * b).sum());
        if y {
            -p.ln()
        } else {
            -(1.0 - p).ln()
        }
    }

    #[test]
    fn logistic_gradient_matches_finite_differences() {
        let mut rng = RngStream::named(7, "grad");
        let obj = Logistic {
            xs: vec![(0..4).map(|_| rng.normal()).collect()],
            ys: vec![true],
        };
        let mut params = ParamSet::new();
        let w = Tensor::randn(vec![4], 0.5, &mut rng);
        params.push("w", w.clone(), true).unwrap();
        let (loss, g) = loss_and_grad(&obj, &params, &[0]).unwrap();
        assert!((loss - logistic_loss(&w, &obj.xs[0], true)).abs() < 1e-14);
        let fd = finite_diff_grad(|t| logistic_loss(t, &obj.xs[0], true), &w, 1e-5).unwrap();
        assert!(max_relative_error(g.get(0), &fd, 1e-8) < 1e-6);
    }

    #[test]
    fn frozen_entry_gets_zero_gradient() {
        let obj = Logistic {
            xs: vec![vec![1.0, -2.0], vec![0.5, 0.5]],
            ys: vec![true, false],
        };
        let mut params = ParamSet::new();
        params.push("w", Tensor::vector(vec![0.3, 0.1]).unwrap(), false).unwrap();
        let (_, g) = loss_and_grad(&obj, &params, &[0, 1]).unwrap();
        assert!(g.get(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_gradient_is_item_mean() {
        let obj = Logistic {
            xs: vec![vec![1.0, -2.0], vec![0.5, 0.5], vec![-1.0, 0.2]],
            ys: vec![true, false, true],
        };
        let mut params = ParamSet::new();
        params.push("w", Tensor::vector(vec![0.3, 0.1]).unwrap(), true).unwrap();
        let (l, g) = loss_and_grad(&obj, &params, &[0, 1, 2]).unwrap();
        let mut lsum = 0.0;
        let mut gsum = [0.0; 2];
        for i in 0..3 {
            let (li, gi) = loss_and_grad(&obj, &params, &[i]).unwrap();
            lsum += li;
            gsum[0] += gi.get(0)[0];
            gsum[1] += gi.get(0)[1];
        }
        assert!((l - lsum / 3.0).abs() < 1e-15);
        assert!((g.get(0)[0] - gsum[0] / 3.0).abs() < 1e-15);
        assert!((g.get(0)[1] - gsum[1] / 3.0).abs() < 1e-15);
    }

    #[test]
    fn adam_examples() {
        let mut params = ParamSet::new();
        params.push("a", Tensor::vector(vec![0.5]).unwrap(), true).unwrap();
        params.push("frozen", Tensor::vector(vec![2.0]).unwrap(), false).unwrap();
        let before = params.clone();
        let mut state = AdamState::new(&params);

        let zero = params.zeros_like();
        optimizer_step(&mut params, &zero, 1e-3, 0.0, &mut state, AdamConfig::default()).unwrap();
        assert_eq!(params, before);

        let mut state = AdamState::new(&params);
        let g = GradMap {
            grads: vec![Tensor::vector(vec![1.0]).unwrap(), Tensor::vector(vec![5.0]).unwrap()],
        };
        optimizer_step(&mut params, &g, 1e-3, 0.0, &mut state, AdamConfig::default()).unwrap();
        let moved = before.get(0)[0] - params.get(0)[0];
        assert!((moved - 1e-3).abs() < 1e-8, "first step moved {moved}");
        assert_eq!(params.get(1), before.get(1));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.push("x", Tensor::zeros(vec![1]), true).unwrap();
        assert!(p.push("x", Tensor::zeros(vec![1]), true).is_err());
    }

    #[test]
    fn clip_caps_norm() {
        let mut g = GradMap {
            grads: vec![Tensor::vector(vec![3.0, 4.0]).unwrap()],
        };
        clip_global_norm(&mut g, 1.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-15);
    }
}
