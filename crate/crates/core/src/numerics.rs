//! Dense tensors, similarity/activation primitives and seeded random streams.
//!
//! Everything is `f64`. Random draws go through [`RngStream`], a counter-based
//! ChaCha stream addressed by `(seed, stream_id)`, so that any consumer can be
//! replayed bit-exactly from three integers.

use std::ops::Deref;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PilotError, Result};

/// Dense row-major array of finite `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(PilotError::config(format!(
                "tensor shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(PilotError::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Entries drawn i.i.d. from N(0, std²).
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the values. Callers must keep them finite.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Row `i` of a tensor viewed as `shape[0] x rest`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0].max(1);
        &self.data[i * width..(i + 1) * width]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl Deref for Tensor {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.data
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(PilotError::config(format!(
            "cosine_sim on lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(PilotError::DegenerateVector("zero-norm cosine operand".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= 1e-12 {
        return Err(PilotError::DegenerateVector(format!(
            "l2_normalize of vector with norm {n:e}"
        )));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// `y = M x` for a row-major `rows x cols` matrix.
pub fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    (0..rows)
        .map(|r| dot(&m[r * cols..(r + 1) * cols], x))
        .collect()
}

const GUMBEL_EPS: f64 = 1.0 / 9_007_199_254_740_992.0; // 2^-53

/// `n` draws of `scale * Gumbel(0, 1)`.
pub fn gumbel_sample(n: usize, scale: f64, rng: &mut RngStream) -> Tensor {
    let data = (0..n)
        .map(|_| {
            let u = rng.uniform_open();
            scale * -(-u.ln()).ln()
        })
        // scale == 0 must give exact zeros, not -0.0 from 0 * negative
        .map(|v| if scale == 0.0 { 0.0 } else { v })
        .collect();
    Tensor {
        shape: vec![n],
        data,
    }
}

/// Central-difference gradient of a scalar function.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> f64,
{
    if h <= 0.0 {
        return Err(PilotError::config("finite difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        if !fp.is_finite() {
            return Err(PilotError::OracleFailure { coord: i, value: fp });
        }
        if !fm.is_finite() {
            return Err(PilotError::OracleFailure { coord: i, value: fm });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// 64-bit FNV-1a, used to turn names and words into stream ids.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Persistable position of an [`RngStream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream_id: u64,
    pub counter: u64,
}

/// Counter-based random stream: ChaCha8 keyed by `seed`, nonce `stream_id`,
/// positioned at word `counter`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    /// Stream addressed by a human-readable name such as `"gumbel"`.
    pub fn named(seed: u64, name: &str) -> Self {
        Self::new(seed, fnv1a(name.as_bytes()))
    }

    /// Independent child stream, e.g. one per image or per category.
    pub fn substream(&self, index: u64) -> Self {
        Self::new(self.seed, mix64(self.stream_id ^ mix64(index.wrapping_add(1))))
    }

    pub fn from_state(state: RngState) -> Self {
        let mut s = Self::new(state.seed, state.stream_id);
        s.inner.set_word_pos(u128::from(state.counter));
        s
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream_id: self.stream_id,
            counter: self.inner.get_word_pos() as u64,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * GUMBEL_EPS
    }

    /// Uniform in `[2^-53, 1 - 2^-53]`; never 0 or 1.
    pub fn uniform_open(&mut self) -> f64 {
        self.uniform().clamp(GUMBEL_EPS, 1.0 - GUMBEL_EPS)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Seeded Fisher-Yates permutation of `0..n`.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            p.swap(i, j);
        }
        p
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
