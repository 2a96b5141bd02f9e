//! The two prompt branches and their fusion.
//!
//! * A learnable pool of `K` normal/anomalous token sequences, weighted per
//!   image by `alpha_k = cos(x_cls * s_k, r_k)`.
//! * A frozen bank of attribute text embeddings `u_c` with learnable
//!   modulations `g_c`, weighted by noisy 1.5-entmax over
//!   `beta_c = cos(x_cls * g_c, u_c)`.
//! * Orthogonal-projection fusion that keeps the attribute anchor intact and
//!   adds only the prompt component orthogonal to it.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoders::TextEncoder;
use crate::error::{PilotError, Result};
use crate::numerics::{cosine_sim, dot, gumbel_sample, l2_normalize, norm, RngStream, Tensor};
use crate::sparse_select::entmax15;

/// Standard deviation of the Gaussian used for every prompt-side init.
pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptPool {
    /// `K` tensors of shape `L x d`.
    pub normal: Vec<Tensor>,
    pub anomalous: Vec<Tensor>,
    /// `s_k`, applied element-wise to the image feature.
    pub modulation: Vec<Tensor>,
    /// `r_k`.
    pub reference: Vec<Tensor>,
}

impl PromptPool {
    pub fn init(k: usize, prompt_len: usize, dim: usize, rng: &mut RngStream) -> Self {
        let mut pool = PromptPool {
            normal: Vec::with_capacity(k),
            anomalous: Vec::with_capacity(k),
            modulation: Vec::with_capacity(k),
            reference: Vec::with_capacity(k),
        };
        for _ in 0..k {
            pool.normal.push(Tensor::randn(vec![prompt_len, dim], PROMPT_INIT_STD, rng));
            pool.anomalous.push(Tensor::randn(vec![prompt_len, dim], PROMPT_INIT_STD, rng));
            pool.modulation.push(Tensor::randn(vec![dim], PROMPT_INIT_STD, rng));
            pool.reference.push(Tensor::randn(vec![dim], PROMPT_INIT_STD, rng));
        }
        pool
    }

    pub fn len(&self) -> usize {
        self.normal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normal.is_empty()
    }

    pub fn prompt_len(&self) -> usize {
        self.normal.first().map_or(0, |t| t.shape()[0])
    }

    pub fn dim(&self) -> usize {
        self.modulation.first().map_or(0, |t| t.len())
    }
}

fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// `alpha_k = cos(x_cls * s_k, r_k)`.
pub fn query_prompts(x_cls: &[f64], pool: &PromptPool) -> Result<Vec<f64>> {
    (0..pool.len())
        .map(|k| {
            let modulated = hadamard(x_cls, &pool.modulation[k]);
            if norm(&modulated) == 0.0 {
                return Err(PilotError::DegenerateVector(format!(
                    "modulated image feature for prompt {k}"
                )));
            }
            cosine_sim(&modulated, &pool.reference[k])
                .map_err(|_| PilotError::DegenerateVector(format!("reference of prompt {k}")))
        })
        .collect()
}

/// A token sequence, one `d`-vector per position.
pub type Tokens = Vec<Vec<f64>>;

/// Token-wise `sum_k alpha_k p_k` for both branches.
pub fn aggregate_prompts(pool: &PromptPool, alpha: &[f64]) -> Result<(Tokens, Tokens)> {
    if alpha.len() != pool.len() {
        return Err(PilotError::config(format!(
            "{} prompt weights for a pool of {}",
            alpha.len(),
            pool.len()
        )));
    }
    let combine = |seqs: &[Tensor]| -> Vec<Vec<f64>> {
        let (len, dim) = (pool.prompt_len(), pool.dim());
        (0..len)
            .map(|l| {
                let mut tok = vec![0.0; dim];
                for (a, seq) in alpha.iter().zip(seqs) {
                    tok.iter_mut().zip(seq.row(l)).for_each(|(t, v)| *t += a * v);
                }
                tok
            })
            .collect()
    };
    Ok((combine(&pool.normal), combine(&pool.anomalous)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    /// `u_c`, unit norm, frozen.
    pub embedding: Vec<f64>,
    /// `g_c`, learnable.
    pub modulation: Vec<f64>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeBank {
    pub normal: Vec<Attribute>,
    pub anomalous: Vec<Attribute>,
}

impl AttributeBank {
    pub fn len(&self) -> usize {
        self.normal.len() + self.anomalous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All attributes, normal partition first.
    pub fn iter(&self) -> impl Iterator<Item = &Attribute> {
        self.normal.iter().chain(&self.anomalous)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Attribute> {
        self.normal.iter_mut().chain(self.anomalous.iter_mut())
    }
}

/// State words and context templates the bank is generated from.
///
/// File form: sections `[normal]`, `[anomalous]`, `[templates:general]`,
/// `[templates:industrial]`, `[templates:medical]`, one entry per line, each
/// carrying a `{}` placeholder. Blank lines and `#` comments are skipped.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeTemplates {
    pub normal: Vec<String>,
    pub anomalous: Vec<String>,
    pub general: Vec<String>,
    pub industrial: Vec<String>,
    pub medical: Vec<String>,
}

const SECTIONS: [&str; 5] = [
    "normal",
    "anomalous",
    "templates:general",
    "templates:industrial",
    "templates:medical",
];

impl Default for AttributeTemplates {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        Self {
            normal: s(&["{}", "flawless {}", "perfect {}", "{} without defect"]),
            anomalous: s(&["damaged {}", "imperfect {}", "broken {}", "{} with defect"]),
            general: s(&[
                "a cropped photo of the {}",
                "a blurry photo of a {} for anomaly detection",
                "a close-up photo of a {}",
                "a photo of the {}",
            ]),
            industrial: s(&["an industrial photo of a {}", "a bright industrial photo of the {}"]),
            medical: s(&["a CT scan of a {}", "an ultrasound image of a {}"]),
        }
    }
}

impl AttributeTemplates {
    pub fn contexts(&self) -> impl Iterator<Item = &String> {
        self.general.iter().chain(&self.industrial).chain(&self.medical)
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut out = AttributeTemplates {
            normal: vec![],
            anomalous: vec![],
            general: vec![],
            industrial: vec![],
            medical: vec![],
        };
        let mut current: Option<usize> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                current = Some(SECTIONS.iter().position(|s| *s == name).ok_or_else(|| {
                    PilotError::format(origin, format!("line {}: unknown section [{name}]", no + 1))
                })?);
                continue;
            }
            if !line.contains("{}") {
                return Err(PilotError::format(
                    origin,
                    format!("line {}: entry has no {{}} placeholder", no + 1),
                ));
            }
            let list = match current {
                Some(0) => &mut out.normal,
                Some(1) => &mut out.anomalous,
                Some(2) => &mut out.general,
                Some(3) => &mut out.industrial,
                Some(4) => &mut out.medical,
                _ => {
                    return Err(PilotError::format(
                        origin,
                        format!("line {}: entry before any section", no + 1),
                    ))
                }
            };
            list.push(line.to_string());
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| PilotError::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let lists = [&self.normal, &self.anomalous, &self.general, &self.industrial, &self.medical];
        for (name, list) in SECTIONS.iter().zip(lists) {
            let _ = writeln!(s, "[{name}]");
            for e in list {
                let _ = writeln!(s, "{e}");
            }
            s.push('\n');
        }
        s
    }
}

/// Turns free text into encoder tokens: lowercase words, punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_ascii_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Every (state, context) combination, embedded with the frozen text encoder.
pub fn build_attribute_bank(
    templates: &AttributeTemplates,
    encoder: &TextEncoder,
    class_name: &str,
) -> Result<AttributeBank> {
    if templates.normal.is_empty() || templates.anomalous.is_empty() {
        return Err(PilotError::config("both state sets must be non-empty"));
    }
    if templates.contexts().next().is_none() {
        return Err(PilotError::config("at least one context template is required"));
    }
    let build = |states: &[String]| -> Result<Vec<Attribute>> {
        let mut out = Vec::new();
        for state in states {
            let filled = state.replace("{}", class_name);
            for ctx in templates.contexts() {
                let text = ctx.replace("{}", &filled);
                let tokens: Vec<Vec<f64>> = tokenize(&text).iter().map(|w| encoder.word(w)).collect();
                let embedding = l2_normalize(&encoder.encode_text_frozen(&tokens)?)?;
                out.push(Attribute {
                    embedding,
                    modulation: vec![1.0; encoder.dim()],
                    text,
                });
            }
        }
        Ok(out)
    };
    Ok(AttributeBank {
        normal: build(&templates.normal)?,
        anomalous: build(&templates.anomalous)?,
    })
}

/// `beta_c = cos(x_cls * g_c, u_c)` over one partition.
pub fn query_attributes(x_cls: &[f64], partition: &[Attribute]) -> Result<Vec<f64>> {
    partition
        .iter()
        .enumerate()
        .map(|(c, a)| {
            let modulated = hadamard(x_cls, &a.modulation);
            if norm(&modulated) == 0.0 {
                return Err(PilotError::DegenerateVector(format!(
                    "modulated image feature for attribute {c}"
                )));
            }
            cosine_sim(&modulated, &a.embedding)
        })
        .collect()
}

/// Weighted attribute embedding for given relevance scores and a fixed
/// noise draw: `phi = entmax15(beta + noise)`, `T_att = sum phi_c u_c`.
pub fn attribute_embedding_with_noise(
    beta: &[f64],
    partition: &[Attribute],
    noise: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let logits: Vec<f64> = beta.iter().zip(noise).map(|(b, n)| b + n).collect();
    let phi = entmax15(&logits).weights;
    let dim = partition[0].embedding.len();
    let mut t_att = vec![0.0; dim];
    for (w, a) in phi.iter().zip(partition) {
        t_att.iter_mut().zip(&a.embedding).for_each(|(t, u)| *t += w * u);
    }
    (t_att, phi)
}

/// As [`attribute_embedding_with_noise`], drawing `scale`-Gumbel noise from `rng`.
pub fn attribute_embedding(
    beta: &[f64],
    partition: &[Attribute],
    scale: f64,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if scale < 0.0 {
        return Err(PilotError::config("gumbel scale must be non-negative"));
    }
    let noise = gumbel_sample(beta.len(), scale, rng);
    Ok(attribute_embedding_with_noise(beta, partition, &noise))
}

fn check_anchor(t_att: &[f64]) -> Result<f64> {
    let aa = dot(t_att, t_att);
    let n = aa.sqrt();
    if n <= 1e-8 {
        return Err(PilotError::DegenerateAnchor { norm: n });
    }
    Ok(aa)
}

/// `T_att + (T - proj_{T_att}(T))`.
pub fn fuse(t_att: &[f64], t: &[f64]) -> Result<Vec<f64>> {
    let aa = check_anchor(t_att)?;
    let c = dot(t_att, t) / aa;
    Ok(t_att.iter().zip(t).map(|(a, ti)| a + (ti - c * a)).collect())
}

/// `||T - proj_{T_att}(T)|| / ||T||`, in `[0, 1]`.
pub fn projection_residual(t: &[f64], t_att: &[f64]) -> Result<f64> {
    let aa = check_anchor(t_att)?;
    let tn = norm(t);
    if tn == 0.0 {
        return Err(PilotError::DegenerateVector("projection residual of zero prompt".into()));
    }
    let c = dot(t_att, t) / aa;
    let resid: Vec<f64> = t.iter().zip(t_att).map(|(ti, a)| ti - c * a).collect();
    Ok((norm(&resid) / tn).clamp(0.0, 1.0))
}

/// Gumbel draws for the two bank partitions of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchNoise {
    pub normal: Vec<f64>,
    pub anomalous: Vec<f64>,
}

impl BranchNoise {
    pub fn zeros(bank: &AttributeBank) -> Self {
        Self {
            normal: vec![0.0; bank.normal.len()],
            anomalous: vec![0.0; bank.anomalous.len()],
        }
    }

    pub fn sample(bank: &AttributeBank, scale: f64, rng: &mut RngStream) -> Self {
        Self {
            normal: gumbel_sample(bank.normal.len(), scale, rng).into_data(),
            anomalous: gumbel_sample(bank.anomalous.len(), scale, rng).into_data(),
        }
    }
}

/// Fixed words appended after the pooled prompt tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Suffixes {
    pub normal: Vec<Vec<f64>>,
    pub anomalous: Vec<Vec<f64>>,
}

impl Suffixes {
    pub fn new(encoder: &TextEncoder, normal: &str, anomalous: &str) -> Self {
        let embed = |s: &str| tokenize(s).iter().map(|w| encoder.word(w)).collect();
        Self {
            normal: embed(normal),
            anomalous: embed(anomalous),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPromptPair {
    pub t_n_fus: Vec<f64>,
    pub t_a_fus: Vec<f64>,
    pub alphas: Vec<f64>,
    pub phis_n: Vec<f64>,
    pub phis_a: Vec<f64>,
    pub t_n: Vec<f64>,
    pub t_a: Vec<f64>,
    pub t_att_n: Vec<f64>,
    pub t_att_a: Vec<f64>,
}

/// Encodes the prompt branch for already-known pool weights `alphas`.
pub fn encode_prompt_pair(
    pool: &PromptPool,
    alphas: &[f64],
    text: &TextEncoder,
    prefixes: &[Tensor],
    suffixes: &Suffixes,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (mut pn, mut pa) = aggregate_prompts(pool, alphas)?;
    pn.extend(suffixes.normal.iter().cloned());
    pa.extend(suffixes.anomalous.iter().cloned());
    Ok((text.encode_text(&pn, prefixes)?, text.encode_text(&pa, prefixes)?))
}

/// Full dual-branch forward for one image feature.
pub fn forward_prompt_branch(
    x_cls: &[f64],
    pool: &PromptPool,
    bank: &AttributeBank,
    text: &TextEncoder,
    prefixes: &[Tensor],
    suffixes: &Suffixes,
    noise: &BranchNoise,
) -> Result<FusedPromptPair> {
    let alphas = query_prompts(x_cls, pool)?;
    forward_with_alphas(x_cls, alphas, pool, bank, text, prefixes, suffixes, noise)
}

/// [`forward_prompt_branch`] with the pool weights pinned by the caller.
#[allow(clippy::too_many_arguments)]
pub fn forward_with_alphas(
    x_cls: &[f64],
    alphas: Vec<f64>,
    pool: &PromptPool,
    bank: &AttributeBank,
    text: &TextEncoder,
    prefixes: &[Tensor],
    suffixes: &Suffixes,
    noise: &BranchNoise,
) -> Result<FusedPromptPair> {
    let (t_n, t_a) = encode_prompt_pair(pool, &alphas, text, prefixes, suffixes)?;
    let beta_n = query_attributes(x_cls, &bank.normal)?;
    let beta_a = query_attributes(x_cls, &bank.anomalous)?;
    let (t_att_n, phis_n) = attribute_embedding_with_noise(&beta_n, &bank.normal, &noise.normal);
    let (t_att_a, phis_a) = attribute_embedding_with_noise(&beta_a, &bank.anomalous, &noise.anomalous);
    Ok(FusedPromptPair {
        t_n_fus: fuse(&t_att_n, &t_n)?,
        t_a_fus: fuse(&t_att_a, &t_a)?,
        alphas,
        phis_n,
        phis_a,
        t_n,
        t_a,
        t_att_n,
        t_att_a,
    })
}
