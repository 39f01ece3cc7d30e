//! Soft prompts, late insertion and the instance-aware prompt generators.
//!
//! A prompt is an `l × d` block of pseudo-token states prepended to the
//! hidden states entering layer `k`. It is either a free matrix
//! ([`Method::PT`], [`Method::LateNoPg`]) or produced per instance by a
//! generator from the frozen layer-`(k-1)` output:
//!
//! * NPG: `W2 · ReLU(W1 · h_cls + b1) + b2`, reshaped to `l × d`.
//! * APPG / MPPG: down-project every token, pool the sequence into `l`
//!   buckets (average or max), ReLU, then up-project with a shared `b2`.
//!
//! All functions work on a batch of `B` segments laid out row-major, so the
//! prompts for a batch form a single `(B·l) × d` tensor.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{Layout, ModelConfig};
use crate::engine::Param;
use crate::error::{Error, Result};
use crate::tensor::{PoolMode, PoolPlan, Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    /// Input-layer prompt tuning.
    #[serde(rename = "PT")]
    PT,
    /// A free soft prompt inserted at layer `k`.
    #[serde(rename = "LATE_NOPG", alias = "LATE")]
    LateNoPg,
    #[serde(rename = "NPG")]
    Npg,
    #[serde(rename = "APPG")]
    Appg,
    #[serde(rename = "MPPG")]
    Mppg,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::PT, Method::LateNoPg, Method::Npg, Method::Appg, Method::Mppg];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::PT => "PT",
            Method::LateNoPg => "LATE_NOPG",
            Method::Npg => "NPG",
            Method::Appg => "APPG",
            Method::Mppg => "MPPG",
        }
    }

    pub fn uses_generator(self) -> bool {
        matches!(self, Method::Npg | Method::Appg | Method::Mppg)
    }

    fn pool_mode(self) -> Option<PoolMode> {
        match self {
            Method::Appg => Some(PoolMode::Avg),
            Method::Mppg => Some(PoolMode::Max),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PT" => Ok(Method::PT),
            "LATE" | "LATE_NOPG" => Ok(Method::LateNoPg),
            "NPG" => Ok(Method::Npg),
            "APPG" => Ok(Method::Appg),
            "MPPG" => Ok(Method::Mppg),
            other => Err(Error::Config(format!(
                "unknown method {other:?}; expected PT, LATE, NPG, APPG or MPPG"
            ))),
        }
    }
}

/// Which prompt, how long, and where it goes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptSpec {
    pub method: Method,
    /// Prompt length in pseudo-tokens.
    pub l: usize,
    /// 1-based layer whose input receives the prompt.
    pub k: usize,
    /// Generator bottleneck width; ignored by PT and LATE_NOPG.
    pub m: usize,
}

impl PromptSpec {
    /// Conventional settings for `method` on a backbone of `n_layers`:
    /// `l = 20` for free prompts, `l = 5` and `m = 128` for generators,
    /// `k = 1` for PT and the middle layer otherwise.
    pub fn defaults(method: Method, n_layers: usize) -> Self {
        let (l, m) = if method.uses_generator() { (5, 128) } else { (20, 0) };
        let k = if method == Method::PT { 1 } else { default_prompt_layer(n_layers) };
        PromptSpec { method, l, k, m }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if self.l == 0 {
            return Err(Error::Config("prompt.l must be at least 1".into()));
        }
        if self.k == 0 || self.k > config.n_layers {
            return Err(Error::Config(format!(
                "prompt.k = {} outside 1..={}",
                self.k, config.n_layers
            )));
        }
        if self.method == Method::PT && self.k != 1 {
            return Err(Error::Config(format!(
                "prompt.k = {} conflicts with method PT, which always prompts layer 1",
                self.k
            )));
        }
        if self.method.uses_generator() && self.m == 0 {
            return Err(Error::Config(format!("prompt.m must be at least 1 for {}", self.method)));
        }
        Ok(())
    }

    /// Layers that run a backward pass in one training step.
    pub fn backward_layers(&self, config: &ModelConfig) -> usize {
        config.n_layers - self.k + 1
    }
}

/// `⌊L/2⌋ + 1`, the most intermediate layer.
pub fn default_prompt_layer(n_layers: usize) -> usize {
    n_layers / 2 + 1
}

/// Closed-form tunable scalar count. The frozen backbone and the tied MLM
/// head never count.
pub fn count_tunable(spec: &PromptSpec, config: &ModelConfig) -> usize {
    let (l, d, m) = (spec.l, config.d_model, spec.m);
    match spec.method {
        Method::PT | Method::LateNoPg => l * d,
        Method::Npg => m * d + m + l * d * m + l * d,
        Method::Appg | Method::Mppg => m * d + m + d * m + d,
    }
}

/// `l × d` entries drawn i.i.d. from N(0, 0.02²).
pub fn init_soft_prompt(l: usize, d: usize, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid std");
    Tensor::new([l, d], (0..l * d).map(|_| normal.sample(&mut rng)).collect::<Vec<_>>())
}

/// Bottleneck generator parameters. NPG: `w2` is `(l·d) × m`, `b2` has
/// `l·d` entries. PPG: `w2` is `d × m`, `b2` has `d` entries.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorWeights {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl GeneratorWeights {
    /// `W1 ~ N(0, 1/d)` so the bottleneck sees unit-scale activations,
    /// `W2, b2 ~ N(0, 0.02²)` so initial prompts look like a fresh soft
    /// prompt, `b1 = 0`.
    pub fn init(spec: &PromptSpec, d: usize, seed: u64) -> Result<Self> {
        if !spec.method.uses_generator() {
            return Err(Error::Contract(format!("{} has no generator", spec.method)));
        }
        let out = if spec.method == Method::Npg { spec.l * d } else { d };
        let m = spec.m;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wide = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let narrow = Normal::new(0.0, 0.02).expect("valid std");
        let mut draw = |n: usize, dist: &Normal<f64>| -> Vec<f64> { (0..n).map(|_| dist.sample(&mut rng)).collect() };
        Ok(GeneratorWeights {
            w1: Tensor::new([m, d], draw(m * d, &wide))?,
            b1: Tensor::zeros([m]),
            w2: Tensor::new([out, m], draw(out * m, &narrow))?,
            b2: Tensor::new([out], draw(out, &narrow))?,
        })
    }

    fn check(&self, spec: &PromptSpec, d: usize) -> Result<()> {
        let out = if spec.method == Method::Npg { spec.l * d } else { d };
        let m = spec.m;
        let expected: [(&Tensor, Vec<usize>); 4] = [
            (&self.w1, vec![m, d]),
            (&self.b1, vec![m]),
            (&self.w2, vec![out, m]),
            (&self.b2, vec![out]),
        ];
        for (t, shape) in expected {
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "generator weights",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
        }
        Ok(())
    }
}

/// NPG over a batch: `h_cls` is `B × d` (one classification row per
/// segment), the result is `(B·l) × d`. The input is detached first.
pub fn npg_generate(tape: &mut Tape, h_cls: &Tensor, gw: &GeneratorWeights, l: usize) -> Result<Tensor> {
    let (b, d) = h_cls.expect_matrix("npg_generate")?;
    if gw.w2.rows() != l * d {
        return Err(Error::Shape {
            op: "npg_generate",
            lhs: gw.w2.shape().to_vec(),
            rhs: vec![l * d, gw.w1.rows()],
        });
    }
    let h = tape.linear(&h_cls.detach(), &gw.w1, Some(&gw.b1))?;
    let h = tape.relu(&h);
    let p = tape.linear(&h, &gw.w2, Some(&gw.b2))?;
    tape.reshape(&p, &[b * l, d])
}

/// APPG/MPPG over a batch: `h` holds `layout.batch` segments of
/// `layout.seq_len` rows, padding excluded via `layout.mask`. Result is
/// `(B·l) × d`. The input is detached first.
pub fn ppg_generate(
    tape: &mut Tape,
    h: &Tensor,
    layout: &Layout,
    gw: &GeneratorWeights,
    l: usize,
    mode: PoolMode,
) -> Result<Tensor> {
    let (_, d) = h.expect_matrix("ppg_generate")?;
    if gw.w2.rows() != d {
        return Err(Error::Shape {
            op: "ppg_generate",
            lhs: gw.w2.shape().to_vec(),
            rhs: vec![d, gw.w1.rows()],
        });
    }
    let valid = layout
        .mask
        .chunks(layout.seq_len)
        .map(|m| {
            let v = m.iter().take_while(|&&x| x).count();
            if m[v..].iter().any(|&x| x) {
                Err(Error::Contract("padding must trail the real tokens".into()))
            } else {
                Ok(v)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = PoolPlan {
        seq_len: layout.seq_len,
        valid,
        out_len: l,
    };
    let down = tape.linear(&h.detach(), &gw.w1, Some(&gw.b1))?;
    let pooled = tape.bucket_pool(&down, &plan, mode)?;
    let pooled = tape.relu(&pooled);
    tape.linear(&pooled, &gw.w2, Some(&gw.b2))
}

/// Prepends `prompt` (`(B·l) × d`) to each segment of `hidden`. Returns the
/// combined states, their layout (prompt rows attendable) and the index
/// shift `l`. `None` means `l = 0` and returns the input unchanged.
pub fn insert_prompt(
    tape: &mut Tape,
    prompt: Option<&Tensor>,
    hidden: &Tensor,
    layout: &Layout,
) -> Result<(Tensor, Layout, usize)> {
    let Some(prompt) = prompt else {
        return Ok((hidden.clone(), layout.clone(), 0));
    };
    let (pr, pd) = prompt.expect_matrix("insert_prompt")?;
    let (hr, hd) = hidden.expect_matrix("insert_prompt")?;
    let b = layout.batch;
    if pd != hd || pr % b != 0 || hr != b * layout.seq_len {
        return Err(Error::Shape {
            op: "insert_prompt",
            lhs: prompt.shape().to_vec(),
            rhs: hidden.shape().to_vec(),
        });
    }
    let (l, n) = (pr / b, layout.seq_len);
    let joined = tape.concat_rows(&[prompt, hidden])?;
    let mut idx = Vec::with_capacity(b * (l + n));
    let mut mask = Vec::with_capacity(idx.capacity());
    for seg in 0..b {
        idx.extend(seg * l..(seg + 1) * l);
        idx.extend((seg * n..(seg + 1) * n).map(|r| pr + r));
        mask.extend(std::iter::repeat(true).take(l));
        mask.extend_from_slice(&layout.mask[seg * n..(seg + 1) * n]);
    }
    let out = tape.gather_rows(&joined, &idx)?;
    let layout = Layout {
        batch: b,
        seq_len: l + n,
        mask,
    };
    Ok((out, layout, l))
}

/// Trainable state of one prompt method.
#[derive(Clone, Debug, PartialEq)]
pub enum PromptParams {
    Soft(Tensor),
    Generator(GeneratorWeights),
}

/// A prompt method with its trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptModule {
    pub spec: PromptSpec,
    pub params: PromptParams,
}

const SOFT_NAME: &str = "prompt.soft";
const GEN_NAMES: [&str; 4] = ["generator.w1", "generator.b1", "generator.w2", "generator.b2"];

impl PromptModule {
    pub fn init(spec: PromptSpec, config: &ModelConfig, seed: u64) -> Result<Self> {
        spec.validate(config)?;
        let d = config.d_model;
        let params = if spec.method.uses_generator() {
            PromptParams::Generator(GeneratorWeights::init(&spec, d, seed)?)
        } else {
            PromptParams::Soft(init_soft_prompt(spec.l, d, seed)?)
        };
        Ok(PromptModule { spec, params })
    }

    /// Trainable tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        match &self.params {
            PromptParams::Soft(p) => vec![(SOFT_NAME.to_string(), p)],
            PromptParams::Generator(g) => GEN_NAMES
                .iter()
                .zip([&g.w1, &g.b1, &g.w2, &g.b2])
                .map(|(n, t)| (n.to_string(), t))
                .collect(),
        }
    }

    pub fn to_params(&self) -> Vec<Param> {
        self.named().into_iter().map(|(n, t)| Param::new(n, t.clone())).collect()
    }

    /// Rebuilds the module from tensors named as in [`named`](Self::named).
    pub fn from_named(spec: PromptSpec, config: &ModelConfig, tensors: &[(String, Tensor)]) -> Result<Self> {
        spec.validate(config)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?} for {}", spec.method)))
        };
        let params = if spec.method.uses_generator() {
            let g = GeneratorWeights {
                w1: find(GEN_NAMES[0])?,
                b1: find(GEN_NAMES[1])?,
                w2: find(GEN_NAMES[2])?,
                b2: find(GEN_NAMES[3])?,
            };
            g.check(&spec, config.d_model)?;
            PromptParams::Generator(g)
        } else {
            let p = find(SOFT_NAME)?;
            if p.shape() != [spec.l, config.d_model] {
                return Err(Error::Shape {
                    op: "soft prompt",
                    lhs: p.shape().to_vec(),
                    rhs: vec![spec.l, config.d_model],
                });
            }
            PromptParams::Soft(p)
        };
        Ok(PromptModule { spec, params })
    }

    /// Same module with every tensor passed through `f` (in `named` order).
    pub fn map(&self, mut f: impl FnMut(&Tensor) -> Tensor) -> Self {
        let params = match &self.params {
            PromptParams::Soft(p) => PromptParams::Soft(f(p)),
            PromptParams::Generator(g) => PromptParams::Generator(GeneratorWeights {
                w1: f(&g.w1),
                b1: f(&g.b1),
                w2: f(&g.w2),
                b2: f(&g.b2),
            }),
        };
        PromptModule { spec: self.spec, params }
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Prompts for every segment of `hidden` (the frozen layer-`(k-1)`
    /// output), as a `(B·l) × d` tensor.
    pub fn prompts(&self, tape: &mut Tape, hidden: &Tensor, layout: &Layout) -> Result<Tensor> {
        let l = self.spec.l;
        match &self.params {
            PromptParams::Soft(p) => {
                let idx: Vec<usize> = (0..layout.batch).flat_map(|_| 0..l).collect();
                tape.gather_rows(p, &idx)
            }
            PromptParams::Generator(g) => {
                if let Some(mode) = self.spec.method.pool_mode() {
                    ppg_generate(tape, hidden, layout, g, l, mode)
                } else {
                    let cls: Vec<usize> = (0..layout.batch).map(|b| b * layout.seq_len).collect();
                    let h_cls = tape.gather_rows(&hidden.detach(), &cls)?;
                    npg_generate(tape, &h_cls, g, l)
                }
            }
        }
    }

    /// Generates the prompts and prepends them: the input to layer `k`.
    pub fn prompted_input(&self, tape: &mut Tape, hidden: &Tensor, layout: &Layout) -> Result<(Tensor, Layout, usize)> {
        let p = self.prompts(tape, hidden, layout)?;
        insert_prompt(tape, Some(&p), hidden, layout)
    }
}

#[cfg(test)]
mod tests;
