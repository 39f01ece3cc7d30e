use std::sync::Arc;

use super::gemm::{gemm, Mat};
use super::{Tape, Tensor};
use crate::error::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Pooling flavour for [`Tape::bucket_pool`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Row layout for [`Tape::bucket_pool`]: `valid.len()` segments of
/// `seq_len` rows each, of which the first `valid[b]` are real tokens.
#[derive(Clone, Debug)]
pub struct PoolPlan {
    pub seq_len: usize,
    pub valid: Vec<usize>,
    pub out_len: usize,
}

impl PoolPlan {
    /// Half-open bucket `[lo, hi)` for output position `i` over `valid` tokens.
    pub fn bucket(i: usize, valid: usize, out_len: usize) -> (usize, usize) {
        (i * valid / out_len, (i + 1) * valid / out_len)
    }
}

pub(crate) enum Op {
    Leaf,
    Add,
    Mul,
    Scale(f64),
    Sum,
    Mean,
    MatMul,
    Linear,
    Relu,
    SoftmaxRows,
    LayerNorm { xhat: Vec<f64>, rstd: Vec<f64> },
    Embedding { ids: Vec<usize> },
    Reshape,
    ConcatRows,
    GatherRows { idx: Vec<usize> },
    BucketPool { src: Vec<(usize, usize)>, mode: PoolMode, argmax: Vec<usize> },
    Attention { batch: usize, seq: usize, heads: usize, probs: Vec<f64> },
    CrossEntropy { targets: Vec<usize>, probs: Vec<f64> },
    LayerMark,
}

impl Op {
    /// Scalars kept alongside the output for the backward pass.
    pub(crate) fn saved_len(&self) -> usize {
        match self {
            Op::LayerNorm { xhat, rstd } => xhat.len() + rstd.len(),
            Op::BucketPool { argmax, .. } => argmax.len(),
            Op::Attention { probs, .. } => probs.len(),
            Op::CrossEntropy { probs, .. } => probs.len(),
            _ => 0,
        }
    }

    pub(crate) fn backward(
        &self,
        inputs: &[Tensor],
        output: &Tensor,
        g: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let need = |i: usize| needs.get(i).copied().unwrap_or(false);
        match self {
            Op::Leaf => vec![],
            Op::Add => vec![need(0).then(|| g.to_vec()), need(1).then(|| g.to_vec())],
            Op::Mul => {
                let (a, b) = (inputs[0].data(), inputs[1].data());
                vec![
                    need(0).then(|| g.iter().zip(b).map(|(g, b)| g * b).collect()),
                    need(1).then(|| g.iter().zip(a).map(|(g, a)| g * a).collect()),
                ]
            }
            Op::Scale(f) => vec![Some(g.iter().map(|g| g * f).collect())],
            Op::Sum => vec![Some(vec![g[0]; inputs[0].len()])],
            Op::Mean => {
                let n = inputs[0].len();
                vec![Some(vec![g[0] / n as f64; n])]
            }
            Op::MatMul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (r, s) = (a.rows(), a.cols());
                let t = b.cols();
                let gm = Mat::new(g, r, t);
                let da = need(0).then(|| {
                    let mut da = vec![0.0; r * s];
                    gemm(gm, Mat::new(b.data(), s, t).t(), &mut da, s, 0.0);
                    da
                });
                let db = need(1).then(|| {
                    let mut db = vec![0.0; s * t];
                    gemm(Mat::new(a.data(), r, s).t(), gm, &mut db, t, 0.0);
                    db
                });
                vec![da, db]
            }
            Op::Linear => {
                let (x, w) = (&inputs[0], &inputs[1]);
                let (r, i) = (x.rows(), x.cols());
                let o = w.rows();
                let gm = Mat::new(g, r, o);
                let dx = need(0).then(|| {
                    let mut dx = vec![0.0; r * i];
                    gemm(gm, Mat::new(w.data(), o, i), &mut dx, i, 0.0);
                    dx
                });
                let dw = need(1).then(|| {
                    let mut dw = vec![0.0; o * i];
                    gemm(gm.t(), Mat::new(x.data(), r, i), &mut dw, i, 0.0);
                    dw
                });
                let mut out = vec![dx, dw];
                if inputs.len() == 3 {
                    out.push(need(2).then(|| {
                        let mut db = vec![0.0; o];
                        for row in g.chunks_exact(o) {
                            db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                        }
                        db
                    }));
                }
                out
            }
            Op::Relu => vec![Some(
                g.iter()
                    .zip(inputs[0].data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect(),
            )],
            Op::SoftmaxRows => {
                let c = output.cols();
                let mut dx = vec![0.0; g.len()];
                for ((dx, y), g) in dx.chunks_exact_mut(c).zip(output.data().chunks_exact(c)).zip(g.chunks_exact(c)) {
                    let dot: f64 = y.iter().zip(g).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        dx[j] = y[j] * (g[j] - dot);
                    }
                }
                vec![Some(dx)]
            }
            Op::LayerNorm { xhat, rstd } => {
                let gain = inputs[1].data();
                let c = gain.len();
                let dx = need(0).then(|| {
                    let mut dx = vec![0.0; g.len()];
                    for (row, dx) in dx.chunks_exact_mut(c).enumerate() {
                        let g = &g[row * c..(row + 1) * c];
                        let xh = &xhat[row * c..(row + 1) * c];
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = g[j] * gain[j];
                            mean_d += d;
                            mean_dx += d * xh[j];
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        for j in 0..c {
                            dx[j] = rstd[row] * (g[j] * gain[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    dx
                });
                let dgain = need(1).then(|| {
                    let mut d = vec![0.0; c];
                    for (g, xh) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            d[j] += g[j] * xh[j];
                        }
                    }
                    d
                });
                let dbias = need(2).then(|| {
                    let mut d = vec![0.0; c];
                    for g in g.chunks_exact(c) {
                        d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
                    }
                    d
                });
                vec![dx, dgain, dbias]
            }
            Op::Embedding { ids } => {
                let table = &inputs[0];
                let d = table.cols();
                let mut dt = vec![0.0; table.len()];
                for (row, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(t, g)| *t += g);
                }
                vec![Some(dt)]
            }
            Op::Reshape => vec![Some(g.to_vec())],
            Op::ConcatRows => {
                let mut offset = 0;
                inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| {
                        let part = need(i).then(|| g[offset..offset + t.len()].to_vec());
                        offset += t.len();
                        part
                    })
                    .collect()
            }
            Op::GatherRows { idx } => {
                let x = &inputs[0];
                let c = x.cols();
                let mut dx = vec![0.0; x.len()];
                for (j, &src) in idx.iter().enumerate() {
                    dx[src * c..(src + 1) * c]
                        .iter_mut()
                        .zip(&g[j * c..(j + 1) * c])
                        .for_each(|(d, g)| *d += g);
                }
                vec![Some(dx)]
            }
            Op::BucketPool { src, mode, argmax } => {
                let x = &inputs[0];
                let c = x.cols();
                let mut dx = vec![0.0; x.len()];
                for (j, &(lo, hi)) in src.iter().enumerate() {
                    let g = &g[j * c..(j + 1) * c];
                    match mode {
                        PoolMode::Avg => {
                            let w = 1.0 / (hi - lo) as f64;
                            for r in lo..hi {
                                for col in 0..c {
                                    dx[r * c + col] += g[col] * w;
                                }
                            }
                        }
                        PoolMode::Max => {
                            for col in 0..c {
                                let r = argmax[j * c + col];
                                dx[r * c + col] += g[col];
                            }
                        }
                    }
                }
                vec![Some(dx)]
            }
            Op::Attention {
                batch,
                seq,
                heads,
                probs,
            } => attention_backward(inputs, g, needs, *batch, *seq, *heads, probs),
            Op::CrossEntropy { targets, probs } => {
                let c = inputs[0].cols();
                let scale = g[0] / targets.len() as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &t) in targets.iter().enumerate() {
                    dx[row * c + t] -= scale;
                }
                vec![Some(dx)]
            }
            Op::LayerMark => vec![Some(g.to_vec())],
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl Tape {
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("add", a, b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.record(Op::Add, &[a, b], out))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(shape_err("mul", a, b));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(a.shape().to_vec(), data);
        Ok(self.record(Op::Mul, &[a, b], out))
    }

    pub fn scale(&mut self, x: &Tensor, factor: f64) -> Tensor {
        let data = x.data().iter().map(|v| v * factor).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.record(Op::Scale(factor), &[x], out)
    }

    pub fn sum(&mut self, x: &Tensor) -> Tensor {
        let out = Tensor::scalar(x.data().iter().sum());
        self.record(Op::Sum, &[x], out)
    }

    pub fn mean(&mut self, x: &Tensor) -> Tensor {
        let out = Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64);
        self.record(Op::Mean, &[x], out)
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (r, s) = a.expect_matrix("matmul")?;
        let (s2, t) = b.expect_matrix("matmul")?;
        if s != s2 {
            return Err(shape_err("matmul", a, b));
        }
        let mut c = vec![0.0; r * t];
        gemm(Mat::new(a.data(), r, s), Mat::new(b.data(), s, t), &mut c, t, 0.0);
        let out = Tensor::from_parts(vec![r, t], c);
        Ok(self.record(Op::MatMul, &[a, b], out))
    }

    /// Affine map `x · wᵀ + b` with `w` stored as `out × in`.
    pub fn linear(&mut self, x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let (r, i) = x.expect_matrix("linear")?;
        let (o, i2) = w.expect_matrix("linear")?;
        if i != i2 {
            return Err(shape_err("linear", x, w));
        }
        let mut y = vec![0.0; r * o];
        if let Some(b) = b {
            if b.len() != o {
                return Err(shape_err("linear bias", w, b));
            }
            for row in y.chunks_exact_mut(o) {
                row.copy_from_slice(b.data());
            }
        }
        let beta = if b.is_some() { 1.0 } else { 0.0 };
        gemm(Mat::new(x.data(), r, i), Mat::new(w.data(), o, i).t(), &mut y, o, beta);
        let out = Tensor::from_parts(vec![r, o], y);
        Ok(match b {
            Some(b) => self.record(Op::Linear, &[x, w, b], out),
            None => self.record(Op::Linear, &[x, w], out),
        })
    }

    /// Elementwise `max(0, x)`; the subgradient at exactly zero is zero.
    pub fn relu(&mut self, x: &Tensor) -> Tensor {
        let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.record(Op::Relu, &[x], out)
    }

    pub fn softmax_rows(&mut self, x: &Tensor) -> Result<Tensor> {
        let (_, c) = x.expect_matrix("softmax_rows")?;
        let mut data = x.to_vec();
        data.chunks_exact_mut(c).for_each(softmax_in_place);
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.record(Op::SoftmaxRows, &[x], out))
    }

    /// Row-wise layer normalisation with learnable gain and bias.
    pub fn layer_norm(&mut self, x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (r, c) = x.expect_matrix("layer_norm")?;
        if gain.len() != c || bias.len() != c {
            return Err(shape_err("layer_norm", x, gain));
        }
        let mut xhat = vec![0.0; r * c];
        let mut rstd = vec![0.0; r];
        let mut y = vec![0.0; r * c];
        for row in 0..r {
            let xs = &x.data()[row * c..(row + 1) * c];
            let mean = xs.iter().sum::<f64>() / c as f64;
            let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[row] = rs;
            for j in 0..c {
                let h = (xs[j] - mean) * rs;
                xhat[row * c + j] = h;
                y[row * c + j] = h * gain.data()[j] + bias.data()[j];
            }
        }
        let out = Tensor::from_parts(vec![r, c], y);
        if self.should_record(&[x, gain, bias]) {
            let inputs = vec![x.clone(), gain.clone(), bias.clone()];
            Ok(self.push(Op::LayerNorm { xhat, rstd }, inputs, out))
        } else {
            Ok(out)
        }
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: &Tensor, ids: &[usize]) -> Result<Tensor> {
        let (v, d) = table.expect_matrix("embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::Contract(format!("token id {bad} outside vocabulary of {v}")));
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup of an empty sequence".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        if self.should_record(&[table]) {
            Ok(self.push(Op::Embedding { ids: ids.to_vec() }, vec![table.clone()], out))
        } else {
            Ok(out)
        }
    }

    pub fn reshape(&mut self, x: &Tensor, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != x.len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: x.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&x.data),
            node: None,
        };
        Ok(self.record(Op::Reshape, &[x], out))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = first.expect_matrix("concat_rows")?.1;
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, pc) = p.expect_matrix("concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        let out = Tensor::from_parts(vec![rows, c], data);
        Ok(self.record(Op::ConcatRows, parts, out))
    }

    /// Output row `j` is input row `idx[j]`; rows may repeat.
    pub fn gather_rows(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        let (r, c) = x.expect_matrix("gather_rows")?;
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!("row index {bad} out of range for {r} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let out = Tensor::from_parts(vec![idx.len(), c], data);
        if self.should_record(&[x]) {
            Ok(self.push(Op::GatherRows { idx: idx.to_vec() }, vec![x.clone()], out))
        } else {
            Ok(out)
        }
    }

    /// Compresses each segment's valid rows to `plan.out_len` rows.
    ///
    /// Rows `0..valid` of a segment are split into `out_len` contiguous
    /// buckets, bucket `i` covering `[⌊i·valid/out_len⌋, ⌊(i+1)·valid/out_len⌋)`;
    /// padding rows never contribute. `Max` keeps the first maximal row.
    pub fn bucket_pool(&mut self, x: &Tensor, plan: &PoolPlan, mode: PoolMode) -> Result<Tensor> {
        let (r, c) = x.expect_matrix("bucket_pool")?;
        let l = plan.out_len;
        if l == 0 {
            return Err(Error::Unsupported("pooling to zero rows".into()));
        }
        if r != plan.seq_len * plan.valid.len() {
            return Err(Error::Shape {
                op: "bucket_pool",
                lhs: x.shape().to_vec(),
                rhs: vec![plan.valid.len(), plan.seq_len],
            });
        }
        let mut src = Vec::with_capacity(plan.valid.len() * l);
        for (b, &valid) in plan.valid.iter().enumerate() {
            if valid < l || valid > plan.seq_len {
                return Err(Error::Unsupported(format!(
                    "cannot pool {valid} valid positions (of {}) into a prompt of length {l}; \
                     shorten the prompt or lengthen the input",
                    plan.seq_len
                )));
            }
            for i in 0..l {
                let (lo, hi) = PoolPlan::bucket(i, valid, l);
                src.push((b * plan.seq_len + lo, b * plan.seq_len + hi));
            }
        }
        let xd = x.data();
        let mut data = vec![0.0; src.len() * c];
        let mut argmax = Vec::new();
        for (j, &(lo, hi)) in src.iter().enumerate() {
            let out = &mut data[j * c..(j + 1) * c];
            match mode {
                PoolMode::Avg => {
                    for row in lo..hi {
                        out.iter_mut().zip(&xd[row * c..(row + 1) * c]).for_each(|(o, v)| *o += v);
                    }
                    let n = (hi - lo) as f64;
                    out.iter_mut().for_each(|o| *o /= n);
                }
                PoolMode::Max => {
                    for col in 0..c {
                        let mut best = lo;
                        for row in lo + 1..hi {
                            if xd[row * c + col] > xd[best * c + col] {
                                best = row;
                            }
                        }
                        out[col] = xd[best * c + col];
                        argmax.push(best);
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![src.len(), c], data);
        if self.should_record(&[x]) {
            Ok(self.push(Op::BucketPool { src, mode, argmax }, vec![x.clone()], out))
        } else {
            Ok(out)
        }
    }

    /// Multi-head scaled dot-product attention over `batch` segments of
    /// `seq` rows. `key_mask[b·seq + j]` false hides key `j` of segment `b`.
    #[allow(clippy::too_many_arguments)]
    pub fn attention(
        &mut self,
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: &[bool],
    ) -> Result<Tensor> {
        let (r, d) = q.expect_matrix("attention")?;
        if k.shape() != q.shape() || v.shape() != q.shape() {
            return Err(shape_err("attention", q, k));
        }
        if r != batch * seq || key_mask.len() != r || heads == 0 || d % heads != 0 {
            return Err(Error::Shape {
                op: "attention",
                lhs: q.shape().to_vec(),
                rhs: vec![batch, seq, heads],
            });
        }
        for b in 0..batch {
            if !key_mask[b * seq..(b + 1) * seq].iter().any(|&m| m) {
                return Err(Error::Contract(format!("segment {b} has no attendable key")));
            }
        }
        let probs = attention_probs(q, k, batch, seq, heads, key_mask);
        let dh = d / heads;
        let mut out = vec![0.0; r * d];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    Mat::new(p, seq, seq),
                    Mat::block(v.data(), d, b * seq, h * dh, seq, dh),
                    &mut out[b * seq * d + h * dh..],
                    d,
                    0.0,
                );
            }
        }
        let out = Tensor::from_parts(vec![r, d], out);
        if self.should_record(&[q, k, v]) {
            let op = Op::Attention {
                batch,
                seq,
                heads,
                probs,
            };
            Ok(self.push(op, vec![q.clone(), k.clone(), v.clone()], out))
        } else {
            Ok(out)
        }
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: &Tensor, targets: &[usize]) -> Result<Tensor> {
        let (r, c) = logits.expect_matrix("cross_entropy")?;
        if targets.len() != r {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: logits.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target class {bad} outside {c} classes")));
        }
        // log-sum-exp form: exact for confident rows, and NaN/inf propagate
        let nll: f64 = logits
            .data()
            .chunks_exact(c)
            .zip(targets)
            .map(|(row, &t)| {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                if row.iter().any(|x| x.is_nan()) {
                    f64::NAN
                } else {
                    lse - row[t]
                }
            })
            .sum();
        let mut probs = logits.to_vec();
        probs.chunks_exact_mut(c).for_each(softmax_in_place);
        let out = Tensor::scalar(nll / r as f64);
        if self.should_record(&[logits]) {
            let op = Op::CrossEntropy {
                targets: targets.to_vec(),
                probs,
            };
            Ok(self.push(op, vec![logits.clone()], out))
        } else {
            Ok(out)
        }
    }

    /// Identity that counts itself when the backward sweep passes through.
    pub fn layer_mark(&mut self, x: &Tensor) -> Tensor {
        self.record(Op::LayerMark, &[x], x.detach())
    }
}

/// Attention probabilities, laid out `[batch][head][query][key]`.
pub(crate) fn attention_probs(
    q: &Tensor,
    k: &Tensor,
    batch: usize,
    seq: usize,
    heads: usize,
    key_mask: &[bool],
) -> Vec<f64> {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        let mask = &key_mask[b * seq..(b + 1) * seq];
        for h in 0..heads {
            let s = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
            gemm(
                Mat::block(q.data(), d, b * seq, h * dh, seq, dh),
                Mat::block(k.data(), d, b * seq, h * dh, seq, dh).t(),
                s,
                seq,
                0.0,
            );
            for row in s.chunks_exact_mut(seq) {
                for (x, &m) in row.iter_mut().zip(mask) {
                    *x = if m { *x * scale } else { f64::NEG_INFINITY };
                }
                softmax_in_place(row);
            }
        }
    }
    probs
}

fn attention_backward(
    inputs: &[Tensor],
    g: &[f64],
    needs: &[bool],
    batch: usize,
    seq: usize,
    heads: usize,
    probs: &[f64],
) -> Vec<Option<Vec<f64>>> {
    let (q, k, v) = (&inputs[0], &inputs[1], &inputs[2]);
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n = q.len();
    let mut dq = vec![0.0; n];
    let mut dk = vec![0.0; n];
    let mut dv = vec![0.0; n];
    let mut dp = vec![0.0; seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
            let go = Mat::block(g, d, b * seq, h * dh, seq, dh);
            let off = b * seq * d + h * dh;
            if needs[2] {
                gemm(Mat::new(p, seq, seq).t(), go, &mut dv[off..], d, 0.0);
            }
            if !(needs[0] || needs[1]) {
                continue;
            }
            gemm(go, Mat::block(v.data(), d, b * seq, h * dh, seq, dh).t(), &mut dp, seq, 0.0);
            for (dp, p) in dp.chunks_exact_mut(seq).zip(p.chunks_exact(seq)) {
                let dot: f64 = dp.iter().zip(p).map(|(a, b)| a * b).sum();
                for j in 0..seq {
                    dp[j] = p[j] * (dp[j] - dot) * scale;
                }
            }
            let ds = Mat::new(&dp, seq, seq);
            if needs[0] {
                gemm(ds, Mat::block(k.data(), d, b * seq, h * dh, seq, dh), &mut dq[off..], d, 0.0);
            }
            if needs[1] {
                gemm(ds.t(), Mat::block(q.data(), d, b * seq, h * dh, seq, dh), &mut dk[off..], d, 0.0);
            }
        }
    }
    vec![
        needs[0].then_some(dq),
        needs[1].then_some(dk),
        needs[2].then_some(dv),
    ]
}
