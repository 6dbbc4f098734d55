//! Flat parameter vectors and exact gradients for the feedforward LM.
//!
//! Network: a `V x d` embedding table looked up for each of the `k` context
//! ids, the `k` embeddings concatenated into one `k*d` input, a stack of
//! fully connected ReLU layers, and a linear output layer over the
//! vocabulary followed by softmax.
//!
//! Weights are stored row-major as `[fan_in][fan_out]`. Every reduction runs
//! in a fixed left-to-right order so identical inputs give bit-identical
//! outputs.

use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Architecture;

/// One named block of the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, non-overlapping block descriptors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<ParamBlock>,
}

impl Layout {
    pub fn for_arch(arch: &Architecture) -> Self {
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>| {
            let len: usize = shape.iter().product();
            blocks.push(ParamBlock { name, shape, offset });
            offset += len;
        };
        push("embedding".into(), vec![arch.vocab, arch.embedding_dim]);
        let mut fan_in = arch.input_dim();
        for (l, &h) in arch.hidden.iter().enumerate() {
            push(format!("hidden{l}.weight"), vec![fan_in, h]);
            push(format!("hidden{l}.bias"), vec![h]);
            fan_in = h;
        }
        push("output.weight".into(), vec![fan_in, arch.vocab]);
        push("output.bias".into(), vec![arch.vocab]);
        Self { blocks }
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Model parameters θ.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

/// Gradient with the same layout as the parameters it differentiates.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(arch: &Architecture) -> Self {
        let layout = Layout::for_arch(arch);
        Self {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut p = Self::zeros(arch);
        for block in p.layout.blocks.clone() {
            if block.shape.len() != 2 {
                continue;
            }
            let limit = (6.0 / (block.shape[0] + block.shape[1]) as f64).sqrt();
            for v in &mut p.values[block.range()] {
                *v = rng.random_range(-limit..=limit);
            }
        }
        p
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn check_arch(&self, arch: &Architecture) -> Result<()> {
        let expected = arch.param_count();
        if self.values.len() != expected || self.layout.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: self.values.len(),
            });
        }
        Ok(())
    }
}

impl GradVector {
    pub fn zeros_like(params: &ParamVector) -> Self {
        Self {
            values: vec![0.0; params.values.len()],
            layout: params.layout.clone(),
        }
    }

    pub fn norm(&self) -> f64 {
        l2_norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.values[b.range()])
    }
}

pub fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0, |acc, x| acc + x * x).sqrt()
}

/// `log Σ exp(xs)`, shifted by the maximum.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || !m.is_finite() {
        return m;
    }
    let s = xs.iter().fold(0.0, |acc, &x| acc + (x - m).exp());
    m + s.ln()
}

/// Softmax with max-shifted exponentiation.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let s = out.iter().fold(0.0, |acc, x| acc + x);
    for v in &mut out {
        *v /= s;
    }
    out
}

// out[j] += Σ_i x[i] * w[i][j], i ascending.
fn affine(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij;
        }
    }
    out
}

struct LayerSpan {
    w: std::ops::Range<usize>,
    b: std::ops::Range<usize>,
    fan_in: usize,
    fan_out: usize,
}

fn layer_spans(arch: &Architecture) -> Vec<LayerSpan> {
    let mut spans = Vec::with_capacity(arch.hidden.len() + 1);
    let mut offset = arch.vocab * arch.embedding_dim;
    let mut fan_in = arch.input_dim();
    for &fan_out in arch.hidden.iter().chain(std::iter::once(&arch.vocab)) {
        let w = offset..offset + fan_in * fan_out;
        let b = w.end..w.end + fan_out;
        offset = b.end;
        spans.push(LayerSpan { w, b, fan_in, fan_out });
        fan_in = fan_out;
    }
    spans
}

fn check_inputs(params: &ParamVector, context: &[usize], arch: &Architecture) -> Result<()> {
    params.check_arch(arch)?;
    if context.len() != arch.context {
        return Err(Error::ShapeMismatch {
            expected: arch.context,
            actual: context.len(),
        });
    }
    if let Some(&id) = context.iter().find(|&&id| id >= arch.vocab) {
        return Err(Error::TokenOutOfRange { id, vocab: arch.vocab });
    }
    Ok(())
}

fn check_target(target: usize, arch: &Architecture) -> Result<()> {
    if target >= arch.vocab {
        return Err(Error::TokenOutOfRange {
            id: target,
            vocab: arch.vocab,
        });
    }
    Ok(())
}

/// Activations kept for backpropagation.
struct Trace {
    input: Vec<f64>,
    hidden: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn trace(params: &[f64], context: &[usize], arch: &Architecture, spans: &[LayerSpan]) -> Trace {
    let d = arch.embedding_dim;
    let mut input = Vec::with_capacity(context.len() * d);
    for &id in context {
        input.extend_from_slice(&params[id * d..(id + 1) * d]);
    }
    let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(arch.hidden.len());
    let (out_span, hidden_spans) = spans.split_last().expect("output layer");
    for span in hidden_spans {
        let x = hidden.last().unwrap_or(&input);
        let mut z = affine(x, &params[span.w.clone()], &params[span.b.clone()]);
        for v in &mut z {
            *v = v.max(0.0);
        }
        hidden.push(z);
    }
    let x = hidden.last().unwrap_or(&input);
    let logits = affine(x, &params[out_span.w.clone()], &params[out_span.b.clone()]);
    Trace { input, hidden, logits }
}

/// Output logits for one context.
pub fn logits(params: &ParamVector, context: &[usize], arch: &Architecture) -> Result<Vec<f64>> {
    check_inputs(params, context, arch)?;
    let spans = layer_spans(arch);
    Ok(trace(&params.values, context, arch, &spans).logits)
}

/// Next-token distribution for one context.
pub fn forward(params: &ParamVector, context: &[usize], arch: &Architecture) -> Result<Vec<f64>> {
    Ok(softmax(&logits(params, context, arch)?))
}

/// `-log p(target | context)`, computed as `logsumexp(z) - z[target]`.
pub fn example_loss(params: &ParamVector, context: &[usize], target: usize, arch: &Architecture) -> Result<f64> {
    check_target(target, arch)?;
    let z = logits(params, context, arch)?;
    Ok(cross_entropy(&z, target))
}

pub(crate) fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    // Rounding can leave a hair below zero when the target dominates.
    (log_sum_exp(logits) - logits[target]).max(0.0)
}

/// Per-example gradient with the embedding part kept as one row per
/// context position (rows may repeat an id).
#[derive(Debug, Clone)]
pub struct ExampleGrad {
    pub loss: f64,
    /// Gradient of every block after the embedding table.
    pub dense: Vec<f64>,
    pub context: Vec<usize>,
    /// `k * d` values; row `p` belongs to `context[p]`.
    pub embedding_rows: Vec<f64>,
    embedding_dim: usize,
}

impl ExampleGrad {
    /// Embedding rows merged per distinct id, ids ascending.
    fn merged_rows(&self) -> Vec<(usize, Vec<f64>)> {
        let d = self.embedding_dim;
        let mut ids = self.context.clone();
        ids.sort_unstable();
        ids.dedup();
        ids.into_iter()
            .map(|id| {
                let mut row = vec![0.0; d];
                for (p, _) in self.context.iter().enumerate().filter(|&(_, &c)| c == id) {
                    for (m, g) in row.iter_mut().zip(&self.embedding_rows[p * d..(p + 1) * d]) {
                        *m += g;
                    }
                }
                (id, row)
            })
            .collect()
    }

    /// Squared norm of the dense gradient, summed in layout order so it
    /// matches the dense computation bit for bit.
    pub fn norm_squared(&self) -> f64 {
        let rows = self.merged_rows();
        let total = rows
            .iter()
            .flat_map(|(_, row)| row.iter())
            .fold(0.0, |acc, x| acc + x * x);
        self.dense.iter().fold(total, |acc, x| acc + x * x)
    }

    pub fn norm(&self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.dense.iter().all(|v| v.is_finite())
            && self.embedding_rows.iter().all(|v| v.is_finite())
    }

    /// `acc += scale * self`, where `acc` is a full gradient buffer.
    pub fn accumulate_into(&self, acc: &mut [f64], scale: f64) {
        let d = self.embedding_dim;
        for (id, row) in self.merged_rows() {
            for (a, g) in acc[id * d..(id + 1) * d].iter_mut().zip(&row) {
                *a += g * scale;
            }
        }
        let dense_start = acc.len() - self.dense.len();
        for (a, g) in acc[dense_start..].iter_mut().zip(&self.dense) {
            *a += g * scale;
        }
    }

    pub fn to_dense(&self, layout: &Layout) -> GradVector {
        let mut values = vec![0.0; layout.len()];
        self.accumulate_into(&mut values, 1.0);
        GradVector {
            values,
            layout: layout.clone(),
        }
    }
}

/// Loss and exact gradient by backpropagation, in sparse-embedding form.
pub fn example_grad_sparse(
    params: &ParamVector,
    context: &[usize],
    target: usize,
    arch: &Architecture,
) -> Result<ExampleGrad> {
    check_inputs(params, context, arch)?;
    check_target(target, arch)?;
    let spans = layer_spans(arch);
    let p = &params.values;
    let t = trace(p, context, arch, &spans);
    let loss = cross_entropy(&t.logits, target);

    let dense_start = arch.vocab * arch.embedding_dim;
    let mut dense = vec![0.0; p.len() - dense_start];

    // softmax-CE: dz = p - onehot(target)
    let mut delta = softmax(&t.logits);
    delta[target] -= 1.0;

    for (l, span) in spans.iter().enumerate().rev() {
        let x: &[f64] = if l == 0 { &t.input } else { &t.hidden[l - 1] };
        let n = span.fan_out;
        let gw = &mut dense[span.w.start - dense_start..span.w.end - dense_start];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            for (g, &dj) in gw[i * n..(i + 1) * n].iter_mut().zip(&delta) {
                *g = xi * dj;
            }
        }
        dense[span.b.start - dense_start..span.b.end - dense_start].copy_from_slice(&delta);

        let w = &p[span.w.clone()];
        let mut dx = vec![0.0; span.fan_in];
        for (i, v) in dx.iter_mut().enumerate() {
            let row = &w[i * n..(i + 1) * n];
            *v = row.iter().zip(&delta).fold(0.0, |acc, (a, b)| acc + a * b);
        }
        if l > 0 {
            // ReLU: pass gradient where the activation is positive
            for (v, &a) in dx.iter_mut().zip(&t.hidden[l - 1]) {
                if a <= 0.0 {
                    *v = 0.0;
                }
            }
        }
        delta = dx;
    }

    Ok(ExampleGrad {
        loss,
        dense,
        context: context.to_vec(),
        embedding_rows: delta,
        embedding_dim: arch.embedding_dim,
    })
}

/// Exact gradient of [`example_loss`] with respect to every parameter.
pub fn example_grad(params: &ParamVector, context: &[usize], target: usize, arch: &Architecture) -> Result<GradVector> {
    Ok(example_grad_sparse(params, context, target, arch)?.to_dense(&params.layout))
}

/// Central differences of an arbitrary scalar function, one coordinate at a time.
pub fn central_differences<F>(theta: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut work = theta.to_vec();
    let mut out = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let orig = work[i];
        work[i] = orig + h;
        let plus = f(&work);
        work[i] = orig - h;
        let minus = f(&work);
        work[i] = orig;
        out.push((plus - minus) / (2.0 * h));
    }
    out
}

/// Finite-difference estimate of the gradient of [`example_loss`]; uses
/// forward evaluations only.
pub fn finite_diff_grad(
    params: &ParamVector,
    context: &[usize],
    target: usize,
    arch: &Architecture,
    h: f64,
) -> Result<GradVector> {
    if !(h > 0.0) {
        return Err(Error::InvalidConfig("finite-difference step must be positive".into()));
    }
    check_inputs(params, context, arch)?;
    check_target(target, arch)?;
    let spans = layer_spans(arch);
    let values = central_differences(&params.values, h, |theta| {
        cross_entropy(&trace(theta, context, arch, &spans).logits, target)
    });
    Ok(GradVector {
        values,
        layout: params.layout.clone(),
    })
}

/// `|a - b| / max(1e-8, |a| + |b|)`, maximized over coordinates.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

const CHECKPOINT_MAGIC: &str = "dplm-checkpoint=1";

/// Header of `key=value` lines describing the architecture, terminated by
/// `data=`, followed by the parameters as little-endian f64 in layout order.
pub fn checkpoint_bytes(arch: &Architecture, params: &ParamVector) -> Result<Vec<u8>> {
    params.check_arch(arch)?;
    let hidden: Vec<String> = arch.hidden.iter().map(usize::to_string).collect();
    let mut out = Vec::with_capacity(128 + params.len() * 8);
    write!(
        out,
        "{CHECKPOINT_MAGIC}\ncontext={}\nembedding_dim={}\nhidden={}\nvocab={}\nparams={}\ndata=\n",
        arch.context,
        arch.embedding_dim,
        hidden.join(","),
        arch.vocab,
        params.len()
    )
    .expect("write to Vec");
    for v in &params.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(Architecture, ParamVector)> {
    let bad = |d: &str| Error::format("checkpoint", d.to_string());
    let mut pos = 0;
    let mut fields = std::collections::HashMap::new();
    let mut first = true;
    loop {
        let nl = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad("truncated header"))?;
        let line = std::str::from_utf8(&bytes[pos..pos + nl]).map_err(|_| bad("non-UTF-8 header"))?;
        pos += nl + 1;
        if first {
            if line != CHECKPOINT_MAGIC {
                return Err(bad("missing magic line"));
            }
            first = false;
            continue;
        }
        if line == "data=" {
            break;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| bad(line))?;
        fields.insert(k.to_string(), v.to_string());
    }
    let num = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| bad(&format!("missing {k}")))?
            .parse()
            .map_err(|_| bad(&format!("invalid {k}")))
    };
    let hidden = fields
        .get("hidden")
        .ok_or_else(|| bad("missing hidden"))?
        .split(',')
        .map(|s| s.parse::<usize>().map_err(|_| bad("invalid hidden")))
        .collect::<Result<Vec<_>>>()?;
    let arch = Architecture::new(num("context")?, num("embedding_dim")?, hidden, num("vocab")?)?;
    let n = num("params")?;
    if n != arch.param_count() || bytes.len() - pos != n * 8 {
        return Err(Error::ShapeMismatch {
            expected: arch.param_count(),
            actual: (bytes.len() - pos) / 8,
        });
    }
    let values = bytes[pos..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let layout = Layout::for_arch(&arch);
    Ok((arch, ParamVector { values, layout }))
}

pub fn save_checkpoint(path: impl AsRef<Path>, arch: &Architecture, params: &ParamVector) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_bytes(arch, params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Architecture, ParamVector)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}
