use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, TokenId};
use crate::tensor::{ParamSet, Role, Tensor};

/// Floating-point element type of the compute kernels. `f32` is the training
/// path, `f64` the shadow mode used for gradient checks.
pub(crate) trait Scalar:
    Copy
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + Send
    + Sync
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn tanh(self) -> Self;
    fn bits(self) -> u64;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
    fn bits(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn bits(self) -> u64 {
        self.to_bits()
    }
}

/// Rows of `context_len + 1` tokens: the context followed by the target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    width: usize,
    tokens: Vec<TokenId>,
}

impl Batch {
    pub fn new(rows: &[Vec<TokenId>]) -> Result<Self> {
        let width = rows.first().map(Vec::len).ok_or(Error::Empty("batch"))?;
        let mut tokens = Vec::with_capacity(width * rows.len());
        for row in rows {
            if row.len() != width {
                return Err(Error::Input("batch rows have different lengths".into()));
            }
            tokens.extend_from_slice(row);
        }
        Ok(Self { width, tokens })
    }

    /// Windows of `width` tokens starting at each offset in `starts`.
    pub fn from_windows(seq: &[TokenId], width: usize, starts: &[usize]) -> Result<Self> {
        if starts.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mut tokens = Vec::with_capacity(width * starts.len());
        for &s in starts {
            let w = seq
                .get(s..s + width)
                .ok_or_else(|| Error::Input(format!("window at {s} exceeds sequence")))?;
            tokens.extend_from_slice(w);
        }
        Ok(Self { width, tokens })
    }

    pub fn rows(&self) -> usize {
        self.tokens.len() / self.width
    }

    pub fn width(&self) -> usize {
        self.width
    }

    fn row(&self, b: usize) -> &[TokenId] {
        &self.tokens[b * self.width..(b + 1) * self.width]
    }
}

/// Parameters in layout order, widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct WideParams(pub Vec<Vec<f64>>);

impl WideParams {
    pub fn from_params(p: &ParamSet) -> Self {
        WideParams(p.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect())
    }
}

pub(crate) struct Cache<T> {
    fingerprint: u64,
    batch: Batch,
    inputs: Vec<T>,      // [B, n*d]
    hidden: Vec<Vec<T>>, // H+1 x [B, d]
    acts: Vec<Vec<T>>,   // H x [B, hid]
    probs: Vec<T>,       // [B, V]
}

pub struct ForwardCache(Cache<f32>);
pub struct WideCache(Cache<f64>);

fn fingerprint<T: Scalar>(params: &[&[T]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in params {
        h = (h ^ p.len() as u64).wrapping_mul(0x0100_0000_01b3);
        for v in p.iter() {
            h = (h ^ v.bits()).wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

// y[b, :] += x[b, :] @ w   (w is [inp, out], row-major)
fn matmul_acc<T: Scalar>(x: &[T], w: &[T], y: &mut [T], rows: usize, inp: usize, out: usize) {
    for b in 0..rows {
        let xr = &x[b * inp..(b + 1) * inp];
        let yr = &mut y[b * out..(b + 1) * out];
        for (i, &xi) in xr.iter().enumerate() {
            let wr = &w[i * out..(i + 1) * out];
            for (yj, &wij) in yr.iter_mut().zip(wr) {
                *yj += xi * wij;
            }
        }
    }
}

// dx[b, :] += dy[b, :] @ w^T
fn matmul_t_acc<T: Scalar>(dy: &[T], w: &[T], dx: &mut [T], rows: usize, inp: usize, out: usize) {
    for b in 0..rows {
        let dyr = &dy[b * out..(b + 1) * out];
        let dxr = &mut dx[b * inp..(b + 1) * inp];
        for (i, dxi) in dxr.iter_mut().enumerate() {
            let wr = &w[i * out..(i + 1) * out];
            let mut acc = T::ZERO;
            for (&g, &wij) in dyr.iter().zip(wr) {
                acc += g * wij;
            }
            *dxi += acc;
        }
    }
}

// dw += x^T @ dy ; db += sum_b dy
fn outer_acc<T: Scalar>(
    x: &[T],
    dy: &[T],
    dw: &mut [T],
    db: &mut [T],
    rows: usize,
    inp: usize,
    out: usize,
) {
    for b in 0..rows {
        let xr = &x[b * inp..(b + 1) * inp];
        let dyr = &dy[b * out..(b + 1) * out];
        for (i, &xi) in xr.iter().enumerate() {
            let dwr = &mut dw[i * out..(i + 1) * out];
            for (d, &g) in dwr.iter_mut().zip(dyr) {
                *d += xi * g;
            }
        }
        for (d, &g) in db.iter_mut().zip(dyr) {
            *d += g;
        }
    }
}

fn add_bias<T: Scalar>(y: &mut [T], bias: &[T]) {
    for row in y.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

struct View<'a, T> {
    embed: &'a [T],
    input_w: &'a [T],
    input_b: &'a [T],
    blocks: Vec<[&'a [T]; 4]>,
    head_w: &'a [T],
    head_b: &'a [T],
}

fn view<'a, T>(cfg: &ModelConfig, p: &'a [&'a [T]]) -> Result<View<'a, T>> {
    let layout = cfg.layout();
    if p.len() != layout.len() {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} tensors, got {}",
            layout.len(),
            p.len()
        )));
    }
    for ((name, shape), t) in layout.iter().zip(p) {
        if t.len() != shape.iter().product::<usize>() {
            return Err(Error::ShapeMismatch(format!("`{name}` has {} values", t.len())));
        }
    }
    let h = cfg.num_blocks;
    Ok(View {
        embed: p[0],
        input_w: p[1],
        input_b: p[2],
        blocks: (0..h).map(|b| [p[3 + 4 * b], p[4 + 4 * b], p[5 + 4 * b], p[6 + 4 * b]]).collect(),
        head_w: p[3 + 4 * h],
        head_b: p[4 + 4 * h],
    })
}

pub(crate) fn forward_generic<T: Scalar>(
    cfg: &ModelConfig,
    p: &[&[T]],
    batch: &Batch,
) -> Result<(f64, Cache<T>)> {
    let w = view(cfg, p)?;
    let (v, d, n, hid) = (cfg.vocab_size, cfg.embed_dim, cfg.context_len, cfg.hidden_dim());
    if batch.width() != n + 1 {
        return Err(Error::Input(format!(
            "batch rows have {} tokens, model needs {}",
            batch.width(),
            n + 1
        )));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t as usize >= v) {
        return Err(Error::Input(format!("token id {bad} out of range for vocab {v}")));
    }
    let rows = batch.rows();

    let mut inputs = vec![T::ZERO; rows * n * d];
    for b in 0..rows {
        for (j, &tok) in batch.row(b)[..n].iter().enumerate() {
            let src = &w.embed[tok as usize * d..(tok as usize + 1) * d];
            inputs[b * n * d + j * d..b * n * d + (j + 1) * d].copy_from_slice(src);
        }
    }

    let mut h0 = vec![T::ZERO; rows * d];
    matmul_acc(&inputs, w.input_w, &mut h0, rows, n * d, d);
    add_bias(&mut h0, w.input_b);

    let mut hidden = vec![h0];
    let mut acts = Vec::with_capacity(cfg.num_blocks);
    for blk in &w.blocks {
        let h = hidden.last().expect("stream");
        let mut a = vec![T::ZERO; rows * hid];
        matmul_acc(h, blk[0], &mut a, rows, d, hid);
        add_bias(&mut a, blk[1]);
        for x in a.iter_mut() {
            *x = x.tanh();
        }
        let mut next = h.clone();
        matmul_acc(&a, blk[2], &mut next, rows, hid, d);
        add_bias(&mut next, blk[3]);
        acts.push(a);
        hidden.push(next);
    }

    let mut logits = vec![T::ZERO; rows * v];
    matmul_acc(hidden.last().expect("stream"), w.head_w, &mut logits, rows, d, v);
    add_bias(&mut logits, w.head_b);

    let mut total = 0.0f64;
    let mut probs = vec![T::ZERO; rows * v];
    for b in 0..rows {
        let lr = &logits[b * v..(b + 1) * v];
        let max = lr.iter().map(|x| x.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for x in lr {
            sum += (x.to_f64() - max).exp();
        }
        let lse = max + sum.ln();
        let target = batch.row(b)[n] as usize;
        total += lse - lr[target].to_f64();
        for (pj, x) in probs[b * v..(b + 1) * v].iter_mut().zip(lr) {
            *pj = T::from_f64((x.to_f64() - lse).exp());
        }
    }
    let loss = total / rows as f64;

    Ok((
        loss,
        Cache { fingerprint: fingerprint(p), batch: batch.clone(), inputs, hidden, acts, probs },
    ))
}

pub(crate) fn backward_generic<T: Scalar>(
    cfg: &ModelConfig,
    p: &[&[T]],
    cache: &Cache<T>,
) -> Result<Vec<Vec<T>>> {
    if fingerprint(p) != cache.fingerprint {
        return Err(Error::StaleCache);
    }
    let w = view(cfg, p)?;
    let (v, d, n, hid) = (cfg.vocab_size, cfg.embed_dim, cfg.context_len, cfg.hidden_dim());
    let rows = cache.batch.rows();
    let inv_rows = T::from_f64(1.0 / rows as f64);

    let mut grads: Vec<Vec<T>> = p.iter().map(|t| vec![T::ZERO; t.len()]).collect();
    let h = cfg.num_blocks;

    let mut dlogits = cache.probs.clone();
    for b in 0..rows {
        let target = cache.batch.row(b)[n] as usize;
        dlogits[b * v + target] = dlogits[b * v + target] - T::ONE;
    }
    for g in dlogits.iter_mut() {
        *g = *g * inv_rows;
    }

    let mut dh = vec![T::ZERO; rows * d];
    {
        let (head_w, rest) = grads[3 + 4 * h..].split_at_mut(1);
        outer_acc(&cache.hidden[h], &dlogits, &mut head_w[0], &mut rest[0], rows, d, v);
    }
    matmul_t_acc(&dlogits, w.head_w, &mut dh, rows, d, v);

    for blk in (0..h).rev() {
        let a = &cache.acts[blk];
        let base = 3 + 4 * blk;
        // fc2
        {
            let (gw, gb) = grads[base + 2..base + 4].split_at_mut(1);
            outer_acc(a, &dh, &mut gw[0], &mut gb[0], rows, hid, d);
        }
        let mut da = vec![T::ZERO; rows * hid];
        matmul_t_acc(&dh, w.blocks[blk][2], &mut da, rows, hid, d);
        for (g, &act) in da.iter_mut().zip(a) {
            *g = *g * (T::ONE - act * act);
        }
        // fc1; the residual path passes dh through unchanged
        {
            let (gw, gb) = grads[base..base + 2].split_at_mut(1);
            outer_acc(&cache.hidden[blk], &da, &mut gw[0], &mut gb[0], rows, d, hid);
        }
        matmul_t_acc(&da, w.blocks[blk][0], &mut dh, rows, d, hid);
    }

    {
        let (gw, gb) = grads[1..3].split_at_mut(1);
        outer_acc(&cache.inputs, &dh, &mut gw[0], &mut gb[0], rows, n * d, d);
    }
    let mut dx = vec![T::ZERO; rows * n * d];
    matmul_t_acc(&dh, w.input_w, &mut dx, rows, n * d, d);
    let de = &mut grads[0];
    for b in 0..rows {
        for (j, &tok) in cache.batch.row(b)[..n].iter().enumerate() {
            let src = &dx[b * n * d + j * d..b * n * d + (j + 1) * d];
            for (g, &s) in de[tok as usize * d..(tok as usize + 1) * d].iter_mut().zip(src) {
                *g += s;
            }
        }
    }
    Ok(grads)
}

fn slices(params: &ParamSet) -> Vec<&[f32]> {
    params.iter().map(Tensor::data).collect()
}

/// Mean next-token cross-entropy (nats) over the batch rows.
pub fn forward_loss(
    cfg: &ModelConfig,
    params: &ParamSet,
    batch: &Batch,
) -> Result<(f64, ForwardCache)> {
    let (loss, cache) = forward_generic(cfg, &slices(params), batch)?;
    Ok((loss, ForwardCache(cache)))
}

/// Gradient of the mean loss, congruent to `params`.
pub fn backward(cfg: &ModelConfig, params: &ParamSet, cache: &ForwardCache) -> Result<ParamSet> {
    let grads = backward_generic(cfg, &slices(params), &cache.0)?;
    let tensors = params
        .iter()
        .zip(grads)
        .map(|(t, g)| Tensor::new(t.name(), t.shape().to_vec(), g))
        .collect::<Result<Vec<_>>>()?;
    ParamSet::from_tensors(Role::PseudoGradient, tensors)
}

pub fn forward_loss_wide(
    cfg: &ModelConfig,
    params: &WideParams,
    batch: &Batch,
) -> Result<(f64, WideCache)> {
    let p: Vec<&[f64]> = params.0.iter().map(Vec::as_slice).collect();
    let (loss, cache) = forward_generic(cfg, &p, batch)?;
    Ok((loss, WideCache(cache)))
}

pub fn backward_wide(
    cfg: &ModelConfig,
    params: &WideParams,
    cache: &WideCache,
) -> Result<Vec<Vec<f64>>> {
    let p: Vec<&[f64]> = params.0.iter().map(Vec::as_slice).collect();
    backward_generic(cfg, &p, &cache.0)
}
