//! Causal transformer language model over tree-embedded trace tokens.
//!
//! Row-vector convention throughout: a sequence is an `n x d` matrix and a
//! linear map is `X W`. Each layer is post-norm:
//!
//! ```text
//! U  = LN1(H + MHA(H))
//! H' = LN2(U + GELU(U C + d) A + b)
//! ```
//!
//! Attention heads are concatenated without an output projection. Position 0
//! of every segment is a learned BOS vector, so position `t` predicts token `t`.

mod checkpoint;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embed::{normal_matrix, EmbeddingTables, INIT_STD};
use crate::error::{Error, Result};
use crate::tokenizer::EncodedTrace;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub max_depth: usize,
}

impl ModelConfig {
    /// 128-wide, 8-layer model sized for a workstation CPU.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 128,
            n_heads: 4,
            n_layers: 8,
            d_ff: 512,
            max_seq: 512,
            max_depth: crate::itr::DEFAULT_MAX_DEPTH,
        }
    }

    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_seq: 512,
            max_depth: crate::itr::DEFAULT_MAX_DEPTH,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq", self.max_seq),
            ("max_depth", self.max_depth),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("model {name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// d x d; head `h` owns columns `h*dh .. (h+1)*dh`
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    /// d x d_ff
    pub ff_c: Array2<f64>,
    pub ff_d: Array1<f64>,
    /// d_ff x d
    pub ff_a: Array2<f64>,
    pub ff_b: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
}

impl LayerParams {
    fn init(cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.d_ff);
        LayerParams {
            wq: normal_matrix(d, d, INIT_STD, rng),
            wk: normal_matrix(d, d, INIT_STD, rng),
            wv: normal_matrix(d, d, INIT_STD, rng),
            ln1_gain: Array1::ones(d),
            ln1_bias: Array1::zeros(d),
            ff_c: normal_matrix(d, f, INIT_STD, rng),
            ff_d: Array1::zeros(f),
            ff_a: normal_matrix(f, d, INIT_STD, rng),
            ff_b: Array1::zeros(d),
            ln2_gain: Array1::ones(d),
            ln2_bias: Array1::zeros(d),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub emb: EmbeddingTables,
    /// empty-context input vector
    pub bos: Array1<f64>,
    pub layers: Vec<LayerParams>,
    /// vocab x d output head
    pub out: Array2<f64>,
}

macro_rules! named_tensors {
    ($p:expr, $view:ident, $iter:ident) => {{
        let p = $p;
        let mut v = vec![
            ("emb.token".to_string(), p.emb.token.$view().into_dyn()),
            ("emb.step".to_string(), p.emb.step.$view().into_dyn()),
            ("emb.role".to_string(), p.emb.role.$view().into_dyn()),
            ("bos".to_string(), p.bos.$view().into_dyn()),
        ];
        for (i, l) in p.layers.$iter().enumerate() {
            v.push((format!("layers.{i}.attn.q"), l.wq.$view().into_dyn()));
            v.push((format!("layers.{i}.attn.k"), l.wk.$view().into_dyn()));
            v.push((format!("layers.{i}.attn.v"), l.wv.$view().into_dyn()));
            v.push((format!("layers.{i}.ln1.gain"), l.ln1_gain.$view().into_dyn()));
            v.push((format!("layers.{i}.ln1.bias"), l.ln1_bias.$view().into_dyn()));
            v.push((format!("layers.{i}.ff.c"), l.ff_c.$view().into_dyn()));
            v.push((format!("layers.{i}.ff.d"), l.ff_d.$view().into_dyn()));
            v.push((format!("layers.{i}.ff.a"), l.ff_a.$view().into_dyn()));
            v.push((format!("layers.{i}.ff.b"), l.ff_b.$view().into_dyn()));
            v.push((format!("layers.{i}.ln2.gain"), l.ln2_gain.$view().into_dyn()));
            v.push((format!("layers.{i}.ln2.bias"), l.ln2_bias.$view().into_dyn()));
        }
        v.push(("head.out".to_string(), p.out.$view().into_dyn()));
        v
    }};
}

impl ModelParams {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let emb = EmbeddingTables::init(config.vocab_size, config.d_model, config.max_depth, rng);
        let bos = normal_matrix(1, config.d_model, INIT_STD, rng).row(0).to_owned();
        let layers = (0..config.n_layers).map(|_| LayerParams::init(&config, rng)).collect();
        let out = normal_matrix(config.vocab_size, config.d_model, INIT_STD, rng);
        Ok(ModelParams {
            config,
            emb,
            bos,
            layers,
            out,
        })
    }

    /// Same shapes, every entry zero (gradient accumulator).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, mut t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Every tensor with its stable name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        named_tensors!(self, view, iter)
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, f64>)> {
        named_tensors!(self, view_mut, iter_mut)
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|x| x * factor);
        }
    }
}

/// Boolean `n x n` matrix; `true` means position `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allowed = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                allowed.push(f(i, j));
            }
        }
        AttentionMask { n, allowed }
    }

    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, |i, j| j <= i)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }
}

/// Causal mask that also blocks attention across segment boundaries.
pub fn build_causal_pack_mask(segment_lengths: &[usize], max_seq: usize) -> Result<AttentionMask> {
    let total: usize = segment_lengths.iter().sum();
    if total > max_seq {
        return Err(Error::InvalidArgument(format!(
            "packed length {total} exceeds max_seq {max_seq}"
        )));
    }
    let mut segment = Vec::with_capacity(total);
    for (s, &len) in segment_lengths.iter().enumerate() {
        segment.extend(std::iter::repeat_n(s, len));
    }
    Ok(AttentionMask::from_fn(total, |i, j| j <= i && segment[i] == segment[j]))
}

/// A span of rows attended under its own mask; spans never see each other.
#[derive(Debug, Clone)]
struct Block {
    start: usize,
    mask: AttentionMask,
}

impl Block {
    fn rows(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.mask.len()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn ln_forward(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let mean = x.mean_axis(Axis(1)).expect("non-empty rows");
    let centered = x - &mean.insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).expect("non-empty rows");
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = centered * &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * gain + bias;
    (y, LnCache { xhat, inv_std })
}

fn ln_backward(
    dy: &Array2<f64>,
    c: &LnCache,
    gain: &Array1<f64>,
    d_gain: &mut Array1<f64>,
    d_bias: &mut Array1<f64>,
) -> Array2<f64> {
    *d_gain += &(dy * &c.xhat).sum_axis(Axis(0));
    *d_bias += &dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let m1 = dxhat.mean_axis(Axis(1)).expect("non-empty rows").insert_axis(Axis(1));
    let m2 = (&dxhat * &c.xhat)
        .mean_axis(Axis(1))
        .expect("non-empty rows")
        .insert_axis(Axis(1));
    (dxhat - &m1 - &(&c.xhat * &m2)) * &c.inv_std.view().insert_axis(Axis(1))
}

/// Normalizes `v` to zero mean and unit variance, then applies gain and bias.
pub fn layer_norm(v: ArrayView1<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> Result<Array1<f64>> {
    if v.len() < 2 || gain.len() != v.len() || bias.len() != v.len() {
        return Err(Error::Shape(format!(
            "layer norm over {} values with gain {} and bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    let x = v.to_owned().insert_axis(Axis(0));
    Ok(ln_forward(&x, gain, bias).0.row(0).to_owned())
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Softmax attention of one head over one block. Returns (output, weights).
fn attend(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    mask: &AttentionMask,
    scale: f64,
) -> (Array2<f64>, Array2<f64>) {
    let n = q.nrows();
    let mut p = q.dot(&k.t()) * scale;
    for i in 0..n {
        let mut row = p.row_mut(i);
        let max = (0..n)
            .filter(|&j| mask.allowed(i, j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            row.fill(0.0);
            continue;
        }
        let mut sum = 0.0;
        for j in 0..n {
            if mask.allowed(i, j) {
                let e = (row[j] - max).exp();
                row[j] = e;
                sum += e;
            } else {
                row[j] = 0.0;
            }
        }
        row.mapv_inplace(|x| x / sum);
    }
    let out = p.dot(&v);
    (out, p)
}

struct LayerCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// block-major, then head
    probs: Vec<Array2<f64>>,
    ln1: LnCache,
    u: Array2<f64>,
    f1: Array2<f64>,
    g: Array2<f64>,
    ln2: LnCache,
}

fn multi_head(lp: &LayerParams, x: &Array2<f64>, blocks: &[Block], n_heads: usize) -> MhaOut {
    let d = x.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = x.dot(&lp.wq);
    let k = x.dot(&lp.wk);
    let v = x.dot(&lp.wv);
    let mut out = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(blocks.len() * n_heads);
    for b in blocks {
        for h in 0..n_heads {
            let (r, c) = (b.rows(), h * dh..(h + 1) * dh);
            let (o, p) = attend(
                q.slice(s![r.clone(), c.clone()]),
                k.slice(s![r.clone(), c.clone()]),
                v.slice(s![r.clone(), c.clone()]),
                &b.mask,
                scale,
            );
            out.slice_mut(s![r, c]).assign(&o);
            probs.push(p);
        }
    }
    MhaOut { q, k, v, out, probs }
}

struct MhaOut {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    out: Array2<f64>,
    probs: Vec<Array2<f64>>,
}

/// Multi-head self-attention of `z` under `mask`, heads concatenated.
pub fn self_attention(z: &Array2<f64>, mask: &AttentionMask, layer: &LayerParams, n_heads: usize) -> Result<Array2<f64>> {
    let d = z.ncols();
    if mask.len() != z.nrows() || layer.wq.dim() != (d, d) || n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!(
            "attention over {}x{d} input with {}-mask and {n_heads} heads",
            z.nrows(),
            mask.len()
        )));
    }
    let block = Block {
        start: 0,
        mask: mask.clone(),
    };
    Ok(multi_head(layer, z, std::slice::from_ref(&block), n_heads).out)
}

/// `A gelu(C z + d) + b` in row form.
pub fn feed_forward(z_hat: ArrayView1<f64>, layer: &LayerParams) -> Array1<f64> {
    (z_hat.dot(&layer.ff_c) + &layer.ff_d).mapv(gelu).dot(&layer.ff_a) + &layer.ff_b
}

fn layer_forward(lp: &LayerParams, x: Array2<f64>, blocks: &[Block], n_heads: usize) -> (Array2<f64>, LayerCache) {
    let mha = multi_head(lp, &x, blocks, n_heads);
    let z1 = &x + &mha.out;
    let (u, ln1) = ln_forward(&z1, &lp.ln1_gain, &lp.ln1_bias);
    let f1 = u.dot(&lp.ff_c) + &lp.ff_d;
    let g = f1.mapv(gelu);
    let z2 = &u + &(g.dot(&lp.ff_a) + &lp.ff_b);
    let (y, ln2) = ln_forward(&z2, &lp.ln2_gain, &lp.ln2_bias);
    let cache = LayerCache {
        x,
        q: mha.q,
        k: mha.k,
        v: mha.v,
        probs: mha.probs,
        ln1,
        u,
        f1,
        g,
        ln2,
    };
    (y, cache)
}

fn layer_backward(
    lp: &LayerParams,
    c: &LayerCache,
    dy: &Array2<f64>,
    blocks: &[Block],
    n_heads: usize,
    gl: &mut LayerParams,
) -> Array2<f64> {
    let dz2 = ln_backward(dy, &c.ln2, &lp.ln2_gain, &mut gl.ln2_gain, &mut gl.ln2_bias);

    gl.ff_b += &dz2.sum_axis(Axis(0));
    gl.ff_a += &c.g.t().dot(&dz2);
    let df1 = dz2.dot(&lp.ff_a.t()) * &c.f1.mapv(gelu_grad);
    gl.ff_d += &df1.sum_axis(Axis(0));
    gl.ff_c += &c.u.t().dot(&df1);
    let du = &dz2 + &df1.dot(&lp.ff_c.t());

    let dz1 = ln_backward(&du, &c.ln1, &lp.ln1_gain, &mut gl.ln1_gain, &mut gl.ln1_bias);

    let d = dz1.ncols();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = Array2::zeros(dz1.raw_dim());
    let mut dk = Array2::zeros(dz1.raw_dim());
    let mut dv = Array2::zeros(dz1.raw_dim());
    let mut probs = c.probs.iter();
    for b in blocks {
        for h in 0..n_heads {
            let p = probs.next().expect("one weight matrix per block and head");
            let (r, cols) = (b.rows(), h * dh..(h + 1) * dh);
            let d_o = dz1.slice(s![r.clone(), cols.clone()]);
            let qh = c.q.slice(s![r.clone(), cols.clone()]);
            let kh = c.k.slice(s![r.clone(), cols.clone()]);
            let vh = c.v.slice(s![r.clone(), cols.clone()]);
            let dp = d_o.dot(&vh.t());
            let row_dot = (p * &dp).sum_axis(Axis(1)).insert_axis(Axis(1));
            let ds = p * &(dp - &row_dot) * scale;
            dq.slice_mut(s![r.clone(), cols.clone()]).assign(&ds.dot(&kh));
            dk.slice_mut(s![r.clone(), cols.clone()]).assign(&ds.t().dot(&qh));
            dv.slice_mut(s![r, cols]).assign(&p.t().dot(&d_o));
        }
    }
    gl.wq += &c.x.t().dot(&dq);
    gl.wk += &c.x.t().dot(&dk);
    gl.wv += &c.x.t().dot(&dv);
    dz1 + dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t()) + dv.dot(&lp.wv.t())
}

/// Runs all layers over `x` with a single attention mask.
pub fn encoder_forward(params: &ModelParams, x: Array2<f64>, mask: &AttentionMask) -> Result<Array2<f64>> {
    if x.ncols() != params.config.d_model || mask.len() != x.nrows() {
        return Err(Error::Shape(format!(
            "encoder input {}x{} with {}-mask, d_model {}",
            x.nrows(),
            x.ncols(),
            mask.len(),
            params.config.d_model
        )));
    }
    if x.nrows() == 0 {
        return Ok(x);
    }
    let blocks = [Block {
        start: 0,
        mask: mask.clone(),
    }];
    let mut h = x;
    for lp in &params.layers {
        h = layer_forward(lp, h, &blocks, params.config.n_heads).0;
    }
    Ok(h)
}

fn log_softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    logits
}

/// Softmax over the head scores `A_out z`.
pub fn next_token_distribution(z: ArrayView1<f64>, out: &Array2<f64>) -> Array1<f64> {
    softmax(out.dot(&z).view())
}

pub fn softmax(s: ArrayView1<f64>) -> Array1<f64> {
    let logits = s.to_owned().insert_axis(Axis(0));
    log_softmax_rows(logits).row(0).mapv(f64::exp)
}

/// Forward state of one pack, kept for the backward pass.
pub struct ForwardPass {
    blocks: Vec<Block>,
    caches: Vec<LayerCache>,
    hidden: Array2<f64>,
    /// n x vocab
    log_probs: Array2<f64>,
}

impl ForwardPass {
    pub fn hidden(&self) -> &Array2<f64> {
        &self.hidden
    }

    pub fn log_probs(&self) -> &Array2<f64> {
        &self.log_probs
    }

    /// Per-segment sums of `log p(x_t | x_<t)`.
    pub fn segment_log_likelihoods(&self, segments: &[&EncodedTrace]) -> Vec<f64> {
        self.blocks
            .iter()
            .zip(segments)
            .map(|(b, seg)| {
                seg.ids
                    .iter()
                    .enumerate()
                    .map(|(t, &id)| self.log_probs[[b.start + t, id as usize]])
                    .sum()
            })
            .collect()
    }

    /// Per-position conditional log-probabilities for one segment.
    pub fn token_log_probs(&self, segment: usize, enc: &EncodedTrace) -> Vec<f64> {
        let start = self.blocks[segment].start;
        enc.ids
            .iter()
            .enumerate()
            .map(|(t, &id)| self.log_probs[[start + t, id as usize]])
            .collect()
    }
}

/// Forward pass over traces packed into one sequence, each under its own
/// causal mask.
pub fn forward_pack(params: &ModelParams, segments: &[&EncodedTrace]) -> Result<ForwardPass> {
    let cfg = &params.config;
    let total: usize = segments.iter().map(|s| s.len()).sum();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::InvalidArgument("cannot score an empty token sequence".into()));
    }
    if total > cfg.max_seq {
        return Err(Error::InvalidArgument(format!(
            "pack of {total} tokens exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let mut x = Array2::zeros((total, cfg.d_model));
    let mut blocks = Vec::with_capacity(segments.len());
    let mut start = 0;
    for seg in segments {
        let n = seg.len();
        let emb = params.emb.embed(seg)?;
        x.row_mut(start).assign(&params.bos);
        x.slice_mut(s![start + 1..start + n, ..])
            .assign(&emb.slice(s![..n - 1, ..]));
        blocks.push(Block {
            start,
            mask: AttentionMask::causal(n),
        });
        start += n;
    }
    let mut caches = Vec::with_capacity(params.layers.len());
    let mut h = x;
    for lp in &params.layers {
        let (y, c) = layer_forward(lp, h, &blocks, cfg.n_heads);
        caches.push(c);
        h = y;
    }
    let log_probs = log_softmax_rows(h.dot(&params.out.t()));
    Ok(ForwardPass {
        blocks,
        caches,
        hidden: h,
        log_probs,
    })
}

/// Accumulates `scale * d(-sum log p)/d(param)` for one pack into `grads`.
pub fn backward_pack(
    params: &ModelParams,
    segments: &[&EncodedTrace],
    fwd: &ForwardPass,
    scale: f64,
    grads: &mut ModelParams,
) {
    let mut dlogits = fwd.log_probs.mapv(f64::exp);
    for (b, seg) in fwd.blocks.iter().zip(segments) {
        for (t, &id) in seg.ids.iter().enumerate() {
            dlogits[[b.start + t, id as usize]] -= 1.0;
        }
    }
    dlogits *= scale;
    grads.out += &dlogits.t().dot(&fwd.hidden);
    let mut dh = dlogits.dot(&params.out);
    for l in (0..params.layers.len()).rev() {
        dh = layer_backward(
            &params.layers[l],
            &fwd.caches[l],
            &dh,
            &fwd.blocks,
            params.config.n_heads,
            &mut grads.layers[l],
        );
    }
    for (b, seg) in fwd.blocks.iter().zip(segments) {
        let n = seg.len();
        grads.bos += &dh.row(b.start);
        grads
            .emb
            .accumulate_grad(seg, dh.slice(s![b.start + 1..b.start + n, ..]));
    }
}

/// `sum_t log p(x_t | x_<t)` for one trace scored alone.
pub fn trace_log_likelihood(params: &ModelParams, enc: &EncodedTrace) -> Result<f64> {
    Ok(forward_pack(params, &[enc])?.segment_log_likelihoods(&[enc])[0])
}

#[cfg(test)]
mod tests;
