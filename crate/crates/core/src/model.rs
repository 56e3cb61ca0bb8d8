//! Desk-scale dual encoder: an affine image tower and a mean-of-embeddings
//! text tower, both L2-normalized, plus a one-hidden-layer relu classifier
//! head over the image embedding and a learnable similarity scale.
//!
//! Forward passes cache enough state for exact analytic gradients, including
//! through the normalization and the scale; `backward_batch` is checked
//! against central finite differences in the tests and the acceptance suite.

use rand::Rng;
use thiserror::Error;

use crate::linalg::{all_finite, dot, norm, Mat};
use crate::loss::LossGrads;
use crate::rng;

/// Initial similarity scale exp(log_temp) = 1 / 0.07.
pub const INIT_SCALE: f64 = 1.0 / 0.07;
/// Clamp bounds for the similarity scale after every optimizer step.
pub const SCALE_MIN: f64 = 1.0;
pub const SCALE_MAX: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cannot encode an empty token list")]
    EmptyText,
    #[error("expected {expected} input features, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("batch is empty")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub d_in: usize,
    pub d: usize,
    pub d_tok: usize,
    pub h: usize,
    pub k: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Dims { d_in: 64, d: 48, d_tok: 48, h: 48, k: 64 }
    }
}

/// All learnable parameters. Weight layout is row-major `input x output`,
/// applied as `out = x . W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: Dims,
    pub vocab_size: usize,
    pub img_w: Mat,
    pub img_b: Vec<f64>,
    pub tok_embed: Mat,
    pub txt_w: Mat,
    pub txt_b: Vec<f64>,
    pub cls_w1: Mat,
    pub cls_b1: Vec<f64>,
    pub cls_w2: Mat,
    pub cls_b2: Vec<f64>,
    pub log_temp: f64,
}

fn uniform_init(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for v in &mut m.data {
        *v = (2.0 * rng.gen::<f64>() - 1.0) * scale;
    }
    m
}

/// Zero-mean uniform weights scaled by 1/sqrt(fan_in), zero biases, and the
/// similarity scale at its 1/0.07 starting point. Deterministic per seed.
pub fn init_params(dims: Dims, vocab_size: usize, seed: u64) -> ModelParams {
    let mut r = rng::stream_for(seed, &[0x1217]);
    let img_w = uniform_init(&mut r, dims.d_in, dims.d, 1.0 / (dims.d_in as f64).sqrt());
    let tok_embed = uniform_init(&mut r, vocab_size, dims.d_tok, 1.0 / (dims.d_tok as f64).sqrt());
    let txt_w = uniform_init(&mut r, dims.d_tok, dims.d, 1.0 / (dims.d_tok as f64).sqrt());
    let cls_w1 = uniform_init(&mut r, dims.d, dims.h, 1.0 / (dims.d as f64).sqrt());
    let cls_w2 = uniform_init(&mut r, dims.h, dims.k, 1.0 / (dims.h as f64).sqrt());
    ModelParams {
        dims,
        vocab_size,
        img_w,
        img_b: vec![0.0; dims.d],
        tok_embed,
        txt_w,
        txt_b: vec![0.0; dims.d],
        cls_w1,
        cls_b1: vec![0.0; dims.h],
        cls_w2,
        cls_b2: vec![0.0; dims.k],
        log_temp: INIT_SCALE.ln(),
    }
}

/// Gradient (or optimizer-moment) storage with the same shapes as the
/// parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub img_w: Mat,
    pub img_b: Vec<f64>,
    pub tok_embed: Mat,
    pub txt_w: Mat,
    pub txt_b: Vec<f64>,
    pub cls_w1: Mat,
    pub cls_b1: Vec<f64>,
    pub cls_w2: Mat,
    pub cls_b2: Vec<f64>,
    pub log_temp: f64,
}

impl ParamGrads {
    pub fn zeros_like(p: &ModelParams) -> Self {
        ParamGrads {
            img_w: Mat::zeros(p.img_w.rows, p.img_w.cols),
            img_b: vec![0.0; p.img_b.len()],
            tok_embed: Mat::zeros(p.tok_embed.rows, p.tok_embed.cols),
            txt_w: Mat::zeros(p.txt_w.rows, p.txt_w.cols),
            txt_b: vec![0.0; p.txt_b.len()],
            cls_w1: Mat::zeros(p.cls_w1.rows, p.cls_w1.cols),
            cls_b1: vec![0.0; p.cls_b1.len()],
            cls_w2: Mat::zeros(p.cls_w2.rows, p.cls_w2.cols),
            cls_b2: vec![0.0; p.cls_b2.len()],
            log_temp: 0.0,
        }
    }

    /// Flat arrays in a fixed order; `true` marks weight matrices that take
    /// decoupled weight decay (biases and the scale do not).
    pub fn arrays(&self) -> Vec<(&Vec<f64>, bool)> {
        vec![
            (&self.img_w.data, true),
            (&self.img_b, false),
            (&self.tok_embed.data, true),
            (&self.txt_w.data, true),
            (&self.txt_b, false),
            (&self.cls_w1.data, true),
            (&self.cls_b1, false),
            (&self.cls_w2.data, true),
            (&self.cls_b2, false),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<(&mut Vec<f64>, bool)> {
        vec![
            (&mut self.img_w.data, true),
            (&mut self.img_b, false),
            (&mut self.tok_embed.data, true),
            (&mut self.txt_w.data, true),
            (&mut self.txt_b, false),
            (&mut self.cls_w1.data, true),
            (&mut self.cls_b1, false),
            (&mut self.cls_w2.data, true),
            (&mut self.cls_b2, false),
        ]
    }
}

impl ModelParams {
    pub fn arrays(&self) -> Vec<(&Vec<f64>, bool)> {
        vec![
            (&self.img_w.data, true),
            (&self.img_b, false),
            (&self.tok_embed.data, true),
            (&self.txt_w.data, true),
            (&self.txt_b, false),
            (&self.cls_w1.data, true),
            (&self.cls_b1, false),
            (&self.cls_w2.data, true),
            (&self.cls_b2, false),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<(&mut Vec<f64>, bool)> {
        vec![
            (&mut self.img_w.data, true),
            (&mut self.img_b, false),
            (&mut self.tok_embed.data, true),
            (&mut self.txt_w.data, true),
            (&mut self.txt_b, false),
            (&mut self.cls_w1.data, true),
            (&mut self.cls_b1, false),
            (&mut self.cls_w2.data, true),
            (&mut self.cls_b2, false),
        ]
    }

    /// Every parameter, scale last, as one flat vector. Used by the
    /// finite-difference checks.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a, _) in self.arrays() {
            out.extend_from_slice(a);
        }
        out.push(self.log_temp);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for (a, _) in self.arrays_mut() {
            let len = a.len();
            a.copy_from_slice(&flat[offset..offset + len]);
            offset += len;
        }
        self.log_temp = flat[offset];
        assert_eq!(offset + 1, flat.len());
    }

    pub fn scale(&self) -> f64 {
        self.log_temp.exp()
    }

    pub fn clamp_scale(&mut self) {
        self.log_temp = self.log_temp.clamp(SCALE_MIN.ln(), SCALE_MAX.ln());
    }
}

impl ParamGrads {
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (a, _) in self.arrays() {
            out.extend_from_slice(a);
        }
        out.push(self.log_temp);
        out
    }
}

fn affine(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), w.rows);
    let mut out = b.to_vec();
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            crate::linalg::axpy(xi, w.row(i), &mut out);
        }
    }
    out
}

/// Cached state of one L2 normalization.
#[derive(Debug, Clone)]
struct NormCache {
    norm: f64,
    unit: Vec<f64>,
    degenerate: bool,
}

fn normalize(pre: Vec<f64>) -> NormCache {
    let n = norm(&pre);
    if n == 0.0 {
        // Documented degenerate rule: the zero vector maps to the first
        // basis vector so training stays total.
        let mut unit = vec![0.0; pre.len()];
        unit[0] = 1.0;
        NormCache { norm: 0.0, unit, degenerate: true }
    } else {
        let unit = pre.iter().map(|v| v / n).collect();
        NormCache { norm: n, unit, degenerate: false }
    }
}

fn norm_backward(cache: &NormCache, g_unit: &[f64]) -> Vec<f64> {
    if cache.degenerate {
        return vec![0.0; g_unit.len()];
    }
    let proj = dot(&cache.unit, g_unit);
    cache
        .unit
        .iter()
        .zip(g_unit)
        .map(|(&u, &g)| (g - u * proj) / cache.norm)
        .collect()
}

fn image_forward(p: &ModelParams, features: &[f64]) -> Result<NormCache, ModelError> {
    if features.len() != p.dims.d_in {
        return Err(ModelError::DimensionMismatch { expected: p.dims.d_in, got: features.len() });
    }
    debug_assert!(all_finite(features));
    Ok(normalize(affine(features, &p.img_w, &p.img_b)))
}

#[derive(Debug, Clone)]
struct TextCache {
    mean: Vec<f64>,
    nc: NormCache,
}

fn text_forward(p: &ModelParams, tokens: &[u32]) -> Result<TextCache, ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyText);
    }
    let mut mean = vec![0.0; p.dims.d_tok];
    for &t in tokens {
        if (t as usize) >= p.vocab_size {
            return Err(ModelError::TokenOutOfRange { id: t, vocab: p.vocab_size });
        }
        crate::linalg::axpy(1.0, p.tok_embed.row(t as usize), &mut mean);
    }
    let inv = 1.0 / tokens.len() as f64;
    for v in &mut mean {
        *v *= inv;
    }
    let nc = normalize(affine(&mean, &p.txt_w, &p.txt_b));
    Ok(TextCache { mean, nc })
}

#[derive(Debug, Clone)]
struct ClsCache {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
}

fn cls_forward(p: &ModelParams, embedding: &[f64]) -> (ClsCache, Vec<f64>) {
    let hidden_pre = affine(embedding, &p.cls_w1, &p.cls_b1);
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let z = affine(&hidden, &p.cls_w2, &p.cls_b2);
    (ClsCache { hidden_pre, hidden }, z)
}

/// Unit-norm image embedding. Zero pre-norm vectors map to the first basis
/// vector.
pub fn encode_image(p: &ModelParams, features: &[f64]) -> Result<Vec<f64>, ModelError> {
    Ok(image_forward(p, features)?.unit)
}

/// Unit-norm text embedding: mean of token embeddings, projected, normalized.
pub fn encode_text(p: &ModelParams, tokens: &[u32]) -> Result<Vec<f64>, ModelError> {
    Ok(text_forward(p, tokens)?.nc.unit)
}

/// Classifier logits over the K tag classes from a (normalized) image
/// embedding.
pub fn classify(p: &ModelParams, embedding: &[f64]) -> Vec<f64> {
    cls_forward(p, embedding).1
}

/// Inputs for one training batch. Negative text lists may be empty for
/// samples that are ineligible for hard-negative supervision.
#[derive(Debug, Clone, Default)]
pub struct BatchInputs {
    pub images: Vec<Vec<f64>>,
    pub texts: Vec<Vec<u32>>,
    pub neg_texts: Vec<Vec<Vec<u32>>>,
}

/// Forward state of a batch: embeddings, classifier logits, the similarity
/// scale, and the caches backward needs.
pub struct BatchForward {
    pub x: Mat,
    pub y: Mat,
    pub yneg: Vec<Vec<Vec<f64>>>,
    pub z: Mat,
    pub scale: f64,
    img: Vec<NormCache>,
    txt: Vec<TextCache>,
    txt_neg: Vec<Vec<TextCache>>,
    cls: Vec<ClsCache>,
}

pub fn forward_batch(p: &ModelParams, inputs: &BatchInputs) -> Result<BatchForward, ModelError> {
    let n = inputs.images.len();
    if n == 0 {
        return Err(ModelError::EmptyBatch);
    }
    assert_eq!(inputs.texts.len(), n);
    assert_eq!(inputs.neg_texts.len(), n);
    let mut x = Mat::zeros(n, p.dims.d);
    let mut y = Mat::zeros(n, p.dims.d);
    let mut z = Mat::zeros(n, p.dims.k);
    let mut img = Vec::with_capacity(n);
    let mut txt = Vec::with_capacity(n);
    let mut txt_neg = Vec::with_capacity(n);
    let mut cls = Vec::with_capacity(n);
    let mut yneg = Vec::with_capacity(n);
    for i in 0..n {
        let ic = image_forward(p, &inputs.images[i])?;
        x.row_mut(i).copy_from_slice(&ic.unit);
        let (cc, logits) = cls_forward(p, &ic.unit);
        z.row_mut(i).copy_from_slice(&logits);
        img.push(ic);
        cls.push(cc);
        let tc = text_forward(p, &inputs.texts[i])?;
        y.row_mut(i).copy_from_slice(&tc.nc.unit);
        txt.push(tc);
        let mut row_caches = Vec::with_capacity(inputs.neg_texts[i].len());
        let mut row_units = Vec::with_capacity(inputs.neg_texts[i].len());
        for tokens in &inputs.neg_texts[i] {
            let tc = text_forward(p, tokens)?;
            row_units.push(tc.nc.unit.clone());
            row_caches.push(tc);
        }
        yneg.push(row_units);
        txt_neg.push(row_caches);
    }
    Ok(BatchForward { x, y, yneg, z, scale: p.scale(), img, txt, txt_neg, cls })
}

fn accumulate_text(
    p: &ModelParams,
    grads: &mut ParamGrads,
    tokens: &[u32],
    cache: &TextCache,
    g_unit: &[f64],
) {
    let g_pre = norm_backward(&cache.nc, g_unit);
    crate::linalg::axpy(1.0, &g_pre, &mut grads.txt_b);
    let mut g_mean = vec![0.0; p.dims.d_tok];
    for r in 0..p.dims.d_tok {
        let m = cache.mean[r];
        if m != 0.0 {
            crate::linalg::axpy(m, &g_pre, grads.txt_w.row_mut(r));
        }
        g_mean[r] = dot(p.txt_w.row(r), &g_pre);
    }
    let inv = 1.0 / tokens.len() as f64;
    for &t in tokens {
        crate::linalg::axpy(inv, &g_mean, grads.tok_embed.row_mut(t as usize));
    }
}

/// Exact parameter gradients given output-side gradients. The similarity
/// scale gradient is chained through exp(log_temp).
pub fn backward_batch(
    p: &ModelParams,
    inputs: &BatchInputs,
    fwd: &BatchForward,
    up: &LossGrads,
) -> ParamGrads {
    let n = inputs.images.len();
    let mut grads = ParamGrads::zeros_like(p);
    for i in 0..n {
        // Classifier head; its input gradient joins the image embedding's.
        let gz = up.gz.row(i);
        let cc = &fwd.cls[i];
        let mut g_hidden = vec![0.0; p.dims.h];
        for r in 0..p.dims.h {
            let h = cc.hidden[r];
            if h != 0.0 {
                crate::linalg::axpy(h, gz, grads.cls_w2.row_mut(r));
            }
            g_hidden[r] = dot(p.cls_w2.row(r), gz);
        }
        crate::linalg::axpy(1.0, gz, &mut grads.cls_b2);
        let g_hidden_pre: Vec<f64> = g_hidden
            .iter()
            .zip(&cc.hidden_pre)
            .map(|(&g, &pre)| if pre > 0.0 { g } else { 0.0 })
            .collect();
        crate::linalg::axpy(1.0, &g_hidden_pre, &mut grads.cls_b1);
        let e = &fwd.img[i].unit;
        let mut g_embed_cls = vec![0.0; p.dims.d];
        for r in 0..p.dims.d {
            if e[r] != 0.0 {
                crate::linalg::axpy(e[r], &g_hidden_pre, grads.cls_w1.row_mut(r));
            }
            g_embed_cls[r] = dot(p.cls_w1.row(r), &g_hidden_pre);
        }

        // Image tower: loss gradient on x plus the classifier path.
        let mut g_unit = up.gx.row(i).to_vec();
        crate::linalg::axpy(1.0, &g_embed_cls, &mut g_unit);
        let g_pre = norm_backward(&fwd.img[i], &g_unit);
        crate::linalg::axpy(1.0, &g_pre, &mut grads.img_b);
        for (r, &f) in inputs.images[i].iter().enumerate() {
            if f != 0.0 {
                crate::linalg::axpy(f, &g_pre, grads.img_w.row_mut(r));
            }
        }

        // Text tower, positive then hard negatives.
        accumulate_text(p, &mut grads, &inputs.texts[i], &fwd.txt[i], up.gy.row(i));
        for (j, cache) in fwd.txt_neg[i].iter().enumerate() {
            accumulate_text(p, &mut grads, &inputs.neg_texts[i][j], cache, &up.gyneg[i][j]);
        }
    }
    grads.log_temp = up.gscale * fwd.scale;
    grads
}

/// Binary parameter serialization used by checkpoints; write-then-read is
/// bit-exact.
pub(crate) mod bin {
    use super::*;

    pub fn put_u32(buf: &mut Vec<u8>, v: u32) {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_u64(buf: &mut Vec<u8>, v: u64) {
        buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn put_f64(buf: &mut Vec<u8>, v: f64) {
        buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    pub fn put_slice(buf: &mut Vec<u8>, v: &[f64]) {
        put_u64(buf, v.len() as u64);
        for &x in v {
            put_f64(buf, x);
        }
    }

    pub struct Reader<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Reader<'a> {
        pub fn new(buf: &'a [u8]) -> Self {
            Reader { buf, pos: 0 }
        }

        fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
            if self.pos + n > self.buf.len() {
                return Err("unexpected end of checkpoint data".into());
            }
            let s = &self.buf[self.pos..self.pos + n];
            self.pos += n;
            Ok(s)
        }

        pub fn u64(&mut self) -> Result<u64, String> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }

        pub fn f64(&mut self) -> Result<f64, String> {
            Ok(f64::from_bits(self.u64()?))
        }

        pub fn slice(&mut self) -> Result<Vec<f64>, String> {
            let n = self.u64()? as usize;
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                out.push(self.f64()?);
            }
            Ok(out)
        }

        pub fn done(&self) -> bool {
            self.pos == self.buf.len()
        }
    }

    pub fn write_params(buf: &mut Vec<u8>, p: &ModelParams) {
        for dim in [p.dims.d_in, p.dims.d, p.dims.d_tok, p.dims.h, p.dims.k, p.vocab_size] {
            put_u64(buf, dim as u64);
        }
        for (a, _) in p.arrays() {
            put_slice(buf, a);
        }
        put_f64(buf, p.log_temp);
    }

    pub fn read_params(r: &mut Reader) -> Result<ModelParams, String> {
        let d_in = r.u64()? as usize;
        let d = r.u64()? as usize;
        let d_tok = r.u64()? as usize;
        let h = r.u64()? as usize;
        let k = r.u64()? as usize;
        let vocab_size = r.u64()? as usize;
        let dims = Dims { d_in, d, d_tok, h, k };
        let mut p = init_params(dims, vocab_size, 0);
        for (a, _) in p.arrays_mut() {
            let read = r.slice()?;
            if read.len() != a.len() {
                return Err(format!("array length {} does not match shape {}", read.len(), a.len()));
            }
            a.copy_from_slice(&read);
        }
        p.log_temp = r.f64()?;
        Ok(p)
    }
}
