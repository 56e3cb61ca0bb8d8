//! Training objectives: bidirectional contrastive losses over scaled
//! in-batch similarities, the gated hard-negative identification loss, the
//! multi-label short-tag classification loss, and their weighted total.
//!
//! Every function returns the loss value together with exact gradients with
//! respect to its embedding/logit inputs and the similarity scale. Softmax
//! uses max subtraction and the binary cross-entropy uses the softplus form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Mat};
use crate::types::MultiHotLabel;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no hard negatives in the batch")]
    NoNegatives,
}

/// Combined gradients with respect to image embeddings, text embeddings,
/// hard-negative text embeddings, classifier logits and the similarity
/// scale.
#[derive(Debug, Clone)]
pub struct LossGrads {
    pub gx: Mat,
    pub gy: Mat,
    pub gyneg: Vec<Vec<Vec<f64>>>,
    pub gz: Mat,
    pub gscale: f64,
}

/// Gradients of one contrastive direction.
#[derive(Debug, Clone)]
pub struct DirGrads {
    pub gx: Mat,
    pub gy: Mat,
    pub gscale: f64,
}

#[derive(Debug, Clone)]
pub struct ClipLoss {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub i2t: DirGrads,
    pub t2i: DirGrads,
}

#[derive(Debug, Clone)]
pub struct HniLoss {
    pub l_hni: f64,
    /// Share of batch samples whose diagonal similarity is their row
    /// maximum.
    pub gate_fraction: f64,
    pub gx: Mat,
    pub gy: Mat,
    pub gyneg: Vec<Vec<Vec<f64>>>,
    pub gscale: f64,
}

#[derive(Debug, Clone)]
pub struct StcLoss {
    pub l_cls: f64,
    pub gz: Mat,
}

/// Loss term weights; the two contrastive halves are fixed at 0.5 each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 0.5, beta: 10.0 }
    }
}

/// Per-component losses and the combined gradient set for one batch.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub l_i2t: f64,
    pub l_t2i: f64,
    pub l_hni: f64,
    pub l_cls: f64,
    pub l_total: f64,
    pub gate_fraction: f64,
    pub grads: LossGrads,
}

fn similarity_matrix(x: &Mat, y: &Mat) -> Mat {
    let n = x.rows;
    let mut s = Mat::zeros(n, n);
    for i in 0..n {
        let xi = x.row(i);
        let row = s.row_mut(i);
        for j in 0..n {
            row[j] = dot(xi, y.row(j));
        }
    }
    s
}

fn check_pair(x: &Mat, y: &Mat) -> Result<(), LossError> {
    if x.rows == 0 {
        return Err(LossError::EmptyBatch);
    }
    if x.rows != y.rows || x.cols != y.cols {
        return Err(LossError::ShapeMismatch(format!(
            "X is {}x{}, Y is {}x{}",
            x.rows, x.cols, y.rows, y.cols
        )));
    }
    Ok(())
}

/// Bidirectional contrastive loss over `scale * X Y^T`: row-wise softmax
/// cross-entropy for image-to-text, column-wise for text-to-image.
pub fn clip_loss(x: &Mat, y: &Mat, scale: f64) -> Result<ClipLoss, LossError> {
    check_pair(x, y)?;
    let n = x.rows;
    let s_mat = similarity_matrix(x, y);
    let inv_n = 1.0 / n as f64;

    // Row-wise (image -> text).
    let mut l_i2t = 0.0;
    let mut i2t = DirGrads { gx: Mat::zeros(n, x.cols), gy: Mat::zeros(n, x.cols), gscale: 0.0 };
    for i in 0..n {
        let row = s_mat.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(scale * b));
        let mut denom = 0.0;
        for &v in row {
            denom += (scale * v - max).exp();
        }
        l_i2t -= inv_n * (scale * row[i] - max - denom.ln());
        for j in 0..n {
            let p = (scale * row[j] - max).exp() / denom;
            let coeff = (p - if i == j { 1.0 } else { 0.0 }) * inv_n;
            crate::linalg::axpy(coeff * scale, y.row(j), i2t.gx.row_mut(i));
            crate::linalg::axpy(coeff * scale, x.row(i), i2t.gy.row_mut(j));
            i2t.gscale += coeff * row[j];
        }
    }

    // Column-wise (text -> image).
    let mut l_t2i = 0.0;
    let mut t2i = DirGrads { gx: Mat::zeros(n, x.cols), gy: Mat::zeros(n, x.cols), gscale: 0.0 };
    for j in 0..n {
        let max = (0..n).fold(f64::NEG_INFINITY, |a, i| a.max(scale * s_mat.row(i)[j]));
        let mut denom = 0.0;
        for i in 0..n {
            denom += (scale * s_mat.row(i)[j] - max).exp();
        }
        l_t2i -= inv_n * (scale * s_mat.row(j)[j] - max - denom.ln());
        for i in 0..n {
            let p = (scale * s_mat.row(i)[j] - max).exp() / denom;
            let coeff = (p - if i == j { 1.0 } else { 0.0 }) * inv_n;
            crate::linalg::axpy(coeff * scale, y.row(j), t2i.gx.row_mut(i));
            crate::linalg::axpy(coeff * scale, x.row(i), t2i.gy.row_mut(j));
            t2i.gscale += coeff * s_mat.row(i)[j];
        }
    }

    Ok(ClipLoss { l_i2t, l_t2i, i2t, t2i })
}

/// Curriculum gate: 1 iff the diagonal similarity is the row maximum, with
/// ties counting as correct.
pub fn gate_vector(s_mat: &Mat) -> Vec<bool> {
    (0..s_mat.rows)
        .map(|i| {
            let row = s_mat.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            row[i] >= max
        })
        .collect()
}

/// Gated hard-negative identification loss. Each sample contrasts its own
/// positive text against its own hard-negative texts; the term enters the
/// batch mean only when the gate is open, and gated-out samples contribute
/// exactly zero loss and gradient. The gate is computed from the same
/// scaled similarities the contrastive loss uses and is treated as a
/// constant under differentiation. The mean divides by the batch size N,
/// which keeps the loss scale stable as the gate opens during training;
/// [`hni_loss_gated_mean`] divides by the gated-in count instead.
pub fn hni_loss(
    x: &Mat,
    y: &Mat,
    yneg: &[Vec<Vec<f64>>],
    scale: f64,
) -> Result<HniLoss, LossError> {
    hni_loss_impl(x, y, yneg, scale, false)
}

/// Alternative normalization: mean over gated-in samples only.
pub fn hni_loss_gated_mean(
    x: &Mat,
    y: &Mat,
    yneg: &[Vec<Vec<f64>>],
    scale: f64,
) -> Result<HniLoss, LossError> {
    hni_loss_impl(x, y, yneg, scale, true)
}

fn hni_loss_impl(
    x: &Mat,
    y: &Mat,
    yneg: &[Vec<Vec<f64>>],
    scale: f64,
    mean_over_gated: bool,
) -> Result<HniLoss, LossError> {
    check_pair(x, y)?;
    let n = x.rows;
    if yneg.len() != n {
        return Err(LossError::ShapeMismatch(format!(
            "negatives cover {} rows for a batch of {n}",
            yneg.len()
        )));
    }
    if yneg.iter().all(|row| row.is_empty()) {
        return Err(LossError::NoNegatives);
    }
    let mut logits_mat = similarity_matrix(x, y);
    for v in &mut logits_mat.data {
        *v *= scale;
    }
    let gate = gate_vector(&logits_mat);
    let gated_in = gate.iter().filter(|&&g| g).count();
    let gate_fraction = gated_in as f64 / n as f64;

    let denom = if mean_over_gated { gated_in.max(1) } else { n };
    let inv_n = 1.0 / denom as f64;
    let mut l_hni = 0.0;
    let mut gx = Mat::zeros(n, x.cols);
    let mut gy = Mat::zeros(n, x.cols);
    let mut gyneg: Vec<Vec<Vec<f64>>> =
        yneg.iter().map(|row| vec![vec![0.0; x.cols]; row.len()]).collect();
    let mut gscale = 0.0;
    for i in 0..n {
        if !gate[i] || yneg[i].is_empty() {
            continue;
        }
        let pos_sim = dot(x.row(i), y.row(i));
        let neg_sims: Vec<f64> = yneg[i].iter().map(|v| dot(x.row(i), v)).collect();
        let mut max = scale * pos_sim;
        for &s in &neg_sims {
            max = max.max(scale * s);
        }
        let e_pos = (scale * pos_sim - max).exp();
        let mut denom = e_pos;
        for &s in &neg_sims {
            denom += (scale * s - max).exp();
        }
        l_hni -= inv_n * (scale * pos_sim - max - denom.ln());

        let p_pos = e_pos / denom;
        let c_pos = (p_pos - 1.0) * inv_n;
        crate::linalg::axpy(c_pos * scale, y.row(i), gx.row_mut(i));
        crate::linalg::axpy(c_pos * scale, x.row(i), gy.row_mut(i));
        gscale += c_pos * pos_sim;
        for (j, &s) in neg_sims.iter().enumerate() {
            let p = (scale * s - max).exp() / denom;
            let c = p * inv_n;
            crate::linalg::axpy(c * scale, &yneg[i][j], gx.row_mut(i));
            crate::linalg::axpy(c * scale, x.row(i), &mut gyneg[i][j]);
            gscale += c * s;
        }
    }
    Ok(HniLoss { l_hni, gate_fraction, gx, gy, gyneg, gscale })
}

fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Multi-label binary cross-entropy over the K tag classes, averaged over
/// the batch. `stc_loss_masked` averages over masked-in rows only; rows
/// outside the mask contribute neither loss nor gradient.
pub fn stc_loss(z: &Mat, labels: &[MultiHotLabel]) -> Result<StcLoss, LossError> {
    stc_loss_masked(z, labels, &vec![true; z.rows])
}

pub fn stc_loss_masked(
    z: &Mat,
    labels: &[MultiHotLabel],
    mask: &[bool],
) -> Result<StcLoss, LossError> {
    if labels.len() != z.rows || mask.len() != z.rows {
        return Err(LossError::ShapeMismatch(format!(
            "{} logit rows, {} labels, {} mask entries",
            z.rows,
            labels.len(),
            mask.len()
        )));
    }
    for (i, l) in labels.iter().enumerate() {
        if mask[i] && l.bits.len() != z.cols {
            return Err(LossError::ShapeMismatch(format!(
                "label {i} has {} bits for {} classes",
                l.bits.len(),
                z.cols
            )));
        }
    }
    let denom = mask.iter().filter(|&&m| m).count();
    let mut gz = Mat::zeros(z.rows, z.cols);
    if denom == 0 {
        return Ok(StcLoss { l_cls: 0.0, gz });
    }
    let inv = 1.0 / denom as f64;
    let mut l_cls = 0.0;
    for i in 0..z.rows {
        if !mask[i] {
            continue;
        }
        let zi = z.row(i);
        let gi = gz.row_mut(i);
        for k in 0..z.cols {
            let target = labels[i].bits[k] as f64;
            l_cls += inv * (target * softplus(-zi[k]) + (1.0 - target) * softplus(zi[k]));
            gi[k] = inv * (sigmoid(zi[k]) - target);
        }
    }
    Ok(StcLoss { l_cls, gz })
}

/// Weighted total: fixed 0.5/0.5 contrastive halves plus `alpha` times the
/// hard-negative term and `beta` times the classification term, with
/// gradients combined with the same weights. The hard-negative and
/// classification terms act only on the image-to-text side by construction
/// (they touch image-anchored similarities and image-derived logits).
pub fn total_loss(
    clip: &ClipLoss,
    hni: Option<&HniLoss>,
    stc: Option<&StcLoss>,
    w: LossWeights,
) -> LossBreakdown {
    let n = clip.i2t.gx.rows;
    let d = clip.i2t.gx.cols;
    let l_hni = hni.map_or(0.0, |h| h.l_hni);
    let l_cls = stc.map_or(0.0, |s| s.l_cls);
    let gate_fraction = hni.map_or(0.0, |h| h.gate_fraction);
    let l_total = 0.5 * clip.l_i2t + 0.5 * clip.l_t2i + w.alpha * l_hni + w.beta * l_cls;

    fn add_scaled(dst: &mut Mat, src: &Mat, w: f64) {
        for (o, v) in dst.data.iter_mut().zip(&src.data) {
            *o += w * v;
        }
    }
    let mut gx = Mat::zeros(n, d);
    let mut gy = Mat::zeros(n, d);
    add_scaled(&mut gx, &clip.i2t.gx, 0.5);
    add_scaled(&mut gx, &clip.t2i.gx, 0.5);
    add_scaled(&mut gy, &clip.i2t.gy, 0.5);
    add_scaled(&mut gy, &clip.t2i.gy, 0.5);
    let mut gscale = 0.5 * clip.i2t.gscale + 0.5 * clip.t2i.gscale;
    let gyneg = match hni {
        Some(h) => {
            add_scaled(&mut gx, &h.gx, w.alpha);
            add_scaled(&mut gy, &h.gy, w.alpha);
            gscale += w.alpha * h.gscale;
            h.gyneg
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|g| g.iter().map(|&v| w.alpha * v).collect())
                        .collect()
                })
                .collect()
        }
        None => vec![Vec::new(); n],
    };
    let gz = match stc {
        Some(s) => {
            let mut gz = s.gz.clone();
            for v in &mut gz.data {
                *v *= w.beta;
            }
            gz
        }
        None => Mat::zeros(n, 0),
    };
    LossBreakdown {
        l_i2t: clip.l_i2t,
        l_t2i: clip.l_t2i,
        l_hni,
        l_cls,
        l_total,
        gate_fraction,
        grads: LossGrads { gx, gy, gyneg, gz, gscale },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_for;
    use proptest::prelude::*;
    use rand::Rng;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn unit_rows(rows: Vec<Vec<f64>>) -> Mat {
        let mut m = Mat::from_rows(rows);
        for i in 0..m.rows {
            let n = crate::linalg::norm(m.row(i));
            for v in m.row_mut(i) {
                *v /= n;
            }
        }
        m
    }

    fn random_unit(n: usize, d: usize, seed: u64) -> Mat {
        let mut r = stream_for(seed, &[0x10]);
        let rows = (0..n)
            .map(|_| (0..d).map(|_| r.gen::<f64>() * 2.0 - 1.0).collect())
            .collect();
        unit_rows(rows)
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let x = unit_rows(vec![vec![1.0, 0.0]]);
        let y = unit_rows(vec![vec![0.5, 0.5]]);
        let out = clip_loss(&x, &y, 10.0).unwrap();
        assert_eq!(out.l_i2t, 0.0);
        assert_eq!(out.l_t2i, 0.0);
        assert!(out.i2t.gx.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn uniform_similarity_gives_ln_n() {
        let x = unit_rows(vec![vec![1.0, 0.0]; 4]);
        let y = unit_rows(vec![vec![0.0, 1.0]; 4]);
        let out = clip_loss(&x, &y, 3.0).unwrap();
        let ln4 = 4f64.ln();
        assert!((out.l_i2t - ln4).abs() < 1e-12);
        assert!((out.l_t2i - ln4).abs() < 1e-12);
    }

    #[test]
    fn identity_similarity_hand_oracle() {
        // S = I, scale 1: each direction gives ln(1 + e^-1).
        let x = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let y = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let out = clip_loss(&x, &y, 1.0).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((out.l_i2t - expect).abs() < 1e-12, "{}", out.l_i2t);
        assert!((out.l_t2i - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_batch_errors() {
        let x = Mat::zeros(0, 2);
        let y = Mat::zeros(0, 2);
        assert!(matches!(clip_loss(&x, &y, 1.0), Err(LossError::EmptyBatch)));
    }

    #[test]
    fn gate_rules() {
        let s = Mat::from_rows(vec![vec![0.9, 0.1], vec![0.2, 0.8]]);
        assert_eq!(gate_vector(&s), vec![true, true]);

        let s = Mat::from_rows(vec![
            vec![0.9, 0.1, 0.0],
            vec![0.2, 0.3, 0.7],
            vec![0.0, 0.1, 0.5],
        ]);
        assert_eq!(gate_vector(&s), vec![true, false, true]);

        // Exact tie on the row max counts as correct.
        let s = Mat::from_rows(vec![vec![0.5, 0.5], vec![0.0, 1.0]]);
        assert_eq!(gate_vector(&s), vec![true, true]);
    }

    #[test]
    fn hni_all_gated_out_is_zero() {
        // Swapped pairs: every diagonal similarity is beaten off-diagonal.
        let x = Mat::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let y = Mat::from_rows(vec![vec![0.0, 1.0], vec![1.0, 0.0]]);
        let yneg = vec![vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]];
        let out = hni_loss(&x, &y, &yneg, 5.0).unwrap();
        assert_eq!(out.l_hni, 0.0);
        assert_eq!(out.gate_fraction, 0.0);
        assert!(out.gx.data.iter().all(|&v| v == 0.0));
        assert!(out.gyneg.iter().flatten().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn hni_even_split_is_ln_two() {
        let x = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let y = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let yneg = vec![vec![vec![1.0, 0.0]]];
        let out = hni_loss(&x, &y, &yneg, 7.0).unwrap();
        assert!((out.l_hni - LN_2).abs() < 1e-12);
        assert_eq!(out.gate_fraction, 1.0);
    }

    #[test]
    fn hni_saturates_with_large_gap() {
        // Positive-negative logit gap of 20.
        let x = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let y = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let yneg = vec![vec![vec![0.5, 0.8660254037844386]]];
        let out = hni_loss(&x, &y, &yneg, 40.0).unwrap();
        assert!(out.l_hni < 1e-8, "{}", out.l_hni);
    }

    #[test]
    fn hni_requires_some_negatives() {
        let x = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let y = Mat::from_rows(vec![vec![1.0, 0.0]]);
        let out = hni_loss(&x, &y, &[Vec::new()], 1.0);
        assert!(matches!(out, Err(LossError::NoNegatives)));
    }

    #[test]
    fn hni_term_non_increasing_in_positive_gap() {
        // Raising the positive similarity with negatives fixed never
        // increases the sample's term.
        let yneg = vec![vec![vec![0.0, 1.0]]];
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let c = -0.95 + 0.1 * step as f64;
            let x = Mat::from_rows(vec![vec![1.0, 0.0]]);
            let y = unit_rows(vec![vec![c, (1.0 - c * c).max(0.0).sqrt()]]);
            let out = hni_loss(&x, &y, &yneg, 4.0).unwrap();
            if out.gate_fraction == 1.0 {
                assert!(out.l_hni <= last + 1e-12);
                last = out.l_hni;
            }
        }
    }

    #[test]
    fn stc_anchors() {
        // All-zero logits: K ln 2 regardless of labels.
        let z = Mat::zeros(3, 8);
        let labels = vec![MultiHotLabel::zeros(8); 3];
        let out = stc_loss(&z, &labels).unwrap();
        assert!((out.l_cls - 8.0 * LN_2).abs() < 1e-9);
        assert!((out.l_cls - 5.545177).abs() < 1e-6);

        // Saturated negatives.
        let mut z = Mat::zeros(2, 4);
        z.data.iter_mut().for_each(|v| *v = -30.0);
        let labels = vec![MultiHotLabel::zeros(4); 2];
        let out = stc_loss(&z, &labels).unwrap();
        assert!(out.l_cls < 1e-8);

        // Hand-computed two-class case: sigma(ln 3) = 0.75.
        let z = Mat::from_rows(vec![vec![3f64.ln(), 0.0]]);
        let labels = vec![MultiHotLabel { bits: vec![1, 0] }];
        let out = stc_loss(&z, &labels).unwrap();
        let expect = -(0.75f64.ln() + 0.5f64.ln());
        assert!((out.l_cls - expect).abs() < 1e-12);
        assert!((out.l_cls - 0.980829).abs() < 1e-6);
        // Gradient: (sigma - target) / N.
        assert!((out.gz.row(0)[0] - (0.75 - 1.0)).abs() < 1e-12);
        assert!((out.gz.row(0)[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn stc_mask_excludes_rows() {
        let z = Mat::from_rows(vec![vec![1.0, -1.0], vec![0.0, 0.0]]);
        let labels =
            vec![MultiHotLabel { bits: vec![1, 0] }, MultiHotLabel { bits: vec![1, 1] }];
        let masked = stc_loss_masked(&z, &labels, &[true, false]).unwrap();
        let solo = stc_loss(
            &Mat::from_rows(vec![vec![1.0, -1.0]]),
            &labels[..1].to_vec(),
        )
        .unwrap();
        assert!((masked.l_cls - solo.l_cls).abs() < 1e-12);
        assert!(masked.gz.row(1).iter().all(|&v| v == 0.0));

        let none = stc_loss_masked(&z, &labels, &[false, false]).unwrap();
        assert_eq!(none.l_cls, 0.0);
    }

    fn make_parts(
        n: usize,
        d: usize,
        k: usize,
        seed: u64,
    ) -> (Mat, Mat, Vec<Vec<Vec<f64>>>, Mat, Vec<MultiHotLabel>) {
        let mut r = stream_for(seed, &[0x77]);
        let x = random_unit(n, d, seed.wrapping_add(1));
        let y = random_unit(n, d, seed.wrapping_add(2));
        let yneg: Vec<Vec<Vec<f64>>> = (0..n)
            .map(|i| {
                let m = random_unit(2, d, seed.wrapping_add(3 + i as u64));
                m.iter_rows().map(|row| row.to_vec()).collect()
            })
            .collect();
        let mut z = Mat::zeros(n, k);
        for v in &mut z.data {
            *v = r.gen::<f64>() * 4.0 - 2.0;
        }
        let labels = (0..n)
            .map(|_| MultiHotLabel {
                bits: (0..k).map(|_| u8::from(r.gen::<f64>() < 0.3)).collect(),
            })
            .collect();
        (x, y, yneg, z, labels)
    }

    #[test]
    fn total_is_weighted_sum_and_grads_linear() {
        let (x, y, yneg, z, labels) = make_parts(4, 3, 5, 21);
        let scale = 9.0;
        let clip = clip_loss(&x, &y, scale).unwrap();
        let hni = hni_loss(&x, &y, &yneg, scale).unwrap();
        let stc = stc_loss(&z, &labels).unwrap();
        let w = LossWeights::default();
        let out = total_loss(&clip, Some(&hni), Some(&stc), w);
        let expect =
            0.5 * clip.l_i2t + 0.5 * clip.l_t2i + w.alpha * hni.l_hni + w.beta * stc.l_cls;
        assert!((out.l_total - expect).abs() < 1e-12);
        // Element-wise linear combination of the per-term gradients.
        for idx in 0..out.grads.gx.data.len() {
            let manual = 0.5 * clip.i2t.gx.data[idx]
                + 0.5 * clip.t2i.gx.data[idx]
                + w.alpha * hni.gx.data[idx];
            assert!((out.grads.gx.data[idx] - manual).abs() < 1e-12);
        }
        for idx in 0..out.grads.gz.data.len() {
            assert!((out.grads.gz.data[idx] - w.beta * stc.gz.data[idx]).abs() < 1e-12);
        }
        let manual_scale =
            0.5 * clip.i2t.gscale + 0.5 * clip.t2i.gscale + w.alpha * hni.gscale;
        assert!((out.grads.gscale - manual_scale).abs() < 1e-12);

        // Fixed numbers: parts (1.0, 1.0, 0.5, 0.1) -> 2.25.
        let total: f64 = 0.5 * 1.0 + 0.5 * 1.0 + 0.5 * 0.5 + 10.0 * 0.1;
        assert!((total - 2.25).abs() < 1e-12);

        // alpha = beta = 0 keeps only the contrastive halves.
        let out0 = total_loss(&clip, Some(&hni), Some(&stc), LossWeights { alpha: 0.0, beta: 0.0 });
        assert!((out0.l_total - 0.5 * (clip.l_i2t + clip.l_t2i)).abs() < 1e-12);
    }

    /// Central finite differences of a scalar loss with respect to a flat
    /// view of its inputs.
    fn fd_check(
        mut eval: impl FnMut(&Mat, &Mat, &[Vec<Vec<f64>>], f64) -> f64,
        x: &Mat,
        y: &Mat,
        yneg: &[Vec<Vec<f64>>],
        scale: f64,
        gx: &Mat,
        gy: &Mat,
        gyneg: &[Vec<Vec<f64>>],
        gscale: f64,
    ) {
        let h = 1e-6;
        let check = |analytic: f64, fd: f64| {
            let denom = analytic.abs().max(fd.abs()).max(1e-6);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "analytic {analytic} vs fd {fd}"
            );
        };
        for idx in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (eval(&xp, y, yneg, scale) - eval(&xm, y, yneg, scale)) / (2.0 * h);
            check(gx.data[idx], fd);
        }
        for idx in 0..y.data.len() {
            let mut yp = y.clone();
            yp.data[idx] += h;
            let mut ym = y.clone();
            ym.data[idx] -= h;
            let fd = (eval(x, &yp, yneg, scale) - eval(x, &ym, yneg, scale)) / (2.0 * h);
            check(gy.data[idx], fd);
        }
        for (i, row) in yneg.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                for t in 0..v.len() {
                    let mut np = yneg.to_vec();
                    np[i][j][t] += h;
                    let mut nm = yneg.to_vec();
                    nm[i][j][t] -= h;
                    let fd = (eval(x, y, &np, scale) - eval(x, y, &nm, scale)) / (2.0 * h);
                    check(gyneg[i][j][t], fd);
                }
            }
        }
        let fd = (eval(x, y, yneg, scale + h) - eval(x, y, yneg, scale - h)) / (2.0 * h);
        check(gscale, fd);
    }

    #[test]
    fn clip_gradients_match_finite_differences() {
        let (x, y, yneg, _, _) = make_parts(4, 3, 2, 5);
        let scale = 6.0;
        let out = clip_loss(&x, &y, scale).unwrap();
        let mut gx = out.i2t.gx.clone();
        let mut gy = out.i2t.gy.clone();
        for (a, b) in gx.data.iter_mut().zip(&out.t2i.gx.data) {
            *a += b;
        }
        for (a, b) in gy.data.iter_mut().zip(&out.t2i.gy.data) {
            *a += b;
        }
        fd_check(
            |x, y, _, s| {
                let o = clip_loss(x, y, s).unwrap();
                o.l_i2t + o.l_t2i
            },
            &x,
            &y,
            &yneg,
            scale,
            &gx,
            &gy,
            &yneg.iter().map(|r| r.iter().map(|v| vec![0.0; v.len()]).collect()).collect::<Vec<_>>(),
            out.i2t.gscale + out.t2i.gscale,
        );
    }

    #[test]
    fn hni_gradients_match_finite_differences() {
        let (x, y, yneg, _, _) = make_parts(4, 3, 2, 6);
        let scale = 4.0;
        let out = hni_loss(&x, &y, &yneg, scale).unwrap();
        // A well-separated instance so that no perturbation flips a gate.
        fd_check(
            |x, y, n, s| hni_loss(x, y, n, s).unwrap().l_hni,
            &x,
            &y,
            &yneg,
            scale,
            &out.gx,
            &out.gy,
            &out.gyneg,
            out.gscale,
        );
    }

    #[test]
    fn stc_gradients_match_finite_differences() {
        let (_, _, _, z, labels) = make_parts(3, 2, 4, 8);
        let out = stc_loss(&z, &labels).unwrap();
        let h = 1e-6;
        for idx in 0..z.data.len() {
            let mut zp = z.clone();
            zp.data[idx] += h;
            let mut zm = z.clone();
            zm.data[idx] -= h;
            let fd = (stc_loss(&zp, &labels).unwrap().l_cls
                - stc_loss(&zm, &labels).unwrap().l_cls)
                / (2.0 * h);
            let a = out.gz.data[idx];
            assert!((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6) < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn permutation_leaves_losses_unchanged(seed in 0u64..500, n in 2usize..6) {
            let (x, y, yneg, z, labels) = make_parts(n, 3, 4, seed);
            let scale = 5.0;
            let mut perm: Vec<usize> = (0..n).collect();
            // Deterministic rotation as the permutation.
            perm.rotate_left(1 + (seed as usize) % n.max(2) % n);
            let xp = Mat::from_rows(perm.iter().map(|&i| x.row(i).to_vec()).collect());
            let yp = Mat::from_rows(perm.iter().map(|&i| y.row(i).to_vec()).collect());
            let ynegp: Vec<Vec<Vec<f64>>> = perm.iter().map(|&i| yneg[i].clone()).collect();
            let zp = Mat::from_rows(perm.iter().map(|&i| z.row(i).to_vec()).collect());
            let labelsp: Vec<MultiHotLabel> = perm.iter().map(|&i| labels[i].clone()).collect();

            let a = clip_loss(&x, &y, scale).unwrap();
            let b = clip_loss(&xp, &yp, scale).unwrap();
            prop_assert!((a.l_i2t - b.l_i2t).abs() < 1e-10);
            prop_assert!((a.l_t2i - b.l_t2i).abs() < 1e-10);

            let a = hni_loss(&x, &y, &yneg, scale).unwrap();
            let b = hni_loss(&xp, &yp, &ynegp, scale).unwrap();
            prop_assert!((a.l_hni - b.l_hni).abs() < 1e-10);
            prop_assert!((a.gate_fraction - b.gate_fraction).abs() < 1e-12);

            let a = stc_loss(&z, &labels).unwrap();
            let b = stc_loss(&zp, &labelsp).unwrap();
            prop_assert!((a.l_cls - b.l_cls).abs() < 1e-10);
        }

        #[test]
        fn gate_monotone_in_diagonal(seed in 0u64..500, boost in 0.0f64..2.0) {
            let mut r = stream_for(seed, &[0x9]);
            let n = 4;
            let mut s = Mat::zeros(n, n);
            for v in &mut s.data {
                *v = r.gen::<f64>() * 2.0 - 1.0;
            }
            let before = gate_vector(&s);
            for i in 0..n {
                let v = s.row(i)[i];
                s.row_mut(i)[i] = v + boost;
            }
            let after = gate_vector(&s);
            for i in 0..n {
                prop_assert!(!(before[i] && !after[i]), "gate flipped 1 -> 0");
            }
        }
    }
}
