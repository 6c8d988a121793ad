//! Cosine similarity, the symmetric contrastive cross-entropy, its re-weighted and
//! memory-entry variants, and their gradients with respect to embeddings.
//!
//! For a square similarity matrix `S` with positives on the diagonal and logit
//! scale `t`, the per-sample loss is
//!
//! ```text
//! l_k = -log softmax_row(t S)[k, k] - log softmax_col(t S)[k, k]
//! ```
//!
//! and every batch objective here is a linear combination `sum_k c_k l_k`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::data::FeatureDataset;
use crate::error::{Error, Result};
use crate::model::{encode_images, encode_texts, DualEncoder};
use crate::rng;

pub const DEFAULT_LOGIT_SCALE: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    pub s: Array2<f64>,
    pub logit_scale: f64,
}

/// Rows scaled to unit length, with the original norms kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Normalized {
    pub unit: Array2<f64>,
    pub norms: Array1<f64>,
}

pub fn normalize_rows(e: &Array2<f64>) -> Result<Normalized> {
    let mut unit = e.clone();
    let mut norms = Array1::zeros(e.nrows());
    for (i, mut row) in unit.outer_iter_mut().enumerate() {
        let n = row.dot(&row).sqrt();
        if !n.is_finite() || n <= 0.0 {
            return Err(Error::ZeroNormRow(i));
        }
        row /= n;
        norms[i] = n;
    }
    Ok(Normalized { unit, norms })
}

/// Gradient through `u = e / |e|`: `de = (g - u (u . g)) / |e|`.
fn normalize_backward(n: &Normalized, g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut row, u), &norm) in out.outer_iter_mut().zip(n.unit.outer_iter()).zip(&n.norms) {
        let proj = u.dot(&row);
        row.scaled_add(-proj, &u);
        row /= norm;
    }
    out
}

pub fn similarity_matrix(e_img: &Array2<f64>, e_txt: &Array2<f64>, logit_scale: f64) -> Result<SimilarityMatrix> {
    if e_img.ncols() != e_txt.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "embedding widths {} and {}",
            e_img.ncols(),
            e_txt.ncols()
        )));
    }
    let a = normalize_rows(e_img)?;
    let b = normalize_rows(e_txt)?;
    Ok(SimilarityMatrix {
        s: a.unit.dot(&b.unit.t()),
        logit_scale,
    })
}

/// Per-sample row (image-to-text) and column (text-to-image) negative log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionalLosses {
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
}

impl DirectionalLosses {
    pub fn symmetric(&self) -> Vec<f64> {
        self.i2t.iter().zip(&self.t2i).map(|(a, b)| a + b).collect()
    }
}

struct Softmaxes {
    losses: DirectionalLosses,
    row: Array2<f64>,
    col: Array2<f64>,
}

fn softmaxes(s: ArrayView2<f64>, t: f64) -> Result<Softmaxes> {
    let (rows, cols) = s.dim();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    let logits = s.mapv(|v| t * v).as_standard_layout().into_owned();
    let mut row = logits.clone();
    let mut col = logits;
    let mut i2t = vec![0.0; rows];
    let mut t2i = vec![0.0; rows];
    for (k, mut r) in row.outer_iter_mut().enumerate() {
        i2t[k] = softmax_in_place(r.as_slice_mut().expect("standard layout"), k);
    }
    for (k, mut c) in col.axis_iter_mut(Axis(1)).enumerate() {
        let mut buf = c.to_vec();
        t2i[k] = softmax_in_place(&mut buf, k);
        c.assign(&Array1::from(buf));
    }
    Ok(Softmaxes {
        losses: DirectionalLosses { i2t, t2i },
        row,
        col,
    })
}

/// Overwrites `v` with its softmax; returns `-log softmax(v)[target]`.
fn softmax_in_place(v: &mut [f64], target: usize) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = v.iter().map(|x| (x - max).exp()).sum();
    let lse = max + sum.ln();
    let nll = (lse - v[target]).max(0.0);
    for x in v.iter_mut() {
        *x = (*x - lse).exp();
    }
    nll
}

pub fn directional_losses(sim: &SimilarityMatrix) -> Result<DirectionalLosses> {
    Ok(softmaxes(sim.s.view(), sim.logit_scale)?.losses)
}

/// Batch-mean symmetric cross-entropy and the per-sample terms.
pub fn symmetric_ce(sim: &SimilarityMatrix) -> Result<(f64, Vec<f64>)> {
    let per_sample = directional_losses(sim)?.symmetric();
    let mean = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
    Ok((mean, per_sample))
}

fn check_weights(w: &[f64], m: usize) -> Result<()> {
    if w.len() != m {
        return Err(Error::ShapeMismatch(format!("{} weights for {m} samples", w.len())));
    }
    for (index, &value) in w.iter().enumerate() {
        if !(value > 0.0 && value <= 1.0) {
            return Err(Error::WeightOutOfRange { index, value });
        }
    }
    Ok(())
}

/// `(1/m) sum_k w_k l_k`.
pub fn weighted_ce(sim: &SimilarityMatrix, w: &[f64]) -> Result<f64> {
    let (_, per_sample) = symmetric_ce(sim)?;
    check_weights(w, per_sample.len())?;
    let m = per_sample.len() as f64;
    Ok(per_sample.iter().zip(w).map(|(l, w)| w * l).sum::<f64>() / m)
}

pub fn total_loss(rce: f64, mb: f64) -> f64 {
    rce + mb
}

/// Value and embedding gradients of `sum_k c_k l_k` for paired embeddings.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    pub losses: DirectionalLosses,
    pub d_img: Array2<f64>,
    pub d_txt: Array2<f64>,
}

pub fn combination_loss_grad(
    e_img: &Array2<f64>,
    e_txt: &Array2<f64>,
    logit_scale: f64,
    coeffs: &[f64],
) -> Result<LossGrad> {
    let a = normalize_rows(e_img)?;
    let b = normalize_rows(e_txt)?;
    let s = a.unit.dot(&b.unit.t());
    let sm = softmaxes(s.view(), logit_scale)?;
    let m = s.nrows();
    if coeffs.len() != m {
        return Err(Error::ShapeMismatch(format!("{} coefficients for {m} samples", coeffs.len())));
    }
    let loss = sm
        .losses
        .i2t
        .iter()
        .zip(&sm.losses.t2i)
        .zip(coeffs)
        .map(|((x, y), c)| c * (x + y))
        .sum();

    // dL/dlogit[i,j] = c_i (P_row[i,j] - d_ij) + c_j (P_col[i,j] - d_ij)
    let mut ds = sm.row;
    for (i, mut r) in ds.outer_iter_mut().enumerate() {
        r[i] -= 1.0;
        r *= coeffs[i];
    }
    for i in 0..m {
        for j in 0..m {
            let delta = if i == j { 1.0 } else { 0.0 };
            ds[[i, j]] += coeffs[j] * (sm.col[[i, j]] - delta);
        }
    }
    ds.mapv_inplace(|v| v * logit_scale);

    let du = ds.dot(&b.unit);
    let dv = ds.t().dot(&a.unit);
    Ok(LossGrad {
        loss,
        losses: sm.losses,
        d_img: normalize_backward(&a, &du),
        d_txt: normalize_backward(&b, &dv),
    })
}

/// Embeddings of memory entries together with their clean-set indices.
#[derive(Debug, Clone)]
pub struct EntryEmbeddings {
    pub images: Array2<f64>,
    pub texts: Array2<f64>,
    pub clean_index: Vec<usize>,
}

/// Distinct entries of a memory batch and how many times each is referenced.
#[derive(Debug, Clone, PartialEq)]
pub struct Dedup {
    /// Position of the first occurrence of every distinct clean index.
    pub first: Vec<usize>,
    /// Distinct slot for every input position.
    pub slot: Vec<usize>,
    pub count: Vec<usize>,
}

pub fn dedup(clean_index: &[usize]) -> Dedup {
    let mut order: Vec<usize> = (0..clean_index.len()).collect();
    order.sort_by_key(|&p| (clean_index[p], p));
    let mut first = Vec::new();
    let mut slot = vec![0; clean_index.len()];
    let mut count = Vec::new();
    let mut prev = None;
    for p in order {
        if prev != Some(clean_index[p]) {
            first.push(p);
            count.push(0);
            prev = Some(clean_index[p]);
        }
        slot[p] = first.len() - 1;
        *count.last_mut().unwrap() += 1;
    }
    Dedup { first, slot, count }
}

/// Memory-entry loss over `m` batch samples with one image-side and one
/// text-side entry each: `(1/m) sum_k [l(img entry k) + l(txt entry k)]`.
///
/// Negatives for every entry are the other distinct clean pairs in the entry
/// set; repeated clean indices collapse to a single candidate.
pub fn memory_bank_loss(img_side: &EntryEmbeddings, txt_side: &EntryEmbeddings, logit_scale: f64) -> Result<f64> {
    let m = img_side.clean_index.len();
    if m == 0 || txt_side.clean_index.len() != m {
        return Err(Error::EmptyEntrySet);
    }
    let idx: Vec<usize> = img_side
        .clean_index
        .iter()
        .chain(&txt_side.clean_index)
        .copied()
        .collect();
    let d = dedup(&idx);
    let pick = |p: usize| {
        if p < m {
            (img_side.images.row(p), img_side.texts.row(p))
        } else {
            (txt_side.images.row(p - m), txt_side.texts.row(p - m))
        }
    };
    let width = img_side.images.ncols();
    let mut ui = Array2::zeros((d.first.len(), width));
    let mut ut = Array2::zeros((d.first.len(), txt_side.texts.ncols()));
    for (u, &p) in d.first.iter().enumerate() {
        let (a, b) = pick(p);
        ui.row_mut(u).assign(&a);
        ut.row_mut(u).assign(&b);
    }
    let sim = similarity_matrix(&ui, &ut, logit_scale)?;
    let per = directional_losses(&sim)?.symmetric();
    Ok(d.slot.iter().map(|&s| per[s]).sum::<f64>() / m as f64)
}

/// Splits `0..n` into seed-shuffled groups of `group` samples; a trailing
/// group of one is folded into its predecessor.
pub fn loss_groups(n: usize, group: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if group < 2 {
        return Err(Error::BatchTooSmall(group));
    }
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut groups: Vec<Vec<usize>> = order.chunks(group).map(<[usize]>::to_vec).collect();
    if groups.len() > 1 && groups.last().is_some_and(|g| g.len() < 2) {
        let tail = groups.pop().unwrap();
        groups.last_mut().unwrap().extend(tail);
    }
    Ok(groups)
}

/// Per-sample symmetric losses, each computed inside its group.
pub fn per_sample_losses_grouped(
    e_img: &Array2<f64>,
    e_txt: &Array2<f64>,
    groups: &[Vec<usize>],
    logit_scale: f64,
) -> Result<Vec<f64>> {
    let per_group: Vec<Result<Vec<f64>>> = groups
        .par_iter()
        .map(|g| {
            let sim = similarity_matrix(&e_img.select(Axis(0), g), &e_txt.select(Axis(0), g), logit_scale)?;
            Ok(symmetric_ce(&sim)?.1)
        })
        .collect();
    let mut out = vec![0.0; e_img.nrows()];
    for (g, losses) in groups.iter().zip(per_group) {
        for (&i, l) in g.iter().zip(losses?) {
            out[i] = l;
        }
    }
    Ok(out)
}

/// Evaluates every training pair's loss in fixed-size groups; no parameters change.
pub fn per_sample_loss_sweep(
    enc: &DualEncoder,
    ds: &FeatureDataset,
    eval_batch: usize,
    logit_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let groups = loss_groups(ds.len(), eval_batch, seed)?;
    let all = ds.all_indices();
    let e_img = encode_images(enc, &ds.images(&all))?;
    let e_txt = encode_texts(enc, &ds.paired_texts(&all))?;
    per_sample_losses_grouped(&e_img, &e_txt, &groups, logit_scale)
}
