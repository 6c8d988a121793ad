//! Synthetic paired-feature datasets with controlled correspondence noise.
//!
//! Every pair shares a latent vector `z`; the image side is `A z + noise` and the
//! text side is `B z + noise` for two fixed random projections. Correspondence
//! noise is injected by re-pointing a pair's caption at another pair's text.
//! Ground-truth flags are kept for evaluation only and never reach the trainer.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_MAGIC: [u8; 4] = *b"NPCF";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_pairs: usize,
    pub d_latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub feature_noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pairs: 2000,
            d_latent: 16,
            d_img: 32,
            d_txt: 32,
            feature_noise_std: 0.1,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_pairs < 2 {
            return Err(Error::InvalidConfig(format!(
                "n_pairs must be at least 2, got {}",
                self.n_pairs
            )));
        }
        if self.d_latent == 0 || self.d_img == 0 || self.d_txt == 0 {
            return Err(Error::InvalidConfig("dimensions must be at least 1".into()));
        }
        if !(self.feature_noise_std >= 0.0 && self.feature_noise_std.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "feature_noise_std must be finite and nonnegative, got {}",
                self.feature_noise_std
            )));
        }
        Ok(())
    }
}

/// Paired image/text features. Pair `i` is `(image_feats[i], text_feats[current_text_of[i]])`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub image_feats: Array2<f32>,
    pub text_feats: Array2<f32>,
    pub current_text_of: Vec<u32>,
    /// Ground truth, evaluation only.
    pub is_noisy: Vec<bool>,
    pub noise_ratio: f32,
}

impl FeatureDataset {
    pub fn len(&self) -> usize {
        self.image_feats.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_img(&self) -> usize {
        self.image_feats.ncols()
    }

    pub fn d_txt(&self) -> usize {
        self.text_feats.ncols()
    }

    pub fn noisy_count(&self) -> usize {
        self.is_noisy.iter().filter(|&&b| b).count()
    }

    /// Image features of the given pairs, widened to f64.
    pub fn images(&self, indices: &[usize]) -> Array2<f64> {
        gather(&self.image_feats, indices.iter().copied())
    }

    /// The texts currently paired with the given samples, widened to f64.
    pub fn paired_texts(&self, indices: &[usize]) -> Array2<f64> {
        gather(
            &self.text_feats,
            indices.iter().map(|&i| self.current_text_of[i] as usize),
        )
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Checks structural consistency: shapes, flag agreement, finiteness.
    pub fn check(&self) -> Result<()> {
        let n = self.len();
        if self.text_feats.nrows() != n
            || self.current_text_of.len() != n
            || self.is_noisy.len() != n
        {
            return Err(Error::Malformed("inconsistent row counts".into()));
        }
        for (i, (&t, &noisy)) in self.current_text_of.iter().zip(&self.is_noisy).enumerate() {
            if t as usize >= n {
                return Err(Error::Malformed(format!("text index {t} out of range at {i}")));
            }
            if noisy != (t as usize != i) {
                return Err(Error::Malformed(format!("noise flag disagrees at {i}")));
            }
        }
        if !self.image_feats.iter().chain(self.text_feats.iter()).all(|v| v.is_finite()) {
            return Err(Error::Malformed("non-finite feature".into()));
        }
        Ok(())
    }
}

fn gather(m: &Array2<f32>, rows: impl Iterator<Item = usize>) -> Array2<f64> {
    let rows: Vec<usize> = rows.collect();
    let mut out = Array2::zeros((rows.len(), m.ncols()));
    for (dst, &r) in out.outer_iter_mut().zip(&rows) {
        for (d, &s) in dst.into_iter().zip(m.row(r)) {
            *d = s as f64;
        }
    }
    out
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<FeatureDataset> {
    cfg.validate()?;
    let mut rng = rng::seeded(cfg.seed);
    let scale = 1.0 / (cfg.d_latent as f64).sqrt();
    let projection = |rows: usize, rng: &mut rng::Rng| {
        Array2::from_shape_simple_fn((rows, cfg.d_latent), || {
            scale * rng.sample::<f64, _>(StandardNormal)
        })
    };
    let a = projection(cfg.d_img, &mut rng);
    let b = projection(cfg.d_txt, &mut rng);

    let n = cfg.n_pairs;
    let mut image_feats = Array2::zeros((n, cfg.d_img));
    let mut text_feats = Array2::zeros((n, cfg.d_txt));
    let mut z = vec![0.0f64; cfg.d_latent];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for (out, proj) in [(&mut image_feats, &a), (&mut text_feats, &b)] {
            for (r, dst) in out.row_mut(i).iter_mut().enumerate() {
                let clean: f64 = proj.row(r).iter().zip(&z).map(|(p, zv)| p * zv).sum();
                let eps: f64 = if cfg.feature_noise_std > 0.0 {
                    cfg.feature_noise_std * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                *dst = (clean + eps) as f32;
            }
        }
    }

    Ok(FeatureDataset {
        image_feats,
        text_feats,
        current_text_of: (0..n as u32).collect(),
        is_noisy: vec![false; n],
        noise_ratio: 0.0,
    })
}

/// Number of corrupted pairs for a ratio: `round_half_up(n * ratio)`.
pub fn noisy_count_for(n: usize, ratio: f64) -> usize {
    ((n as f64 * ratio + 0.5).floor() as usize).min(n)
}

/// Replaces the caption of exactly `round_half_up(N * ratio)` pairs with the text
/// of a uniformly chosen different pair.
pub fn inject_noise(ds: &FeatureDataset, ratio: f64, seed: u64) -> Result<FeatureDataset> {
    if ds.noise_ratio > 0.0 {
        return Err(Error::AlreadyNoisy(ds.noise_ratio));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::RatioOutOfRange(ratio));
    }
    let n = ds.len();
    let k = noisy_count_for(n, ratio);
    let mut out = ds.clone();
    if k == 0 {
        return Ok(out);
    }
    if n < 2 {
        return Err(Error::InvalidConfig("noise injection needs at least 2 pairs".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut chosen = index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        let mut j = rng.random_range(0..n - 1);
        if j >= i {
            j += 1;
        }
        out.current_text_of[i] = j as u32;
        out.is_noisy[i] = true;
    }
    out.noise_ratio = ratio as f32;
    Ok(out)
}

/// Seed-deterministic disjoint train/val/test partition of a clean dataset.
pub fn split(
    ds: &FeatureDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset, FeatureDataset)> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| f.is_nan() || f <= 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::FractionSum(fractions));
    }
    if ds.noise_ratio > 0.0 {
        return Err(Error::AlreadyNoisy(ds.noise_ratio));
    }
    let parts = split_indices(ds.len(), fractions, seed)?;
    let [a, b, c] = parts.map(|idx| subset(ds, &idx));
    Ok((a, b, c))
}

/// Index sets behind [`split`], each in ascending order.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let n_train = (n as f64 * fractions[0]).round() as usize;
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n.saturating_sub(n_train));
    let n_test = n - n_train - n_val;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::InvalidConfig(format!(
            "split of {n} pairs leaves an empty part ({n_train}/{n_val}/{n_test})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(seed));
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok([train, val, test])
}

fn subset(ds: &FeatureDataset, idx: &[usize]) -> FeatureDataset {
    FeatureDataset {
        image_feats: ds.image_feats.select(Axis(0), idx),
        text_feats: ds.text_feats.select(Axis(0), idx),
        current_text_of: (0..idx.len() as u32).collect(),
        is_noisy: vec![false; idx.len()],
        noise_ratio: 0.0,
    }
}

pub fn encode_dataset(ds: &FeatureDataset) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(&DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u16(0);
    w.u64(ds.len() as u64);
    w.u32(ds.d_img() as u32);
    w.u32(ds.d_txt() as u32);
    w.f32(ds.noise_ratio);
    w.f32_iter(ds.image_feats.iter().copied());
    w.f32_iter(ds.text_feats.iter().copied());
    for &t in &ds.current_text_of {
        w.u32(t);
    }
    for &b in &ds.is_noisy {
        w.u8(b as u8);
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return Err(Error::VersionMismatch {
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let _reserved = r.u16()?;
    let n = usize::try_from(r.u64()?).map_err(|_| Error::Malformed("N overflows".into()))?;
    let d_img = r.u32()? as usize;
    let d_txt = r.u32()? as usize;
    let noise_ratio = r.f32()?;
    let image_feats = Array2::from_shape_vec((n, d_img), r.f32_vec(n * d_img)?)
        .map_err(|e| Error::Malformed(e.to_string()))?;
    let text_feats = Array2::from_shape_vec((n, d_txt), r.f32_vec(n * d_txt)?)
        .map_err(|e| Error::Malformed(e.to_string()))?;
    let current_text_of = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let is_noisy = (0..n)
        .map(|_| match r.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(Error::Malformed(format!("noise flag byte {v}"))),
        })
        .collect::<Result<Vec<_>>>()?;
    r.finish()?;
    let ds = FeatureDataset {
        image_feats,
        text_feats,
        current_text_of,
        is_noisy,
        noise_ratio,
    };
    ds.check()?;
    Ok(ds)
}

pub fn write_dataset(ds: &FeatureDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<FeatureDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
