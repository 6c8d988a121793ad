//! Retrieval recall, RSUM, R@1 stability variance and noise-detection diagnostics.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Percentage of queries whose ground-truth match (the diagonal) ranks within
/// the top `k`. Equal scores rank the smaller candidate index first.
pub fn recall_at_k(s: &Array2<f64>, k: usize, direction: Direction) -> Result<f64> {
    let (rows, cols) = s.dim();
    if rows != cols {
        return Err(Error::NonSquare { rows, cols });
    }
    if k == 0 || k > cols {
        return Err(Error::KExceedsCandidates { k, candidates: cols });
    }
    if rows == 0 {
        return Ok(0.0);
    }
    let score = |q: usize, c: usize| match direction {
        Direction::ImageToText => s[[q, c]],
        Direction::TextToImage => s[[c, q]],
    };
    let hits = (0..rows)
        .filter(|&q| {
            let target = score(q, q);
            let rank = (0..cols)
                .filter(|&c| {
                    let v = score(q, c);
                    v > target || (v == target && c < q)
                })
                .count();
            rank < k
        })
        .count();
    Ok(100.0 * hits as f64 / rows as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r1_i2t: f64,
    pub r5_i2t: f64,
    pub r10_i2t: f64,
    pub r1_t2i: f64,
    pub r5_t2i: f64,
    pub r10_t2i: f64,
    pub rsum: f64,
}

impl EvalReport {
    pub fn from_recalls(r: [f64; 6]) -> Self {
        let mut report = Self {
            r1_i2t: r[0],
            r5_i2t: r[1],
            r10_i2t: r[2],
            r1_t2i: r[3],
            r5_t2i: r[4],
            r10_t2i: r[5],
            rsum: 0.0,
        };
        report.rsum = rsum(&report);
        report
    }

    pub fn recalls(&self) -> [f64; 6] {
        [
            self.r1_i2t,
            self.r5_i2t,
            self.r10_i2t,
            self.r1_t2i,
            self.r5_t2i,
            self.r10_t2i,
        ]
    }

    /// Mean of the two R@1 directions.
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.r1_i2t + self.r1_t2i)
    }
}

pub fn rsum(report: &EvalReport) -> f64 {
    report.recalls().iter().sum()
}

/// R@{1,5,10} both ways. With fewer than 10 candidates the larger cut-offs
/// are capped at the candidate count.
pub fn evaluate(s: &Array2<f64>) -> Result<EvalReport> {
    let n = s.ncols();
    let mut r = [0.0; 6];
    for (d, dir) in [Direction::ImageToText, Direction::TextToImage].into_iter().enumerate() {
        for (j, k) in [1usize, 5, 10].into_iter().enumerate() {
            r[3 * d + j] = recall_at_k(s, k.min(n), dir)?;
        }
    }
    Ok(EvalReport::from_recalls(r))
}

/// Population variance (divides by n).
pub fn r1_variance(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::TooFewValues(values.len()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok(values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub noise_ratios: Vec<f64>,
    pub r1_values: Vec<f64>,
    pub variance: f64,
}

pub fn stability(noise_ratios: &[f64], reports: &[EvalReport]) -> Result<StabilityReport> {
    let r1_values: Vec<f64> = reports.iter().map(EvalReport::mean_r1).collect();
    Ok(StabilityReport {
        noise_ratios: noise_ratios.to_vec(),
        variance: r1_variance(&r1_values)?,
        r1_values,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub purity: f64,
    pub clean_recall: f64,
    pub selected: usize,
}

/// Purity and recall of the set `{i : p_i >= tau}` against ground-truth flags.
pub fn detection_report(p: &[f64], is_noisy: &[bool], tau: f64) -> Result<Detection> {
    if p.len() != is_noisy.len() {
        return Err(Error::ShapeMismatch(format!("{} posteriors vs {} flags", p.len(), is_noisy.len())));
    }
    let mut selected = 0usize;
    let mut selected_clean = 0usize;
    for (&pi, &noisy) in p.iter().zip(is_noisy) {
        if pi >= tau {
            selected += 1;
            selected_clean += usize::from(!noisy);
        }
    }
    if selected == 0 {
        return Err(Error::EmptySelection);
    }
    let clean_total = is_noisy.iter().filter(|&&b| !b).count();
    Ok(Detection {
        purity: selected_clean as f64 / selected as f64,
        clean_recall: if clean_total == 0 {
            0.0
        } else {
            selected_clean as f64 / clean_total as f64
        },
        selected,
    })
}

/// Class-conditional means `(clean, noisy)` of per-sample weights.
pub fn weight_separation(w: &[f64], is_noisy: &[bool]) -> Result<(f64, f64)> {
    if w.len() != is_noisy.len() {
        return Err(Error::ShapeMismatch(format!("{} weights vs {} flags", w.len(), is_noisy.len())));
    }
    let (mut sc, mut nc, mut sn, mut nn) = (0.0, 0usize, 0.0, 0usize);
    for (&wi, &noisy) in w.iter().zip(is_noisy) {
        if noisy {
            sn += wi;
            nn += 1;
        } else {
            sc += wi;
            nc += 1;
        }
    }
    if nc == 0 {
        return Err(Error::MissingClass("clean"));
    }
    if nn == 0 {
        return Err(Error::MissingClass("noisy"));
    }
    Ok((sc / nc as f64, sn / nn as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn identity_and_reversed() {
        let s = Array2::<f64>::eye(10);
        for k in [1, 5, 10] {
            assert_eq!(recall_at_k(&s, k, Direction::ImageToText).unwrap(), 100.0);
            assert_eq!(recall_at_k(&s, k, Direction::TextToImage).unwrap(), 100.0);
        }
        let rev = Array2::from_shape_fn((10, 10), |(i, j)| if i == j { -1.0 } else { (i + j) as f64 });
        assert_eq!(recall_at_k(&rev, 1, Direction::ImageToText).unwrap(), 0.0);
        assert!(matches!(
            recall_at_k(&s, 11, Direction::ImageToText),
            Err(Error::KExceedsCandidates { .. })
        ));
    }

    #[test]
    fn known_rank_positions() {
        // true match of query q sits at rank q+1
        let s = array![
            [0.9, 0.1, 0.2, 0.0],
            [0.9, 0.8, 0.1, 0.0],
            [0.9, 0.8, 0.7, 0.1],
            [0.9, 0.8, 0.7, 0.6]
        ];
        assert_eq!(recall_at_k(&s, 1, Direction::ImageToText).unwrap(), 25.0);
        assert_eq!(recall_at_k(&s, 2, Direction::ImageToText).unwrap(), 50.0);
        assert_eq!(recall_at_k(&s, 4, Direction::ImageToText).unwrap(), 100.0);
    }

    #[test]
    fn ties_rank_smaller_index_first() {
        let s = array![[1.0, 1.0], [1.0, 1.0]];
        assert_eq!(recall_at_k(&s, 1, Direction::ImageToText).unwrap(), 50.0);
    }

    #[test]
    fn rsum_examples() {
        assert_eq!(EvalReport::from_recalls([100.0; 6]).rsum, 600.0);
        assert_eq!(EvalReport::from_recalls([0.0; 6]).rsum, 0.0);
        let r = EvalReport::from_recalls([79.9, 95.9, 98.4, 66.3, 90.8, 98.4]);
        assert_abs_diff_eq!(r.rsum, 529.7, epsilon = 1e-9);
    }

    #[test]
    fn variance_examples() {
        assert_abs_diff_eq!(r1_variance(&[87.9, 87.3, 85.6, 83.0]).unwrap(), 3.6125, epsilon = 1e-9);
        assert_abs_diff_eq!(r1_variance(&[86.2, 82.3, 76.2, 66.3]).unwrap(), 56.4025, epsilon = 1e-9);
        assert_eq!(r1_variance(&[80.0; 4]).unwrap(), 0.0);
        assert!(matches!(r1_variance(&[1.0]), Err(Error::TooFewValues(1))));
    }

    #[test]
    fn detection_examples() {
        let noisy = [false, false, false, true, true];
        let perfect = [1.0, 1.0, 1.0, 0.0, 0.0];
        let d = detection_report(&perfect, &noisy, 0.99).unwrap();
        assert_eq!((d.purity, d.clean_recall), (1.0, 1.0));
        let d = detection_report(&[1.0; 5], &noisy, 0.99).unwrap();
        assert_abs_diff_eq!(d.purity, 0.6, epsilon = 1e-12);
        assert_eq!(d.clean_recall, 1.0);
        assert!(matches!(detection_report(&[0.1; 5], &noisy, 0.99), Err(Error::EmptySelection)));
    }

    #[test]
    fn weight_separation_examples() {
        let noisy = [false, true, false, true];
        assert_eq!(weight_separation(&[1.0; 4], &noisy).unwrap(), (1.0, 1.0));
        let t = 0.5f64.tanh();
        let (c, n) = weight_separation(&[1.0, t, 1.0, t], &noisy).unwrap();
        assert_eq!(c, 1.0);
        assert_abs_diff_eq!(n, 0.462117, epsilon = 1e-6);
        assert!(matches!(weight_separation(&[1.0], &[false]), Err(Error::MissingClass("noisy"))));
    }

    #[test]
    fn small_candidate_sets_cap_k() {
        let r = evaluate(&Array2::eye(3)).unwrap();
        assert_eq!(r.rsum, 600.0);
    }
}
