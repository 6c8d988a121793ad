//! Memory bank: for every training pair, the clean pair with the most similar
//! image and the clean pair with the most similar text.

use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::objective::{dedup, normalize_rows};

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    /// Training index of the clean pair whose image is nearest to sample i's image.
    pub img_entry: Vec<usize>,
    /// Training index of the clean pair whose text is nearest to sample i's text.
    pub txt_entry: Vec<usize>,
    pub img_sim: Vec<f64>,
    pub txt_sim: Vec<f64>,
    pub clean_indices: Vec<usize>,
}

impl MemoryBank {
    pub fn len(&self) -> usize {
        self.img_entry.len()
    }

    pub fn is_empty(&self) -> bool {
        self.img_entry.is_empty()
    }
}

/// Rows of the nearest clean neighbour; exact scan, first maximum wins.
fn nearest_clean(unit: &Array2<f64>, clean: &[usize]) -> Vec<(usize, f64)> {
    let n = unit.nrows();
    let mut is_clean = vec![false; n];
    for &c in clean {
        is_clean[c] = true;
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            if is_clean[i] {
                let u = unit.row(i);
                return (i, u.dot(&u));
            }
            let q: ArrayView1<f64> = unit.row(i);
            let mut best = (clean[0], f64::NEG_INFINITY);
            for &j in clean {
                let s = q.dot(&unit.row(j));
                if s > best.1 {
                    best = (j, s);
                }
            }
            best
        })
        .collect()
}

pub fn build_memory_bank(e_img: &Array2<f64>, e_txt: &Array2<f64>, clean: &[usize]) -> Result<MemoryBank> {
    if clean.is_empty() {
        return Err(Error::EmptyCleanSet { tau: f64::NAN });
    }
    if e_img.nrows() != e_txt.nrows() {
        return Err(Error::ShapeMismatch(format!(
            "{} image rows vs {} text rows",
            e_img.nrows(),
            e_txt.nrows()
        )));
    }
    let n = e_img.nrows();
    if let Some(&bad) = clean.iter().find(|&&c| c >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let mut clean_indices = clean.to_vec();
    clean_indices.sort_unstable();
    clean_indices.dedup();

    let ui = normalize_rows(e_img)?.unit;
    let ut = normalize_rows(e_txt)?.unit;
    let (img_entry, img_sim) = nearest_clean(&ui, &clean_indices).into_iter().unzip();
    let (txt_entry, txt_sim) = nearest_clean(&ut, &clean_indices).into_iter().unzip();
    Ok(MemoryBank {
        img_entry,
        txt_entry,
        img_sim,
        txt_sim,
        clean_indices,
    })
}

/// Memory entries of one batch, in batch order.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBatch {
    pub img_side: Vec<usize>,
    pub txt_side: Vec<usize>,
    /// Distinct clean indices referenced by the batch, ascending.
    pub unique: Vec<usize>,
    /// Position in `unique` of each image-side / text-side entry.
    pub img_slot: Vec<usize>,
    pub txt_slot: Vec<usize>,
    /// For the 2m entries laid out as `[img_side.., txt_side..]`: whether the
    /// same clean index already appeared at an earlier position.
    pub duplicate: Vec<bool>,
}

impl MemoryBatch {
    pub fn m(&self) -> usize {
        self.img_side.len()
    }

    /// How many of the 2m entries reference each unique slot.
    pub fn multiplicity(&self) -> Vec<usize> {
        let mut c = vec![0; self.unique.len()];
        for &s in self.img_slot.iter().chain(&self.txt_slot) {
            c[s] += 1;
        }
        c
    }
}

pub fn batch_entries(mb: &MemoryBank, batch: &[usize]) -> Result<MemoryBatch> {
    let n = mb.len();
    if let Some(&bad) = batch.iter().find(|&&i| i >= n) {
        return Err(Error::IndexOutOfRange { index: bad, len: n });
    }
    let img_side: Vec<usize> = batch.iter().map(|&i| mb.img_entry[i]).collect();
    let txt_side: Vec<usize> = batch.iter().map(|&i| mb.txt_entry[i]).collect();
    let all: Vec<usize> = img_side.iter().chain(&txt_side).copied().collect();
    let d = dedup(&all);
    let unique: Vec<usize> = d.first.iter().map(|&p| all[p]).collect();
    let m = batch.len();
    let mut seen = std::collections::HashSet::new();
    let duplicate = all.iter().map(|&c| !seen.insert(c)).collect();
    Ok(MemoryBatch {
        img_slot: d.slot[..m].to_vec(),
        txt_slot: d.slot[m..].to_vec(),
        img_side,
        txt_side,
        unique,
        duplicate,
    })
}

/// CSV with columns index, img_entry, txt_entry, img_sim, txt_sim.
pub fn write_dump(path: &Path, mb: &MemoryBank) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["index", "img_entry", "txt_entry", "img_sim", "txt_sim"])?;
    for i in 0..mb.len() {
        w.write_record([
            i.to_string(),
            mb.img_entry[i].to_string(),
            mb.txt_entry[i].to_string(),
            mb.img_sim[i].to_string(),
            mb.txt_sim[i].to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    crate::codec::write_atomic(path, &bytes)
}
