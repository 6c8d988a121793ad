//! Training loops: plain contrastive warmup/baseline and the negative pre-aware
//! procedure.
//!
//! Each NPC batch runs in two steps. First a clone of the base model takes one
//! plain optimizer step on the batch, and the change in loss on every sample's
//! clean memory entries gives a performance ratio `r_k` and a confidence weight
//! `w_k`. Then the base model takes one step on the `w`-weighted batch loss plus
//! the memory-entry loss. The clone is discarded after probing.

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::FeatureDataset;
use crate::error::{Error, Result, ResultExt};
use crate::eval::{self, detection_report, EvalReport};
use crate::gmm::{self, GmmFit};
use crate::membank::{self, MemoryBank, MemoryBatch};
use crate::model::{
    self, adamw_step_in_place, encode_images, encode_texts, AdamWConfig, Checkpoint, DualEncoder, Gradients,
    OptimizerState,
};
use crate::objective::{self, combination_loss_grad, DirectionalLosses};
use crate::rng::{self, tag};

/// Division guard in the performance ratio.
pub const RATIO_EPS: f64 = 1e-8;
/// Lowest threshold the empty-clean-set fallback may relax to.
pub const TAU_FLOOR: f64 = 0.9;
pub const TAU_STEP: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Npc,
    NpcNoW,
    NpcNoMb,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Baseline, Method::Npc, Method::NpcNoW, Method::NpcNoMb];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Npc => "npc",
            Method::NpcNoW => "npc_no_w",
            Method::NpcNoMb => "npc_no_mb",
        }
    }

    /// `(use_weights, use_memory_loss)` for this method, before global overrides.
    pub fn switches(self) -> Option<Switches> {
        match self {
            Method::Baseline => None,
            Method::Npc => Some(Switches {
                use_weights: true,
                use_memory_loss: true,
            }),
            Method::NpcNoW => Some(Switches {
                use_weights: false,
                use_memory_loss: true,
            }),
            Method::NpcNoMb => Some(Switches {
                use_weights: true,
                use_memory_loss: false,
            }),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method '{s}' (expected baseline, npc, npc_no_w or npc_no_mb)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Switches {
    pub use_weights: bool,
    pub use_memory_loss: bool,
}

impl Switches {
    pub fn is_plain(self) -> bool {
        !self.use_weights && !self.use_memory_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Epochs after warmup.
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub logit_scale: f64,
    pub tau: f64,
    pub warmup_epochs: usize,
    pub rebuild_every_epoch: bool,
    pub seed: u64,
    pub hidden: usize,
    pub d_out: usize,
    /// Group size for the per-sample loss sweep feeding the mixture fit.
    pub eval_batch: usize,
    pub disable_w: bool,
    pub disable_mb: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 128,
            lr: 1e-3,
            weight_decay: 0.01,
            logit_scale: objective::DEFAULT_LOGIT_SCALE,
            tau: 0.99,
            warmup_epochs: 1,
            rebuild_every_epoch: true,
            seed: 1,
            hidden: 128,
            d_out: 64,
            eval_batch: 128,
            disable_w: false,
            disable_mb: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad(format!("tau {} outside (0, 1]", self.tau));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return bad(format!("logit_scale must be positive, got {}", self.logit_scale));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("lr and weight_decay must be nonnegative".into());
        }
        if self.eval_batch < 2 {
            return bad(format!("eval_batch must be at least 2, got {}", self.eval_batch));
        }
        if self.hidden == 0 || self.d_out == 0 {
            return bad("hidden and d_out must be at least 1".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Switches for a method after applying the global ablation overrides.
    pub fn switches_for(&self, method: Method) -> Option<Switches> {
        method.switches().map(|s| Switches {
            use_weights: s.use_weights && !self.disable_w,
            use_memory_loss: s.use_memory_loss && !self.disable_mb,
        })
    }
}

/// Seed-shuffled batches for one epoch; a trailing batch of one joins its predecessor.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, tag::SHUFFLE, epoch as u64)));
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() < 2) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Loss value and parameter gradients of `sum_k c_k l_k` on paired inputs.
fn combination_grads(
    enc: &DualEncoder,
    images: &Array2<f64>,
    texts: &Array2<f64>,
    logit_scale: f64,
    coeffs: &[f64],
) -> Result<(f64, DirectionalLosses, Gradients)> {
    let e_img = encode_images(enc, images)?;
    let e_txt = encode_texts(enc, texts)?;
    let lg = combination_loss_grad(&e_img, &e_txt, logit_scale, coeffs)?;
    let grads = model::backward(enc, images, texts, &lg.d_img, &lg.d_txt)?;
    Ok((lg.loss, lg.losses, grads))
}

/// Gradients of the re-weighted batch loss `(1/m) sum_k w_k l_k`.
pub fn weighted_ce_grads(
    enc: &DualEncoder,
    images: &Array2<f64>,
    texts: &Array2<f64>,
    logit_scale: f64,
    w: &[f64],
) -> Result<(f64, Gradients)> {
    let m = w.len() as f64;
    let coeffs: Vec<f64> = w.iter().map(|wk| wk / m).collect();
    let (loss, _, grads) = combination_grads(enc, images, texts, logit_scale, &coeffs)?;
    Ok((loss, grads))
}

/// Gradients of the memory-entry loss `(1/m) sum_k [l(img entry) + l(txt entry)]`,
/// evaluated on the batch's distinct entries.
pub fn memory_loss_grads(
    enc: &DualEncoder,
    ds: &FeatureDataset,
    mbb: &MemoryBatch,
    logit_scale: f64,
) -> Result<(f64, Gradients)> {
    let m = mbb.m() as f64;
    let coeffs: Vec<f64> = mbb.multiplicity().into_iter().map(|c| c as f64 / m).collect();
    let images = ds.images(&mbb.unique);
    let texts = ds.paired_texts(&mbb.unique);
    let (loss, _, grads) = combination_grads(enc, &images, &texts, logit_scale, &coeffs)?;
    Ok((loss, grads))
}

/// `w = tanh(r)` for `r < 1`, else 1.
pub fn confidence_weight(r: f64) -> f64 {
    if r < 1.0 {
        r.tanh()
    } else {
        1.0
    }
}

fn loss_ratio(before: f64, after: f64) -> f64 {
    // unchanged losses, including 0/0 for an entry set without negatives
    if before == after {
        1.0
    } else {
        before / (after + RATIO_EPS)
    }
}

pub fn performance_ratio(p_before: f64, p_after: f64, q_before: f64, q_after: f64) -> f64 {
    0.5 * (loss_ratio(p_before, p_after) + loss_ratio(q_before, q_after))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreAwareRecord {
    pub p_before: f64,
    pub p_after: f64,
    pub q_before: f64,
    pub q_after: f64,
    pub r: f64,
    pub w: f64,
}

impl PreAwareRecord {
    pub fn from_losses(p_before: f64, p_after: f64, q_before: f64, q_after: f64) -> Self {
        let r = performance_ratio(p_before, p_after, q_before, q_after);
        Self {
            p_before,
            p_after,
            q_before,
            q_after,
            r,
            w: confidence_weight(r),
        }
    }
}

/// `(p_k, q_k)` per batch sample: image-to-text and text-to-image losses summed
/// over the sample's two memory entries, negatives drawn from the distinct entries.
pub fn entry_losses(
    enc: &DualEncoder,
    ds: &FeatureDataset,
    mbb: &MemoryBatch,
    logit_scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let e_img = encode_images(enc, &ds.images(&mbb.unique))?;
    let e_txt = encode_texts(enc, &ds.paired_texts(&mbb.unique))?;
    let sim = objective::similarity_matrix(&e_img, &e_txt, logit_scale)?;
    let d = objective::directional_losses(&sim)?;
    let p = (0..mbb.m())
        .map(|k| d.i2t[mbb.img_slot[k]] + d.i2t[mbb.txt_slot[k]])
        .collect();
    let q = (0..mbb.m())
        .map(|k| d.t2i[mbb.img_slot[k]] + d.t2i[mbb.txt_slot[k]])
        .collect();
    Ok((p, q))
}

/// Probe a clone of `base` with one plain step on `batch` and score each sample
/// by how its memory-entry losses moved. `base` is not modified.
pub fn preaware_step(
    base: &Checkpoint,
    ds: &FeatureDataset,
    batch: &[usize],
    mbb: &MemoryBatch,
    cfg: &TrainConfig,
) -> Result<Vec<PreAwareRecord>> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    if mbb.m() != batch.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} memory entries for batch of {}",
            mbb.m(),
            batch.len()
        )));
    }
    let (mut clone, mut state) = model::restore(base);
    let (p_before, q_before) = entry_losses(&clone, ds, mbb, cfg.logit_scale)?;

    let images = ds.images(batch);
    let texts = ds.paired_texts(batch);
    let (_, grads) = weighted_ce_grads(&clone, &images, &texts, cfg.logit_scale, &vec![1.0; batch.len()])?;
    adamw_step_in_place(&mut clone, &grads, &mut state)?;

    let (p_after, q_after) = entry_losses(&clone, ds, mbb, cfg.logit_scale)?;
    (0..batch.len())
        .map(|k| {
            let rec = PreAwareRecord::from_losses(p_before[k], p_after[k], q_before[k], q_after[k]);
            if [rec.p_before, rec.p_after, rec.q_before, rec.q_after, rec.r]
                .iter()
                .all(|v| v.is_finite())
            {
                Ok(rec)
            } else {
                Err(Error::DegenerateEntryLoss(k))
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_w_clean: Option<f64>,
    pub mean_w_noisy: Option<f64>,
    pub clean_set_size: Option<usize>,
    pub clean_set_purity: Option<f64>,
    pub tau_used: Option<f64>,
    pub train_loss_rce: f64,
    pub train_loss_mb: f64,
    /// Per-sample weight assigned this epoch, indexed by training sample.
    #[serde(skip)]
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Train,
}

fn plain_stats(epoch: usize, phase: Phase, loss: f64, n: usize) -> EpochStats {
    EpochStats {
        epoch,
        phase,
        mean_w_clean: None,
        mean_w_noisy: None,
        clean_set_size: None,
        clean_set_purity: None,
        tau_used: None,
        train_loss_rce: loss,
        train_loss_mb: 0.0,
        weights: vec![1.0; n],
    }
}

/// One epoch of unweighted symmetric cross-entropy; returns the mean batch loss.
fn plain_epoch(
    enc: &mut DualEncoder,
    state: &mut OptimizerState,
    ds: &FeatureDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let batches = epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch);
    let mut total = 0.0;
    for batch in &batches {
        let w = vec![1.0; batch.len()];
        let (loss, grads) = weighted_ce_grads(enc, &ds.images(batch), &ds.paired_texts(batch), cfg.logit_scale, &w)?;
        adamw_step_in_place(enc, &grads, state)?;
        total += loss;
    }
    Ok(total / batches.len() as f64)
}

/// Plain-loss warmup epochs `0..warmup_epochs`.
pub fn warmup(
    enc: &mut DualEncoder,
    state: &mut OptimizerState,
    ds: &FeatureDataset,
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>> {
    (0..cfg.warmup_epochs)
        .map(|e| Ok(plain_stats(e, Phase::Warmup, plain_epoch(enc, state, ds, cfg, e)?, ds.len())))
        .collect()
}

pub fn train_epoch_baseline(
    enc: &mut DualEncoder,
    state: &mut OptimizerState,
    ds: &FeatureDataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochStats> {
    let loss = plain_epoch(enc, state, ds, cfg, epoch)?;
    Ok(plain_stats(epoch, Phase::Train, loss, ds.len()))
}

/// One NPC epoch over seed-shuffled batches.
pub fn train_epoch_npc(
    enc: &mut DualEncoder,
    state: &mut OptimizerState,
    ds: &FeatureDataset,
    mb: &MemoryBank,
    cfg: &TrainConfig,
    switches: Switches,
    epoch: usize,
) -> Result<EpochStats> {
    if mb.len() != ds.len() {
        return Err(Error::ShapeMismatch(format!(
            "memory bank covers {} samples, dataset has {}",
            mb.len(),
            ds.len()
        )));
    }
    let batches = epoch_batches(ds.len(), cfg.batch_size, cfg.seed, epoch);
    let mut weights = vec![1.0; ds.len()];
    let (mut sum_rce, mut sum_mb) = (0.0, 0.0);
    for batch in &batches {
        let mbb = membank::batch_entries(mb, batch)?;
        let w: Vec<f64> = if switches.use_weights {
            let base = model::snapshot(enc, state);
            preaware_step(&base, ds, batch, &mbb, cfg)?.iter().map(|r| r.w).collect()
        } else {
            vec![1.0; batch.len()]
        };
        for (&i, &wk) in batch.iter().zip(&w) {
            weights[i] = wk;
        }

        let (rce, mut grads) = weighted_ce_grads(enc, &ds.images(batch), &ds.paired_texts(batch), cfg.logit_scale, &w)?;
        let mut mb_loss = 0.0;
        if switches.use_memory_loss {
            let (l, g) = memory_loss_grads(enc, ds, &mbb, cfg.logit_scale)?;
            grads.add_assign(&g);
            mb_loss = l;
        }
        adamw_step_in_place(enc, &grads, state)?;
        sum_rce += rce;
        sum_mb += mb_loss;
    }

    let (mean_w_clean, mean_w_noisy) = class_means(&weights, &ds.is_noisy);
    let nb = batches.len() as f64;
    Ok(EpochStats {
        epoch,
        phase: Phase::Train,
        mean_w_clean,
        mean_w_noisy,
        clean_set_size: Some(mb.clean_indices.len()),
        clean_set_purity: None,
        tau_used: None,
        train_loss_rce: sum_rce / nb,
        train_loss_mb: sum_mb / nb,
        weights,
    })
}

fn class_means(w: &[f64], is_noisy: &[bool]) -> (Option<f64>, Option<f64>) {
    let mean = |noisy: bool| {
        let v: Vec<f64> = w.iter().zip(is_noisy).filter(|(_, &n)| n == noisy).map(|(&x, _)| x).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    (mean(false), mean(true))
}

/// Thresholds from `tau` down to the floor in fixed steps.
fn tau_ladder(tau: f64) -> Vec<f64> {
    let mut out = vec![tau];
    let mut k = 1;
    loop {
        let t = ((tau - k as f64 * TAU_STEP) * 1e6).round() / 1e6;
        if t < TAU_FLOOR - 1e-12 {
            break;
        }
        out.push(t);
        k += 1;
    }
    out
}

/// Clean selection with the relaxation fallback; returns the set and the threshold used.
pub fn select_clean_relaxed(p: &[f64], tau: f64) -> Result<(Vec<usize>, f64)> {
    for t in tau_ladder(tau) {
        match gmm::select_clean(p, t) {
            Ok(set) => {
                if t < tau {
                    log::warn!("clean set empty at tau={tau}; relaxed to {t}");
                }
                return Ok((set, t));
            }
            Err(Error::EmptyCleanSet { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::EmptyCleanSet {
        tau: tau.min(TAU_FLOOR),
    })
}

/// Everything derived from one mixture fit over the training losses.
#[derive(Debug, Clone)]
pub struct Selection {
    pub losses: Vec<f64>,
    pub fit: GmmFit,
    pub posteriors: Vec<f64>,
    pub clean: Vec<usize>,
    pub tau_used: f64,
    pub memory: MemoryBank,
}

pub fn select_and_build(enc: &DualEncoder, ds: &FeatureDataset, cfg: &TrainConfig, epoch: usize) -> Result<Selection> {
    let seed = rng::derive(cfg.seed, tag::SWEEP, epoch as u64);
    let losses = objective::per_sample_loss_sweep(enc, ds, cfg.eval_batch, cfg.logit_scale, seed)?;
    let fit = gmm::fit_gmm(&losses, gmm::DEFAULT_MAX_ITER, gmm::DEFAULT_TOL)?;
    let posteriors = gmm::clean_posterior(&fit, &losses);
    let (clean, tau_used) = select_clean_relaxed(&posteriors, cfg.tau)?;
    let all = ds.all_indices();
    let e_img = encode_images(enc, &ds.images(&all))?;
    let e_txt = encode_texts(enc, &ds.paired_texts(&all))?;
    let memory = membank::build_memory_bank(&e_img, &e_txt, &clean)?;
    Ok(Selection {
        losses,
        fit,
        posteriors,
        clean,
        tau_used,
        memory,
    })
}

/// Clean-set quality of one selection round at a few thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionDiagnostics {
    pub epoch: usize,
    pub tau_used: f64,
    pub clean_set_size: usize,
    /// `(tau, purity, clean_recall)`; purity is `None` when nothing is selected.
    pub by_tau: Vec<(f64, Option<f64>, f64)>,
}

pub const DIAGNOSTIC_TAUS: [f64; 3] = [0.5, 0.7, 0.99];

#[derive(Debug, Clone)]
pub struct RunReport {
    pub method: Method,
    pub noise_ratio: f64,
    pub eval: EvalReport,
    pub epochs: Vec<EpochStats>,
    pub selections: Vec<SelectionDiagnostics>,
    pub gmm_fits: usize,
    pub final_checkpoint: Checkpoint,
}

pub fn evaluate_encoder(enc: &DualEncoder, test: &FeatureDataset) -> Result<EvalReport> {
    let all = test.all_indices();
    let e_img = encode_images(enc, &test.images(&all))?;
    let e_txt = encode_texts(enc, &test.paired_texts(&all))?;
    let sim = objective::similarity_matrix(&e_img, &e_txt, 1.0)?;
    eval::evaluate(&sim.s)
}

/// Warmup, then per epoch: loss sweep, mixture fit, clean selection, memory
/// bank, and one training epoch; finally retrieval on `test`.
pub fn run_pipeline(cfg: &TrainConfig, method: Method, train: &FeatureDataset, test: &FeatureDataset) -> Result<RunReport> {
    cfg.validate()?;
    let mut enc = model::init_encoder(
        train.d_img(),
        train.d_txt(),
        cfg.hidden,
        cfg.d_out,
        rng::derive(cfg.seed, tag::INIT, 0),
    )?;
    let mut state = OptimizerState::new(&enc, cfg.adamw());
    let mut epochs = warmup(&mut enc, &mut state, train, cfg).context(|| "warmup".into())?;
    let mut selections = Vec::new();
    let mut gmm_fits = 0;
    let mut current: Option<Selection> = None;

    for e in 0..cfg.epochs {
        let epoch = cfg.warmup_epochs + e;
        let stats = match cfg.switches_for(method) {
            Some(sw) if !sw.is_plain() => {
                if current.is_none() || cfg.rebuild_every_epoch {
                    let sel = select_and_build(&enc, train, cfg, epoch).context(|| format!("selection, epoch {epoch}"))?;
                    gmm_fits += 1;
                    selections.push(diagnose(&sel, train, epoch));
                    current = Some(sel);
                }
                let sel = current.as_ref().expect("selection built above");
                let mut stats = train_epoch_npc(&mut enc, &mut state, train, &sel.memory, cfg, sw, epoch)
                    .context(|| format!("npc epoch {epoch}"))?;
                stats.tau_used = Some(sel.tau_used);
                stats.clean_set_purity = purity(&sel.clean, train);
                stats
            }
            _ => train_epoch_baseline(&mut enc, &mut state, train, cfg, epoch)
                .context(|| format!("plain epoch {epoch}"))?,
        };
        log::info!(
            "{method} epoch {epoch}: rce={:.4} mb={:.4} w_clean={:?} w_noisy={:?}",
            stats.train_loss_rce,
            stats.train_loss_mb,
            stats.mean_w_clean,
            stats.mean_w_noisy
        );
        epochs.push(stats);
    }

    let eval = evaluate_encoder(&enc, test).context(|| "evaluation".into())?;
    Ok(RunReport {
        method,
        noise_ratio: train.noise_ratio as f64,
        eval,
        epochs,
        selections,
        gmm_fits,
        final_checkpoint: model::snapshot(&enc, &state),
    })
}

fn purity(clean: &[usize], ds: &FeatureDataset) -> Option<f64> {
    (!clean.is_empty()).then(|| clean.iter().filter(|&&i| !ds.is_noisy[i]).count() as f64 / clean.len() as f64)
}

fn diagnose(sel: &Selection, ds: &FeatureDataset, epoch: usize) -> SelectionDiagnostics {
    let by_tau = DIAGNOSTIC_TAUS
        .iter()
        .map(|&t| match detection_report(&sel.posteriors, &ds.is_noisy, t) {
            Ok(d) => (t, Some(d.purity), d.clean_recall),
            Err(_) => (t, None, 0.0),
        })
        .collect();
    SelectionDiagnostics {
        epoch,
        tau_used: sel.tau_used,
        clean_set_size: sel.clean.len(),
        by_tau,
    }
}
