#![allow(dead_code)]

use ndarray::Array2;
use npc_core::data::FeatureDataset;
use npc_core::membank::{self, MemoryBatch};
use npc_core::model::{self, DualEncoder, Gradients};
use npc_core::npc;
use npc_core::objective::{self, EntryEmbeddings};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_dataset(n: usize, d_img: usize, d_txt: usize, rng: &mut ChaCha8Rng) -> FeatureDataset {
    FeatureDataset {
        image_feats: Array2::from_shape_simple_fn((n, d_img), || rng.random_range(-1.0f32..1.0)),
        text_feats: Array2::from_shape_simple_fn((n, d_txt), || rng.random_range(-1.0f32..1.0)),
        current_text_of: (0..n as u32).collect(),
        is_noisy: vec![false; n],
        noise_ratio: 0.0,
    }
}

/// Largest relative error of `analytic` against central differences of `f`,
/// over every encoder parameter. Magnitudes below `floor` count as `floor`.
pub fn max_relative_error(
    enc: &DualEncoder,
    analytic: &Gradients,
    f: impl Fn(&DualEncoder) -> f64,
    delta: f64,
    floor: f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    let grads: Vec<Vec<f64>> = analytic.tensors().map(<[f64]>::to_vec).collect();
    for (t, g) in grads.iter().enumerate() {
        for (i, &a) in g.iter().enumerate() {
            let mut plus = enc.clone();
            plus.tensors_mut().nth(t).unwrap()[i] += delta;
            let mut minus = enc.clone();
            minus.tensors_mut().nth(t).unwrap()[i] -= delta;
            let n = (f(&plus) - f(&minus)) / (2.0 * delta);
            let denom = a.abs().max(n.abs()).max(floor);
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}

/// Worst relative errors `[ce, rce, mb]` of one random instance.
pub fn gradient_instance(seed: u64, logit_scale: f64, delta: f64, floor: f64) -> [f64; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = rng.random_range(2..=4);
    let (d_img, d_txt) = (rng.random_range(2..=8), rng.random_range(2..=8));
    let (hidden, d_out) = (rng.random_range(2..=8), rng.random_range(2..=8));
    let n = m + 4;
    let ds = random_dataset(n, d_img, d_txt, &mut rng);
    let enc = model::init_encoder(d_img, d_txt, hidden, d_out, rng.random()).unwrap();
    let batch: Vec<usize> = sample(&mut rng, n, m).into_vec();
    let images = ds.images(&batch);
    let texts = ds.paired_texts(&batch);

    let sim_of = |e: &DualEncoder| {
        let a = model::encode_images(e, &images).unwrap();
        let b = model::encode_texts(e, &texts).unwrap();
        objective::similarity_matrix(&a, &b, logit_scale).unwrap()
    };

    let ones = vec![1.0; m];
    let (_, g) = npc::weighted_ce_grads(&enc, &images, &texts, logit_scale, &ones).unwrap();
    let ce = max_relative_error(&enc, &g, |e| objective::symmetric_ce(&sim_of(e)).unwrap().0, delta, floor);

    let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..=1.0)).collect();
    let (_, g) = npc::weighted_ce_grads(&enc, &images, &texts, logit_scale, &w).unwrap();
    let rce = max_relative_error(&enc, &g, |e| objective::weighted_ce(&sim_of(e), &w).unwrap(), delta, floor);

    let mbb = random_memory_batch(&enc, &ds, &batch, &mut rng);
    let (_, g) = npc::memory_loss_grads(&enc, &ds, &mbb, logit_scale).unwrap();
    let mb = max_relative_error(&enc, &g, |e| memory_loss_value(e, &ds, &mbb, logit_scale), delta, floor);
    [ce, rce, mb]
}

pub fn random_memory_batch(enc: &DualEncoder, ds: &FeatureDataset, batch: &[usize], rng: &mut ChaCha8Rng) -> MemoryBatch {
    let n = ds.len();
    let k = rng.random_range(2..=n);
    let clean: Vec<usize> = sample(rng, n, k).into_vec();
    let all = ds.all_indices();
    let e_img = model::encode_images(enc, &ds.images(&all)).unwrap();
    let e_txt = model::encode_texts(enc, &ds.paired_texts(&all)).unwrap();
    let mb = membank::build_memory_bank(&e_img, &e_txt, &clean).unwrap();
    membank::batch_entries(&mb, batch).unwrap()
}

pub fn memory_loss_value(enc: &DualEncoder, ds: &FeatureDataset, mbb: &MemoryBatch, logit_scale: f64) -> f64 {
    let side = |idx: &[usize]| EntryEmbeddings {
        images: model::encode_images(enc, &ds.images(idx)).unwrap(),
        texts: model::encode_texts(enc, &ds.paired_texts(idx)).unwrap(),
        clean_index: idx.to_vec(),
    };
    objective::memory_bank_loss(&side(&mbb.img_side), &side(&mbb.txt_side), logit_scale).unwrap()
}
