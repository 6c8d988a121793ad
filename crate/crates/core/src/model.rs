//! Dual two-layer tanh encoder with hand-written reverse mode and AdamW.
//!
//! Each branch computes `tanh(X W1 + b1) W2 + b2`. Embeddings leave the encoder
//! unnormalized; the objective divides by norms.

use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Reader, Writer};
use crate::error::{Error, Result};
use crate::rng;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"NPCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Parameters of one modality branch. Also used as the gradient/moment container.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Branch {
    pub fn zeros(d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: Array2::zeros((d_in, hidden)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, d_out)),
            b2: Array1::zeros(d_out),
        }
    }

    fn glorot(d_in: usize, hidden: usize, d_out: usize, rng: &mut rng::Rng) -> Self {
        let mut b = Self::zeros(d_in, hidden, d_out);
        for w in [&mut b.w1, &mut b.w2] {
            let (fan_in, fan_out) = w.dim();
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            w.mapv_inplace(|_| rng.sample(dist));
        }
        b
    }

    pub fn d_in(&self) -> usize {
        self.w1.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.w2.ncols()
    }

    /// Flat views in the fixed order w1, b1, w2, b2.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
        ]
    }

    fn hidden_of(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut h = x.dot(&self.w1);
        h += &self.b1;
        h.mapv_inplace(f64::tanh);
        h
    }

    fn forward(&self, x: &Array2<f64>, what: &str) -> Result<Array2<f64>> {
        if x.ncols() != self.d_in() {
            return Err(Error::ShapeMismatch(format!(
                "{what} input has {} columns, encoder expects {}",
                x.ncols(),
                self.d_in()
            )));
        }
        let mut e = self.hidden_of(x).dot(&self.w2);
        e += &self.b2;
        Ok(e)
    }

    fn backward(&self, x: &Array2<f64>, upstream: &Array2<f64>) -> Branch {
        let h = self.hidden_of(x);
        let dw2 = h.t().dot(upstream);
        let db2 = upstream.sum_axis(Axis(0));
        let mut dz = upstream.dot(&self.w2.t());
        dz.zip_mut_with(&h, |g, &hv| *g *= 1.0 - hv * hv);
        let dw1 = x.t().dot(&dz);
        let db1 = dz.sum_axis(Axis(0));
        // degenerate shapes can yield non-contiguous products
        Branch {
            w1: dw1.as_standard_layout().into_owned(),
            b1: db1,
            w2: dw2.as_standard_layout().into_owned(),
            b2: db2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub image: Branch,
    pub text: Branch,
}

/// Gradients share the encoder's layout, one tensor per parameter tensor.
pub type Gradients = DualEncoder;

impl DualEncoder {
    pub fn zeros_like(&self) -> Self {
        Self {
            image: Branch::zeros(self.image.d_in(), self.image.hidden(), self.image.d_out()),
            text: Branch::zeros(self.text.d_in(), self.text.hidden(), self.text.d_out()),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            d_img: self.image.d_in(),
            d_txt: self.text.d_in(),
            hidden: self.image.hidden(),
            d_out: self.image.d_out(),
        }
    }

    pub fn tensors(&self) -> impl Iterator<Item = &[f64]> {
        self.image.tensors().into_iter().chain(self.text.tensors())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.image
            .tensors_mut()
            .into_iter()
            .chain(self.text.tensors_mut())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= c;
            }
        }
    }

    /// Raw little-endian bytes of every parameter, for equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors()
            .flat_map(|t| t.iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub d_img: usize,
    pub d_txt: usize,
    pub hidden: usize,
    pub d_out: usize,
}

pub fn init_encoder(d_img: usize, d_txt: usize, hidden: usize, d_out: usize, seed: u64) -> Result<DualEncoder> {
    if d_img == 0 || d_txt == 0 || hidden == 0 || d_out == 0 {
        return Err(Error::InvalidDims(format!(
            "d_img={d_img} d_txt={d_txt} hidden={hidden} d_out={d_out}"
        )));
    }
    let mut rng = rng::seeded(seed);
    let image = Branch::glorot(d_img, hidden, d_out, &mut rng);
    let text = Branch::glorot(d_txt, hidden, d_out, &mut rng);
    Ok(DualEncoder { image, text })
}

pub fn encode_images(enc: &DualEncoder, x: &Array2<f64>) -> Result<Array2<f64>> {
    enc.image.forward(x, "image")
}

pub fn encode_texts(enc: &DualEncoder, y: &Array2<f64>) -> Result<Array2<f64>> {
    enc.text.forward(y, "text")
}

/// Reverse-mode gradients of a scalar whose gradient with respect to the image
/// and text embeddings is `d_img` / `d_txt`.
pub fn backward(
    enc: &DualEncoder,
    images: &Array2<f64>,
    texts: &Array2<f64>,
    d_img: &Array2<f64>,
    d_txt: &Array2<f64>,
) -> Result<Gradients> {
    let expect = |x: &Array2<f64>, g: &Array2<f64>, b: &Branch, what: &str| {
        if x.ncols() != b.d_in() || g.dim() != (x.nrows(), b.d_out()) {
            return Err(Error::ShapeMismatch(format!(
                "{what}: input {:?}, upstream {:?}, encoder in={} out={}",
                x.dim(),
                g.dim(),
                b.d_in(),
                b.d_out()
            )));
        }
        Ok(())
    };
    expect(images, d_img, &enc.image, "image")?;
    expect(texts, d_txt, &enc.text, "text")?;
    let grads = DualEncoder {
        image: enc.image.backward(images, d_img),
        text: enc.text.backward(texts, d_txt),
    };
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("encoder backward"));
    }
    Ok(grads)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamWConfig,
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl OptimizerState {
    pub fn new(enc: &DualEncoder, hyper: AdamWConfig) -> Self {
        Self {
            hyper,
            m: enc.zeros_like(),
            v: enc.zeros_like(),
            t: 0,
        }
    }
}

/// Applies one AdamW update in place.
pub fn adamw_step_in_place(enc: &mut DualEncoder, grads: &Gradients, state: &mut OptimizerState) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::NonFiniteGradient("adamw input"));
    }
    if grads.dims() != enc.dims() || state.m.dims() != enc.dims() {
        return Err(Error::ShapeMismatch("optimizer state does not match encoder".into()));
    }
    let AdamWConfig {
        lr,
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let decay = 1.0 - lr * weight_decay;

    let OptimizerState { m, v, .. } = state;
    for (((p, g), m), v) in enc
        .tensors_mut()
        .zip(grads.tensors())
        .zip(m.tensors_mut())
        .zip(v.tensors_mut())
    {
        for i in 0..p.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
            v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] = p[i] * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Value-returning AdamW step; the inputs are left untouched.
pub fn adamw_step(
    enc: &DualEncoder,
    grads: &Gradients,
    state: &OptimizerState,
) -> Result<(DualEncoder, OptimizerState)> {
    let mut enc = enc.clone();
    let mut state = state.clone();
    adamw_step_in_place(&mut enc, grads, &mut state)?;
    Ok((enc, state))
}

/// Value copy of encoder parameters plus optimizer moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: DualEncoder,
    pub state: OptimizerState,
}

pub fn snapshot(enc: &DualEncoder, state: &OptimizerState) -> Checkpoint {
    Checkpoint {
        encoder: enc.clone(),
        state: state.clone(),
    }
}

pub fn restore(ck: &Checkpoint) -> (DualEncoder, OptimizerState) {
    (ck.encoder.clone(), ck.state.clone())
}

/// Checkpoint file layout (little-endian, no padding):
///
/// ```text
/// "NPCK" | version u16 | reserved u16 | d_img u32 | d_txt u32 | hidden u32 | d_out u32
/// step u64 | lr, beta1, beta2, eps, weight_decay as f64
/// params, first moments, second moments as f32; each group ordered
/// image.w1 image.b1 image.w2 image.b2 text.w1 text.b1 text.w2 text.b2 (row-major)
/// ```
pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let mut w = Writer::default();
    let d = ck.encoder.dims();
    w.bytes(&CHECKPOINT_MAGIC);
    w.u16(CHECKPOINT_VERSION);
    w.u16(0);
    for v in [d.d_img, d.d_txt, d.hidden, d.d_out] {
        w.u32(v as u32);
    }
    w.u64(ck.state.t);
    let h = ck.state.hyper;
    for v in [h.lr, h.beta1, h.beta2, h.eps, h.weight_decay] {
        w.bytes(&v.to_le_bytes());
    }
    for group in [&ck.encoder, &ck.state.m, &ck.state.v] {
        for t in group.tensors() {
            w.f32_iter(t.iter().map(|&v| v as f32));
        }
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let _ = r.u16()?;
    let d_img = r.u32()? as usize;
    let d_txt = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let d_out = r.u32()? as usize;
    let t = r.u64()?;
    let mut f64s = [0.0; 5];
    for v in f64s.iter_mut() {
        let lo = r.u32()? as u64;
        let hi = r.u32()? as u64;
        *v = f64::from_bits(lo | (hi << 32));
    }
    let [lr, beta1, beta2, eps, weight_decay] = f64s;
    let mut groups = Vec::with_capacity(3);
    for _ in 0..3 {
        let mut g = DualEncoder {
            image: Branch::zeros(d_img, hidden, d_out),
            text: Branch::zeros(d_txt, hidden, d_out),
        };
        for tensor in g.tensors_mut() {
            let vals = r.f32_vec(tensor.len())?;
            for (dst, src) in tensor.iter_mut().zip(vals) {
                *dst = src as f64;
            }
        }
        groups.push(g);
    }
    r.finish()?;
    let v = groups.pop().unwrap();
    let m = groups.pop().unwrap();
    let encoder = groups.pop().unwrap();
    Ok(Checkpoint {
        encoder,
        state: OptimizerState {
            hyper: AdamWConfig {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            },
            m,
            v,
            t,
        },
    })
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| crate::error::Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
