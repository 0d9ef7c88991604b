//! Frozen image and text stubs, and the trainable transfer MLP.
//!
//! Feature maps are channels-first (`d x h x w`) throughout so that the
//! convolutional branches need no transposes.

use gradkit::{Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::params::{hex, Bound};
use crate::prompts::CollaborativePrompt;

/// Seeded random-projection patchifier: each `stride x stride x 3` patch
/// goes through a fixed linear map to `d` channels and `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder<T> {
    stride: usize,
    d: usize,
    /// `(stride * stride * 3) x d`, rows ordered (dy, dx, channel).
    weight: Vec<T>,
    bias: Vec<T>,
}

impl<T: Scalar> ImageEncoder<T> {
    pub fn new(stride: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1a6e_0000);
        let fan_in = stride * stride * 3;
        let scale = 1.5 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * d)
            .map(|_| T::from_f64_lossy(scale * rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let bias = (0..d).map(|_| T::from_f64_lossy(rng.random_range(-0.5..0.5))).collect();
        Self { stride, d, weight, bias }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    /// `H x W x 3` image to a `d x h x w` embedding.
    pub fn encode(&self, image: &Tensor<f32>) -> Result<Tensor<T>> {
        let shape = image.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::Usage(format!("expected an H x W x 3 image, got {shape:?}")));
        }
        let (hh, ww, s) = (shape[0], shape[1], self.stride);
        if hh % s != 0 || ww % s != 0 {
            return Err(Error::Config(format!("image {hh}x{ww} is not divisible by stride {s}")));
        }
        let (h, w) = (hh / s, ww / s);
        let px = image.data();
        let mut out = vec![T::zero(); self.d * h * w];
        let mut patch = Vec::with_capacity(s * s * 3);
        for y in 0..h {
            for x in 0..w {
                patch.clear();
                for dy in 0..s {
                    let row = (y * s + dy) * ww;
                    for dx in 0..s {
                        let i = (row + x * s + dx) * 3;
                        patch.extend(px[i..i + 3].iter().map(|&v| T::from_f64_lossy(v as f64)));
                    }
                }
                for k in 0..self.d {
                    let mut acc = self.bias[k];
                    for (i, &v) in patch.iter().enumerate() {
                        acc += v * self.weight[i * self.d + k];
                    }
                    out[(k * h + y) * w + x] = acc.tanh();
                }
            }
        }
        Ok(Tensor::new(vec![self.d, h, w], out)?)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for v in self.weight.iter().chain(&self.bias) {
            h.update(v.as_f64().to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Hash-based bag of tokens: every whitespace token maps to a seeded
/// Gaussian vector; a text embeds as the L2-normalised token mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoder {
    d_clip: usize,
    seed: u64,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl TextEncoder {
    pub fn new(d_clip: usize, seed: u64) -> Self {
        Self { d_clip, seed }
    }

    pub fn dim(&self) -> usize {
        self.d_clip
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(token) ^ self.seed.rotate_left(17));
        (0..self.d_clip).map(|_| rng.sample(StandardNormal)).collect()
    }

    pub fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::Usage("cannot encode an empty prompt".into()));
        }
        let mut mean = vec![0.0; self.d_clip];
        for t in &tokens {
            for (m, v) in mean.iter_mut().zip(self.token_vector(t)) {
                *m += v;
            }
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(mean.into_iter().map(|v| v / norm).collect())
    }

    /// `P x d_clip` embedding of a prompt set, one row per text.
    pub fn encode<T: Scalar>(&self, prompt: &CollaborativePrompt) -> Result<Tensor<T>> {
        let mut data = Vec::with_capacity(prompt.texts.len() * self.d_clip);
        for text in &prompt.texts {
            data.extend(self.encode_text(text)?.into_iter().map(T::from_f64_lossy));
        }
        Ok(Tensor::new(vec![prompt.texts.len(), self.d_clip], data)?)
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update((self.d_clip as u64).to_le_bytes());
        for probe in ["shaft", "of", "tip"] {
            for v in self.token_vector(probe) {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

/// Two-layer transfer MLP `d_clip -> hidden (ReLU) -> d` on `P x d_clip`.
pub fn transfer<'t, T: Scalar>(p: &Bound<'t, T>, clip: Var<'t, T>) -> Result<Var<'t, T>> {
    let hidden = clip
        .linear(p.get("transfer.fc1.weight")?, p.get("transfer.fc1.bias")?)?
        .relu();
    Ok(hidden.linear(p.get("transfer.fc2.weight")?, p.get("transfer.fc2.bias")?)?)
}
