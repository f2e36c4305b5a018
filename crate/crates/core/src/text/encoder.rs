//! Word-level text features.
//!
//! A frozen token embedder (any [`FrozenEncoder`]; the default
//! [`HashEmbedder`] needs no vocabulary or pretrained weights) produces an
//! `N_w × L` matrix, which a trainable stack of transformer encoder layers
//! then refines. Empty text maps to a single learned null-token row.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::nn::{gaussian, positional, LayerNorm, Linear};
use crate::tensor::Mat;

/// Splits on whitespace; punctuation characters become their own tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if ch.is_alphanumeric() || ch == '\'' || ch == '-' {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            tokens.push(cur);
        }
    }
    tokens
}

/// Pretrained-style text feature extractor that is not trained further.
pub trait FrozenEncoder: Send + Sync {
    /// Width `L` of each token row.
    fn width(&self) -> usize;

    /// `N_w × L` token features, or `None` for text without tokens.
    fn embed(&self, text: &str) -> Option<Mat>;
}

/// Vocabulary-free embedder: each token seeds a generator through a hash
/// and draws a fixed Gaussian vector; sinusoidal position offsets are added.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    width: usize,
}

impl HashEmbedder {
    pub fn new(width: usize) -> Self {
        Self { width }
    }

    /// The frozen table row for one token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let digest = Sha256::digest(token.as_bytes());
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.width).map(|_| -> f64 { StandardNormal.sample(&mut rng) }).collect()
    }
}

impl FrozenEncoder for HashEmbedder {
    fn width(&self) -> usize {
        self.width
    }

    fn embed(&self, text: &str) -> Option<Mat> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return None;
        }
        let mut m = positional(tokens.len(), self.width);
        for (r, tok) in tokens.iter().enumerate() {
            for (o, v) in m.row_mut(r).iter_mut().zip(self.token_vector(tok)) {
                *o += v;
            }
        }
        Some(m)
    }
}

#[derive(Clone, Copy, Debug)]
struct EncoderLayer {
    ln_attn: LayerNorm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Trainable transformer encoder stack on top of a frozen embedder.
#[derive(Clone)]
pub struct TextEncoder {
    frozen: Arc<dyn FrozenEncoder>,
    null_token: ParamId,
    layers: Vec<EncoderLayer>,
}

impl fmt::Debug for TextEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TextEncoder")
            .field("width", &self.frozen.width())
            .field("layers", &self.layers.len())
            .finish()
    }
}

impl TextEncoder {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        frozen: Arc<dyn FrozenEncoder>,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let width = frozen.width();
        let null_token = store.add(format!("{prefix}.null_token"), gaussian(rng, 1, width, 1.0));
        let layers = (0..layers)
            .map(|i| {
                let p = format!("{prefix}.layer{i}");
                EncoderLayer {
                    ln_attn: LayerNorm::new(store, &format!("{p}.ln_attn"), width),
                    query: Linear::new(store, &format!("{p}.query"), width, width, rng),
                    key: Linear::new(store, &format!("{p}.key"), width, width, rng),
                    value: Linear::new(store, &format!("{p}.value"), width, width, rng),
                    out: Linear::new(store, &format!("{p}.out"), width, width, rng),
                    ln_ff: LayerNorm::new(store, &format!("{p}.ln_ff"), width),
                    ff_in: Linear::new(store, &format!("{p}.ff_in"), width, 2 * width, rng),
                    ff_out: Linear::new(store, &format!("{p}.ff_out"), 2 * width, width, rng),
                }
            })
            .collect();
        Self { frozen, null_token, layers }
    }

    pub fn width(&self) -> usize {
        self.frozen.width()
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Frozen features fed into the trainable stack (`None` for empty text).
    pub fn frozen_features(&self, text: &str) -> Option<Mat> {
        self.frozen.embed(text)
    }

    /// Runs the trainable stack on precomputed frozen features.
    pub fn forward_features(&self, tape: &mut Tape, store: &ParamStore, frozen: Option<&Mat>) -> Var {
        let mut x = match frozen {
            Some(m) => tape.constant(m.clone()),
            None => tape.param(store, self.null_token),
        };
        let scale = 1.0 / (self.width() as f64).sqrt();
        for layer in &self.layers {
            let h = layer.ln_attn.forward(tape, store, x);
            let q = layer.query.forward(tape, store, h);
            let k = layer.key.forward(tape, store, h);
            let v = layer.value.forward(tape, store, h);
            let logits = tape.matmul_t(q, k);
            let logits = tape.scale(logits, scale);
            let attn = tape.softmax_rows(logits);
            let ctx = tape.matmul(attn, v);
            let o = layer.out.forward(tape, store, ctx);
            x = tape.add(x, o);
            let h = layer.ln_ff.forward(tape, store, x);
            let f = layer.ff_in.forward(tape, store, h);
            let f = tape.relu(f);
            let f = layer.ff_out.forward(tape, store, f);
            x = tape.add(x, f);
        }
        x
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, text: &str) -> Var {
        let frozen = self.frozen_features(text);
        self.forward_features(tape, store, frozen.as_ref())
    }

    /// `N_w × L` word features of `text`.
    pub fn encode(&self, store: &ParamStore, text: &str) -> Mat {
        let mut tape = Tape::new();
        let v = self.forward(&mut tape, store, text);
        tape.value(v).clone()
    }
}

/// Mean-pools word features and maps them to the motion latent width.
#[derive(Clone, Copy, Debug)]
pub struct SentenceProjection {
    pub linear: Linear,
}

impl SentenceProjection {
    pub fn new(store: &mut ParamStore, name: &str, text_width: usize, latent: usize, rng: &mut impl Rng) -> Self {
        Self { linear: Linear::new(store, name, text_width, latent, rng) }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, words: Var) -> Var {
        let pooled = tape.mean_rows(words);
        self.linear.forward(tape, store, pooled)
    }
}

/// `1 × D` sentence feature from `N_w × L` word features.
pub fn sentence_feature(store: &ParamStore, proj: &SentenceProjection, words: &Mat) -> Mat {
    let mut tape = Tape::new();
    let w = tape.constant(words.clone());
    let out = proj.forward(&mut tape, store, w);
    tape.value(out).clone()
}
