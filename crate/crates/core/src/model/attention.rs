//! Mixed attention in the efficient (linear-complexity) factorization, and
//! the per-person self-learning stage built from it.
//!
//! Keys and values concatenate projected motion rows with projected rows
//! from one or more context sources (text tokens, partner motion). Keys are
//! normalized along the token axis, queries along the feature axis:
//!
//! ```text
//! G = softmax_tokens(Key)ᵀ · Value      (d × D)
//! Y = softmax_features(Query) · G       (S × D)
//! ```

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{feed_forwards, FeedForward, Linear};

/// Key/value projections for one context source.
#[derive(Clone, Copy, Debug)]
pub struct SourceProjection {
    pub key: Linear,
    pub value: Linear,
}

/// Trainable matrices of one mixed-attention layer.
#[derive(Clone, Debug)]
pub struct MixedAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub sources: Vec<SourceProjection>,
    width: usize,
    attn_width: usize,
    source_widths: Vec<usize>,
}

impl MixedAttention {
    /// `width` is the motion feature width `D`; each entry of
    /// `source_widths` is the row width of one context source.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        attn_width: usize,
        source_widths: &[usize],
        rng: &mut impl Rng,
    ) -> Self {
        let query = Linear::no_bias(store, &format!("{name}.query"), width, attn_width, rng);
        let key = Linear::no_bias(store, &format!("{name}.key"), width, attn_width, rng);
        let value = Linear::no_bias(store, &format!("{name}.value"), width, width, rng);
        let sources = source_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| SourceProjection {
                key: Linear::no_bias(store, &format!("{name}.src{i}.key"), w, attn_width, rng),
                value: Linear::no_bias(store, &format!("{name}.src{i}.value"), w, width, rng),
            })
            .collect();
        Self { query, key, value, sources, width, attn_width, source_widths: source_widths.to_vec() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn attn_width(&self) -> usize {
        self.attn_width
    }

    /// Zeroes every value projection, which makes the layer output zero.
    pub fn zero_values(&self, store: &mut ParamStore) {
        self.value.zero(store);
        for s in &self.sources {
            s.value.zero(store);
        }
    }

    /// Attention output `Y` (without residual). `x` is `S × D`; `sources`
    /// must match the widths given at construction.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, sources: &[Var]) -> Result<Var> {
        if tape.shape(x).1 != self.width {
            return Err(Error::invalid(format!(
                "motion width {} != attention width {}",
                tape.shape(x).1,
                self.width
            )));
        }
        if sources.len() != self.sources.len() {
            return Err(Error::invalid(format!(
                "expected {} context sources, got {}",
                self.sources.len(),
                sources.len()
            )));
        }
        for (i, (&src, &w)) in sources.iter().zip(&self.source_widths).enumerate() {
            if tape.shape(src).1 != w {
                return Err(Error::invalid(format!(
                    "context source {i} has width {}, expected {w}",
                    tape.shape(src).1
                )));
            }
        }
        let q = self.query.forward(tape, store, x);
        let mut keys = vec![self.key.forward(tape, store, x)];
        let mut values = vec![self.value.forward(tape, store, x)];
        for (proj, &src) in self.sources.iter().zip(sources) {
            keys.push(proj.key.forward(tape, store, src));
            values.push(proj.value.forward(tape, store, src));
        }
        let key = tape.vstack(&keys);
        let value = tape.vstack(&values);
        let key = tape.softmax_cols(key);
        let context = tape.tmatmul(key, value);
        let q = tape.softmax_rows(q);
        Ok(tape.matmul(q, context))
    }
}

/// Stage 1: each person attends over their own motion and own prompt.
#[derive(Clone, Debug)]
pub struct SelfLearningStage {
    /// `layers[person][layer]`; both persons alias the same layers when weights are shared.
    layers: [Vec<MixedAttention>; 2],
    /// Feed-forward block after each attention layer; empty when disabled.
    ffn: [Vec<FeedForward>; 2],
}

impl SelfLearningStage {
    /// `ffn_hidden = 0` leaves out the feed-forward blocks.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        text_width: usize,
        layer_count: usize,
        ffn_hidden: usize,
        share_weights: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut build = |tag: &str| -> (Vec<MixedAttention>, Vec<FeedForward>) {
            let layers = (0..layer_count)
                .map(|l| {
                    MixedAttention::new(store, &format!("{name}.{tag}.layer{l}"), width, width, &[text_width], rng)
                })
                .collect();
            let ffn = feed_forwards(store, &format!("{name}.{tag}"), layer_count, width, ffn_hidden, rng);
            (layers, ffn)
        };
        let (l1, f1) = build(if share_weights { "shared" } else { "person1" });
        let (l2, f2) = if share_weights { (l1.clone(), f1.clone()) } else { build("person2") };
        Self { layers: [l1, l2], ffn: [f1, f2] }
    }

    pub fn layer_count(&self) -> usize {
        self.layers[0].len()
    }

    pub fn layers(&self, person: usize) -> &[MixedAttention] {
        &self.layers[person]
    }

    pub fn zero_values(&self, store: &mut ParamStore) {
        for person in &self.layers {
            for l in person {
                l.zero_values(store);
            }
        }
    }

    /// Zeroes value projections and feed-forward outputs: the stage becomes a no-op.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        self.zero_values(store);
        for f in self.ffn.iter().flatten() {
            f.zero_output(store);
        }
    }

    /// `X^{s1}_i = X_i + Y^i`, layer by layer, each followed by the feed-forward residual. `pos` (if any) is added to
    /// the motion rows that feed the projections, not to the residual path.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: [Var; 2],
        texts: &[Var],
        pos: Option<Var>,
    ) -> Result<[Var; 2]> {
        if texts.len() != 2 {
            return Err(Error::contract(format!(
                "self-learning stage needs one decomposed prompt per person, got {}",
                texts.len()
            )));
        }
        let mut out = features;
        for person in 0..2 {
            let mut x = features[person];
            for (l, layer) in self.layers[person].iter().enumerate() {
                let h = match pos {
                    Some(p) => tape.add(x, p),
                    None => x,
                };
                let y = layer.forward(tape, store, h, &[texts[person]])?;
                x = tape.add(x, y);
                if let Some(f) = self.ffn[person].get(l) {
                    let y = f.forward(tape, store, x);
                    x = tape.add(x, y);
                }
            }
            out[person] = x;
        }
        Ok(out)
    }
}
