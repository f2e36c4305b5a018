//! Stage 3: sentence-guided keyframe highlighting, then attention over the
//! person's own motion, the overall prompt, and the partner's motion.

use rand::Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::model::attention::MixedAttention;
use crate::nn::{feed_forwards, FeedForward, LayerNorm, Linear};

/// `x + λ·MLP(LN(x)·LN(F_s)ᵀ)`, with the MLP a per-frame `1 → D` affine.
#[derive(Clone, Copy, Debug)]
pub struct Highlight {
    pub ln_motion: LayerNorm,
    pub ln_sentence: LayerNorm,
    pub mlp: Linear,
}

impl Highlight {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln_motion: LayerNorm::new(store, &format!("{name}.ln_motion"), width),
            ln_sentence: LayerNorm::new(store, &format!("{name}.ln_sentence"), width),
            mlp: Linear::new(store, &format!("{name}.mlp"), 1, width, rng),
        }
    }

    /// The `S × D` highlight map `M_tm`.
    pub fn map(&self, tape: &mut Tape, store: &ParamStore, x: Var, sentence: Var) -> Result<Var> {
        let (s_rows, width) = tape.shape(x);
        if tape.shape(sentence) != (1, width) {
            return Err(Error::invalid(format!(
                "sentence feature {:?} does not match motion width {width}",
                tape.shape(sentence)
            )));
        }
        let a = self.ln_motion.forward(tape, store, x);
        let b = self.ln_sentence.forward(tape, store, sentence);
        let sim = tape.matmul_t(a, b);
        debug_assert_eq!(tape.shape(sim), (s_rows, 1));
        Ok(self.mlp.forward(tape, store, sim))
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, sentence: Var, lambda: f64) -> Result<Var> {
        if lambda == 0.0 {
            return Ok(x);
        }
        let m = self.map(tape, store, x, sentence)?;
        let m = tape.scale(m, lambda);
        Ok(tape.add(x, m))
    }
}

/// Per-person highlight and interactive attention layers.
#[derive(Clone, Debug)]
pub struct RefinementStage {
    highlight: [Highlight; 2],
    layers: [Vec<MixedAttention>; 2],
    ffn: [Vec<FeedForward>; 2],
    pub lambda: f64,
}

impl RefinementStage {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        text_width: usize,
        layer_count: usize,
        ffn_hidden: usize,
        lambda: f64,
        share_weights: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let mut build = |tag: &str| -> (Highlight, Vec<MixedAttention>, Vec<FeedForward>) {
            let h = Highlight::new(store, &format!("{name}.{tag}.highlight"), width, rng);
            let layers = (0..layer_count)
                .map(|l| {
                    MixedAttention::new(
                        store,
                        &format!("{name}.{tag}.layer{l}"),
                        width,
                        width,
                        &[text_width, width],
                        rng,
                    )
                })
                .collect();
            let ffn = feed_forwards(store, &format!("{name}.{tag}"), layer_count, width, ffn_hidden, rng);
            (h, layers, ffn)
        };
        let (h1, l1, f1) = build(if share_weights { "shared" } else { "person1" });
        let (h2, l2, f2) = if share_weights { (h1, l1.clone(), f1.clone()) } else { build("person2") };
        Self { highlight: [h1, h2], layers: [l1, l2], ffn: [f1, f2], lambda }
    }

    pub fn layer_count(&self) -> usize {
        self.layers[0].len()
    }

    pub fn highlight(&self, person: usize) -> &Highlight {
        &self.highlight[person]
    }

    pub fn layers(&self, person: usize) -> &[MixedAttention] {
        &self.layers[person]
    }

    /// Zeroes value projections, feed-forward outputs and the highlight MLP,
    /// making the stage a no-op.
    pub fn zero_residual_branches(&self, store: &mut ParamStore) {
        for p in 0..2 {
            self.highlight[p].mlp.zero(store);
            for l in &self.layers[p] {
                l.zero_values(store);
            }
            for f in &self.ffn[p] {
                f.zero_output(store);
            }
        }
    }

    /// One person's refinement given the partner's stage-2 features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_person(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        person: usize,
        x: Var,
        partner: Var,
        words: Var,
        sentence: Var,
        pos: Option<Var>,
    ) -> Result<Var> {
        if tape.shape(partner) != tape.shape(x) {
            return Err(Error::invalid(format!(
                "partner features {:?} differ from own {:?}",
                tape.shape(partner),
                tape.shape(x)
            )));
        }
        let mut h = self.highlight[person].forward(tape, store, x, sentence, self.lambda)?;
        let partner_in = match pos {
            Some(p) => tape.add(partner, p),
            None => partner,
        };
        for (l, layer) in self.layers[person].iter().enumerate() {
            let q_in = match pos {
                Some(p) => tape.add(h, p),
                None => h,
            };
            let y = layer.forward(tape, store, q_in, &[words, partner_in])?;
            h = tape.add(h, y);
            if let Some(f) = self.ffn[person].get(l) {
                let y = f.forward(tape, store, h);
                h = tape.add(h, y);
            }
        }
        Ok(h)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: [Var; 2],
        words: Var,
        sentence: Var,
        pos: Option<Var>,
    ) -> Result<[Var; 2]> {
        let a = self.forward_person(tape, store, 0, features[0], features[1], words, sentence, pos)?;
        let b = self.forward_person(tape, store, 1, features[1], features[0], words, sentence, pos)?;
        Ok([a, b])
    }
}
