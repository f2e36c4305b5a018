//! The full tri-stage denoiser: predicts clean features `x0` for both
//! persons from noisy features, a timestep and a text bundle.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::diffusion::{Denoiser, PairFeatures};
use crate::error::{Error, Result};
use crate::model::adaptive::{AdaptiveStage, AdjacencyMode, DistancePredictor, InteractionGraph};
use crate::model::attention::SelfLearningStage;
use crate::model::refinement::RefinementStage;
use crate::motion::{feature_dim, segment_bounds};
use crate::nn::{positional, sinusoidal, Linear};
use crate::tensor::Mat;
use crate::text::{FrozenEncoder, HashEmbedder, PromptRecord, SentenceProjection, TextEncoder};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub joint_count: usize,
    pub frames: usize,
    pub latent_dim: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub self_layers: usize,
    pub graph_layers: usize,
    pub refine_layers: usize,
    pub segments: usize,
    pub lambda_s2: f64,
    pub lambda_s3: f64,
    pub share_person_weights: bool,
    pub adjacency_mode: AdjacencyMode,
    pub adjacency_noise: f64,
    pub predictor_hidden: usize,
    /// Hidden width of the feed-forward block after each attention layer; `0` omits it.
    pub ffn_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            joint_count: 5,
            frames: 60,
            latent_dim: 64,
            text_width: 64,
            text_layers: 2,
            self_layers: 2,
            graph_layers: 2,
            refine_layers: 3,
            segments: 3,
            lambda_s2: 0.1,
            lambda_s3: 0.1,
            share_person_weights: false,
            adjacency_mode: AdjacencyMode::Hadamard,
            adjacency_noise: 0.01,
            predictor_hidden: 64,
            ffn_hidden: 128,
        }
    }
}

impl ModelConfig {
    pub fn motion_dim(&self) -> Result<usize> {
        feature_dim(self.joint_count)
    }

    pub fn validate(&self) -> Result<()> {
        self.motion_dim()?;
        let positive = [
            ("frames", self.frames),
            ("latent_dim", self.latent_dim),
            ("text_width", self.text_width),
            ("segments", self.segments),
            ("predictor_hidden", self.predictor_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.segments > self.frames {
            return Err(Error::Config(format!("model.segments {} exceeds frames {}", self.segments, self.frames)));
        }
        for (name, v) in [("lambda_s2", self.lambda_s2), ("lambda_s3", self.lambda_s3), ("adjacency_noise", self.adjacency_noise)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("model.{name} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Frozen token features of the overall prompt and both individual
/// prompts; `None` selects the learned null token.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TextBundle {
    pub overall: Option<Mat>,
    pub person: [Option<Mat>; 2],
}

impl TextBundle {
    /// The unconditional bundle used for guidance and condition dropout.
    pub fn null() -> Self {
        Self::default()
    }

    pub fn is_null(&self) -> bool {
        self.overall.is_none() && self.person.iter().all(Option::is_none)
    }
}

/// Per-forward outputs needed for the loss and inspection.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub x0: [Var; 2],
    /// `1 × K` predicted distance profile.
    pub profile: Var,
}

/// Tri-stage denoiser and its parameters.
#[derive(Clone, Debug)]
pub struct FineDual {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub text: TextEncoder,
    pub sentence: SentenceProjection,
    pub time_in: Linear,
    pub time_out: Linear,
    pub input: Linear,
    pub stage1: SelfLearningStage,
    pub stage2: AdaptiveStage,
    pub stage3: RefinementStage,
    pub head: Linear,
    positions: Mat,
}

impl FineDual {
    /// Builds with the default hash embedder as frozen text encoder.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let frozen = Arc::new(HashEmbedder::new(config.text_width));
        Self::with_frozen(config, frozen, seed)
    }

    pub fn with_frozen(config: ModelConfig, frozen: Arc<dyn FrozenEncoder>, seed: u64) -> Result<Self> {
        config.validate()?;
        if frozen.width() != config.text_width {
            return Err(Error::Config(format!(
                "frozen encoder width {} != model.text_width {}",
                frozen.width(),
                config.text_width
            )));
        }
        let c = &config;
        let d = c.latent_dim;
        let motion = c.motion_dim()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, "text", frozen, c.text_layers, &mut rng);
        let sentence = SentenceProjection::new(&mut store, "sentence", c.text_width, d, &mut rng);
        let time_in = Linear::new(&mut store, "time.in", d, d, &mut rng);
        let time_out = Linear::new(&mut store, "time.out", d, d, &mut rng);
        let input = Linear::new(&mut store, "input", motion, d, &mut rng);
        let stage1 = SelfLearningStage::new(
            &mut store,
            "stage1",
            d,
            c.text_width,
            c.self_layers,
            c.ffn_hidden,
            c.share_person_weights,
            &mut rng,
        );
        let predictor = DistancePredictor::new(&mut store, "stage2.predictor", c.text_width, c.predictor_hidden, c.segments, &mut rng);
        let graph = InteractionGraph::new(
            &mut store,
            "stage2.graph",
            c.frames,
            c.graph_layers,
            c.adjacency_noise,
            c.adjacency_mode,
            &mut rng,
        );
        let stage2 = AdaptiveStage::new(predictor, graph, c.lambda_s2, segment_bounds(c.frames, c.segments)?);
        let stage3 = RefinementStage::new(
            &mut store,
            "stage3",
            d,
            c.text_width,
            c.refine_layers,
            c.ffn_hidden,
            c.lambda_s3,
            c.share_person_weights,
            &mut rng,
        );
        let head = Linear::new(&mut store, "head", d, motion, &mut rng);
        let positions = positional(c.frames, d);
        Ok(Self { config, store, text, sentence, time_in, time_out, input, stage1, stage2, stage3, head, positions })
    }

    pub fn motion_dim(&self) -> usize {
        self.store.get(self.head.weight).cols()
    }

    /// Frozen features of a decomposed prompt.
    pub fn bundle(&self, record: &PromptRecord) -> TextBundle {
        TextBundle {
            overall: self.text.frozen_features(&record.overall),
            person: [self.text.frozen_features(&record.person1), self.text.frozen_features(&record.person2)],
        }
    }

    /// `1 × D` timestep embedding.
    pub fn time_embedding(&self, tape: &mut Tape, store: &ParamStore, t: usize) -> Var {
        let base = tape.constant(sinusoidal(&[t as f64], self.config.latent_dim));
        let h = self.time_in.forward(tape, store, base);
        let h = tape.silu(h);
        self.time_out.forward(tape, store, h)
    }

    /// Records the full forward pass on `tape` using parameters from `store`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x_t: [Var; 2],
        t: usize,
        text: &TextBundle,
    ) -> Result<ForwardOutput> {
        let want = (self.config.frames, self.motion_dim());
        for &x in &x_t {
            if tape.shape(x) != want {
                return Err(Error::invalid(format!("noisy features {:?}, expected {want:?}", tape.shape(x))));
            }
        }
        let temb = self.time_embedding(tape, store, t);
        let pos = tape.constant(self.positions.clone());
        let words_g = self.text.forward_features(tape, store, text.overall.as_ref());
        let words = [
            self.text.forward_features(tape, store, text.person[0].as_ref()),
            self.text.forward_features(tape, store, text.person[1].as_ref()),
        ];
        let sentence = self.sentence.forward(tape, store, words_g);

        let mut h = [self.input.forward(tape, store, x_t[0]), self.input.forward(tape, store, x_t[1])];
        for x in &mut h {
            *x = tape.add_row(*x, temb);
        }
        let h = self.stage1.forward(tape, store, h, &words, Some(pos))?;
        let h = [tape.add_row(h[0], temb), tape.add_row(h[1], temb)];
        let (h, profile) = self.stage2.forward(tape, store, h, words_g)?;
        let h = [tape.add_row(h[0], temb), tape.add_row(h[1], temb)];
        let h = self.stage3.forward(tape, store, h, words_g, sentence, Some(pos))?;
        let x0 = [self.head.forward(tape, store, h[0]), self.head.forward(tape, store, h[1])];
        Ok(ForwardOutput { x0, profile })
    }

    pub fn forward(&self, tape: &mut Tape, x_t: [Var; 2], t: usize, text: &TextBundle) -> Result<ForwardOutput> {
        self.forward_with(tape, &self.store, x_t, t, text)
    }

    /// Predicted `x0` and distance profile without gradient bookkeeping.
    pub fn predict(&self, x_t: &PairFeatures, t: usize, text: &TextBundle) -> Result<(PairFeatures, Vec<f64>)> {
        let mut tape = Tape::new();
        let xs = [tape.constant(x_t[0].clone()), tape.constant(x_t[1].clone())];
        let out = self.forward(&mut tape, xs, t, text)?;
        let x0 = [tape.value(out.x0[0]).clone(), tape.value(out.x0[1]).clone()];
        if !x0[0].is_finite() || !x0[1].is_finite() {
            return Err(Error::numeric(format!("denoiser produced non-finite output at timestep {t}")));
        }
        Ok((x0, tape.value(out.profile).data().to_vec()))
    }

    /// Predicted profile for the overall prompt alone.
    pub fn predict_profile(&self, text: &TextBundle) -> Vec<f64> {
        let mut tape = Tape::new();
        let words = self.text.forward_features(&mut tape, &self.store, text.overall.as_ref());
        let p = self.stage2.predictor.forward(&mut tape, &self.store, words);
        tape.value(p).data().to_vec()
    }

    /// Zeroes every residual branch and sets the input projection and head to
    /// identity maps, which turns the whole denoiser into the identity.
    /// Requires `latent_dim` equal to the motion feature width.
    pub fn make_identity(&mut self) -> Result<()> {
        let motion = self.motion_dim();
        if self.config.latent_dim != motion {
            return Err(Error::invalid(format!(
                "identity needs latent_dim == motion width ({} vs {motion})",
                self.config.latent_dim
            )));
        }
        let store = &mut self.store;
        self.time_in.zero(store);
        self.time_out.zero(store);
        self.stage1.zero_residual_branches(store);
        self.stage2.graph.zero(store);
        self.stage3.zero_residual_branches(store);
        for lin in [self.input, self.head] {
            *store.get_mut(lin.weight) = Mat::identity(motion);
            if let Some(b) = lin.bias {
                store.get_mut(b).scale_assign(0.0);
            }
        }
        Ok(())
    }
}

impl Denoiser for FineDual {
    type Condition = TextBundle;

    fn predict_x0(&self, x_t: &PairFeatures, t: usize, cond: &TextBundle) -> Result<PairFeatures> {
        Ok(self.predict(x_t, t, cond)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_param_gradients, sample_entries};
    use crate::nn::gaussian;
    use crate::text::{decompose_prompt, PromptSource};

    fn small() -> ModelConfig {
        ModelConfig {
            joint_count: 3,
            frames: 4,
            latent_dim: 40,
            text_width: 8,
            predictor_hidden: 6,
            segments: 2,
            ..ModelConfig::default()
        }
    }

    fn noisy(cfg: &ModelConfig, seed: u64) -> PairFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.motion_dim().unwrap();
        [gaussian(&mut rng, cfg.frames, d, 1.0), gaussian(&mut rng, cfg.frames, d, 1.0)]
    }

    fn bundle(model: &FineDual) -> TextBundle {
        model.bundle(&decompose_prompt("one person waves, the other person claps.", None))
    }

    #[test]
    fn defaults_match_architecture() {
        let c = ModelConfig::default();
        assert_eq!((c.self_layers, c.graph_layers, c.refine_layers), (2, 2, 3));
        assert_eq!(c.segments, 3);
        assert_eq!((c.lambda_s2, c.lambda_s3), (0.1, 0.1));
        assert_eq!(c.motion_dim().unwrap(), 64);
    }

    #[test]
    fn identity_chain() {
        let cfg = ModelConfig { latent_dim: 40, ..small() };
        let mut model = FineDual::new(cfg.clone(), 3).unwrap();
        model.make_identity().unwrap();
        let x = noisy(&cfg, 1);
        let (out, _) = model.predict(&x, 17, &bundle(&model)).unwrap();
        assert!(out[0].max_abs_diff(&x[0]) < 1e-9);
        assert!(out[1].max_abs_diff(&x[1]) < 1e-9);
    }

    #[test]
    fn shapes_and_determinism() {
        let cfg = small();
        let a = FineDual::new(cfg.clone(), 5).unwrap();
        let b = FineDual::new(cfg.clone(), 5).unwrap();
        let x = noisy(&cfg, 2);
        let text = bundle(&a);
        let (pa, prof) = a.predict(&x, 3, &text).unwrap();
        let (pb, _) = b.predict(&x, 3, &text).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(pa[0].shape(), (4, 40));
        assert!((prof.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (pn, _) = a.predict(&x, 3, &TextBundle::null()).unwrap();
        assert_ne!(pn, pa);
    }

    #[test]
    fn rejects_wrong_shapes() {
        let cfg = small();
        let model = FineDual::new(cfg.clone(), 5).unwrap();
        let bad = [Mat::zeros(3, 40), Mat::zeros(3, 40)];
        assert!(matches!(model.predict(&bad, 0, &TextBundle::null()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn full_model_gradients() {
        let cfg = small();
        let mut model = FineDual::new(cfg.clone(), 7).unwrap();
        let x = noisy(&cfg, 3);
        let target = noisy(&cfg, 4);
        let record = PromptRecord {
            overall: "two people shake hands.".into(),
            person1: "he reaches out.".into(),
            person2: "he grabs the hand.".into(),
            source: PromptSource::Rule,
        };
        let text = model.bundle(&record);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let entries = sample_entries(&model.store, 0.01, &mut rng);
        let mut store = model.store.clone();
        let frozen = model.clone();
        let report = check_param_gradients(&mut store, &entries, 1e-4, |tape, store| {
            let xs = [tape.constant(x[0].clone()), tape.constant(x[1].clone())];
            let out = frozen.forward_with(tape, store, xs, 11, &text)?;
            let t0 = tape.constant(target[0].clone());
            let t1 = tape.constant(target[1].clone());
            let a = tape.mse(out.x0[0], t0);
            let b = tape.mse(out.x0[1], t1);
            let l = tape.add(a, b);
            let d = crate::model::adaptive::distance_loss_var(tape, out.profile, &[0.6, 0.4]);
            Ok(tape.add(l, d))
        })
        .unwrap();
        model.store = store;
        assert!(report.checked > 10);
        assert!(report.max_relative_error < 1e-3, "{report:?}");
    }
}
