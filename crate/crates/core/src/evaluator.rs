//! A small contrastive motion/text embedder for the embedding-based metrics.
//!
//! Its numbers are only comparable between runs that share the evaluator
//! checkpoint; they say nothing about published benchmark values.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamStore, Tape, Var};
use crate::dataset::{FeatureStats, Sample};
use crate::error::{Error, Result};
use crate::metrics::EmbeddingSet;
use crate::motion::DualMotion;
use crate::nn::Linear;
use crate::optim::{clip_global_norm, Adam};
use crate::tensor::Mat;
use crate::text::{FrozenEncoder, HashEmbedder};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluatorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    /// Temporal chunks pooled separately in the motion encoder.
    pub chunks: usize,
    pub text_width: usize,
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub temperature: f64,
}

impl Default for EvaluatorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 32,
            hidden: 64,
            chunks: 4,
            text_width: 64,
            steps: 500,
            batch: 32,
            learning_rate: 1e-3,
            temperature: 0.1,
        }
    }
}

impl EvaluatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 2 || self.hidden == 0 || self.chunks == 0 || self.text_width == 0 || self.batch < 2 {
            return Err(Error::Config("evaluator dimensions too small".into()));
        }
        if !(self.learning_rate > 0.0 && self.temperature > 0.0) {
            return Err(Error::Config("evaluator learning_rate and temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Two-layer motion and text encoders sharing one embedding space.
#[derive(Clone, Debug)]
pub struct ToyEvaluator {
    pub config: EvaluatorConfig,
    pub store: ParamStore,
    pub stats: FeatureStats,
    frames: usize,
    motion_in: [Linear; 2],
    motion_out: Vec<Linear>,
    text_in: Linear,
    text_out: Linear,
    frozen: HashEmbedder,
}

impl ToyEvaluator {
    pub fn new(config: EvaluatorConfig, stats: FeatureStats, frames: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if frames < config.chunks {
            return Err(Error::Config(format!("{frames} frames cannot form {} chunks", config.chunks)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h, e) = (stats.width(), config.hidden, config.embed_dim);
        let motion_in = [
            Linear::new(&mut store, "eval.motion.in1", d, h, &mut rng),
            Linear::no_bias(&mut store, "eval.motion.in2", d, h, &mut rng),
        ];
        let motion_out = (0..config.chunks)
            .map(|c| {
                let name = format!("eval.motion.out{c}");
                if c == 0 {
                    Linear::new(&mut store, &name, h, e, &mut rng)
                } else {
                    Linear::no_bias(&mut store, &name, h, e, &mut rng)
                }
            })
            .collect();
        let text_in = Linear::new(&mut store, "eval.text.in", config.text_width, h, &mut rng);
        let text_out = Linear::new(&mut store, "eval.text.out", h, e, &mut rng);
        let frozen = HashEmbedder::new(config.text_width);
        Ok(Self { config, store, stats, frames, motion_in, motion_out, text_in, text_out, frozen })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn motion_var(&self, tape: &mut Tape, store: &ParamStore, motion: &DualMotion) -> Result<Var> {
        if motion.frame_count() != self.frames || motion.feature_dim() != self.stats.width() {
            return Err(Error::invalid(format!(
                "evaluator expects {} frames of width {}, got {}×{}",
                self.frames,
                self.stats.width(),
                motion.frame_count(),
                motion.feature_dim()
            )));
        }
        let a = tape.constant(self.stats.normalize(&motion.person1.to_mat()));
        let b = tape.constant(self.stats.normalize(&motion.person2.to_mat()));
        let ha = self.motion_in[0].forward(tape, store, a);
        let hb = self.motion_in[1].forward(tape, store, b);
        let h = tape.add(ha, hb);
        let h = tape.relu(h);
        let k = self.motion_out.len();
        let mut out: Option<Var> = None;
        for (c, lin) in self.motion_out.iter().enumerate() {
            let (lo, hi) = (c * self.frames / k, (c + 1) * self.frames / k);
            let chunk = tape.slice_rows(h, lo, hi);
            let pooled = tape.mean_rows(chunk);
            let y = lin.forward(tape, store, pooled);
            out = Some(match out {
                Some(acc) => tape.add(acc, y),
                None => y,
            });
        }
        let out = out.expect("at least one chunk");
        Ok(tape.normalize_rows(out))
    }

    fn text_var(&self, tape: &mut Tape, store: &ParamStore, text: &str) -> Var {
        let tokens = self.frozen.embed(text).unwrap_or_else(|| Mat::zeros(1, self.config.text_width));
        let x = tape.constant(tokens);
        let h = self.text_in.forward(tape, store, x);
        let h = tape.relu(h);
        let pooled = tape.mean_rows(h);
        let y = self.text_out.forward(tape, store, pooled);
        tape.normalize_rows(y)
    }

    pub fn embed_motions(&self, motions: &[&DualMotion]) -> Result<EmbeddingSet> {
        let mut rows = Vec::with_capacity(motions.len());
        for m in motions {
            let mut tape = Tape::new();
            let v = self.motion_var(&mut tape, &self.store, m)?;
            rows.push(tape.value(v).data().to_vec());
        }
        Ok(EmbeddingSet::new(stack(rows, self.config.embed_dim), "motion"))
    }

    pub fn embed_texts(&self, texts: &[&str]) -> EmbeddingSet {
        let rows = texts
            .iter()
            .map(|t| {
                let mut tape = Tape::new();
                let v = self.text_var(&mut tape, &self.store, t);
                tape.value(v).data().to_vec()
            })
            .collect();
        EmbeddingSet::new(stack(rows, self.config.embed_dim), "text")
    }

    /// Symmetric InfoNCE loss of one batch.
    fn batch_loss(&self, tape: &mut Tape, store: &ParamStore, batch: &[&Sample]) -> Result<Var> {
        let mut m = Vec::with_capacity(batch.len());
        let mut t = Vec::with_capacity(batch.len());
        for s in batch {
            m.push(self.motion_var(tape, store, &s.motion)?);
            t.push(self.text_var(tape, store, &s.prompts.overall));
        }
        let m = tape.vstack(&m);
        let t = tape.vstack(&t);
        let logits = tape.matmul_t(m, t);
        let logits = tape.scale(logits, 1.0 / (self.config.embed_dim as f64 * self.config.temperature));
        let eye = tape.constant(Mat::identity(batch.len()));
        let mut total: Option<Var> = None;
        for probs in [tape.softmax_rows(logits), tape.softmax_cols(logits)] {
            let logp = tape.log(probs);
            let diag = tape.mul(logp, eye);
            let s = tape.sum_all(diag);
            total = Some(match total {
                Some(acc) => tape.add(acc, s),
                None => s,
            });
        }
        Ok(tape.scale(total.expect("two terms"), -0.5 / batch.len() as f64))
    }
}

fn stack(rows: Vec<Vec<f64>>, width: usize) -> Mat {
    let n = rows.len();
    Mat::from_vec(n, width, rows.into_iter().flatten().collect())
}

/// Trains a fresh evaluator on `samples` (overall prompts only).
pub fn train_toy_evaluator(samples: &[Sample], config: &EvaluatorConfig, seed: u64) -> Result<ToyEvaluator> {
    let first = samples.first().ok_or_else(|| Error::invalid("cannot train an evaluator on an empty dataset"))?;
    let stats = FeatureStats::from_samples(samples)?;
    let mut eval = ToyEvaluator::new(config.clone(), stats, first.motion.frame_count(), seed)?;
    let mut opt = Adam::new(&eval.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_e7a1);
    let batch = config.batch.min(samples.len()).max(1);
    for _ in 0..config.steps {
        // Distinct samples within a batch keep the contrastive targets unambiguous.
        let picks = rand::seq::index::sample(&mut rng, samples.len(), batch);
        let chosen: Vec<&Sample> = picks.iter().map(|i| &samples[i]).collect();
        let mut tape = Tape::new();
        let loss = eval.batch_loss(&mut tape, &eval.store, &chosen)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::numeric("evaluator loss is not finite"));
        }
        let grads = tape.backward(loss).param_grads(&tape, eval.store.len());
        let mut dense: Vec<Mat> = grads
            .into_iter()
            .zip(eval.store.values())
            .map(|(g, p)| g.unwrap_or_else(|| Mat::zeros(p.rows(), p.cols())))
            .collect();
        clip_global_norm(&mut dense, 1.0);
        opt.update(&mut eval.store, &dense, config.learning_rate);
    }
    Ok(eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::mm_dist;
    use crate::synth::{synth_corpus, SynthConfig};

    fn quick() -> EvaluatorConfig {
        EvaluatorConfig { steps: 150, batch: 16, ..EvaluatorConfig::default() }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(train_toy_evaluator(&[], &quick(), 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn deterministic_with_configured_width() {
        let data = synth_corpus(12, &SynthConfig::default(), 0).unwrap();
        let cfg = EvaluatorConfig { steps: 5, batch: 4, ..EvaluatorConfig::default() };
        let a = train_toy_evaluator(&data, &cfg, 3).unwrap();
        let b = train_toy_evaluator(&data, &cfg, 3).unwrap();
        assert_eq!(a.store, b.store);
        let e = a.embed_texts(&["two people walk toward each other."]);
        assert_eq!(e.width(), 32);
    }

    #[test]
    fn matched_pairs_closer_than_mismatched() {
        let train = synth_corpus(200, &SynthConfig::default(), 0).unwrap();
        let held = synth_corpus(50, &SynthConfig::default(), 10_000).unwrap();
        let eval = train_toy_evaluator(&train, &quick(), 1).unwrap();
        let motions: Vec<&DualMotion> = held.iter().map(|s| &s.motion).collect();
        let texts: Vec<&str> = held.iter().map(|s| s.prompts.overall.as_str()).collect();
        // Mismatch by pairing each motion with the text of the next scenario.
        let shifted: Vec<&str> = (0..held.len()).map(|i| texts[(i + 1) % held.len()]).collect();
        let m = eval.embed_motions(&motions).unwrap();
        let matched = mm_dist(&m, &eval.embed_texts(&texts)).unwrap();
        let mismatched = mm_dist(&m, &eval.embed_texts(&shifted)).unwrap();
        assert!(matched < mismatched, "{matched} vs {mismatched}");
    }
}
