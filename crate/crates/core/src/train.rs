//! Training loop: noising, the tri-stage forward, `L1 + λ·L2`, condition
//! dropout, clipped Adam steps with cosine step-size decay.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Var};
use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::RunConfig;
use crate::dataset::{FeatureStats, Sample};
use crate::diffusion::{gaussian_like, q_sample, DiffusionSchedule, PairFeatures};
use crate::error::{Error, Result};
use crate::model::adaptive::{distance_loss_var, gt_profile_of};
use crate::model::{FineDual, TextBundle};
use crate::motion::segment_bounds;
use crate::optim::{clip_global_norm, Adam};
use crate::tensor::Mat;

/// A sample in model space: normalized features, frozen text, target profile.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub x0: PairFeatures,
    pub text: TextBundle,
    pub gt_profile: Vec<f64>,
}

/// Checks that `samples` fit the model shape, then normalizes and encodes them.
pub fn prepare(model: &FineDual, stats: &FeatureStats, samples: &[Sample]) -> Result<Vec<PreparedSample>> {
    let cfg = &model.config;
    let layout = segment_bounds(cfg.frames, cfg.segments)?;
    samples
        .iter()
        .map(|s| {
            let m = &s.motion;
            if m.frame_count() != cfg.frames || m.joint_count() != cfg.joint_count {
                return Err(Error::invalid(format!(
                    "sample '{}' has {} frames × {} joints; model expects {} × {}",
                    m.id,
                    m.frame_count(),
                    m.joint_count(),
                    cfg.frames,
                    cfg.joint_count
                )));
            }
            Ok(PreparedSample {
                id: m.id.clone(),
                x0: [stats.normalize(&m.person1.to_mat()), stats.normalize(&m.person2.to_mat())],
                text: model.bundle(&s.prompts),
                gt_profile: gt_profile_of(m, &layout)?.weights,
            })
        })
        .collect()
}

/// Loss nodes of one sample.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub total: Var,
    pub recon: Var,
    pub distance: Var,
}

/// Records `recon + λ·CE` for one noised sample on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    model: &FineDual,
    store: &ParamStore,
    tape: &mut Tape,
    sample: &PreparedSample,
    text: &TextBundle,
    x_t: &PairFeatures,
    t: usize,
    lambda_distance: f64,
) -> Result<LossNodes> {
    let xs = [tape.constant(x_t[0].clone()), tape.constant(x_t[1].clone())];
    let out = model.forward_with(tape, store, xs, t, text)?;
    let targets = [tape.constant(sample.x0[0].clone()), tape.constant(sample.x0[1].clone())];
    let a = tape.mse(out.x0[0], targets[0]);
    let b = tape.mse(out.x0[1], targets[1]);
    let sum = tape.add(a, b);
    let recon = tape.scale(sum, 0.5);
    let distance = distance_loss_var(tape, out.profile, &sample.gt_profile);
    let total = if lambda_distance == 0.0 {
        recon
    } else {
        let weighted = tape.scale(distance, lambda_distance);
        tape.add(recon, weighted)
    };
    Ok(LossNodes { total, recon, distance })
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Train with every text bundle replaced by the null bundle.
    pub null_text: bool,
    /// Directory for periodic checkpoints and failure dumps.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub distance: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// A model with everything needed to sample, evaluate or checkpoint it.
#[derive(Clone, Debug)]
pub struct TrainedModel {
    pub config: RunConfig,
    pub model: FineDual,
    pub stats: FeatureStats,
    pub optimizer: Adam,
    pub step: usize,
    pub null_text: bool,
    pub history: Vec<StepLog>,
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        let mut config = self.config.clone();
        config.model = self.model.config.clone();
        Checkpoint::new(
            CheckpointKind::Model,
            &config,
            self.step as u64,
            &self.stats,
            &self.model.store,
            Some(&self.optimizer),
        )
    }

    /// Rebuilds the model from a checkpoint whose embedded fingerprint must
    /// match its embedded config.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CheckpointKind::Model {
            return Err(Error::contract("checkpoint does not hold a denoiser"));
        }
        ck.check_fingerprint(&ck.config.fingerprint(), false)?;
        let mut model = FineDual::new(ck.config.model.clone(), ck.config.seed)?;
        ck.restore_into(&mut model.store)?;
        if ck.stats.width() != model.motion_dim() {
            return Err(Error::contract("checkpoint feature statistics do not match the model width"));
        }
        let optimizer = ck.optimizer.clone().unwrap_or_else(|| Adam::new(&model.store));
        Ok(Self {
            config: ck.config.clone(),
            model,
            stats: ck.stats.clone(),
            optimizer,
            step: ck.step as usize,
            null_text: false,
            history: Vec::new(),
        })
    }

    /// Text conditioning as seen by this model (null for text-free baselines).
    pub fn condition(&self, text: TextBundle) -> TextBundle {
        if self.null_text {
            TextBundle::null()
        } else {
            text
        }
    }
}

/// Writes `ck`, then reloads it to make sure it passes load validation.
pub fn save_verified(ck: &Checkpoint, path: &std::path::Path) -> Result<()> {
    ck.save(path)?;
    let back = Checkpoint::load(path)?;
    TrainedModel::from_checkpoint(&back)?;
    if back != *ck {
        return Err(Error::contract(format!("checkpoint {} did not round-trip", path.display())));
    }
    Ok(())
}

/// Trains a fresh model; `progress` sees one log record per step.
pub fn train(
    config: &RunConfig,
    samples: &[Sample],
    options: &TrainOptions,
    mut progress: impl FnMut(&StepLog),
) -> Result<TrainedModel> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("training needs a non-empty dataset"));
    }
    let model = FineDual::new(config.model.clone(), config.seed)?;
    let stats = FeatureStats::from_samples(samples)?;
    let prepared = prepare(&model, &stats, samples)?;
    let schedule = config.diffusion.schedule()?;
    let optimizer = Adam::new(&model.store);
    let mut state = TrainedModel {
        config: config.clone(),
        model,
        stats,
        optimizer,
        step: 0,
        null_text: options.null_text,
        history: Vec::with_capacity(config.train.steps),
    };
    let lr = config.train.lr_schedule()?;
    let lambda = config.train.loss_weights()?.lambda_distance;
    let batch = config.train.batch_size.min(prepared.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7a11_5eed);
    let mut order: Vec<usize> = (0..prepared.len()).collect();
    let mut cursor = order.len();

    for step in 0..config.train.steps {
        let mut picks = Vec::with_capacity(batch);
        while picks.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            picks.push(order[cursor]);
            cursor += 1;
        }
        let mut grads: Vec<Mat> = state.model.store.values().iter().map(|p| Mat::zeros(p.rows(), p.cols())).collect();
        let (mut loss_sum, mut recon_sum, mut dist_sum) = (0.0, 0.0, 0.0);
        let mut trace = Vec::with_capacity(batch);
        for &i in &picks {
            let sample = &prepared[i];
            let t = rng.gen_range(0..schedule.steps());
            let noise = gaussian_like(&sample.x0, &mut rng);
            let dropped = options.null_text || rng.gen::<f64>() < config.train.cond_dropout;
            let x_t = q_sample(&sample.x0, t, &noise, &schedule)?;
            let text = if dropped { TextBundle::null() } else { sample.text.clone() };
            let mut tape = Tape::new();
            let nodes = sample_loss(&state.model, &state.model.store, &mut tape, sample, &text, &x_t, t, lambda)?;
            let scaled = tape.scale(nodes.total, 1.0 / batch as f64);
            let (l, r, d) = (tape.value(nodes.total).item(), tape.value(nodes.recon).item(), tape.value(nodes.distance).item());
            trace.push((sample.id.clone(), t, dropped, l));
            if !l.is_finite() {
                return Err(nan_abort(options, step, &trace));
            }
            loss_sum += l;
            recon_sum += r;
            dist_sum += d;
            let g = tape.backward(scaled).param_grads(&tape, state.model.store.len());
            crate::autodiff::accumulate_param_grads(&mut grads, &g);
        }
        let grad_norm = clip_global_norm(&mut grads, config.train.grad_clip);
        if !grad_norm.is_finite() {
            return Err(nan_abort(options, step, &trace));
        }
        let step_lr = lr.at(step);
        state.optimizer.update(&mut state.model.store, &grads, step_lr);
        state.step = step + 1;
        let n = batch as f64;
        let log = StepLog { step, loss: loss_sum / n, recon: recon_sum / n, distance: dist_sum / n, lr: step_lr, grad_norm };
        progress(&log);
        state.history.push(log);
        if let Some(dir) = &options.checkpoint_dir {
            let every = config.train.checkpoint_every;
            if every > 0 && state.step % every == 0 && state.step < config.train.steps {
                save_verified(&state.checkpoint(), &dir.join(format!("step-{:06}.fdck", state.step)))?;
            }
        }
    }
    Ok(state)
}

fn nan_abort(options: &TrainOptions, step: usize, trace: &[(String, usize, bool, f64)]) -> Error {
    let mut dump = format!("step\t{step}\nid\ttimestep\tdropped\tloss\n");
    for (id, t, dropped, l) in trace {
        let _ = writeln!(dump, "{id}\t{t}\t{dropped}\t{l}");
    }
    let mut where_ = String::new();
    if let Some(dir) = &options.checkpoint_dir {
        let path = dir.join("nan-batch.tsv");
        if fs::create_dir_all(dir).is_ok() && fs::write(&path, &dump).is_ok() {
            where_ = format!(" (batch dump at {})", path.display());
        }
    }
    Error::numeric(format!("non-finite loss at step {step}{where_}:\n{dump}"))
}

/// Mean conditioned reconstruction loss over `draws` random timesteps per
/// sample, without condition dropout.
pub fn conditioned_reconstruction(
    trained: &TrainedModel,
    prepared: &[PreparedSample],
    schedule: &DiffusionSchedule,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut count = 0usize;
    for sample in prepared {
        for _ in 0..draws {
            let t = rng.gen_range(0..schedule.steps());
            let noise = gaussian_like(&sample.x0, &mut rng);
            let x_t = q_sample(&sample.x0, t, &noise, schedule)?;
            let (pred, _) = trained.model.predict(&x_t, t, &trained.condition(sample.text.clone()))?;
            total += crate::diffusion::reconstruction_loss(&pred, &sample.x0)?;
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}
