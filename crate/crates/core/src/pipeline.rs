//! Generation and evaluation on top of a trained model.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{Checkpoint, CheckpointKind};
use crate::config::{MetricsConfig, RunConfig};
use crate::dataset::{save_dataset, Sample};
use crate::diffusion::{sample, SamplerConfig};
use crate::error::{Error, Result};
use crate::evaluator::ToyEvaluator;
use crate::metrics::{diversity, fid, mm_dist, mpjie, mpjpe, multimodality, retrieval_precision, EmbeddingSet};
use crate::model::TextBundle;
use crate::motion::{DualMotion, MotionSequence};
use crate::report::{Report, SampleRow};
use crate::text::{decompose_prompt, DecompositionCache, PromptRecord};
use crate::train::TrainedModel;

/// Name of the per-sample profile sidecar written next to generated motion.
pub const PROFILE_FILE: &str = "profiles.tsv";

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    pub motion: DualMotion,
    /// Predicted distance profile for the prompt.
    pub profile: Vec<f64>,
}

/// Samples one pair for `record`, then maps it back to motion space.
pub fn generate_one(trained: &TrainedModel, record: &PromptRecord, id: &str, fps: f32, seed: u64) -> Result<Generation> {
    let model = &trained.model;
    let cfg = &trained.config;
    let cond = trained.condition(model.bundle(record));
    let sampler = SamplerConfig { frames: model.config.frames, width: model.motion_dim(), steps: cfg.diffusion.sampler_steps() };
    let x = sample(
        model,
        &cond,
        &TextBundle::null(),
        &cfg.diffusion.schedule()?,
        &cfg.diffusion.guidance()?,
        &sampler,
        seed,
    )?;
    let nj = model.config.joint_count;
    let p1 = MotionSequence::canonicalize(nj, fps, &trained.stats.denormalize(&x[0]))?;
    let p2 = MotionSequence::canonicalize(nj, fps, &trained.stats.denormalize(&x[1]))?;
    Ok(Generation { motion: DualMotion::new(id, p1, p2)?, profile: model.predict_profile(&cond) })
}

/// Decomposes `prompt` and draws `count` pairs with seeds `seed, seed+1, ...`.
pub fn generate(
    trained: &TrainedModel,
    prompt: &str,
    cache: Option<&DecompositionCache>,
    count: usize,
    fps: f32,
    seed: u64,
) -> Result<(PromptRecord, Vec<Generation>)> {
    if prompt.trim().is_empty() {
        return Err(Error::invalid("prompt must not be empty"));
    }
    if count == 0 {
        return Err(Error::invalid("count must be positive"));
    }
    let record = decompose_prompt(prompt, cache);
    let gens = (0..count as u64)
        .map(|i| generate_one(trained, &record, &format!("gen-{seed}-{i}"), fps, seed.wrapping_add(i)))
        .collect::<Result<Vec<_>>>()?;
    Ok((record, gens))
}

/// Writes generated pairs in dataset format plus the profile sidecar.
pub fn write_generations(dir: &Path, record: &PromptRecord, gens: &[Generation]) -> Result<()> {
    let samples: Vec<Sample> = gens.iter().map(|g| Sample { motion: g.motion.clone(), prompts: record.clone() }).collect();
    save_dataset(dir, &samples)?;
    fs::write(dir.join(PROFILE_FILE), profile_table(record, gens))?;
    Ok(())
}

/// Tab-separated sidecar: decomposition, then one profile row per sample.
pub fn profile_table(record: &PromptRecord, gens: &[Generation]) -> String {
    let mut out = format!(
        "# overall\t{}\n# person1\t{}\n# person2\t{}\n# source\t{}\n",
        record.overall,
        record.person1,
        record.person2,
        record.source.as_str()
    );
    let k = gens.first().map_or(0, |g| g.profile.len());
    out.push_str("id");
    for s in 0..k {
        let _ = write!(out, "\tsegment{s}");
    }
    out.push('\n');
    for g in gens {
        out.push_str(&g.motion.id);
        for w in &g.profile {
            let _ = write!(out, "\t{w}");
        }
        out.push('\n');
    }
    out
}

/// Which groups of metrics to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetricSelection {
    pub joint: bool,
    pub embedding: bool,
}

impl FromStr for MetricSelection {
    type Err = Error;

    /// Comma-separated list of `joint`, `embedding` or `all`.
    fn from_str(s: &str) -> Result<Self> {
        let mut sel = MetricSelection { joint: false, embedding: false };
        for part in s.split(',').map(str::trim) {
            match part {
                "joint" => sel.joint = true,
                "embedding" => sel.embedding = true,
                "all" => sel = MetricSelection { joint: true, embedding: true },
                other => return Err(Error::invalid(format!("unknown metric group '{other}'"))),
            }
        }
        Ok(sel)
    }
}

pub fn evaluator_checkpoint(eval: &ToyEvaluator, config: &RunConfig) -> Checkpoint {
    let mut cfg = config.clone();
    cfg.evaluator = eval.config.clone();
    cfg.model.frames = eval.frames();
    Checkpoint::new(CheckpointKind::Evaluator, &cfg, 0, &eval.stats, &eval.store, None)
}

pub fn evaluator_from_checkpoint(ck: &Checkpoint) -> Result<ToyEvaluator> {
    if ck.kind != CheckpointKind::Evaluator {
        return Err(Error::contract("checkpoint does not hold an evaluator"));
    }
    let mut eval = ToyEvaluator::new(ck.config.evaluator.clone(), ck.stats.clone(), ck.config.model.frames, ck.config.seed)?;
    ck.restore_into(&mut eval.store)?;
    Ok(eval)
}

/// Scores `generated[i]` against `reference[i]`; embedding metrics need an
/// evaluator and, for multimodality, extra generations per prompt.
pub fn score(
    generated: &[DualMotion],
    reference: &[Sample],
    evaluator: Option<&ToyEvaluator>,
    repeats: &[Vec<DualMotion>],
    metrics: &MetricsConfig,
    selection: MetricSelection,
    seed: u64,
) -> Result<(BTreeMap<String, f64>, Vec<SampleRow>)> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::invalid(format!(
            "{} generated pairs for {} reference samples",
            generated.len(),
            reference.len()
        )));
    }
    let mut out = BTreeMap::new();
    let mut rows = Vec::new();
    if selection.joint {
        for (g, r) in generated.iter().zip(reference) {
            let (g1, g2) = (g.person1.joint_positions(), g.person2.joint_positions());
            let (r1, r2) = (r.motion.person1.joint_positions(), r.motion.person2.joint_positions());
            rows.push(SampleRow {
                id: r.motion.id.clone(),
                mpjpe_p1: mpjpe(&g1, &r1)?,
                mpjpe_p2: mpjpe(&g2, &r2)?,
                mpjie: mpjie(&g1, &g2)?,
                mpjie_ref: mpjie(&r1, &r2)?,
            });
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&SampleRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        out.insert("mpjpe_p1".into(), mean(|r| r.mpjpe_p1));
        out.insert("mpjpe_p2".into(), mean(|r| r.mpjpe_p2));
        out.insert("mpjpe".into(), mean(|r| 0.5 * (r.mpjpe_p1 + r.mpjpe_p2)));
        out.insert("mpjie".into(), mean(|r| r.mpjie));
        out.insert("mpjie_ref".into(), mean(|r| r.mpjie_ref));
        out.insert("mpjie_abs_error".into(), mean(|r| (r.mpjie - r.mpjie_ref).abs()));
    }
    if selection.embedding {
        let eval = evaluator.ok_or_else(|| Error::invalid("embedding metrics requested but no evaluator checkpoint given"))?;
        let gen_refs: Vec<&DualMotion> = generated.iter().collect();
        let ref_refs: Vec<&DualMotion> = reference.iter().map(|s| &s.motion).collect();
        let texts: Vec<&str> = reference.iter().map(|s| s.prompts.overall.as_str()).collect();
        let g = eval.embed_motions(&gen_refs)?;
        let r = eval.embed_motions(&ref_refs)?;
        let t = eval.embed_texts(&texts);
        out.insert("fid".into(), fid(&g, &r)?);
        out.insert("mm_dist".into(), mm_dist(&g, &t)?);
        out.insert("diversity".into(), diversity(&g, metrics.diversity_pairs, seed)?);
        for k in 1..=3 {
            out.insert(format!("r_precision_top{k}"), retrieval_precision(&g, &t, k, metrics.retrieval_pool, seed)?);
        }
        if !repeats.is_empty() {
            let sets = repeats
                .iter()
                .map(|set| eval.embed_motions(&set.iter().collect::<Vec<_>>()))
                .collect::<Result<Vec<EmbeddingSet>>>()?;
            out.insert("multimodality".into(), multimodality(&sets, metrics.multimodality_pairs, seed)?);
        }
    }
    Ok((out, rows))
}

/// Generates one pair per reference sample (seed `seed + i`) and scores it.
pub fn evaluate(
    trained: &TrainedModel,
    reference: &[Sample],
    evaluator: Option<&ToyEvaluator>,
    selection: MetricSelection,
    seed: u64,
) -> Result<Report> {
    if reference.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    if selection.embedding && evaluator.is_none() {
        return Err(Error::invalid("embedding metrics requested but no evaluator checkpoint given"));
    }
    let fps = reference[0].motion.fps();
    let generated = reference
        .iter()
        .enumerate()
        .map(|(i, s)| Ok(generate_one(trained, &s.prompts, &s.motion.id, fps, seed.wrapping_add(i as u64))?.motion))
        .collect::<Result<Vec<_>>>()?;
    let metrics = &trained.config.metrics;
    let mut repeats = Vec::new();
    if selection.embedding {
        for (i, s) in reference.iter().enumerate().take(metrics.multimodality_prompts) {
            let mut set = vec![generated[i].clone()];
            for r in 1..metrics.multimodality_samples as u64 {
                let rs = seed.wrapping_add(i as u64).wrapping_add(r << 32);
                set.push(generate_one(trained, &s.prompts, &s.motion.id, fps, rs)?.motion);
            }
            repeats.push(set);
        }
    }
    let (metrics, rows) = score(&generated, reference, evaluator, &repeats, metrics, selection, seed)?;
    Ok(Report { fingerprint: trained.config.fingerprint(), seed, metrics, rows })
}

/// Ground-truth profile of every sample, as used for inspection dumps.
pub fn profile_dump(samples: &[Sample], k: usize, trained: Option<&TrainedModel>) -> Result<String> {
    let first = samples.first().ok_or_else(|| Error::invalid("dataset is empty"))?;
    let layout = crate::motion::segment_bounds(first.motion.frame_count(), k)?;
    let mut out = String::from("id\tkind");
    for s in 0..k {
        let _ = write!(out, "\tsegment{s}");
    }
    out.push('\n');
    for s in samples {
        let gt = crate::model::adaptive::gt_profile_of(&s.motion, &layout)?;
        push_row(&mut out, &s.motion.id, "gt", &gt.weights);
        if let Some(t) = trained {
            if t.model.config.segments != k {
                return Err(Error::invalid(format!("model predicts {} segments, not {k}", t.model.config.segments)));
            }
            let pred = t.model.predict_profile(&t.condition(t.model.bundle(&s.prompts)));
            push_row(&mut out, &s.motion.id, "predicted", &pred);
        }
    }
    Ok(out)
}

fn push_row(out: &mut String, id: &str, kind: &str, w: &[f64]) {
    out.push_str(id);
    out.push('\t');
    out.push_str(kind);
    for v in w {
        let _ = write!(out, "\t{v}");
    }
    out.push('\n');
}
