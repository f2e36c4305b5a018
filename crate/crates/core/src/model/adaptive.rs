//! Stage 2: distance-aware graph reasoning across the two persons.
//!
//! A predictor turns the overall prompt into a `K`-segment interaction
//! distance profile. Products of per-segment coefficients weight the
//! cross-person edges of a learnable `2S × 2S` adjacency, which then
//! propagates features between each person's frames and the partner's.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::motion::{dist3, DualMotion, JointPositions, SegmentLayout};
use crate::nn::{gaussian, Linear};
use crate::tensor::Mat;

/// Added inside the logarithm of the distance cross-entropy.
pub const CE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProfileKind {
    Predicted,
    GroundTruth,
}

/// Per-segment interaction distance weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceProfile {
    pub weights: Vec<f64>,
    pub kind: ProfileKind,
}

impl DistanceProfile {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Mean-pool over tokens, then a two-layer MLP to `K` logits.
#[derive(Clone, Copy, Debug)]
pub struct DistancePredictor {
    pub hidden: Linear,
    pub out: Linear,
}

impl DistancePredictor {
    pub fn new(store: &mut ParamStore, name: &str, text_width: usize, hidden: usize, k: usize, rng: &mut impl Rng) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), text_width, hidden, rng),
            out: Linear::new(store, &format!("{name}.out"), hidden, k, rng),
        }
    }

    /// `1 × K` probabilities.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, words: Var) -> Var {
        let pooled = tape.mean_rows(words);
        let h = self.hidden.forward(tape, store, pooled);
        let h = tape.relu(h);
        let logits = self.out.forward(tape, store, h);
        tape.softmax_rows(logits)
    }
}

/// Predicted profile for `N_w × L` word features.
pub fn predict_distance(store: &ParamStore, predictor: &DistancePredictor, words: &Mat) -> Result<DistanceProfile> {
    if words.rows() == 0 {
        return Err(Error::invalid("distance prediction needs at least one token"));
    }
    let mut tape = Tape::new();
    let w = tape.constant(words.clone());
    let p = predictor.forward(&mut tape, store, w);
    Ok(DistanceProfile { weights: tape.value(p).data().to_vec(), kind: ProfileKind::Predicted })
}

/// `1 − softmax` of the per-segment mean inter-person joint distances.
pub fn gt_distance_profile(
    person1: &JointPositions,
    person2: &JointPositions,
    layout: &SegmentLayout,
) -> Result<DistanceProfile> {
    if person1.frames != person2.frames || person1.joints != person2.joints {
        return Err(Error::invalid("persons must share frames and joints"));
    }
    if layout.frame_count() != person1.frames {
        return Err(Error::invalid(format!(
            "layout covers {} frames, motion has {}",
            layout.frame_count(),
            person1.frames
        )));
    }
    let mut means = Vec::with_capacity(layout.len());
    for &(lo, hi) in layout.bounds() {
        if hi <= lo || person1.joints == 0 {
            return Err(Error::invalid("zero-length segment"));
        }
        let mut total = 0.0;
        for f in lo..hi {
            for j in 0..person1.joints {
                total += dist3(person1.at(f, j), person2.at(f, j));
            }
        }
        means.push(total / ((hi - lo) * person1.joints) as f64);
    }
    let soft = softmax_rows(&Mat::row_vector(means));
    Ok(DistanceProfile { weights: soft.data().iter().map(|s| 1.0 - s).collect(), kind: ProfileKind::GroundTruth })
}

/// Ground-truth profile of a dual motion sample.
pub fn gt_profile_of(motion: &DualMotion, layout: &SegmentLayout) -> Result<DistanceProfile> {
    gt_distance_profile(&motion.person1.joint_positions(), &motion.person2.joint_positions(), layout)
}

/// `−Σ gt_k · log(pre_k + ε)`.
pub fn distance_loss(pre: &DistanceProfile, gt: &DistanceProfile) -> Result<f64> {
    if pre.len() != gt.len() {
        return Err(Error::invalid(format!("profile lengths differ: {} vs {}", pre.len(), gt.len())));
    }
    if pre.weights.iter().any(|&p| p < 0.0) {
        return Err(Error::contract("predicted profile has negative entries"));
    }
    Ok(-pre.weights.iter().zip(&gt.weights).map(|(p, g)| g * (p + CE_EPS).ln()).sum::<f64>())
}

/// Tape version of [`distance_loss`]; `pre` is a `1 × K` node.
pub fn distance_loss_var(tape: &mut Tape, pre: Var, gt: &[f64]) -> Var {
    let shifted = tape.add_scalar(pre, CE_EPS);
    let logp = tape.log(shifted);
    let g = tape.constant(Mat::row_vector(gt.to_vec()));
    let prod = tape.mul(logp, g);
    let total = tape.sum_all(prod);
    tape.scale(total, -1.0)
}

/// `2S × 2S` mask with identity self-blocks and cross entries
/// `profile[seg(f)] · profile[seg(g)]`.
pub fn build_interaction_weights(profile: &[f64], layout: &SegmentLayout) -> Result<Mat> {
    if profile.len() != layout.len() {
        return Err(Error::invalid(format!("profile has {} entries, layout has {} segments", profile.len(), layout.len())));
    }
    let s = layout.frame_count();
    let coeff: Vec<f64> = (0..s).map(|f| profile[layout.segment_of(f)]).collect();
    let mut w = Mat::zeros(2 * s, 2 * s);
    for f in 0..s {
        w.set(f, f, 1.0);
        w.set(s + f, s + f, 1.0);
        for g in 0..s {
            let v = coeff[f] * coeff[g];
            w.set(f, s + g, v);
            w.set(s + f, g, v);
        }
    }
    Ok(w)
}

/// `S × K` one-hot segment membership.
pub fn membership(layout: &SegmentLayout) -> Mat {
    let mut m = Mat::zeros(layout.frame_count(), layout.len());
    for f in 0..layout.frame_count() {
        m.set(f, layout.segment_of(f), 1.0);
    }
    m
}

/// Tape version of [`build_interaction_weights`], differentiable in the profile.
pub fn interaction_weights_var(tape: &mut Tape, profile: Var, layout: &SegmentLayout) -> Var {
    let s = layout.frame_count();
    let member = tape.constant(membership(layout));
    let pt = tape.transpose(profile);
    let c = tape.matmul(member, pt);
    let zero = tape.constant(Mat::zeros(s, 1));
    let u = tape.vstack(&[c, zero]);
    let v = tape.vstack(&[zero, c]);
    let uv = tape.matmul_t(u, v);
    let vu = tape.matmul_t(v, u);
    let cross = tape.add(uv, vu);
    let eye = tape.constant(Mat::identity(2 * s));
    tape.add(cross, eye)
}

/// How the mask combines with the learnable adjacency.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyMode {
    /// `Ã = W_inter ⊙ A`.
    #[default]
    Hadamard,
    /// `Ã = W_inter · A`.
    Product,
}

impl AdjacencyMode {
    pub fn name(self) -> &'static str {
        match self {
            AdjacencyMode::Hadamard => "hadamard",
            AdjacencyMode::Product => "product",
        }
    }
}

impl fmt::Display for AdjacencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AdjacencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hadamard" => Ok(AdjacencyMode::Hadamard),
            "product" => Ok(AdjacencyMode::Product),
            other => Err(Error::invalid(format!("unknown adjacency mode {other:?}"))),
        }
    }
}

/// Learnable adjacency matrices, one per graph layer.
#[derive(Clone, Debug)]
pub struct InteractionGraph {
    pub adjacency: Vec<ParamId>,
    pub mode: AdjacencyMode,
}

impl InteractionGraph {
    /// Each `A` starts at identity plus `N(0, noise²)`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        frames: usize,
        layers: usize,
        noise: f64,
        mode: AdjacencyMode,
        rng: &mut impl Rng,
    ) -> Self {
        let n = 2 * frames;
        let adjacency = (0..layers)
            .map(|l| {
                let mut a = gaussian(rng, n, n, noise);
                a.add_assign(&Mat::identity(n));
                store.add(format!("{name}.layer{l}.adjacency"), a)
            })
            .collect();
        Self { adjacency, mode }
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for &a in &self.adjacency {
            store.get_mut(a).scale_assign(0.0);
        }
    }

    /// `ReLU(Ã_l · x)` per layer on a `2S × D` stack.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x_pair: Var, w_inter: Var) -> Result<Var> {
        let n = tape.shape(w_inter).0;
        if tape.shape(x_pair).0 != n || tape.shape(w_inter).1 != n {
            return Err(Error::invalid(format!(
                "graph expects {n} stacked rows, got {:?} with mask {:?}",
                tape.shape(x_pair),
                tape.shape(w_inter)
            )));
        }
        let mut h = x_pair;
        for &id in &self.adjacency {
            if store.get(id).shape() != (n, n) {
                return Err(Error::invalid("adjacency does not match the mask"));
            }
            let a = tape.param(store, id);
            let masked = match self.mode {
                AdjacencyMode::Hadamard => tape.mul(w_inter, a),
                AdjacencyMode::Product => tape.matmul(w_inter, a),
            };
            let prop = tape.matmul(masked, h);
            h = tape.relu(prop);
        }
        Ok(h)
    }
}

/// Plain-value graph reasoning over explicit adjacency matrices.
pub fn graph_reasoning(x_pair: &Mat, w_inter: &Mat, adjacency: &[Mat], mode: AdjacencyMode) -> Result<Mat> {
    let n = w_inter.rows();
    if x_pair.rows() != n || w_inter.cols() != n || adjacency.iter().any(|a| a.shape() != (n, n)) {
        return Err(Error::invalid("graph reasoning shape mismatch"));
    }
    let mut h = x_pair.clone();
    for a in adjacency {
        let masked = match mode {
            AdjacencyMode::Hadamard => w_inter.zip_map(a, |w, v| w * v),
            AdjacencyMode::Product => w_inter.matmul(a),
        };
        h = masked.matmul(&h).map(|v| v.max(0.0));
    }
    Ok(h)
}

/// Stage-2 parameters and hyperparameters.
#[derive(Clone, Debug)]
pub struct AdaptiveStage {
    pub predictor: DistancePredictor,
    pub graph: InteractionGraph,
    pub lambda: f64,
    layout: SegmentLayout,
}

impl AdaptiveStage {
    pub fn new(predictor: DistancePredictor, graph: InteractionGraph, lambda: f64, layout: SegmentLayout) -> Self {
        Self { predictor, graph, lambda, layout }
    }

    pub fn layout(&self) -> &SegmentLayout {
        &self.layout
    }

    /// Returns the stage-2 features and the `1 × K` predicted profile.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: [Var; 2], words: Var) -> Result<([Var; 2], Var)> {
        let profile = self.predictor.forward(tape, store, words);
        let w_inter = interaction_weights_var(tape, profile, &self.layout);
        let out = self.forward_with_mask(tape, store, features, w_inter)?;
        Ok((out, profile))
    }

    /// Graph step and residual mix under an explicit mask.
    pub fn forward_with_mask(&self, tape: &mut Tape, store: &ParamStore, features: [Var; 2], w_inter: Var) -> Result<[Var; 2]> {
        let s = self.layout.frame_count();
        for &f in &features {
            if tape.shape(f).0 != s {
                return Err(Error::invalid(format!("stage 2 expects {s} frames, got {}", tape.shape(f).0)));
            }
        }
        if self.lambda == 0.0 {
            return Ok(features);
        }
        let mut out = features;
        for person in 0..2 {
            let stacked = tape.vstack(&[features[person], features[1 - person]]);
            let g = self.graph.forward(tape, store, stacked, w_inter)?;
            let own = tape.slice_rows(g, 0, s);
            let mixed = tape.scale(own, self.lambda);
            out[person] = tape.add(features[person], mixed);
        }
        Ok(out)
    }
}
