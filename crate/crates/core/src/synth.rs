//! Scripted two-person scenarios used as a stand-in training corpus.
//!
//! Every scenario follows a fixed inter-person distance curve and comes with
//! a templated prompt. The seed only perturbs the curve parameters slightly,
//! so most of the variation between samples is explained by the prompt.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::motion::{feature_dim, rotation_to_6d, DualMotion, FeatureLayout, MotionSequence};
use crate::text::decompose_prompt;

/// Pelvis height above the ground plane (m).
const ROOT_HEIGHT: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    Approach,
    Mirror,
    Orbit,
    PushRetreat,
}

impl Scenario {
    pub const ALL: [Scenario; 4] =
        [Scenario::Approach, Scenario::Mirror, Scenario::Orbit, Scenario::PushRetreat];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Approach => "approach",
            Scenario::Mirror => "mirror",
            Scenario::Orbit => "orbit",
            Scenario::PushRetreat => "push-retreat",
        }
    }

    fn prompts(self) -> &'static [&'static str] {
        match self {
            Scenario::Approach => &[
                "two people walk toward each other.",
                "these two approach each other slowly.",
            ],
            Scenario::Mirror => &[
                "one person raises both arms, the other person mirrors the movement.",
                "the first person lifts the arms, the second person copies the motion.",
            ],
            Scenario::Orbit => &[
                "the first person walks in a circle around the second.",
                "one person circles around the other person.",
            ],
            Scenario::PushRetreat => &[
                "one person pushes forward, the other person steps back and then comes back.",
                "the first person shoves the second, and the second person retreats and returns.",
            ],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown scenario '{s}'")))
    }
}

/// Generator settings that are not per-sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub frames: usize,
    pub joint_count: usize,
    pub fps: f32,
    /// Foot height below which a contact flag is set (m).
    pub contact_threshold: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { frames: 60, joint_count: 5, fps: 20.0, contact_threshold: 0.05 }
    }
}

/// Per-frame kinematic state of one body.
#[derive(Clone, Copy, Debug)]
struct BodyState {
    x: f64,
    z: f64,
    /// Facing angle in the ground plane; forward = (cos, 0, sin).
    yaw: f64,
    /// Accumulated gait phase (rad).
    gait: f64,
    /// Arm elevation (rad), 0 = hanging.
    arm: f64,
    /// How far the arms reach forward (0..1).
    reach: f64,
}

/// Generates one scenario sample and its overall prompt.
pub fn synth_generate(
    scenario: Scenario,
    config: &SynthConfig,
    seed: u64,
) -> Result<(DualMotion, String)> {
    if config.joint_count < 3 {
        return Err(Error::invalid("synthetic skeleton needs at least 3 joints (root and two feet)"));
    }
    if config.frames < 2 {
        return Err(Error::invalid("synthetic motion needs at least 2 frames"));
    }
    feature_dim(config.joint_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scenario_salt(scenario));
    let templates = scenario.prompts();
    let prompt = templates[rng.gen_range(0..templates.len())].to_string();

    let s = config.frames;
    let mut p1 = Vec::with_capacity(s);
    let mut p2 = Vec::with_capacity(s);
    let jitter = |rng: &mut ChaCha8Rng, w: f64| rng.gen_range(-w..=w);
    match scenario {
        Scenario::Approach => {
            let d0 = 2.6 + jitter(&mut rng, 0.1);
            let d1 = 0.7 + jitter(&mut rng, 0.05);
            for f in 0..s {
                let t = f as f64 / (s - 1) as f64;
                let e = t * t * (3.0 - 2.0 * t);
                let d = d0 - (d0 - d1) * e;
                let gait = (d0 - d) * 4.0;
                p1.push(BodyState { x: -d / 2.0, z: 0.0, yaw: 0.0, gait, arm: 0.1, reach: 0.0 });
                p2.push(BodyState { x: d / 2.0, z: 0.0, yaw: PI, gait, arm: 0.1, reach: 0.0 });
            }
        }
        Scenario::Mirror => {
            let d = 1.4 + jitter(&mut rng, 0.05);
            let amp = 1.2 + jitter(&mut rng, 0.1);
            let cycles = 1.0 + jitter(&mut rng, 0.1);
            for f in 0..s {
                let t = f as f64 / (s - 1) as f64;
                let arm = amp * 0.5 * (1.0 - (2.0 * PI * cycles * t).cos());
                p1.push(BodyState { x: -d / 2.0, z: 0.0, yaw: 0.0, gait: 0.0, arm, reach: 0.0 });
                p2.push(BodyState { x: d / 2.0, z: 0.0, yaw: PI, gait: 0.0, arm, reach: 0.0 });
            }
        }
        Scenario::Orbit => {
            let r = 1.2 + jitter(&mut rng, 0.05);
            let start = jitter(&mut rng, 0.1);
            let sweep = PI * (1.0 + jitter(&mut rng, 0.05));
            for f in 0..s {
                let t = f as f64 / (s - 1) as f64;
                let ang = start + sweep * t;
                let (x2, z2) = (r * ang.cos(), r * ang.sin());
                // Walker moves tangentially; the centre body turns to watch.
                let walker_yaw = ang + PI / 2.0;
                let gait = r * sweep * t * 4.0;
                p1.push(BodyState { x: x2, z: z2, yaw: walker_yaw, gait, arm: 0.1, reach: 0.0 });
                p2.push(BodyState { x: 0.0, z: 0.0, yaw: ang, gait: 0.0, arm: 0.1, reach: 0.0 });
            }
        }
        Scenario::PushRetreat => {
            let d0 = 1.6 + jitter(&mut rng, 0.05);
            let dip = 0.9 + jitter(&mut rng, 0.05);
            let mut prev_x2: Option<f64> = None;
            let mut gait2 = 0.0;
            for f in 0..s {
                let t = f as f64 / (s - 1) as f64;
                let bump = (PI * t).sin();
                let d = d0 - dip * bump;
                // Pusher advances; partner first yields late, then returns.
                let x1 = -d0 / 2.0 + 0.75 * dip * bump;
                let x2 = x1 + d;
                if let Some(px) = prev_x2 {
                    gait2 += ((x2 - px) as f64).abs() * 4.0;
                }
                prev_x2 = Some(x2);
                let gait1 = (x1 + d0 / 2.0).abs() * 4.0;
                let reach = bump;
                p1.push(BodyState { x: x1, z: 0.0, yaw: 0.0, gait: gait1, arm: 1.4 * reach, reach });
                p2.push(BodyState { x: x2, z: 0.0, yaw: PI, gait: gait2, arm: 0.3, reach: 0.0 });
            }
        }
    }

    let person1 = render(&p1, config)?;
    let person2 = render(&p2, config)?;
    let motion = DualMotion::new(format!("{}-{seed}", scenario.name()), person1, person2)?;
    Ok((motion, prompt))
}

fn scenario_salt(s: Scenario) -> u64 {
    match s {
        Scenario::Approach => 0x0a11_0ac4,
        Scenario::Mirror => 0x0313_4404,
        Scenario::Orbit => 0x0041_b170,
        Scenario::PushRetreat => 0x0005_4e77,
    }
}

/// Rotation about the vertical axis, as columns.
fn yaw_matrix(yaw: f64) -> [[f64; 3]; 3] {
    let (c, s) = (yaw.cos(), yaw.sin());
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

/// Rotation about the body's lateral (local z) axis, as columns.
fn swing_matrix(angle: f64) -> [[f64; 3]; 3] {
    let (c, s) = (angle.cos(), angle.sin());
    [[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Body-frame offset (forward, up, lateral) of joint `j` from the pelvis.
fn joint_offset(j: usize, b: &BodyState) -> [f64; 3] {
    let step = 0.15 * b.gait.sin();
    match j {
        0 => [0.0, 0.0, 0.0],
        1 => [step, -ROOT_HEIGHT + 0.08 * b.gait.sin().max(0.0), -0.1],
        2 => [-step, -ROOT_HEIGHT + 0.08 * (-b.gait.sin()).max(0.0), 0.1],
        3 => [0.0, 0.7, 0.0],
        _ => {
            // Remaining joints sit along the arms, alternating sides.
            let k = j - 4;
            let side = if k % 2 == 0 { -1.0 } else { 1.0 };
            let level = (k / 2) as f64 + 1.0;
            let span = 0.6 * level / (level + 1.0);
            let fwd = span * b.arm.sin() * (0.5 + 0.5 * b.reach) - 0.05 * step * side;
            let up = 0.45 - span * b.arm.cos();
            [fwd, up, side * (0.2 + 0.05 * level)]
        }
    }
}

fn local_rotation(j: usize, b: &BodyState) -> [[f64; 3]; 3] {
    match j {
        0 => yaw_matrix(b.yaw),
        1 => swing_matrix(0.4 * b.gait.sin()),
        2 => swing_matrix(-0.4 * b.gait.sin()),
        3 => swing_matrix(0.0),
        _ => swing_matrix(b.arm),
    }
}

fn render(states: &[BodyState], config: &SynthConfig) -> Result<MotionSequence> {
    let lay = FeatureLayout::new(config.joint_count)?;
    let d = lay.dim();
    let s = states.len();
    let nj = config.joint_count;
    let mut frames = vec![0.0f32; s * d];
    let mut positions = vec![[0.0f64; 3]; s * nj];
    for (f, b) in states.iter().enumerate() {
        let (c, sn) = (b.yaw.cos(), b.yaw.sin());
        for j in 0..nj {
            let o = joint_offset(j, b);
            // forward = (c, 0, s), lateral = (-s, 0, c)
            let p = [b.x + o[0] * c - o[2] * sn, ROOT_HEIGHT + o[1], b.z + o[0] * sn + o[2] * c];
            positions[f * nj + j] = p;
        }
    }
    for f in 0..s {
        let row = &mut frames[f * d..(f + 1) * d];
        for j in 0..nj {
            let p = positions[f * nj + j];
            let pf = p.map(|v| v as f32);
            row[lay.position(j)..lay.position(j) + 3].copy_from_slice(&pf);
            if f > 0 {
                // First differences of the stored (f32) positions.
                let q = positions[(f - 1) * nj + j].map(|v| v as f32);
                for a in 0..3 {
                    row[lay.velocity(j) + a] = ((pf[a] as f64) - (q[a] as f64)) as f32;
                }
            }
            let six = rotation_to_6d(&local_rotation(j, &states[f]));
            for (k, v) in six.iter().enumerate() {
                row[lay.rotation(j) + k] = *v as f32;
            }
        }
        let cbase = lay.contacts();
        for (slot, foot) in [(0usize, 1usize), (2, 2)] {
            let p = positions[f * nj + foot];
            let low = p[1] < config.contact_threshold;
            let still = if f == 0 {
                true
            } else {
                let q = positions[(f - 1) * nj + foot];
                ((p[0] - q[0]).powi(2) + (p[2] - q[2]).powi(2)).sqrt() < 0.02
            };
            row[cbase + slot] = if low { 1.0 } else { 0.0 };
            row[cbase + slot + 1] = if low && still { 1.0 } else { 0.0 };
        }
    }
    MotionSequence::new(nj, config.fps, frames)
}

/// `count` samples cycling through all scenarios, each with its prompt
/// decomposed by the rule decomposer. Sample `i` uses seed `base_seed + i`.
pub fn synth_corpus(count: usize, config: &SynthConfig, base_seed: u64) -> Result<Vec<Sample>> {
    (0..count)
        .map(|i| {
            let scenario = Scenario::ALL[i % Scenario::ALL.len()];
            let (motion, prompt) = synth_generate(scenario, config, base_seed.wrapping_add(i as u64))?;
            Ok(Sample { motion, prompts: decompose_prompt(&prompt, None) })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn approach_closes_distance() {
        let (m, _) = synth_generate(Scenario::Approach, &cfg(), 7).unwrap();
        let dists: Vec<f64> = (0..60).map(|f| m.root_distance(f)).collect();
        assert!(dists[0] > dists[59]);
        for w in dists.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn mirror_distance_constant() {
        let (m, _) = synth_generate(Scenario::Mirror, &cfg(), 7).unwrap();
        let d0 = m.root_distance(0);
        for f in 0..60 {
            assert!((m.root_distance(f) - d0).abs() < 1e-6);
        }
    }

    #[test]
    fn orbit_radius_constant() {
        let (m, _) = synth_generate(Scenario::Orbit, &cfg(), 3).unwrap();
        let d0 = m.root_distance(0);
        for f in 0..60 {
            assert!((m.root_distance(f) - d0).abs() < 1e-5);
        }
    }

    #[test]
    fn push_retreat_dips_then_recovers() {
        let (m, _) = synth_generate(Scenario::PushRetreat, &cfg(), 11).unwrap();
        let d: Vec<f64> = (0..60).map(|f| m.root_distance(f)).collect();
        let (imin, &min) =
            d.iter().enumerate().min_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap();
        assert!(imin > 10 && imin < 50);
        assert!(min < d[0] - 0.5 && min < d[59] - 0.5);
    }

    #[test]
    fn deterministic_per_seed() {
        for sc in Scenario::ALL {
            let a = synth_generate(sc, &cfg(), 42).unwrap();
            let b = synth_generate(sc, &cfg(), 42).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn outputs_pass_feature_invariants() {
        for sc in Scenario::ALL {
            for seed in 0..5 {
                let (m, _) = synth_generate(sc, &cfg(), seed).unwrap();
                m.person1.check_invariants(1e-6).unwrap();
                m.person2.check_invariants(1e-6).unwrap();
            }
        }
        let big = SynthConfig { joint_count: 22, ..cfg() };
        let (m, _) = synth_generate(Scenario::Orbit, &big, 1).unwrap();
        assert_eq!(m.feature_dim(), 268);
        m.person1.check_invariants(1e-6).unwrap();
    }

    #[test]
    fn corpus_cycles_scenarios_with_unique_ids() {
        let corpus = synth_corpus(8, &cfg(), 100).unwrap();
        assert!(corpus[0].motion.id.starts_with("approach-"));
        assert!(corpus[5].motion.id.starts_with("mirror-"));
        let ids: std::collections::HashSet<_> = corpus.iter().map(|s| s.motion.id.clone()).collect();
        assert_eq!(ids.len(), 8);
        assert!(corpus.iter().all(|s| !s.prompts.person1.is_empty() && !s.prompts.person2.is_empty()));
    }

    #[test]
    fn unknown_scenario_rejected() {
        assert!("dance".parse::<Scenario>().is_err());
        assert_eq!("push-retreat".parse::<Scenario>().unwrap(), Scenario::PushRetreat);
    }

    #[test]
    fn contacts_fire_when_standing() {
        let (m, _) = synth_generate(Scenario::Mirror, &cfg(), 1).unwrap();
        let row = m.person1.frame(10);
        let c = m.person1.layout().contacts();
        assert_eq!(&row[c..c + 4], &[1.0, 1.0, 1.0, 1.0]);
    }
}
