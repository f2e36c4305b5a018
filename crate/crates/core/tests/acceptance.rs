//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 1 3 7a`.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use finedual::autodiff::{ParamStore, Tape};
use finedual::config::RunConfig;
use finedual::dataset::Sample;
use finedual::diffusion::{make_schedule, q_sample, reconstruction_loss};
use finedual::gradcheck::{all_entries, check_param_gradients, sample_entries};
use finedual::metrics::{fid, mm_dist, mpjie, mpjpe, EmbeddingSet};
use finedual::model::adaptive::{
    build_interaction_weights, distance_loss_var, gt_distance_profile, AdjacencyMode, DistancePredictor,
    InteractionGraph,
};
use finedual::model::{FineDual, MixedAttention, ModelConfig, TextBundle};
use finedual::motion::{segment_bounds, JointPositions};
use finedual::nn::gaussian;
use finedual::pipeline::{evaluate, MetricSelection};
use finedual::synth::{synth_corpus, SynthConfig};
use finedual::tensor::Mat;
use finedual::text::{decompose_by_rules, decompose_prompt};
use finedual::train::{conditioned_reconstruction, prepare, train, TrainOptions, TrainedModel};

// Training allocates many short-lived activation buffers; the system
// allocator returns them to the kernel and pays for it in page faults.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const ORACLE_TOL: f64 = 1e-6;
const ORACLE_INSTANCES: usize = 100;
const IDENTITY_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-3;
const OVERFIT_STEPS: usize = 2000;
const OVERFIT_LR: f64 = 1e-3;
const OVERFIT_L1: f64 = 0.05;
const CORPUS: usize = 500;
const CORPUS_STEPS: usize = 20_000;
const HELD_OUT: usize = 100;
const MIN_MPJPE_REDUCTION: f64 = 0.30;
const ABLATION_SEEDS: [u64; 3] = [1, 2, 3];
const ABLATION_STEPS: usize = 5000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: Vec<(&str, &str, fn() -> Outcome)> = vec![
        ("1", "formula oracles", c1_formula_oracles),
        ("2", "paper constants", c2_constants),
        ("3", "interaction weight structure", c3_interaction_weights),
        ("4", "decomposer fidelity", c4_decomposer),
        ("5", "residual identity chain", c5_identity),
        ("6", "gradient checks", c6_gradients),
        ("9", "CLI determinism", c9_cli_determinism),
        ("7a", "overfit one batch", c7a_overfit),
        ("7b", "conditioning beats null baseline", c7b_conditioning),
        ("8", "stage-2 ablation direction", c8_ablation),
    ];
    let mut failed = 0;
    for (id, name, run) in criteria {
        let selected = filters.is_empty() || filters.iter().any(|f| id.starts_with(f.as_str()));
        if !selected {
            continue;
        }
        let start = Instant::now();
        let o = run();
        let status = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:<3} {status}  {name}: {} [{:.1}s]", o.detail, start.elapsed().as_secs_f64());
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------
// 1. Formula oracles

fn rel_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ORACLE_TOL * b.abs().max(1.0)
}

fn random_joints(rng: &mut ChaCha8Rng, frames: usize, joints: usize, spread: f64) -> JointPositions {
    let data = (0..frames * joints)
        .map(|_| [rng.gen_range(-spread..spread), rng.gen_range(-spread..spread), rng.gen_range(-spread..spread)])
        .collect();
    JointPositions::new(frames, joints, data).unwrap()
}

fn euclid(p: [f64; 3], q: [f64; 3]) -> f64 {
    ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
}

fn oracle_profile(a: &JointPositions, b: &JointPositions, k: usize) -> Vec<f64> {
    let s = a.frames;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for f in 0..s {
        let seg = ((f + 1) * k).div_ceil(s) - 1;
        for j in 0..a.joints {
            sums[seg] += euclid(a.at(f, j), b.at(f, j));
            counts[seg] += 1;
        }
    }
    let d: Vec<f64> = sums.iter().zip(&counts).map(|(s, c)| s / *c as f64).collect();
    let z: f64 = d.iter().map(|v| v.exp()).sum();
    d.iter().map(|v| 1.0 - v.exp() / z).collect()
}

fn oracle_mean_joint_distance(a: &JointPositions, b: &JointPositions) -> f64 {
    let mut total = 0.0;
    for j in 0..a.joints {
        for f in 0..a.frames {
            total += euclid(a.at(f, j), b.at(f, j));
        }
    }
    total / (a.frames * a.joints) as f64
}

type Dense = Vec<Vec<f64>>;

fn dense_mul(a: &Dense, b: &Dense) -> Dense {
    let n = a.len();
    let m = b[0].len();
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for k in 0..b.len() {
            for j in 0..m {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

fn dense_inverse(a: &Dense) -> Dense {
    let n = a.len();
    let mut aug: Dense = a
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| aug[x][c].abs().total_cmp(&aug[y][c].abs())).unwrap();
        aug.swap(c, p);
        let pivot = aug[c][c];
        for v in aug[c].iter_mut() {
            *v /= pivot;
        }
        for r in 0..n {
            if r != c {
                let f = aug[r][c];
                let row_c = aug[c].clone();
                for (v, w) in aug[r].iter_mut().zip(row_c) {
                    *v -= f * w;
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// Principal square root by the Denman–Beavers iteration.
fn denman_beavers_sqrt(a: &Dense) -> Dense {
    let n = a.len();
    let mut y = a.clone();
    let mut z: Dense = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _ in 0..100 {
        let yi = dense_inverse(&y);
        let zi = dense_inverse(&z);
        let ny: Dense = (0..n).map(|i| (0..n).map(|j| 0.5 * (y[i][j] + zi[i][j])).collect()).collect();
        let nz: Dense = (0..n).map(|i| (0..n).map(|j| 0.5 * (z[i][j] + yi[i][j])).collect()).collect();
        let delta: f64 = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (ny[i][j] - y[i][j]).abs()).sum();
        y = ny;
        z = nz;
        if delta < 1e-15 {
            break;
        }
    }
    y
}

fn oracle_fid(a: &Dense, b: &Dense) -> f64 {
    let stats = |x: &Dense| {
        let (n, e) = (x.len(), x[0].len());
        let mu: Vec<f64> = (0..e).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n as f64).collect();
        let cov: Dense = (0..e)
            .map(|i| {
                (0..e)
                    .map(|j| x.iter().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).sum::<f64>() / (n - 1) as f64)
                    .collect()
            })
            .collect();
        (mu, cov)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let root = denman_beavers_sqrt(&dense_mul(&ca, &cb));
    let e = ma.len();
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    mean + (0..e).map(|i| ca[i][i] + cb[i][i] - 2.0 * root[i][i]).sum::<f64>()
}

fn random_dense(rng: &mut ChaCha8Rng, n: usize, e: usize) -> Dense {
    let scales: Vec<f64> = (0..e).map(|_| rng.gen_range(0.5..2.0)).collect();
    let shift: Vec<f64> = (0..e).map(|_| rng.gen_range(-1.0..1.0)).collect();
    (0..n).map(|_| (0..e).map(|c| shift[c] + scales[c] * rng.gen_range(-1.0..1.0)).collect()).collect()
}

fn to_set(d: &Dense) -> EmbeddingSet {
    EmbeddingSet::new(Mat::from_vec(d.len(), d[0].len(), d.iter().flatten().copied().collect()), "oracle")
}

fn c1_formula_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut bad = Vec::new();
    let mut track = |name: &'static str, got: f64, want: f64, worst: &mut Vec<(&str, f64)>| {
        let err = (got - want).abs();
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some(w) => w.1 = w.1.max(err),
            None => worst.push((name, err)),
        }
        if !rel_close(got, want) {
            bad.push(format!("{name}: {got} vs {want}"));
        }
    };
    for _ in 0..ORACLE_INSTANCES {
        // Distance profile.
        let s = rng.gen_range(3..20);
        let k = rng.gen_range(1..=s.min(5));
        let nj = rng.gen_range(1..5);
        let a = random_joints(&mut rng, s, nj, 1.0);
        let b = random_joints(&mut rng, s, nj, 1.0);
        let got = gt_distance_profile(&a, &b, &segment_bounds(s, k).unwrap()).unwrap().weights;
        for (g, w) in got.iter().zip(oracle_profile(&a, &b, k)) {
            track("gt_distance_profile", *g, w, &mut worst);
        }
        // Joint metrics.
        let c = random_joints(&mut rng, s, nj, 2.0);
        track("mpjpe", mpjpe(&a, &c).unwrap(), oracle_mean_joint_distance(&a, &c), &mut worst);
        track("mpjie", mpjie(&a, &b).unwrap(), oracle_mean_joint_distance(&a, &b), &mut worst);
        // Embedding metrics.
        let e = rng.gen_range(2..=5);
        let (na, nb) = (rng.gen_range(e + 5..e + 20), rng.gen_range(e + 5..e + 20));
        let x = random_dense(&mut rng, na, e);
        let y = random_dense(&mut rng, nb, e);
        track("fid", fid(&to_set(&x), &to_set(&y)).unwrap(), oracle_fid(&x, &y), &mut worst);
        let m = rng.gen_range(1..10);
        let p = random_dense(&mut rng, m, e);
        let q = random_dense(&mut rng, m, e);
        let want = p.iter().zip(&q).map(|(u, v)| u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()).sum::<f64>()
            / m as f64;
        track("mm_dist", mm_dist(&to_set(&p), &to_set(&q)).unwrap(), want, &mut worst);
        // Forward noising.
        let steps = rng.gen_range(2..200);
        let (b0, b1) = (rng.gen_range(1e-5..1e-3), rng.gen_range(0.01..0.05));
        let schedule = make_schedule(steps, b0, b1).unwrap();
        let t = rng.gen_range(0..steps);
        let (rows, cols) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let x0 = [gaussian(&mut rng, rows, cols, 1.0), gaussian(&mut rng, rows, cols, 1.0)];
        let noise = [gaussian(&mut rng, rows, cols, 1.0), gaussian(&mut rng, rows, cols, 1.0)];
        let xt = q_sample(&x0, t, &noise, &schedule).unwrap();
        let alpha_bar: f64 = (0..=t).map(|i| 1.0 - (b0 + (b1 - b0) * i as f64 / (steps - 1) as f64)).product();
        for p in 0..2 {
            for i in 0..x0[p].len() {
                let want = alpha_bar.sqrt() * x0[p].data()[i] + (1.0 - alpha_bar).sqrt() * noise[p].data()[i];
                track("q_sample", xt[p].data()[i], want, &mut worst);
            }
        }
        // Reconstruction loss.
        let mut sq = 0.0;
        let mut n = 0;
        for p in 0..2 {
            for (u, v) in xt[p].data().iter().zip(x0[p].data()) {
                sq += (u - v).powi(2);
                n += 1;
            }
        }
        track("reconstruction_loss", reconstruction_loss(&xt, &x0).unwrap(), sq / n as f64, &mut worst);
    }
    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(
        bad.is_empty(),
        format!("{ORACLE_INSTANCES} instances each, max abs error: {}{}", summary.join(", "), bad.first().map_or(String::new(), |b| format!("; first failure {b}"))),
    )
}

// ---------------------------------------------------------------------------
// 2. Constants

fn c2_constants() -> Outcome {
    let cfg = RunConfig::default();
    let m = &cfg.model;
    let d = &cfg.diffusion;
    let schedule = d.schedule().unwrap();
    let betas = schedule.betas();
    let step = (0.02 - 1e-4) / 999.0;
    let linear = betas.windows(2).all(|w| ((w[1] - w[0]) - step).abs() < 1e-15);
    let lr = cfg.train.lr_schedule().unwrap();
    let checks = [
        ("K=3", m.segments == 3),
        ("lambda_s2=0.1", m.lambda_s2 == 0.1),
        ("lambda_s3=0.1", m.lambda_s3 == 0.1),
        ("s=1.8", d.guidance_scale == 1.8),
        ("T=1000", d.timesteps == 1000 && betas.len() == 1000),
        ("beta range", betas[0] == 1e-4 && (betas[999] - 0.02).abs() < 1e-15 && linear),
        ("layers 2/2/3", (m.self_layers, m.graph_layers, m.refine_layers) == (2, 2, 3)),
        ("lr 2e-4 -> 2e-5", lr.at(0) == 2e-4 && (lr.at(cfg.train.steps - 1) - 2e-5).abs() < 1e-18),
        ("lambda=0.5", cfg.train.lambda_distance == 0.5),
    ];
    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    outcome(failed.is_empty(), if failed.is_empty() { "all defaults match".to_string() } else { format!("mismatch: {failed:?}") })
}

// ---------------------------------------------------------------------------
// 3. Interaction weights

fn c3_interaction_weights() -> Outcome {
    let (s, k) = (9, 3);
    let layout = segment_bounds(s, k).unwrap();
    let profile = [0.2, 0.8, 0.5];
    let w = build_interaction_weights(&profile, &layout).unwrap();
    let mut ok = true;
    for f in 0..s {
        for g in 0..s {
            let eye = if f == g { 1.0 } else { 0.0 };
            ok &= w.get(f, g) == eye && w.get(s + f, s + g) == eye;
            let want = profile[layout.segment_of(f)] * profile[layout.segment_of(g)];
            ok &= w.get(f, s + g) == want && w.get(s + g, f) == want;
        }
    }
    // Worked values: frames 0 and 1 sit in segments with coefficients 0.2, 0.2 and 0.2, 0.8.
    let w04 = w.get(0, s + 1);
    let w16 = w.get(0, s + 3);
    ok &= w04 == 0.2 * 0.2 && w16 == 0.2 * 0.8;
    outcome(ok, format!("identity blocks, cross = coefficient products; 0.2*0.2 -> {w04}, 0.2*0.8 -> {w16}"))
}

// ---------------------------------------------------------------------------
// 4. Decomposer

fn c4_decomposer() -> Outcome {
    let mut problems = Vec::new();
    let r = decompose_prompt("these two return to their original position.", None);
    if r.person1 != "he returns to his original position" || r.person2 != "he returns to his original position" {
        problems.push(format!("shared: {r:?}"));
    }
    let r = decompose_prompt("one person is crossing the legs, the other person takes a picture.", None);
    if r.person1 != "one person is crossing the legs" || r.person2 != "the other person takes a picture" {
        problems.push(format!("split: {r:?}"));
    }
    let text = "the first person places both hands on the waist while facing the second.";
    let (p1, p2, _) = decompose_by_rules(text);
    if p1 != "the first person places both hands on the waist while facing the second" || p2.is_empty() || !p2.contains("second") {
        problems.push(format!("first-only: {p1} / {p2}"));
    }
    outcome(problems.is_empty(), if problems.is_empty() { format!("3 examples reproduced; generated reciprocal: \"{p2}\"") } else { problems.join("; ") })
}

// ---------------------------------------------------------------------------
// 5. Identity chain

fn c5_identity() -> Outcome {
    let cfg = ModelConfig::default();
    let mut model = FineDual::new(cfg.clone(), 11).unwrap();
    model.make_identity().unwrap();
    let d = cfg.motion_dim().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let text = model.bundle(&decompose_prompt("one person waves, the other person claps.", None));
    let mut worst: f64 = 0.0;
    for (t, bundle) in [(0, &text), (499, &text), (999, &TextBundle::null())] {
        let x = [gaussian(&mut rng, cfg.frames, d, 1.0), gaussian(&mut rng, cfg.frames, d, 1.0)];
        let (out, _) = model.predict(&x, t, bundle).unwrap();
        worst = worst.max(out[0].max_abs_diff(&x[0])).max(out[1].max_abs_diff(&x[1]));
    }
    outcome(worst <= IDENTITY_TOL, format!("max |out - in| = {worst:.2e} at default size"))
}

// ---------------------------------------------------------------------------
// 6. Gradient checks

fn weighted_sum(tape: &mut Tape, y: finedual::autodiff::Var, r: &Mat) -> finedual::autodiff::Var {
    let rv = tape.constant(r.clone());
    let p = tape.mul(y, rv);
    tape.sum_all(p)
}

fn c6_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut parts = Vec::new();

    // (a) mixed attention.
    let mut store = ParamStore::new();
    let att = MixedAttention::new(&mut store, "attn", 6, 6, &[5], &mut rng);
    let x = gaussian(&mut rng, 4, 6, 1.0);
    let text = gaussian(&mut rng, 3, 5, 1.0);
    let r = gaussian(&mut rng, 4, 6, 1.0);
    let ids: Vec<_> = (0..store.len()).collect();
    let entries = all_entries(&store, &ids);
    let a = check_param_gradients(&mut store, &entries, 1e-4, |tape, store| {
        let xv = tape.constant(x.clone());
        let tv = tape.constant(text.clone());
        let y = att.forward(tape, store, xv, &[tv])?;
        Ok(weighted_sum(tape, y, &r))
    })
    .unwrap();
    parts.push(("a attention", a));

    // (b) distance predictor + cross-entropy.
    let mut store = ParamStore::new();
    let pred = DistancePredictor::new(&mut store, "pred", 5, 7, 3, &mut rng);
    let words = gaussian(&mut rng, 4, 5, 1.0);
    let gt = [0.9, 0.3, 0.8];
    let ids: Vec<_> = (0..store.len()).collect();
    let entries = all_entries(&store, &ids);
    let b = check_param_gradients(&mut store, &entries, 1e-4, |tape, store| {
        let w = tape.constant(words.clone());
        let p = pred.forward(tape, store, w);
        Ok(distance_loss_var(tape, p, &gt))
    })
    .unwrap();
    parts.push(("b predictor+CE", b));

    // (c) graph reasoning.
    let mut store = ParamStore::new();
    let frames = 5;
    let graph = InteractionGraph::new(&mut store, "graph", frames, 2, 0.5, AdjacencyMode::Hadamard, &mut rng);
    let w_inter = build_interaction_weights(&[0.3, 0.9], &segment_bounds(frames, 2).unwrap()).unwrap();
    let xp = gaussian(&mut rng, 2 * frames, 4, 1.0);
    let r = gaussian(&mut rng, 2 * frames, 4, 1.0);
    let ids: Vec<_> = (0..store.len()).collect();
    let entries = all_entries(&store, &ids);
    let c = check_param_gradients(&mut store, &entries, 1e-4, |tape, store| {
        let xv = tape.constant(xp.clone());
        let wv = tape.constant(w_inter.clone());
        let y = graph.forward(tape, store, xv, wv)?;
        Ok(weighted_sum(tape, y, &r))
    })
    .unwrap();
    parts.push(("c graph", c));

    // (d) full denoiser, 4 frames, 1% of parameters.
    let cfg = ModelConfig { frames: 4, ..ModelConfig::default() };
    let model = FineDual::new(cfg.clone(), 21).unwrap();
    let dm = cfg.motion_dim().unwrap();
    let x = [gaussian(&mut rng, 4, dm, 1.0), gaussian(&mut rng, 4, dm, 1.0)];
    let target = [gaussian(&mut rng, 4, dm, 1.0), gaussian(&mut rng, 4, dm, 1.0)];
    let text = model.bundle(&decompose_prompt("one person is crossing the legs, the other person takes a picture.", None));
    let entries = sample_entries(&model.store, 0.01, &mut rng);
    let mut store = model.store.clone();
    let d = check_param_gradients(&mut store, &entries, 1e-4, |tape, store| {
        let xs = [tape.constant(x[0].clone()), tape.constant(x[1].clone())];
        let out = model.forward_with(tape, store, xs, 321, &text)?;
        let t0 = tape.constant(target[0].clone());
        let t1 = tape.constant(target[1].clone());
        let l0 = tape.mse(out.x0[0], t0);
        let l1 = tape.mse(out.x0[1], t1);
        let l = tape.add(l0, l1);
        let ce = distance_loss_var(tape, out.profile, &[0.7, 0.5, 0.8]);
        Ok(tape.add(l, ce))
    })
    .unwrap();
    parts.push(("d full denoiser", d));

    let pass = parts.iter().all(|(_, r)| r.max_relative_error <= GRAD_TOL);
    let detail = parts
        .iter()
        .map(|(n, r)| format!("{n}: {} entries, max rel {:.1e}", r.checked, r.max_relative_error))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

// ---------------------------------------------------------------------------
// 7. Learning

fn c7a_overfit() -> Outcome {
    let data = synth_corpus(4, &SynthConfig::default(), 0).unwrap();
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.train.steps = OVERFIT_STEPS;
    cfg.train.batch_size = 4;
    // Memorising one batch is a capacity check, so it runs at a higher rate than corpus training.
    cfg.train.lr_initial = OVERFIT_LR;
    cfg.train.lr_final = OVERFIT_LR / 10.0;
    let trained = train(&cfg, &data, &TrainOptions::default(), |_| {}).unwrap();
    let prepared = prepare(&trained.model, &trained.stats, &data).unwrap();
    let schedule = cfg.diffusion.schedule().unwrap();
    let l1 = conditioned_reconstruction(&trained, &prepared, &schedule, 16, 99).unwrap();
    let first = trained.history.first().map_or(f64::NAN, |h| h.recon);
    outcome(l1 < OVERFIT_L1, format!("L1 {l1:.4} after {OVERFIT_STEPS} steps (threshold {OVERFIT_L1}; first-step batch MSE {first:.3})"))
}

fn held_out() -> Vec<Sample> {
    synth_corpus(HELD_OUT, &SynthConfig::default(), 1_000_000).unwrap()
}

fn joint_report(trained: &TrainedModel, data: &[Sample]) -> finedual::report::Report {
    evaluate(trained, data, None, MetricSelection { joint: true, embedding: false }, 4242).unwrap()
}

fn c7b_conditioning() -> Outcome {
    let corpus = synth_corpus(CORPUS, &SynthConfig::default(), 0).unwrap();
    let held = held_out();
    let mut cfg = RunConfig::default();
    cfg.seed = 70;
    cfg.train.steps = CORPUS_STEPS;
    let full = train(&cfg, &corpus, &TrainOptions::default(), |_| {}).unwrap();
    let base = train(&cfg, &corpus, &TrainOptions { null_text: true, ..TrainOptions::default() }, |_| {}).unwrap();
    let f = joint_report(&full, &held).metric("mpjpe").unwrap();
    let b = joint_report(&base, &held).metric("mpjpe").unwrap();
    let reduction = 1.0 - f / b;
    outcome(
        reduction >= MIN_MPJPE_REDUCTION,
        format!("held-out MPJPE {f:.4} vs null baseline {b:.4}: {:.1}% lower (need {:.0}%)", 100.0 * reduction, 100.0 * MIN_MPJPE_REDUCTION),
    )
}

// ---------------------------------------------------------------------------
// 8. Ablation

fn c8_ablation() -> Outcome {
    let corpus = synth_corpus(CORPUS, &SynthConfig::default(), 0).unwrap();
    let held = held_out();
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in ABLATION_SEEDS {
        let mut cfg = RunConfig::default();
        cfg.seed = seed;
        cfg.train.steps = ABLATION_STEPS;
        let full = train(&cfg, &corpus, &TrainOptions::default(), |_| {}).unwrap();
        cfg.model.lambda_s2 = 0.0;
        cfg.train.lambda_distance = 0.0;
        let ablated = train(&cfg, &corpus, &TrainOptions::default(), |_| {}).unwrap();
        let ef = joint_report(&full, &held).metric("mpjie_abs_error").unwrap();
        let ea = joint_report(&ablated, &held).metric("mpjie_abs_error").unwrap();
        if ea > ef {
            wins += 1;
        }
        lines.push(format!("seed {seed}: full {ef:.4} vs no-stage-2 {ea:.4}"));
    }
    outcome(wins * 2 > ABLATION_SEEDS.len(), format!("MPJIE error, {wins}/{} seeds favour full model ({})", ABLATION_SEEDS.len(), lines.join("; ")))
}

// ---------------------------------------------------------------------------
// 9. CLI determinism

fn digest_dir(path: &Path) -> String {
    let mut h = Sha256::new();
    if path.is_file() {
        h.update(fs::read(path).unwrap());
    } else if path.is_dir() {
        let mut names: Vec<_> = fs::read_dir(path).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        for n in names {
            h.update(n.file_name().unwrap().to_string_lossy().as_bytes());
            h.update(fs::read(&n).unwrap());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn run_cli(args: &[&str], env_seed: Option<&str>) -> (bool, Vec<u8>) {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_finedual"));
    cmd.args(args).env_remove("FINEDUAL_SEED");
    if let Some(s) = env_seed {
        cmd.env("FINEDUAL_SEED", s);
    }
    let out = cmd.output().unwrap();
    (out.status.success(), out.stdout)
}

fn c9_cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let p = |n: &str| root.join(n).to_string_lossy().into_owned();
    fs::write(
        root.join("run.toml"),
        "seed = 5\n[model]\nframes = 12\njoint_count = 3\nlatent_dim = 16\ntext_width = 8\npredictor_hidden = 8\n\
         [train]\nsteps = 4\nbatch_size = 2\n[diffusion]\nsampler_steps = 5\n[evaluator]\nsteps = 3\nbatch = 4\n\
         [metrics]\nretrieval_pool = 4\nmultimodality_prompts = 2\n",
    )
    .unwrap();
    let (data, model, eval, gen, report) = (p("data"), p("model.fdck"), p("eval.fdck"), p("gen"), p("report"));
    let config = p("run.toml");
    let commands: Vec<(&str, Vec<&str>, Vec<String>)> = vec![
        ("synth-data", vec!["synth-data", "--count", "8", "--out", &data, "--frames", "12", "--joints", "3", "--seed", "3"], vec![data.clone()]),
        ("train", vec!["train", "--config", &config, "--data", &data, "--out", &model], vec![model.clone()]),
        ("train-evaluator", vec!["train-evaluator", "--config", &config, "--data", &data, "--out", &eval], vec![eval.clone()]),
        ("generate", vec!["generate", "--ckpt", &model, "--prompt", "one person is crossing the legs, the other person takes a picture.", "--count", "2", "--seed", "8", "--out", &gen], vec![gen.clone()]),
        ("evaluate", vec!["evaluate", "--ckpt", &model, "--data", &data, "--metrics", "all", "--evaluator", &eval, "--seed", "2", "--out", &report], vec![format!("{report}.tsv"), format!("{report}.json")]),
        ("decompose", vec!["decompose", "--prompt", "these two return to their original position."], vec![]),
        ("inspect-distance", vec!["inspect-distance", "--data", &data, "--k", "3", "--ckpt", &model], vec![]),
    ];
    let mut problems = Vec::new();
    for (name, args, outputs) in &commands {
        let mut digests = Vec::new();
        for _ in 0..2 {
            for o in outputs {
                let _ = fs::remove_dir_all(o);
                let _ = fs::remove_file(o);
            }
            let (ok, stdout) = run_cli(args, None);
            if !ok {
                problems.push(format!("{name} failed"));
            }
            let mut d: Vec<String> = outputs.iter().map(|o| digest_dir(Path::new(o))).collect();
            d.push(format!("{:x}", Sha256::digest(&stdout)));
            digests.push(d);
        }
        if digests[0] != digests[1] {
            problems.push(format!("{name} differs between runs"));
        }
    }
    // The environment seed is honoured and a flag overrides it.
    let synth = |seed_flag: Option<&str>, env: Option<&str>, out: &str| {
        let mut args = vec!["synth-data", "--count", "2", "--out", out, "--frames", "12", "--joints", "3"];
        if let Some(s) = seed_flag {
            args.extend(["--seed", s]);
        }
        run_cli(&args, env);
        digest_dir(Path::new(out))
    };
    let by_flag = synth(Some("9"), None, &p("s1"));
    let by_env = synth(None, Some("9"), &p("s2"));
    let overridden = synth(Some("9"), Some("4"), &p("s3"));
    let other = synth(None, Some("4"), &p("s4"));
    if by_flag != by_env || by_flag != overridden || by_flag == other {
        problems.push("seed environment/flag precedence wrong".into());
    }
    outcome(problems.is_empty(), if problems.is_empty() { format!("{} commands identical across two runs; env seed honoured, flag wins", commands.len()) } else { problems.join("; ") })
}
