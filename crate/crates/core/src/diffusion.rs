//! Noise schedule, forward noising, training losses, classifier-free
//! guidance and the ancestral sampler.
//!
//! The denoiser predicts clean motion (`x0`) for both persons; guidance is
//! applied to that prediction as `s·cond + (1 − s)·uncond`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Features of both persons, `[person1, person2]`, each `S × D`.
pub type PairFeatures = [Mat; 2];

/// Linear β schedule with cumulative products `ᾱ_t = Π_{i≤t}(1 − β_i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<DiffusionSchedule> {
    if steps < 1 {
        return Err(Error::invalid("diffusion needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::invalid(format!(
            "beta range must satisfy 0 < start <= end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|t| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64
            }
        })
        .collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        alpha_bars.push(acc);
    }
    Ok(DiffusionSchedule { betas, alpha_bars })
}

impl DiffusionSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t >= self.steps() {
            return Err(Error::invalid(format!("timestep {t} outside [0, {})", self.steps())));
        }
        Ok(())
    }

    /// Strided sub-sequence of timesteps in increasing order, always
    /// containing `0` and `T − 1`. `None` or a count ≥ T keeps every step.
    pub fn sampling_timesteps(&self, count: Option<usize>) -> Vec<usize> {
        let t = self.steps();
        match count {
            Some(n) if n >= 1 && n < t => {
                if n == 1 {
                    return vec![t - 1];
                }
                let mut v: Vec<usize> = (0..n)
                    .map(|i| ((i as f64) * (t - 1) as f64 / (n - 1) as f64).round() as usize)
                    .collect();
                v.dedup();
                v
            }
            _ => (0..t).collect(),
        }
    }
}

/// Classifier-free guidance scale.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceConfig {
    pub scale: f64,
}

impl GuidanceConfig {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale >= 0.0 && scale.is_finite()) {
            return Err(Error::invalid("guidance scale must be finite and non-negative"));
        }
        Ok(Self { scale })
    }
}

/// Weight of the distance cross-entropy in the total loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_distance: f64,
}

impl LossWeights {
    pub fn new(lambda_distance: f64) -> Result<Self> {
        if !(lambda_distance >= 0.0 && lambda_distance.is_finite()) {
            return Err(Error::invalid("distance loss weight must be finite and non-negative"));
        }
        Ok(Self { lambda_distance })
    }
}

/// `x_t = √ᾱ_t·x0 + √(1 − ᾱ_t)·noise`, for both persons.
pub fn q_sample(x0: &PairFeatures, t: usize, noise: &PairFeatures, schedule: &DiffusionSchedule) -> Result<PairFeatures> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bars[t];
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    let mut out = Vec::with_capacity(2);
    for (x, n) in x0.iter().zip(noise) {
        if x.shape() != n.shape() {
            return Err(Error::invalid("noise shape does not match x0"));
        }
        out.push(x.zip_map(n, |xv, nv| a * xv + b * nv));
    }
    let p2 = out.pop().expect("two persons");
    let p1 = out.pop().expect("two persons");
    Ok([p1, p2])
}

/// Standard normal noise shaped like `like`.
pub fn gaussian_like(like: &PairFeatures, rng: &mut ChaCha8Rng) -> PairFeatures {
    let draw = |m: &Mat, rng: &mut ChaCha8Rng| {
        Mat::from_vec(
            m.rows(),
            m.cols(),
            (0..m.len()).map(|_| -> f64 { StandardNormal.sample(rng) }).collect(),
        )
    };
    let a = draw(&like[0], rng);
    let b = draw(&like[1], rng);
    [a, b]
}

/// Mean squared error over both persons, all frames and channels.
pub fn reconstruction_loss(pred: &PairFeatures, target: &PairFeatures) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (p, g) in pred.iter().zip(target) {
        if p.shape() != g.shape() {
            return Err(Error::invalid(format!("shape {:?} != {:?}", p.shape(), g.shape())));
        }
        total += p.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.len();
    }
    Ok(total / count as f64)
}

/// `s·cond + (1 − s)·uncond`, elementwise.
pub fn guided_output(cond: &Mat, uncond: &Mat, scale: f64) -> Result<Mat> {
    if cond.shape() != uncond.shape() {
        return Err(Error::invalid("conditional and unconditional outputs differ in shape"));
    }
    Ok(cond.zip_map(uncond, |c, u| scale * c + (1.0 - scale) * u))
}

/// `recon + λ·distance_ce`.
pub fn total_loss(recon: f64, distance_ce: f64, weights: &LossWeights) -> Result<f64> {
    if !recon.is_finite() || !distance_ce.is_finite() {
        return Err(Error::numeric(format!("non-finite loss term (recon {recon}, distance {distance_ce})")));
    }
    Ok(recon + weights.lambda_distance * distance_ce)
}

/// A model that predicts clean features for both persons.
pub trait Denoiser {
    type Condition;

    fn predict_x0(&self, x_t: &PairFeatures, t: usize, cond: &Self::Condition) -> Result<PairFeatures>;
}

/// Options for [`sample`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamplerConfig {
    pub frames: usize,
    pub width: usize,
    /// Number of strided steps; `None` runs all `T`.
    pub steps: Option<usize>,
}

/// DDPM ancestral sampling with classifier-free guidance on predicted `x0`.
pub fn sample<D: Denoiser>(
    denoiser: &D,
    cond: &D::Condition,
    null: &D::Condition,
    schedule: &DiffusionSchedule,
    guidance: &GuidanceConfig,
    config: &SamplerConfig,
    seed: u64,
) -> Result<PairFeatures> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [Mat::zeros(config.frames, config.width), Mat::zeros(config.frames, config.width)];
    let mut x = gaussian_like(&shape, &mut rng);
    let steps = schedule.sampling_timesteps(config.steps);
    for idx in (0..steps.len()).rev() {
        let t = steps[idx];
        let cond_out = denoiser.predict_x0(&x, t, cond)?;
        let x0 = if guidance.scale == 1.0 {
            cond_out
        } else {
            let uncond_out = denoiser.predict_x0(&x, t, null)?;
            check_shape(&uncond_out, config)?;
            check_shape(&cond_out, config)?;
            [
                guided_output(&cond_out[0], &uncond_out[0], guidance.scale)?,
                guided_output(&cond_out[1], &uncond_out[1], guidance.scale)?,
            ]
        };
        check_shape(&x0, config)?;
        let ab_t = schedule.alpha_bars[t];
        let ab_prev = if idx > 0 { schedule.alpha_bars[steps[idx - 1]] } else { 1.0 };
        let beta = 1.0 - ab_t / ab_prev;
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab_t);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
        let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
        let noise = if idx > 0 { Some(gaussian_like(&x, &mut rng)) } else { None };
        for p in 0..2 {
            let mut next = x0[p].zip_map(&x[p], |a, b| c0 * a + ct * b);
            if let Some(n) = &noise {
                let sd = var.sqrt();
                next = next.zip_map(&n[p], |m, z| m + sd * z);
            }
            x[p] = next;
        }
        if !x[0].is_finite() || !x[1].is_finite() {
            return Err(Error::numeric(format!("sampler diverged at timestep {t}")));
        }
    }
    Ok(x)
}

fn check_shape(out: &PairFeatures, config: &SamplerConfig) -> Result<()> {
    for m in out {
        if m.shape() != (config.frames, config.width) {
            return Err(Error::contract(format!(
                "denoiser returned {:?}, expected ({}, {})",
                m.shape(),
                config.frames,
                config.width
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_pair(rng: &mut ChaCha8Rng, s: usize, d: usize) -> PairFeatures {
        let z = [Mat::zeros(s, d), Mat::zeros(s, d)];
        let mut p = gaussian_like(&z, rng);
        p[0].scale_assign(rng.gen_range(0.5..2.0));
        p
    }

    #[test]
    fn schedule_examples() {
        let s = make_schedule(1000, 0.0001, 0.02).unwrap();
        assert_eq!(s.betas()[0], 0.0001);
        assert!((s.betas()[999] - 0.02).abs() < 1e-15);
        assert_eq!(make_schedule(1, 0.5, 0.5).unwrap().alpha_bars(), &[0.5]);
        let s3 = make_schedule(3, 0.1, 0.3).unwrap();
        for (a, e) in s3.alpha_bars().iter().zip([0.9, 0.72, 0.504]) {
            assert!((a - e).abs() < 1e-12);
        }
        assert!(make_schedule(0, 0.1, 0.2).is_err());
        assert!(make_schedule(10, 0.3, 0.2).is_err());
        assert!(make_schedule(10, 0.0, 0.2).is_err());
        assert!(make_schedule(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn alpha_bars_strictly_decreasing() {
        let s = make_schedule(1000, 0.0001, 0.02).unwrap();
        let ab = s.alpha_bars();
        assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(ab.windows(2).all(|w| w[1] < w[0]));
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
    }

    #[test]
    fn q_sample_limits_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sched = make_schedule(1000, 1e-8, 0.02).unwrap();
        let x0 = random_pair(&mut rng, 4, 3);
        let noise = random_pair(&mut rng, 4, 3);
        let near = q_sample(&x0, 0, &noise, &sched).unwrap();
        let bound = 1e-8f64.sqrt() * 10.0;
        assert!(near[0].max_abs_diff(&x0[0]) < bound);

        let zero = [Mat::zeros(4, 3), Mat::zeros(4, 3)];
        let t = 500;
        let xt = q_sample(&x0, t, &zero, &sched).unwrap();
        assert_eq!(xt[1], x0[1].scaled(sched.alpha_bars()[t].sqrt()));

        let xt = q_sample(&x0, t, &noise, &sched).unwrap();
        let ab = sched.alpha_bars()[t];
        for p in 0..2 {
            for i in 0..x0[p].len() {
                let e = ab.sqrt() * x0[p].data()[i] + (1.0 - ab).sqrt() * noise[p].data()[i];
                assert!((xt[p].data()[i] - e).abs() < 1e-12);
            }
        }
        assert!(q_sample(&x0, 1000, &noise, &sched).is_err());
    }

    #[test]
    fn q_sample_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sched = make_schedule(100, 0.0001, 0.02).unwrap();
        for _ in 0..20 {
            let t = rng.gen_range(0..100);
            let (a, b) = (random_pair(&mut rng, 3, 2), random_pair(&mut rng, 3, 2));
            let (n1, n2) = (random_pair(&mut rng, 3, 2), random_pair(&mut rng, 3, 2));
            let sum = |x: &PairFeatures, y: &PairFeatures| {
                [x[0].zip_map(&y[0], |p, q| p + q), x[1].zip_map(&y[1], |p, q| p + q)]
            };
            let lhs = q_sample(&sum(&a, &b), t, &sum(&n1, &n2), &sched).unwrap();
            let rhs = sum(&q_sample(&a, t, &n1, &sched).unwrap(), &q_sample(&b, t, &n2, &sched).unwrap());
            assert!(lhs[0].max_abs_diff(&rhs[0]) < 1e-6 && lhs[1].max_abs_diff(&rhs[1]) < 1e-6);
        }
    }

    #[test]
    fn reconstruction_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_pair(&mut rng, 5, 4);
        assert_eq!(reconstruction_loss(&gt, &gt).unwrap(), 0.0);
        let shifted = [gt[0].map(|v| v + 1.0), gt[1].map(|v| v + 1.0)];
        assert!((reconstruction_loss(&shifted, &gt).unwrap() - 1.0).abs() < 1e-12);
        let pred = random_pair(&mut rng, 5, 4);
        let mut brute = 0.0;
        for p in 0..2 {
            for r in 0..5 {
                for c in 0..4 {
                    brute += (pred[p].get(r, c) - gt[p].get(r, c)).powi(2);
                }
            }
        }
        assert!((reconstruction_loss(&pred, &gt).unwrap() - brute / 40.0).abs() < 1e-12);
        let bad = [Mat::zeros(5, 3), Mat::zeros(5, 4)];
        assert!(reconstruction_loss(&bad, &gt).is_err());
    }

    #[test]
    fn guidance_examples() {
        let c = Mat::scalar(2.0);
        let u = Mat::scalar(1.0);
        assert_eq!(guided_output(&c, &u, 1.0).unwrap(), c);
        assert_eq!(guided_output(&c, &u, 0.0).unwrap(), u);
        assert!((guided_output(&c, &u, 1.8).unwrap().item() - 2.8).abs() < 1e-12);
        let a = Mat::from_vec(1, 3, vec![0.3, -1.0, 7.0]);
        for s in [0.0, 0.5, 1.8, 4.0] {
            assert!(guided_output(&a, &a, s).unwrap().max_abs_diff(&a) < 1e-12);
        }
    }

    #[test]
    fn total_loss_examples() {
        let w = |l| LossWeights::new(l).unwrap();
        assert_eq!(total_loss(0.7, 3.0, &w(0.0)).unwrap(), 0.7);
        assert_eq!(total_loss(1.0, 2.0, &w(0.5)).unwrap(), 2.0);
        assert_eq!(total_loss(0.0, 3.0, &w(0.25)).unwrap(), 0.75);
        assert!(matches!(total_loss(f64::NAN, 1.0, &w(0.5)), Err(Error::Numeric(_))));
    }

    struct Constant(f64, usize, usize);

    impl Denoiser for Constant {
        type Condition = ();
        fn predict_x0(&self, _: &PairFeatures, _: usize, _: &()) -> Result<PairFeatures> {
            Ok([Mat::filled(self.1, self.2, self.0), Mat::filled(self.1, self.2, self.0)])
        }
    }

    struct Wrong;

    impl Denoiser for Wrong {
        type Condition = ();
        fn predict_x0(&self, _: &PairFeatures, _: usize, _: &()) -> Result<PairFeatures> {
            Ok([Mat::zeros(1, 1), Mat::zeros(1, 1)])
        }
    }

    #[test]
    fn single_step_sampler_returns_prediction() {
        let sched = make_schedule(1, 0.5, 0.5).unwrap();
        let cfg = SamplerConfig { frames: 3, width: 2, steps: None };
        let g = GuidanceConfig::new(1.8).unwrap();
        let out = sample(&Constant(0.25, 3, 2), &(), &(), &sched, &g, &cfg, 9).unwrap();
        assert_eq!(out[0], Mat::filled(3, 2, 0.25));
        assert_eq!(out[1], Mat::filled(3, 2, 0.25));
    }

    #[test]
    fn sampler_deterministic_and_shape_checked() {
        let sched = make_schedule(50, 0.0001, 0.02).unwrap();
        let cfg = SamplerConfig { frames: 6, width: 4, steps: Some(10) };
        let g = GuidanceConfig::new(1.8).unwrap();
        let a = sample(&Constant(0.1, 6, 4), &(), &(), &sched, &g, &cfg, 5).unwrap();
        let b = sample(&Constant(0.1, 6, 4), &(), &(), &sched, &g, &cfg, 5).unwrap();
        assert_eq!(a, b);
        assert!(matches!(sample(&Wrong, &(), &(), &sched, &g, &cfg, 5), Err(Error::Contract(_))));
    }

    #[test]
    fn strided_timesteps() {
        let s = make_schedule(1000, 0.0001, 0.02).unwrap();
        let ts = s.sampling_timesteps(Some(50));
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (0, 999));
        assert!(ts.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(s.sampling_timesteps(None).len(), 1000);
    }
}
