//! Small layer building blocks on top of the autodiff tape.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::tensor::Mat;

/// Uniform Xavier/Glorot initialisation for a `fan_in × fan_out` weight.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Mat {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Mat::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect())
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| { let z: f64 = StandardNormal.sample(rng); std * z }).collect::<Vec<f64>>(),
    )
}

/// Affine map `x·W + b` applied to every row.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        let bias = Some(store.add(format!("{name}.bias"), Mat::zeros(1, fan_out)));
        Self { weight, bias }
    }

    pub fn no_bias(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(rng, fan_in, fan_out));
        Self { weight, bias: None }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }

    /// Sets weight (and bias) to zero.
    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).scale_assign(0.0);
        if let Some(b) = self.bias {
            store.get_mut(b).scale_assign(0.0);
        }
    }
}

/// Layer normalisation over the feature axis.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Mat::filled(1, width, 1.0));
        let bias = store.add(format!("{name}.bias"), Mat::zeros(1, width));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b)
    }
}

/// Position-wise `Linear → SiLU → Linear` on layer-normalized rows; the
/// caller adds the result to its residual stream.
#[derive(Clone, Copy, Debug)]
pub struct FeedForward {
    pub norm: LayerNorm,
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{name}.norm"), width),
            up: Linear::new(store, &format!("{name}.up"), width, hidden, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.norm.forward(tape, store, x);
        let h = self.up.forward(tape, store, h);
        let h = tape.silu(h);
        self.down.forward(tape, store, h)
    }

    /// Zeroes the output projection so the branch contributes nothing.
    pub fn zero_output(&self, store: &mut ParamStore) {
        self.down.zero(store);
    }
}

/// Builds `count` feed-forward blocks, or none when `hidden` is zero.
pub fn feed_forwards(
    store: &mut ParamStore,
    name: &str,
    count: usize,
    width: usize,
    hidden: usize,
    rng: &mut impl Rng,
) -> Vec<FeedForward> {
    if hidden == 0 {
        return Vec::new();
    }
    (0..count).map(|l| FeedForward::new(store, &format!("{name}.ffn{l}"), width, hidden, rng)).collect()
}

/// Sinusoidal encoding of `positions` into `width` channels.
pub fn sinusoidal(positions: &[f64], width: usize) -> Mat {
    let mut m = Mat::zeros(positions.len(), width);
    let half = width.div_ceil(2);
    for (r, &p) in positions.iter().enumerate() {
        for i in 0..width {
            let k = (i / 2) as f64;
            let freq = (-(10_000f64.ln()) * k / half as f64).exp();
            let v = if i % 2 == 0 { (p * freq).sin() } else { (p * freq).cos() };
            m.set(r, i, v);
        }
    }
    m
}

/// Positional table for `rows` consecutive positions starting at zero.
pub fn positional(rows: usize, width: usize) -> Mat {
    let pos: Vec<f64> = (0..rows).map(|i| i as f64).collect();
    sinusoidal(&pos, width)
}
