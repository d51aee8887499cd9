//! Shared building blocks and parameter initialization.

use std::sync::Arc;

use distill_substrate::{Bound, DenseArray, ParameterStore, Real, Segments, Tape, Var};
use rand::Rng;

use crate::rng::LabRng;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Collects freshly initialized parameters (in f64, cast once at the end so
/// both precisions start from the same values).
pub(crate) struct Init {
    pub store: ParameterStore<f64>,
    pub rng: LabRng,
}

impl Init {
    pub fn new(rng: LabRng) -> Self {
        Self { store: ParameterStore::new(), rng }
    }

    fn put(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        let arr = DenseArray::from_vec(shape, data).expect("init shape");
        self.store.insert(name, arr).expect("unique parameter name");
    }

    /// Weight `fan_in x fan_out` drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn weight(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let a = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        self.put(name, &[fan_in, fan_out], data);
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.put(name, &[rows, cols], vec![0.0; rows * cols]);
    }

    pub fn ones(&mut self, name: &str, cols: usize) {
        self.put(name, &[1, cols], vec![1.0; cols]);
    }

    pub fn embedding(&mut self, name: &str, rows: usize, cols: usize) {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-0.5..0.5)).collect();
        self.put(name, &[rows, cols], data);
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        self.weight(&format!("{name}.w"), fan_in, fan_out);
        self.zeros(&format!("{name}.b"), 1, fan_out);
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) {
        self.ones(&format!("{name}.g"), dim);
        self.zeros(&format!("{name}.b"), 1, dim);
    }

    pub fn attention(&mut self, name: &str, dim: usize) {
        for p in ["q", "k", "v"] {
            self.weight(&format!("{name}.w{p}"), dim, dim);
        }
        self.linear(&format!("{name}.o"), dim, dim);
    }

    pub fn feed_forward(&mut self, name: &str, dim: usize, ff: usize) {
        self.linear(&format!("{name}.up"), dim, 2 * ff);
        self.linear(&format!("{name}.down"), ff, dim);
    }

    pub fn finish<T: Real>(self) -> ParameterStore<T> {
        self.store.cast()
    }
}

/// Sinusoidal features of scalar positions, `[sin(p w_i) | cos(p w_i)]` with
/// `w_i = base^(-i / (dim/2))`.
pub(crate) fn sinusoids<T: Real>(positions: &[f64], dim: usize, base: f64) -> Vec<T> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..half {
            out.push(T::lit((p * base.powf(-(i as f64) / half as f64)).sin()));
        }
        for i in 0..half {
            out.push(T::lit((p * base.powf(-(i as f64) / half as f64)).cos()));
        }
    }
    out
}

/// Positional scale applied to relative positions in `[0, 1]`.
pub(crate) const POS_SCALE: f64 = 100.0;
pub(crate) const POS_BASE: f64 = 100.0;
/// Scale of diffusion time before its sinusoidal embedding.
pub(crate) const TIME_SCALE: f64 = 1000.0;
pub(crate) const TIME_BASE: f64 = 10_000.0;

/// Relative positions `(i + 0.5) / len` of every row in each segment.
pub(crate) fn relative_positions(seg: &Segments) -> Vec<f64> {
    let mut out = Vec::with_capacity(seg.total());
    for b in 0..seg.len() {
        let l = seg.seg_len(b) as f64;
        out.extend((0..seg.seg_len(b)).map(|i| POS_SCALE * (i as f64 + 0.5) / l));
    }
    out
}

pub(crate) fn linear<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Var {
    let w = p.get(&format!("{name}.w"));
    let b = p.get(&format!("{name}.b"));
    tape.linear(x, w, Some(b))
}

pub(crate) fn layer_norm<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Var {
    let n = tape.layer_norm(x, LN_EPS);
    let g = tape.mul_row(n, p.get(&format!("{name}.g")));
    tape.add_bias(g, p.get(&format!("{name}.b")))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn attention<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    ctx: Var,
    xseg: &Arc<Segments>,
    cseg: &Arc<Segments>,
    heads: usize,
) -> Var {
    let q = tape.matmul(x, p.get(&format!("{name}.wq")));
    let k = tape.matmul(ctx, p.get(&format!("{name}.wk")));
    let v = tape.matmul(ctx, p.get(&format!("{name}.wv")));
    let a = tape.attention(q, k, v, xseg, cseg, heads);
    linear(tape, p, &format!("{name}.o"), a)
}

pub(crate) fn feed_forward<T: Real>(tape: &mut Tape<T>, p: &Bound, name: &str, x: Var) -> Var {
    let up = linear(tape, p, &format!("{name}.up"), x);
    let g = tape.swiglu(up);
    linear(tape, p, &format!("{name}.down"), g)
}

/// Pre-norm self-attention + gated feed-forward layer.
pub(crate) fn encoder_layer<T: Real>(
    tape: &mut Tape<T>,
    p: &Bound,
    name: &str,
    x: Var,
    seg: &Arc<Segments>,
    heads: usize,
) -> Var {
    let h = layer_norm(tape, p, &format!("{name}.ln1"), x);
    let a = attention(tape, p, &format!("{name}.attn"), h, h, seg, seg, heads);
    let x = tape.add(x, a);
    let h = layer_norm(tape, p, &format!("{name}.ln2"), x);
    let f = feed_forward(tape, p, &format!("{name}.ff"), h);
    tape.add(x, f)
}

pub(crate) fn init_encoder_layer(init: &mut Init, name: &str, dim: usize, ff: usize) {
    init.layer_norm(&format!("{name}.ln1"), dim);
    init.attention(&format!("{name}.attn"), dim);
    init.layer_norm(&format!("{name}.ln2"), dim);
    init.feed_forward(&format!("{name}.ff"), dim, ff);
}
