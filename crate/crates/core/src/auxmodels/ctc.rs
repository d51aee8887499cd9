//! Connectionist temporal classification in the log domain.
//!
//! The target `l` is extended with blanks, `l' = (blank, l1, blank, l2, ..,
//! blank)`, and the forward variables `alpha_t(s)` accumulate the log
//! probability of all alignment prefixes ending in state `s` at frame `t`.
//! Backward variables give per-frame state occupancies, from which the
//! gradient with respect to the logits is `softmax - occupancy`.

use distill_substrate::{CustomOp, Real, Tape, Var};

use crate::error::{LabError, Result};

pub const BLANK: usize = 0;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Frames needed to emit `target`: one per label plus a blank between repeats.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn log_softmax_rows(logits: &[f64], v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks(v) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|x| x - lse));
    }
    out
}

fn check(logits_len: usize, frames: usize, v: usize, target: &[usize]) -> Result<()> {
    if v < 2 {
        return Err(LabError::invalid("CTC needs at least one label besides the blank"));
    }
    if frames == 0 || logits_len != frames * v {
        return Err(LabError::shape(format!("{logits_len} logits for {frames} frames of {v} symbols")));
    }
    if let Some(&x) = target.iter().find(|&&x| x == BLANK || x >= v) {
        return Err(LabError::invalid(format!("target symbol {x} is the blank or out of range")));
    }
    let need = min_frames(target);
    if frames < need {
        return Err(LabError::invalid(format!(
            "{frames} frames cannot align a target needing {need} (labels plus blanks between repeats)"
        )));
    }
    Ok(())
}

/// Negative log-likelihood of `target` given per-frame logits (`frames x v`,
/// normalized internally with a log-softmax), and its gradient with respect
/// to the logits. Target symbols are in `1..v`; `0` is the blank.
pub fn ctc_loss_and_grad(logits: &[f64], frames: usize, v: usize, target: &[usize]) -> Result<(f64, Vec<f64>)> {
    check(logits.len(), frames, v, target)?;
    let lp = log_softmax_rows(logits, v);
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(target.iter().flat_map(|&l| [l, BLANK]))
        .collect();
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp[ext[0]];
    if s_len > 1 {
        alpha[1] = lp[ext[1]];
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp[t * v + ext[s]] };
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 { log_add(alpha[last + s_len - 1], alpha[last + s_len - 2]) } else { alpha[last] };
    if !log_p.is_finite() {
        return Err(LabError::invalid("target has no valid alignment"));
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp[(frames - 1) * v + ext[s_len - 1]];
    if s_len > 1 {
        beta[last + s_len - 2] = lp[(frames - 1) * v + ext[s_len - 2]];
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && skip_ok(s + 2) {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp[t * v + ext[s]] };
        }
    }

    let mut grad = vec![0.0; frames * v];
    for t in 0..frames {
        let mut occ = vec![ninf; v];
        for s in 0..s_len {
            let i = t * s_len + s;
            // alpha and beta both include this frame's emission
            occ[ext[s]] = log_add(occ[ext[s]], alpha[i] + beta[i] - lp[t * v + ext[s]]);
        }
        for k in 0..v {
            grad[t * v + k] = lp[t * v + k].exp() - (occ[k] - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}

/// Negative log-likelihood only.
pub fn ctc_loss(logits: &[f64], frames: usize, v: usize, target: &[usize]) -> Result<f64> {
    Ok(ctc_loss_and_grad(logits, frames, v, target)?.0)
}

/// Per-frame argmax (lowest index on ties), merge repeats, drop blanks.
pub fn ctc_greedy_decode<T: Real>(logits: &[T], v: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for row in logits.chunks(v) {
        let mut best = 0;
        for k in 1..v {
            if row[k] > row[best] {
                best = k;
            }
        }
        if Some(best) != prev && best != BLANK {
            out.push(best);
        }
        prev = Some(best);
    }
    out
}

struct CtcNode<T> {
    grad: Vec<T>,
}

impl<T: Real> CustomOp<T> for CtcNode<T> {
    fn name(&self) -> &'static str {
        "ctc"
    }

    fn backward(&self, _inputs: &[&[T]], _output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>> {
        let g = grad_out[0];
        vec![Some(self.grad.iter().map(|&x| x * g).collect())]
    }
}

/// CTC negative log-likelihood of one sequence as a `1 x 1` tape node.
pub fn ctc_node<T: Real>(tape: &mut Tape<T>, logits: Var, target: &[usize]) -> Result<Var> {
    let (frames, v) = tape.shape(logits);
    let x: Vec<f64> = tape.value(logits).iter().map(|v| v.as_f64()).collect();
    let (loss, grad) = ctc_loss_and_grad(&x, frames, v, target)?;
    let grad = grad.into_iter().map(T::lit).collect();
    Ok(tape.custom(&[logits], 1, 1, vec![T::lit(loss)], Box::new(CtcNode { grad })))
}
