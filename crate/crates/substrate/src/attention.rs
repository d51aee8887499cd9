//! Multi-head scaled dot-product attention over packed segments.
//!
//! Queries of segment `b` attend only to keys of segment `b`; rows of
//! different batch elements never interact.

use crate::real::{gemm, Real, View};
use crate::tape::Segments;

pub(crate) struct AttnShape<'a> {
    pub qseg: &'a Segments,
    pub kseg: &'a Segments,
    pub heads: usize,
    pub dim: usize,
}

impl AttnShape<'_> {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale<T: Real>(&self) -> T {
        T::lit(1.0 / (self.head_dim() as f64).sqrt())
    }

    pub fn probs_len(&self) -> usize {
        (0..self.qseg.len())
            .map(|b| self.qseg.seg_len(b) * self.kseg.seg_len(b) * self.heads)
            .sum()
    }
}

/// Returns `(output, probabilities)`.
pub(crate) fn forward<T: Real>(s: &AttnShape, q: &[T], k: &[T], v: &[T]) -> (Vec<T>, Vec<T>) {
    let d = s.dim;
    let dh = s.head_dim();
    let scale = s.scale::<T>();
    let mut out = vec![T::zero(); q.len()];
    let mut probs = vec![T::zero(); s.probs_len()];
    let mut poff = 0;
    for b in 0..s.qseg.len() {
        let (q0, lq) = (s.qseg.start(b), s.qseg.seg_len(b));
        let (k0, lk) = (s.kseg.start(b), s.kseg.seg_len(b));
        if lq == 0 {
            continue;
        }
        assert!(lk > 0, "attention segment {b} has queries but no keys");
        for h in 0..s.heads {
            let block = &mut probs[poff..poff + lq * lk];
            gemm(
                lq,
                dh,
                lk,
                scale,
                q,
                View::rows(q0 * d + h * dh, d),
                k,
                View::transposed(k0 * d + h * dh, d),
                T::zero(),
                block,
                View::rows(0, lk),
            );
            for row in block.chunks_mut(lk) {
                let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
                let mut z = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - mx).exp();
                    z += *x;
                }
                for x in row.iter_mut() {
                    *x /= z;
                }
            }
            gemm(
                lq,
                lk,
                dh,
                T::one(),
                block,
                View::rows(0, lk),
                v,
                View::rows(k0 * d + h * dh, d),
                T::zero(),
                &mut out,
                View::rows(q0 * d + h * dh, d),
            );
            poff += lq * lk;
        }
    }
    (out, probs)
}

/// Accumulates input gradients into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    s: &AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let d = s.dim;
    let dh = s.head_dim();
    let scale = s.scale::<T>();
    let mut poff = 0;
    let mut ds = Vec::new();
    for b in 0..s.qseg.len() {
        let (q0, lq) = (s.qseg.start(b), s.qseg.seg_len(b));
        let (k0, lk) = (s.kseg.start(b), s.kseg.seg_len(b));
        if lq == 0 {
            continue;
        }
        for h in 0..s.heads {
            let p = &probs[poff..poff + lq * lk];
            let qo = q0 * d + h * dh;
            let ko = k0 * d + h * dh;
            gemm(
                lk,
                lq,
                dh,
                T::one(),
                p,
                View::transposed(0, lk),
                dout,
                View::rows(qo, d),
                T::one(),
                dv,
                View::rows(ko, d),
            );
            ds.clear();
            ds.resize(lq * lk, T::zero());
            gemm(
                lq,
                dh,
                lk,
                T::one(),
                dout,
                View::rows(qo, d),
                v,
                View::transposed(ko, d),
                T::zero(),
                &mut ds,
                View::rows(0, lk),
            );
            for (drow, prow) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in drow.iter_mut().zip(prow) {
                    *x = pp * (*x - dot);
                }
            }
            gemm(
                lq,
                lk,
                dh,
                scale,
                &ds,
                View::rows(0, lk),
                k,
                View::rows(ko, d),
                T::one(),
                dq,
                View::rows(qo, d),
            );
            gemm(
                lk,
                lq,
                dh,
                scale,
                &ds,
                View::transposed(0, lk),
                q,
                View::rows(qo, d),
                T::one(),
                dk,
                View::rows(ko, d),
            );
            poff += lq * lk;
        }
    }
}
