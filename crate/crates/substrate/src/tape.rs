//! Reverse-mode differentiation tape.
//!
//! Every value on the tape is a row-major `rows x cols` matrix. Operations
//! append nodes; [`Tape::backward`] walks them in reverse and accumulates
//! vector-Jacobian products. Leaves created with [`Tape::constant`] (and
//! everything computed only from constants) never receive gradients, which
//! is also how stop-gradient boundaries are expressed.
//!
//! Batches of variable-length sequences are packed along the row axis and
//! described by [`Segments`]; segment-aware operations (attention, pooling,
//! per-sample modulation) never mix rows of different segments.

use std::sync::Arc;

use indexmap::IndexMap;

use crate::array::DenseArray;
use crate::attention::{self, AttnShape};
use crate::error::{Error, Result};
use crate::real::{gemm, Real, View};
use crate::store::ParameterStore;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row ranges of the packed batch elements.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segments {
    offsets: Vec<usize>,
    owner: Vec<usize>,
}

impl Segments {
    pub fn from_lengths(lengths: &[usize]) -> Arc<Self> {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        let mut owner = Vec::with_capacity(lengths.iter().sum());
        offsets.push(0);
        for (b, &l) in lengths.iter().enumerate() {
            offsets.push(offsets[b] + l);
            owner.extend(std::iter::repeat_n(b, l));
        }
        Arc::new(Self { offsets, owner })
    }

    /// Number of segments (batch elements).
    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn start(&self, b: usize) -> usize {
        self.offsets[b]
    }

    pub fn seg_len(&self, b: usize) -> usize {
        self.offsets[b + 1] - self.offsets[b]
    }

    pub fn range(&self, b: usize) -> std::ops::Range<usize> {
        self.offsets[b]..self.offsets[b + 1]
    }

    /// Segment index owning packed row `row`.
    pub fn owner(&self, row: usize) -> usize {
        self.owner[row]
    }

    pub fn lengths(&self) -> Vec<usize> {
        (0..self.len()).map(|b| self.seg_len(b)).collect()
    }
}

/// A differentiable operation defined outside this crate.
///
/// `backward` returns one optional gradient per input (same length as the
/// input's value); `None` means no contribution.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&[T]], output: &[T], grad_out: &[T]) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sum(Var),
    RowSum(Var),
    Silu(Var),
    SwiGlu(Var),
    LayerNorm { x: Var, rstd: Vec<T> },
    Modulate { x: Var, shift: Var, scale: Var, seg: Arc<Segments> },
    SegExpand { x: Var, seg: Arc<Segments> },
    SegMean { x: Var, seg: Arc<Segments> },
    Attention { q: Var, k: Var, v: Var, qseg: Arc<Segments>, kseg: Arc<Segments>, heads: usize, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    LogSoftmax(Var),
    Softmax(Var),
    L2Normalize { x: Var, norms: Vec<T> },
    RowDot(Var, Var),
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Sum(..) => "sum",
            Op::RowSum(..) => "row_sum",
            Op::Silu(..) => "silu",
            Op::SwiGlu(..) => "swiglu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Modulate { .. } => "modulate",
            Op::SegExpand { .. } => "seg_expand",
            Op::SegMean { .. } => "seg_mean",
            Op::Attention { .. } => "attention",
            Op::Embedding { .. } => "embedding",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Softmax(..) => "softmax",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::RowDot(..) => "row_dot",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

struct Node<T: Real> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. Not shared across threads; build one per worker.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    fault: Option<(&'static str, usize)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter leaves bound onto a tape, addressable by name.
pub struct Bound {
    vars: IndexMap<String, (Var, Vec<usize>)>,
}

impl Bound {
    /// Leaf for parameter `name`. Panics if the parameter was not bound,
    /// which indicates a mismatch between a network and its store.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some((v, _)) => *v,
            None => panic!("parameter `{name}` is not bound on this tape"),
        }
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).map(|(v, _)| *v)
    }

    /// Gathers the gradients of every bound parameter; unreached ones are zero.
    pub fn collect<T: Real>(&self, grads: &Gradients<T>) -> ParameterStore<T> {
        let mut out = ParameterStore::new();
        for (name, (var, shape)) in &self.vars {
            let arr = match grads.get(*var) {
                Some(g) => DenseArray::from_vec(shape, g.to_vec()).expect("gradient shape"),
                None => DenseArray::zeros(shape),
            };
            out.insert(name.clone(), arr).expect("unique names");
        }
        out
    }
}

/// Result of a backward pass.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

macro_rules! binary_same_shape {
    ($self:ident, $a:ident, $b:ident) => {{
        let (ra, ca) = $self.shape($a);
        let (rb, cb) = $self.shape($b);
        assert!(
            ra == rb && ca == cb,
            "shape mismatch: {ra}x{ca} vs {rb}x{cb}"
        );
        (ra, ca)
    }};
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>) -> Var {
        debug_assert_eq!(value.len(), rows * cols, "{}", op.name());
        let needs_grad = match &op {
            Op::Leaf => false,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        let idx = self.nodes.len();
        if self.fault.is_none() && value.iter().any(|x| !x.is_finite()) {
            self.fault = Some((op.name(), idx));
        }
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Var(idx)
    }

    fn op_inputs(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::AddBias(a, b)
            | Op::MulRow(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::RowDot(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Sum(x)
            | Op::RowSum(x)
            | Op::Silu(x)
            | Op::SwiGlu(x)
            | Op::LogSoftmax(x)
            | Op::Softmax(x) => vec![*x],
            Op::LayerNorm { x, .. }
            | Op::SegExpand { x, .. }
            | Op::SegMean { x, .. }
            | Op::SliceCols { x, .. }
            | Op::GatherRows { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
            Op::Modulate { x, shift, scale, .. } => vec![*x, *shift, *scale],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(xs) | Op::ConcatRows(xs) => xs.clone(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    /// First non-finite forward value, if any.
    pub fn fault(&self) -> Option<Error> {
        self.fault.map(|(op, node)| Error::NonFinite { op, node })
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        assert_eq!(n.value.len(), 1, "not a scalar");
        n.value[0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves -----------------------------------------------------------

    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        assert_eq!(data.len(), rows * cols, "constant data length");
        self.push(rows, cols, data, Op::Leaf)
    }

    /// A leaf that receives gradients.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<T>) -> Var {
        let v = self.constant(rows, cols, data);
        self.nodes[v.0].needs_grad = true;
        v
    }

    pub fn scalar_const(&mut self, x: T) -> Var {
        self.constant(1, 1, vec![x])
    }

    /// Puts every parameter of `store` on the tape. With `trainable == false`
    /// the leaves are constants: the parameters act as frozen weights.
    pub fn bind(&mut self, store: &ParameterStore<T>, trainable: bool) -> Bound {
        let mut vars = IndexMap::with_capacity(store.len());
        for (name, arr) in store.iter() {
            let (r, c) = arr.as_matrix_dims();
            let v = if trainable {
                self.input(r, c, arr.data().to_vec())
            } else {
                self.constant(r, c, arr.data().to_vec())
            };
            vars.insert(name.to_string(), (v, arr.shape().to_vec()));
        }
        Bound { vars }
    }

    /// Detached copy of `x`: same value, no gradient flows back.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let data = self.value(x).to_vec();
        self.constant(r, c, data)
    }

    // ---- dense algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {n}x{k} * {k2}x{m}");
        let mut out = vec![T::zero(); n * m];
        gemm(
            n,
            k,
            m,
            T::one(),
            self.value(a),
            View::rows(0, k),
            self.value(b),
            View::rows(0, m),
            T::zero(),
            &mut out,
            View::rows(0, m),
        );
        self.push(n, m, out, Op::MatMul(a, b))
    }

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(b), (1, c), "bias shape");
        let bv = self.value(b);
        let out: Vec<T> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        self.push(r, c, out, Op::AddBias(x, b))
    }

    /// Multiplies every row of `x` elementwise by the `1 x cols` row `g`.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(g), (1, c), "row shape");
        let gv = self.value(g);
        let out: Vec<T> = self
            .value(x)
            .chunks(c)
            .flat_map(|row| row.iter().zip(gv).map(|(&a, &b)| a * b))
            .collect();
        self.push(r, c, out, Op::MulRow(x, g))
    }

    /// `x W + b` for `W: in x out` and optional `b: 1 x out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let y = self.matmul(x, w);
        match b {
            Some(b) => self.add_bias(y, b),
            None => y,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = binary_same_shape!(self, a, b);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        self.push(r, c, out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = binary_same_shape!(self, a, b);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        self.push(r, c, out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = binary_same_shape!(self, a, b);
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        self.push(r, c, out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let (r, cc) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * c).collect();
        self.push(r, cc, out, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let (r, cc) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v + c).collect();
        self.push(r, cc, out, Op::AddScalar(x))
    }

    /// Sum of all entries, as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(1, 1, vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::lit(1.0 / n as f64))
    }

    /// Per-row sums, `rows x 1`.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).chunks(c).map(|row| row.iter().copied().sum()).collect();
        self.push(r, 1, out, Op::RowSum(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x)
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn silu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|&v| v * sigmoid(v)).collect();
        self.push(r, c, out, Op::Silu(x))
    }

    /// Gated unit: splits columns into halves `[a | b]` and returns `silu(a) * b`.
    pub fn swiglu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        assert!(c % 2 == 0, "swiglu needs an even width");
        let h = c / 2;
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(|row| {
                let (a, b) = row.split_at(h);
                a.iter().zip(b).map(|(&a, &b)| a * sigmoid(a) * b).collect::<Vec<_>>()
            })
            .collect();
        self.push(r, h, out, Op::SwiGlu(x))
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let inv_c = T::lit(1.0 / c as f64);
        for row in self.value(x).chunks(c) {
            let mu = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_c;
            let rs = T::one() / (var + T::lit(eps)).sqrt();
            out.extend(row.iter().map(|&v| (v - mu) * rs));
            rstd.push(rs);
        }
        self.push(r, c, out, Op::LayerNorm { x, rstd })
    }

    /// `x * (1 + scale[s]) + shift[s]` where `s` is the segment owning each row
    /// and `shift`, `scale` are `segments x cols`.
    pub fn modulate(&mut self, x: Var, shift: Var, scale: Var, seg: &Arc<Segments>) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r, seg.total(), "modulate rows vs segments");
        assert_eq!(self.shape(shift), (seg.len(), c), "shift shape");
        assert_eq!(self.shape(scale), (seg.len(), c), "scale shape");
        let (xv, sh, sc) = (self.value(x), self.value(shift), self.value(scale));
        let mut out = Vec::with_capacity(r * c);
        for (i, row) in xv.chunks(c).enumerate() {
            let s = seg.owner(i);
            let (shr, scr) = (&sh[s * c..(s + 1) * c], &sc[s * c..(s + 1) * c]);
            out.extend((0..c).map(|j| row[j] * (T::one() + scr[j]) + shr[j]));
        }
        self.push(r, c, out, Op::Modulate { x, shift, scale, seg: seg.clone() })
    }

    /// Broadcasts per-segment rows (`segments x cols`) to every packed row.
    pub fn seg_expand(&mut self, x: Var, seg: &Arc<Segments>) -> Var {
        let (b, c) = self.shape(x);
        assert_eq!(b, seg.len(), "seg_expand rows vs segments");
        let xv = self.value(x);
        let mut out = Vec::with_capacity(seg.total() * c);
        for i in 0..seg.total() {
            let s = seg.owner(i);
            out.extend_from_slice(&xv[s * c..(s + 1) * c]);
        }
        self.push(seg.total(), c, out, Op::SegExpand { x, seg: seg.clone() })
    }

    /// Mean over the rows of each segment, `segments x cols`.
    pub fn seg_mean(&mut self, x: Var, seg: &Arc<Segments>) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r, seg.total(), "seg_mean rows vs segments");
        let xv = self.value(x);
        let mut out = vec![T::zero(); seg.len() * c];
        for b in 0..seg.len() {
            let n = seg.seg_len(b);
            assert!(n > 0, "seg_mean over empty segment {b}");
            let o = &mut out[b * c..(b + 1) * c];
            for i in seg.range(b) {
                for j in 0..c {
                    o[j] += xv[i * c + j];
                }
            }
            let inv = T::lit(1.0 / n as f64);
            o.iter_mut().for_each(|v| *v *= inv);
        }
        self.push(seg.len(), c, out, Op::SegMean { x, seg: seg.clone() })
    }

    /// Multi-head attention; queries of segment `b` see only keys of segment `b`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        qseg: &Arc<Segments>,
        kseg: &Arc<Segments>,
        heads: usize,
    ) -> Var {
        let (rq, d) = self.shape(q);
        assert_eq!(self.shape(k), (kseg.total(), d), "key shape");
        assert_eq!(self.shape(v), (kseg.total(), d), "value shape");
        assert_eq!(rq, qseg.total(), "query rows vs segments");
        assert_eq!(qseg.len(), kseg.len(), "query/key batch size");
        assert!(heads > 0 && d % heads == 0, "dim {d} not divisible by {heads} heads");
        let shape = AttnShape { qseg, kseg, heads, dim: d };
        let (out, probs) = attention::forward(&shape, self.value(q), self.value(k), self.value(v));
        self.push(
            rq,
            d,
            out,
            Op::Attention { q, k, v, qseg: qseg.clone(), kseg: kseg.clone(), heads, probs },
        )
    }

    /// Row lookup into `table` (`vocab x cols`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let (v, c) = self.shape(table);
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            assert!(id < v, "embedding id {id} out of range {v}");
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        self.push(ids.len(), c, out, Op::Embedding { table, ids: ids.to_vec() })
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let r = self.shape(xs[0]).0;
        let widths: Vec<usize> = xs
            .iter()
            .map(|&x| {
                let (rr, c) = self.shape(x);
                assert_eq!(rr, r, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&x, &w) in xs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(x)[i * w..(i + 1) * w]);
            }
        }
        self.push(r, total, out, Op::ConcatCols(xs.to_vec()))
    }

    /// Stacks inputs with equal widths on top of each other.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "concat of nothing");
        let c = self.shape(xs[0]).1;
        let mut out = Vec::new();
        for &x in xs {
            assert_eq!(self.shape(x).1, c, "concat_rows width mismatch");
            out.extend_from_slice(self.value(x));
        }
        let r = out.len() / c;
        self.push(r, c, out, Op::ConcatRows(xs.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let (r, c) = self.shape(x);
        assert!(start < end && end <= c, "slice {start}..{end} of {c} columns");
        let out = self.value(x).chunks(c).flat_map(|row| row[start..end].to_vec()).collect();
        self.push(r, end - start, out, Op::SliceCols { x, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let (r, c) = self.shape(x);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "row {i} out of range {r}");
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, out, Op::GatherRows { x, idx: idx.to_vec() })
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        self.push(r, c, out, Op::LogSoftmax(x))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).chunks(c) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let start = out.len();
            out.extend(row.iter().map(|&v| (v - mx).exp()));
            let z: T = out[start..].iter().copied().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        self.push(r, c, out, Op::Softmax(x))
    }

    /// Scales each row to unit L2 norm. Zero rows are a fault.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c);
        let mut norms = Vec::with_capacity(r);
        for row in self.value(x).chunks(c) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            // zero norm -> non-finite output, reported through the fault slot
            out.extend(row.iter().map(|&v| v / n));
            norms.push(n);
        }
        self.push(r, c, out, Op::L2Normalize { x, norms })
    }

    /// Per-row dot products, `rows x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (r, c) = binary_same_shape!(self, a, b);
        let out = self
            .value(a)
            .chunks(c)
            .zip(self.value(b).chunks(c))
            .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
            .collect();
        self.push(r, 1, out, Op::RowDot(a, b))
    }

    /// Records an externally computed node. `value` must already hold the
    /// forward result of `op` applied to `inputs`.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        rows: usize,
        cols: usize,
        value: Vec<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Var {
        self.push(rows, cols, value, Op::Custom { inputs: inputs.to_vec(), op })
    }

    // ---- reverse pass -----------------------------------------------------

    /// Gradients of the scalar `root` with respect to every node that needs one.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let (r, c) = self.shape(root);
        if r * c != 1 {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        if let Some(e) = self.fault() {
            return Err(e);
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { op: "backward", node: i });
                }
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n.value.len()]))
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let (rows, cols) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (n, k) = self.shape(*a);
                let m = cols;
                if let Some(da) = self.slot(grads, *a) {
                    gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g,
                        View::rows(0, m),
                        self.value(*b),
                        View::transposed(0, m),
                        T::one(),
                        da,
                        View::rows(0, k),
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(
                        k,
                        n,
                        m,
                        T::one(),
                        self.value(*a),
                        View::transposed(0, k),
                        g,
                        View::rows(0, m),
                        T::one(),
                        db,
                        View::rows(0, m),
                    );
                }
            }
            Op::AddBias(x, b) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    for row in g.chunks(cols) {
                        add_into(db, row);
                    }
                }
            }
            Op::MulRow(x, r) => {
                let rv = self.value(*r).to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    for (drow, grow) in dx.chunks_mut(cols).zip(g.chunks(cols)) {
                        for j in 0..cols {
                            drow[j] += grow[j] * rv[j];
                        }
                    }
                }
                let xv = self.value(*x);
                if let Some(dr) = self.slot(grads, *r) {
                    for (xrow, grow) in xv.chunks(cols).zip(g.chunks(cols)) {
                        for j in 0..cols {
                            dr[j] += grow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    add_into(da, g);
                }
                if let Some(db) = self.slot(grads, *b) {
                    db.iter_mut().zip(g).for_each(|(d, &gg)| *d -= gg);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gg), &o) in da.iter_mut().zip(g).zip(bv) {
                        *d += gg * o;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gg), &o) in db.iter_mut().zip(g).zip(av) {
                        *d += gg * o;
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, &gg)| *d += gg * *c);
                }
            }
            Op::AddScalar(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    add_into(dx, g);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::RowSum(x) => {
                let c = self.shape(*x).1;
                if let Some(dx) = self.slot(grads, *x) {
                    for (drow, &gg) in dx.chunks_mut(c).zip(g) {
                        drow.iter_mut().for_each(|d| *d += gg);
                    }
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gg), &v) in dx.iter_mut().zip(g).zip(xv) {
                        let s = sigmoid(v);
                        *d += gg * s * (T::one() + v * (T::one() - s));
                    }
                }
            }
            Op::SwiGlu(x) => {
                let c = self.shape(*x).1;
                let h = c / 2;
                let xv = self.value(*x);
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, xrow), grow) in dx.chunks_mut(c).zip(xv.chunks(c)).zip(g.chunks(h)) {
                        for j in 0..h {
                            let (a, b) = (xrow[j], xrow[h + j]);
                            let s = sigmoid(a);
                            let silu = a * s;
                            drow[j] += grow[j] * b * s * (T::one() + a * (T::one() - s));
                            drow[h + j] += grow[j] * silu;
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_c = T::lit(1.0 / cols as f64);
                    for (r, ((drow, yrow), grow)) in
                        dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)).enumerate()
                    {
                        let mg = grow.iter().copied().sum::<T>() * inv_c;
                        let mgy = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
                        for j in 0..cols {
                            drow[j] += rstd[r] * (grow[j] - mg - yrow[j] * mgy);
                        }
                    }
                }
            }
            Op::Modulate { x, shift, scale, seg } => {
                let xv = self.value(*x);
                let scv = self.value(*scale).to_vec();
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, (drow, grow)) in dx.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        let s = seg.owner(r);
                        for j in 0..cols {
                            drow[j] += grow[j] * (T::one() + scv[s * cols + j]);
                        }
                    }
                }
                if let Some(dsh) = self.slot(grads, *shift) {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        let s = seg.owner(r);
                        add_into(&mut dsh[s * cols..(s + 1) * cols], grow);
                    }
                }
                if let Some(dsc) = self.slot(grads, *scale) {
                    for (r, (grow, xrow)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                        let s = seg.owner(r);
                        for j in 0..cols {
                            dsc[s * cols + j] += grow[j] * xrow[j];
                        }
                    }
                }
            }
            Op::SegExpand { x, seg } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, grow) in g.chunks(cols).enumerate() {
                        let s = seg.owner(r);
                        add_into(&mut dx[s * cols..(s + 1) * cols], grow);
                    }
                }
            }
            Op::SegMean { x, seg } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..seg.len() {
                        let inv = T::lit(1.0 / seg.seg_len(b) as f64);
                        let grow = &g[b * cols..(b + 1) * cols];
                        for r in seg.range(b) {
                            for j in 0..cols {
                                dx[r * cols + j] += grow[j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Attention { q, k, v, qseg, kseg, heads, probs } => {
                let shape = AttnShape { qseg, kseg, heads: *heads, dim: cols };
                let mut dq = vec![T::zero(); self.value(*q).len()];
                let mut dk = vec![T::zero(); self.value(*k).len()];
                let mut dv = vec![T::zero(); self.value(*v).len()];
                attention::backward(
                    &shape,
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    probs,
                    g,
                    &mut dq,
                    &mut dk,
                    &mut dv,
                );
                for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if let Some(slot) = self.slot(grads, var) {
                        add_into(slot, &d);
                    }
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(dt) = self.slot(grads, *table) {
                    for (grow, &id) in g.chunks(cols).zip(ids) {
                        add_into(&mut dt[id * cols..(id + 1) * cols], grow);
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let mut off = 0;
                for &x in xs {
                    let w = self.shape(x).1;
                    if let Some(dx) = self.slot(grads, x) {
                        for r in 0..rows {
                            add_into(&mut dx[r * w..(r + 1) * w], &g[r * cols + off..r * cols + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if let Some(dx) = self.slot(grads, x) {
                        add_into(dx, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x).1;
                if let Some(dx) = self.slot(grads, *x) {
                    for r in 0..rows {
                        add_into(&mut dx[r * c + start..r * c + start + cols], &g[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (grow, &r) in g.chunks(cols).zip(idx) {
                        add_into(&mut dx[r * cols..(r + 1) * cols], grow);
                    }
                }
            }
            Op::LogSoftmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, yrow), grow) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let s: T = grow.iter().copied().sum();
                        for j in 0..cols {
                            drow[j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, yrow), grow) in dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                        let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            drow[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, ((drow, yrow), grow)) in
                        dx.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)).enumerate()
                    {
                        let s: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            drow[j] += (grow[j] - yrow[j] * s) / norms[r];
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let c = self.shape(*a).1;
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    for r in 0..rows {
                        for j in 0..c {
                            da[r * c + j] += g[r] * bv[r * c + j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for r in 0..rows {
                        for j in 0..c {
                            db[r * c + j] += g[r] * av[r * c + j];
                        }
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&[T]> = inputs.iter().map(|&v| self.value(v)).collect();
                let contribs = op.backward(&vals, y, g);
                for (&var, contrib) in inputs.iter().zip(contribs) {
                    if let (Some(d), Some(slot)) = (contrib, self.slot(grads, var)) {
                        add_into(slot, &d);
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    debug_assert_eq!(dst.len(), src.len());
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Evaluates a scalar loss built by `f` over `params` and returns its value
/// together with one gradient array per parameter.
pub fn value_and_grad<T, F>(params: &ParameterStore<T>, f: F) -> Result<(T, ParameterStore<T>)>
where
    T: Real,
    F: FnOnce(&mut Tape<T>, &Bound) -> Result<Var>,
{
    try_value_and_grad(params, f)
}

/// [`value_and_grad`] for loss builders with their own error type.
pub fn try_value_and_grad<T, E, F>(params: &ParameterStore<T>, f: F) -> std::result::Result<(T, ParameterStore<T>), E>
where
    T: Real,
    E: From<Error>,
    F: FnOnce(&mut Tape<T>, &Bound) -> std::result::Result<Var, E>,
{
    let mut tape = Tape::new();
    let bound = tape.bind(params, true);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;
    let value = tape.scalar(loss);
    let out = bound.collect(&grads);
    for (name, g) in out.iter() {
        if !g.is_finite() {
            return Err(Error::NonFiniteGrad(name.to_string()).into());
        }
    }
    Ok((value, out))
}
