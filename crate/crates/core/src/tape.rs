//! Computation tape with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are stored
//! in creation order, so the tape is always topologically sorted and
//! [`Tape::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise operations exposed through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemOp {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Sqrt,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    /// Population variance (divides by the axis length).
    Var,
}

/// Operation kinds, used for fault injection and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Scale,
    Offset,
    Powf,
    MatMul,
    Conv1d,
    Slice,
    Concat,
    Reshape,
    Reduce,
    Softmax,
    LogSoftmax,
    WeightedSum,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Sqrt => "sqrt",
            OpKind::Scale => "scale",
            OpKind::Offset => "offset",
            OpKind::Powf => "powf",
            OpKind::MatMul => "matmul",
            OpKind::Conv1d => "conv1d",
            OpKind::Slice => "slice",
            OpKind::Concat => "concat",
            OpKind::Reshape => "reshape",
            OpKind::Reduce => "reduce",
            OpKind::Softmax => "softmax",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::WeightedSum => "weighted_sum",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        const ALL: [OpKind; 23] = [
            OpKind::Leaf,
            OpKind::Add,
            OpKind::Sub,
            OpKind::Mul,
            OpKind::Div,
            OpKind::Relu,
            OpKind::Sigmoid,
            OpKind::Tanh,
            OpKind::Exp,
            OpKind::Log,
            OpKind::Sqrt,
            OpKind::Scale,
            OpKind::Offset,
            OpKind::Powf,
            OpKind::MatMul,
            OpKind::Conv1d,
            OpKind::Slice,
            OpKind::Concat,
            OpKind::Reshape,
            OpKind::Reduce,
            OpKind::Softmax,
            OpKind::LogSoftmax,
            OpKind::WeightedSum,
        ];
        ALL.into_iter().find(|k| k.name() == name)
    }
}

/// Scales every input gradient produced by one op kind. Test hook for
/// checking that gradient verification catches a broken backward.
#[derive(Debug, Clone, Copy)]
pub struct GradFault {
    pub op: OpKind,
    pub factor: f64,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Binary { kind: OpKind, a: Var, b: Var },
    Unary { kind: OpKind, x: Var },
    Scale { x: Var, factor: T },
    Offset { x: Var },
    Powf { x: Var, exponent: T },
    MatMul { a: Var, b: Var },
    Conv1d { x: Var, w: Var, bias: Option<Var>, pad: usize, dilation: usize },
    Slice { x: Var, start: usize },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Reduce { kind: ReduceOp, x: Var, axis: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    WeightedSum { weights: Var, items: Vec<Var> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Binary { kind, .. } | Op::Unary { kind, .. } => *kind,
            Op::Scale { .. } => OpKind::Scale,
            Op::Offset { .. } => OpKind::Offset,
            Op::Powf { .. } => OpKind::Powf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Slice { .. } => OpKind::Slice,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Reduce { .. } => OpKind::Reduce,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LogSoftmax { .. } => OpKind::LogSoftmax,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

/// Recorded computation. Single-threaded; build one per forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    values: Vec<Tensor<T>>,
    ops: Vec<Op<T>>,
    needs_grad: Vec<bool>,
    recording: bool,
    consumed: bool,
    macs: u64,
    track_kinks: bool,
    kink_hash: u64,
    fault: Option<GradFault>,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    /// A recording tape.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            needs_grad: Vec::new(),
            recording: true,
            consumed: false,
            macs: 0,
            track_kinks: false,
            kink_hash: FNV_OFFSET,
            fault: None,
        }
    }

    /// A tape that only evaluates; [`Tape::backward`] is unavailable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Fold the sign pattern of every ReLU input into [`Tape::kink_signature`].
    pub fn track_kinks(mut self) -> Self {
        self.track_kinks = true;
        self
    }

    pub fn with_fault(mut self, fault: Option<GradFault>) -> Self {
        self.fault = fault;
        self
    }

    /// Hash of all ReLU activation patterns seen so far (only when tracking).
    pub fn kink_signature(&self) -> u64 {
        self.kink_hash
    }

    /// Multiply-accumulates performed by weight-application ops
    /// (matmul, conv1d, weighted_sum) since the tape was created.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, self.recording)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push_leaf(t, false)
    }

    fn push_leaf(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.values.push(t);
        self.ops.push(Op::Leaf);
        self.needs_grad.push(needs_grad);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        let kind = op.kind();
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        let needs = self.recording && inputs.iter().any(|v| self.needs_grad[v.0]);
        self.values.push(value);
        self.ops.push(if needs { op } else { Op::Leaf });
        self.needs_grad.push(needs);
        Ok(Var(self.values.len() - 1))
    }

    // ---- elementwise ----------------------------------------------------

    pub fn elementwise(&mut self, op: ElemOp, a: Var, b: Option<Var>) -> Result<Var> {
        let binary = |kind| match b {
            Some(b) => Ok((kind, b)),
            None => Err(Error::invalid(format!("{op:?} needs two operands"))),
        };
        match op {
            ElemOp::Add => {
                let (k, b) = binary(OpKind::Add)?;
                self.binary(k, a, b)
            }
            ElemOp::Sub => {
                let (k, b) = binary(OpKind::Sub)?;
                self.binary(k, a, b)
            }
            ElemOp::Mul => {
                let (k, b) = binary(OpKind::Mul)?;
                self.binary(k, a, b)
            }
            ElemOp::Relu => self.unary(OpKind::Relu, a),
            ElemOp::Sigmoid => self.unary(OpKind::Sigmoid, a),
            ElemOp::Exp => self.unary(OpKind::Exp, a),
            ElemOp::Log => self.unary(OpKind::Log, a),
            ElemOp::Sqrt => self.unary(OpKind::Sqrt, a),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Div, a, b)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(OpKind::Sqrt, x)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::from_f64(factor);
        let out: Vec<T> = self.values[x.0].data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::Scale { x, factor: f }, &[x])
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64(c);
        let out: Vec<T> = self.values[x.0].data().iter().map(|&v| v + c).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::Offset { x }, &[x])
    }

    /// `x^exponent` for `x >= 0`.
    pub fn powf(&mut self, x: Var, exponent: f64) -> Result<Var> {
        let e = T::from_f64(exponent);
        let xs = self.values[x.0].data();
        if xs.iter().any(|&v| v < T::ZERO) {
            return Err(Error::Domain {
                op: "powf",
                detail: "negative base".into(),
            });
        }
        let out: Vec<T> = xs.iter().map(|&v| v.powf(e)).collect();
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::Powf { x, exponent: e }, &[x])
    }

    fn unary(&mut self, kind: OpKind, x: Var) -> Result<Var> {
        let xs = self.values[x.0].data();
        if matches!(kind, OpKind::Log | OpKind::Sqrt) && xs.iter().any(|&v| v < T::ZERO) {
            return Err(Error::Domain {
                op: kind.name(),
                detail: "negative input".into(),
            });
        }
        let f: fn(T) -> T = match kind {
            OpKind::Relu => |v| if v > T::ZERO { v } else { T::ZERO },
            OpKind::Sigmoid => sigmoid,
            OpKind::Tanh => |v| v.tanh(),
            OpKind::Exp => |v| v.exp(),
            OpKind::Log => |v| v.ln(),
            OpKind::Sqrt => |v| v.sqrt(),
            _ => unreachable!("not a unary op: {kind:?}"),
        };
        let out: Vec<T> = xs.iter().map(|&v| f(v)).collect();
        if kind == OpKind::Relu && self.track_kinks {
            let mut h = self.kink_hash;
            for &v in xs {
                h = (h ^ u64::from(v > T::ZERO)).wrapping_mul(FNV_PRIME);
            }
            self.kink_hash = h;
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(value, Op::Unary { kind, x }, &[x])
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        let out_shape = broadcast_shape(ta.shape(), tb.shape()).ok_or_else(|| {
            Error::shape(
                kind.name(),
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            )
        })?;
        let f: fn(T, T) -> T = match kind {
            OpKind::Add => |x, y| x + y,
            OpKind::Sub => |x, y| x - y,
            OpKind::Mul => |x, y| x * y,
            OpKind::Div => |x, y| x / y,
            _ => unreachable!("not a binary op: {kind:?}"),
        };
        let out = if ta.shape() == tb.shape() {
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect()
        } else {
            let n: usize = out_shape.iter().product();
            let mut out = Vec::with_capacity(n);
            let (xa, xb) = (ta.data(), tb.data());
            for_each_broadcast(&out_shape, ta.shape(), tb.shape(), |_, ia, ib| {
                out.push(f(xa[ia], xb[ib]));
            });
            out
        };
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Binary { kind, a, b }, &[a, b])
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[m,k] · b[k,n]`. Counts `m·k·n` multiply-accumulates.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} · {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.macs += (m * k * n) as u64;
        let value = Tensor::new([m, n], out)?;
        self.push(value, Op::MatMul { a, b }, &[a, b])
    }

    /// 1-D cross-correlation of `x[C_in,T]` with `w[C_out,C_in,k]`.
    /// Counts `C_out·C_in·k·T_out` multiply-accumulates.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        pad: usize,
        dilation: usize,
    ) -> Result<Var> {
        let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
        if tx.rank() != 2 || tw.rank() != 3 {
            return Err(Error::shape(
                "conv1d",
                format!("x {:?}, w {:?}", tx.shape(), tw.shape()),
            ));
        }
        let (c_in, t_in) = (tx.shape()[0], tx.shape()[1]);
        let (c_out, wc_in, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if wc_in != c_in {
            return Err(Error::shape(
                "conv1d",
                format!("input has {c_in} channels, weight expects {wc_in}"),
            ));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d dilation must be >= 1"));
        }
        let geom = ConvGeom::new(c_in, c_out, k, t_in, pad, dilation)?;
        if let Some(b) = bias {
            if self.values[b.0].shape() != [c_out] {
                return Err(Error::shape(
                    "conv1d",
                    format!("bias {:?}, expected [{c_out}]", self.values[b.0].shape()),
                ));
            }
        }
        let mut out = vec![T::ZERO; c_out * geom.t_out];
        if let Some(b) = bias {
            let bs = self.values[b.0].data();
            for (o, row) in out.chunks_mut(geom.t_out).enumerate() {
                row.fill(bs[o]);
            }
        }
        conv_forward(&geom, tx.data(), tw.data(), &mut out);
        self.macs += (c_out * c_in * k * geom.t_out) as u64;
        let value = Tensor::new([c_out, geom.t_out], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        self.push(
            value,
            Op::Conv1d {
                x,
                w,
                bias,
                pad,
                dilation,
            },
            &inputs,
        )
    }

    /// `Σ_k weights[k] · items[k]`. Counts `K·numel` multiply-accumulates.
    pub fn weighted_sum(&mut self, weights: Var, items: &[Var]) -> Result<Var> {
        let tw = &self.values[weights.0];
        if items.is_empty() || tw.numel() != items.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} items", tw.numel(), items.len()),
            ));
        }
        let shape = self.shape(items[0]).to_vec();
        if items.iter().any(|&v| self.shape(v) != shape.as_slice()) {
            return Err(Error::shape("weighted_sum", "items differ in shape"));
        }
        let ws = tw.data().to_vec();
        let n: usize = shape.iter().product();
        let mut out = vec![T::ZERO; n];
        for (&w, &item) in ws.iter().zip(items) {
            for (o, &v) in out.iter_mut().zip(self.values[item.0].data()) {
                *o += w * v;
            }
        }
        self.macs += (items.len() * n) as u64;
        let value = Tensor::new(shape, out)?;
        let mut inputs = vec![weights];
        inputs.extend_from_slice(items);
        self.push(
            value,
            Op::WeightedSum {
                weights,
                items: items.to_vec(),
            },
            &inputs,
        )
    }

    // ---- structure ------------------------------------------------------

    /// Rows `start..start+len` along axis 0.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let shape = t.shape();
        if len == 0 || start + len > shape[0] {
            return Err(Error::shape(
                "slice",
                format!("rows {start}..{} of {:?}", start + len, shape),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.to_vec();
        out_shape[0] = len;
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Slice { x, start }, &[x])
    }

    /// Splits axis 0 into `parts` equal contiguous blocks.
    pub fn split_channels(&mut self, x: Var, parts: usize) -> Result<Vec<Var>> {
        let c = self.shape(x)[0];
        if parts == 0 || !c.is_multiple_of(parts) {
            return Err(Error::shape(
                "split_channels",
                format!("{parts} parts do not divide {c} channels"),
            ));
        }
        let width = c / parts;
        (0..parts)
            .map(|p| self.slice0(x, p * width, width))
            .collect()
    }

    /// Concatenates along axis 0.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = &self.values[p.0];
            if t.shape()[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs trailing {:?}", t.shape(), tail),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[x.0].reshape(shape.to_vec())?;
        self.push(value, Op::Reshape { x }, &[x])
    }

    // ---- reductions -----------------------------------------------------

    /// Reduces along `axis`, dropping it. A fully reduced tensor has shape `[1]`.
    pub fn reduce(&mut self, op: ReduceOp, x: Var, axis: usize) -> Result<Var> {
        let t = &self.values[x.0];
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::shape(
                "reduce",
                format!("axis {axis} for rank {}", shape.len()),
            ));
        }
        let (outer, n, inner) = split_axis(shape, axis);
        let xs = t.data();
        let inv_n = T::ONE / T::from_usize(n);
        let mut out = vec![T::ZERO; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| xs[(o * n + j) * inner + i];
                let sum: T = (0..n).map(at).sum();
                out[o * inner + i] = match op {
                    ReduceOp::Sum => sum,
                    ReduceOp::Mean => sum * inv_n,
                    ReduceOp::Var => {
                        let mean = sum * inv_n;
                        (0..n)
                            .map(|j| {
                                let d = at(j) - mean;
                                d * d
                            })
                            .sum::<T>()
                            * inv_n
                    }
                };
            }
        }
        let mut out_shape: Vec<usize> = shape.to_vec();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Reduce { kind: op, x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(ReduceOp::Sum, flat, 0)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.values[x.0].numel();
        let flat = self.reshape(x, &[n])?;
        self.reduce(ReduceOp::Mean, flat, 0)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.values[x.0];
        if axis >= t.rank() {
            return Err(Error::shape("softmax", format!("axis {axis}")));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| out[idx(j)]).fold(out[idx(0)], T::max);
                let mut z = T::ZERO;
                for j in 0..n {
                    let e = (out[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / z;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { x, axis }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = &self.values[x.0];
        if axis >= t.rank() {
            return Err(Error::shape("log_softmax", format!("axis {axis}")));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| out[idx(j)]).fold(out[idx(0)], T::max);
                let lse = m + (0..n).map(|j| (out[idx(j)] - m).exp()).sum::<T>().ln();
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] - lse;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push(value, Op::LogSoftmax { x, axis }, &[x])
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. The tape can be swept once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Tape("backward on a non-recording tape".into()));
        }
        if self.consumed {
            return Err(Error::Tape("backward called twice on the same tape".into()));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![T::ONE]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.needs_grad[id] {
                grads[id] = Some(g);
                continue;
            }
            let op = &self.ops[id];
            let mut contribs = self.node_backward(id, op, &g);
            if let Some(fault) = self.fault {
                if fault.op == op.kind() {
                    let f = T::from_f64(fault.factor);
                    for (_, c) in contribs.iter_mut() {
                        c.iter_mut().for_each(|v| *v *= f);
                    }
                }
            }
            for (v, c) in contribs {
                if !self.needs_grad[v.0] {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&c).for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(c),
                }
            }
            grads[id] = Some(g);
        }

        let shapes = self.values.iter().map(|t| t.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn node_backward(&self, id: usize, op: &Op<T>, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let out = &self.values[id];
        match op {
            Op::Leaf => Vec::new(),
            Op::Binary { kind, a, b } => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let (xa, xb) = (ta.data(), tb.data());
                let mut ga = vec![T::ZERO; ta.numel()];
                let mut gb = vec![T::ZERO; tb.numel()];
                let mut k = 0;
                for_each_broadcast(out.shape(), ta.shape(), tb.shape(), |_, ia, ib| {
                    let gv = g[k];
                    k += 1;
                    match kind {
                        OpKind::Add => {
                            ga[ia] += gv;
                            gb[ib] += gv;
                        }
                        OpKind::Sub => {
                            ga[ia] += gv;
                            gb[ib] -= gv;
                        }
                        OpKind::Mul => {
                            ga[ia] += gv * xb[ib];
                            gb[ib] += gv * xa[ia];
                        }
                        OpKind::Div => {
                            ga[ia] += gv / xb[ib];
                            gb[ib] -= gv * xa[ia] / (xb[ib] * xb[ib]);
                        }
                        _ => unreachable!(),
                    }
                });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Unary { kind, x } => {
                let xs = self.values[x.0].data();
                let ys = out.data();
                let gx = (0..g.len())
                    .map(|i| {
                        let (xv, yv, gv) = (xs[i], ys[i], g[i]);
                        match kind {
                            OpKind::Relu => {
                                if xv > T::ZERO {
                                    gv
                                } else {
                                    T::ZERO
                                }
                            }
                            OpKind::Sigmoid => gv * yv * (T::ONE - yv),
                            OpKind::Tanh => gv * (T::ONE - yv * yv),
                            OpKind::Exp => gv * yv,
                            OpKind::Log => gv / xv,
                            OpKind::Sqrt => gv / (T::from_f64(2.0) * yv),
                            _ => unreachable!(),
                        }
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|&v| v * *factor).collect())],
            Op::Offset { x } => vec![(*x, g.to_vec())],
            Op::Powf { x, exponent } => {
                let e = *exponent;
                let xs = self.values[x.0].data();
                let gx = xs
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        if xv == T::ZERO {
                            if e == T::ONE {
                                gv
                            } else {
                                T::ZERO
                            }
                        } else {
                            gv * e * xv.powf(e - T::ONE)
                        }
                    })
                    .collect();
                vec![(*x, gx)]
            }
            Op::MatMul { a, b } => {
                let (ta, tb) = (&self.values[a.0], &self.values[b.0]);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                // dA = G·Bᵀ, dB = Aᵀ·G
                let mut ga = vec![T::ZERO; m * k];
                let mut gb = vec![T::ZERO; k * n];
                let (xa, xb) = (ta.data(), tb.data());
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &xb[p * n..(p + 1) * n];
                        let mut acc = T::ZERO;
                        for j in 0..n {
                            acc += grow[j] * brow[j];
                        }
                        ga[i * k + p] = acc;
                        let av = xa[i * k + p];
                        let gbrow = &mut gb[p * n..(p + 1) * n];
                        for j in 0..n {
                            gbrow[j] += av * grow[j];
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv1d {
                x,
                w,
                bias,
                pad,
                dilation,
            } => {
                let (tx, tw) = (&self.values[x.0], &self.values[w.0]);
                let (c_in, t_in) = (tx.shape()[0], tx.shape()[1]);
                let (c_out, k) = (tw.shape()[0], tw.shape()[2]);
                let geom = ConvGeom::new(c_in, c_out, k, t_in, *pad, *dilation)
                    .expect("geometry validated in forward");
                let mut gx = vec![T::ZERO; tx.numel()];
                let mut gw = vec![T::ZERO; tw.numel()];
                conv_backward(&geom, tx.data(), tw.data(), g, &mut gx, &mut gw);
                let mut res = vec![(*x, gx), (*w, gw)];
                if let Some(b) = bias {
                    let gb = g
                        .chunks(geom.t_out)
                        .map(|row| row.iter().copied().sum())
                        .collect();
                    res.push((*b, gb));
                }
                res
            }
            Op::Slice { x, start } => {
                let tx = &self.values[x.0];
                let inner: usize = tx.shape()[1..].iter().product();
                let mut gx = vec![T::ZERO; tx.numel()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                vec![(*x, gx)]
            }
            Op::Concat { parts } => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let n = self.values[p.0].numel();
                        let gp = g[offset..offset + n].to_vec();
                        offset += n;
                        (p, gp)
                    })
                    .collect()
            }
            Op::Reshape { x } => vec![(*x, g.to_vec())],
            Op::Reduce { kind, x, axis } => {
                let tx = &self.values[x.0];
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let xs = tx.data();
                let inv_n = T::ONE / T::from_usize(n);
                let mut gx = vec![T::ZERO; tx.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gv = g[o * inner + i];
                        let idx = |j: usize| (o * n + j) * inner + i;
                        match kind {
                            ReduceOp::Sum => (0..n).for_each(|j| gx[idx(j)] = gv),
                            ReduceOp::Mean => (0..n).for_each(|j| gx[idx(j)] = gv * inv_n),
                            ReduceOp::Var => {
                                let mean = (0..n).map(|j| xs[idx(j)]).sum::<T>() * inv_n;
                                let two = T::from_f64(2.0);
                                for j in 0..n {
                                    gx[idx(j)] = gv * two * (xs[idx(j)] - mean) * inv_n;
                                }
                            }
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let ys = out.data();
                let mut gx = vec![T::ZERO; ys.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| g[idx(j)] * ys[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = ys[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let ys = out.data();
                let mut gx = vec![T::ZERO; ys.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let gsum: T = (0..n).map(|j| g[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = g[idx(j)] - ys[idx(j)].exp() * gsum;
                        }
                    }
                }
                vec![(*x, gx)]
            }
            Op::WeightedSum { weights, items } => {
                let ws = self.values[weights.0].data();
                let mut gw = vec![T::ZERO; ws.len()];
                let mut res = Vec::with_capacity(items.len() + 1);
                for (k, &item) in items.iter().enumerate() {
                    let xs = self.values[item.0].data();
                    gw[k] = xs.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    res.push((item, g.iter().map(|&v| v * ws[k]).collect()));
                }
                res.push((*weights, gw));
                res
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not influence the loss.
    pub fn get(&self, v: Var) -> Tensor<T> {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient matches node shape"),
            None => Tensor::zeros(shape),
        }
    }

    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// NumPy-style broadcast of two shapes (right-aligned, extents equal or 1).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn aligned_strides(shape: &[usize], rank: usize) -> Vec<usize> {
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for (i, &d) in shape.iter().enumerate().rev() {
        let slot = rank - shape.len() + i;
        strides[slot] = if d == 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Calls `f(out_offset, a_offset, b_offset)` for every output element in
/// row-major order.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    let (sa, sb) = (aligned_strides(a, rank), aligned_strides(b, rank));
    let n: usize = out.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for k in 0..n {
        f(k, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

struct ConvGeom {
    c_in: usize,
    c_out: usize,
    k: usize,
    t_in: usize,
    t_out: usize,
    pad: usize,
    dilation: usize,
}

impl ConvGeom {
    fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        t_in: usize,
        pad: usize,
        dilation: usize,
    ) -> Result<Self> {
        let span = dilation * (k - 1);
        if t_in + 2 * pad <= span {
            return Err(Error::shape(
                "conv1d",
                format!("output length < 1 (T={t_in}, pad={pad}, dilation={dilation}, k={k})"),
            ));
        }
        Ok(Self {
            c_in,
            c_out,
            k,
            t_in,
            t_out: t_in + 2 * pad - span,
            pad,
            dilation,
        })
    }

    /// Output range `[lo, hi)` whose tap `j` lands inside the input, and the
    /// input offset (signed) for that tap.
    fn tap_range(&self, j: usize) -> (usize, usize, isize) {
        let shift = (j * self.dilation) as isize - self.pad as isize;
        let lo = (-shift).max(0) as usize;
        let hi = ((self.t_in as isize - shift).max(0) as usize).min(self.t_out);
        (lo, hi.max(lo), shift)
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    for o in 0..g.c_out {
        let orow = &mut out[o * g.t_out..(o + 1) * g.t_out];
        for i in 0..g.c_in {
            let xrow = &x[i * g.t_in..(i + 1) * g.t_in];
            for j in 0..g.k {
                let wv = w[(o * g.c_in + i) * g.k + j];
                let (lo, hi, shift) = g.tap_range(j);
                for t in lo..hi {
                    orow[t] += wv * xrow[(t as isize + shift) as usize];
                }
            }
        }
    }
}

fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    grad_out: &[T],
    gx: &mut [T],
    gw: &mut [T],
) {
    for o in 0..g.c_out {
        let grow = &grad_out[o * g.t_out..(o + 1) * g.t_out];
        for i in 0..g.c_in {
            let xrow = &x[i * g.t_in..(i + 1) * g.t_in];
            let gxrow = &mut gx[i * g.t_in..(i + 1) * g.t_in];
            for j in 0..g.k {
                let widx = (o * g.c_in + i) * g.k + j;
                let wv = w[widx];
                let (lo, hi, shift) = g.tap_range(j);
                let mut acc = T::ZERO;
                for t in lo..hi {
                    let s = (t as isize + shift) as usize;
                    acc += grow[t] * xrow[s];
                    gxrow[s] += wv * grow[t];
                }
                gw[widx] += acc;
            }
        }
    }
}
