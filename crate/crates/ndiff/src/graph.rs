//! Tape recording and reverse-mode differentiation.
//!
//! A [`Graph`] is a tape: every primitive appends one node holding its forward
//! value and enough saved state to run its backward rule. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid reverse
//! topological order and each node is visited exactly once.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, NdError, Result};
use crate::params::{GradientMap, ParamId, ParamStore};
use crate::tensor::{Precision, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution padding mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub struct GraphOptions {
    pub precision: Precision,
    /// Enables ordinary dropout. Dropout requested with `always = true` ignores this.
    pub training: bool,
    pub seed: u64,
}

impl Default for GraphOptions {
    fn default() -> Self {
        GraphOptions {
            precision: Precision::F32,
            training: false,
            seed: 0,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    Abs(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout(Var, Vec<f64>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose {
        x: Var,
        a: usize,
        b: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    pad_top: usize,
    pad_left: usize,
    h_out: usize,
    w_out: usize,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Tape of one forward computation.
pub struct Graph<'p> {
    params: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    precision: Precision,
    training: bool,
    rng: ChaCha8Rng,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, opts: GraphOptions) -> Self {
        Graph {
            params: Some(params),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            precision: opts.precision,
            training: opts.training,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
        }
    }

    /// A graph without a parameter store; only inputs and constants.
    pub fn standalone(opts: GraphOptions) -> Graph<'static> {
        Graph {
            params: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            precision: opts.precision,
            training: opts.training,
            rng: ChaCha8Rng::seed_from_u64(opts.seed),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Rounds, checks finiteness and records an op result.
    fn emit(
        &mut self,
        name: &'static str,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var> {
        self.precision.round_slice(&mut data);
        if data.iter().any(|x| !x.is_finite()) {
            return Err(NdError::NumericFault { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, op, needs_grad))
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- leaves -------------------------------------------------------

    pub fn constant(&mut self, t: Tensor) -> Var {
        let mut t = t;
        self.precision.round_slice(t.data_mut());
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that may request gradients (retrievable via [`Graph::backward_inputs`]).
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let mut t = t;
        self.precision.round_slice(t.data_mut());
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.params.expect("graph has no parameter store");
        let mut t = store.get(id).clone();
        self.precision.round_slice(t.data_mut());
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let store = self.params.ok_or_else(|| {
            NdError::Contract("graph has no parameter store".to_string())
        })?;
        let id = store
            .id(name)
            .ok_or_else(|| NdError::Contract(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    // ---- linear algebra -----------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        self.emit("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return shape_err(op, format!("{:?} and {:?} do not broadcast", sa, sb));
        }
        Ok(())
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.check_broadcast(name, a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let nb = vb.numel();
        let out: Vec<f64> = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| f(*x, vb.data()[i % nb]))
            .collect();
        let shape = va.shape().to_vec();
        self.emit(name, shape, out, op, &[a, b])
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.emit("scale", shape, out, Op::Scale(a, c), &[a])
    }

    // ---- pointwise ----------------------------------------------------

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).data().iter().map(|x| f(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.emit(name, shape, out, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    // ---- normalisation ------------------------------------------------

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = last_dim(t.shape());
        if n == 0 {
            return shape_err("softmax", "empty last axis");
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row, None);
        }
        let shape = t.shape().to_vec();
        self.emit("softmax", shape, out, Op::Softmax(a), &[a])
    }

    /// Softmax of a `[rows, keys]` matrix where `allowed[r * keys + k]` gates each
    /// entry. Disallowed entries get exactly zero weight. A row with no allowed
    /// key is an error.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 2 || allowed.len() != t.numel() {
            return shape_err(
                "masked_softmax",
                format!("scores {:?} vs mask of {} entries", t.shape(), allowed.len()),
            );
        }
        let n = t.shape()[1];
        let mut out = t.data().to_vec();
        for (r, (row, m)) in out.chunks_mut(n).zip(allowed.chunks(n)).enumerate() {
            if !m.iter().any(|&x| x) {
                return Err(NdError::FullyMasked { row: r });
            }
            softmax_in_place(row, Some(m));
        }
        let shape = t.shape().to_vec();
        self.emit("masked_softmax", shape, out, Op::MaskedSoftmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = last_dim(t.shape());
        if n == 0 {
            return shape_err("log_softmax", "empty last axis");
        }
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let shape = t.shape().to_vec();
        self.emit("log_softmax", shape, out, Op::LogSoftmax(a), &[a])
    }

    /// Layer normalisation over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let n = last_dim(t.shape());
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return shape_err(
                "layer_norm",
                format!(
                    "input {:?} with gain {:?} and bias {:?}",
                    t.shape(),
                    self.shape(gain),
                    self.shape(bias)
                ),
            );
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.numel() / n.max(1);
        let mut xhat = vec![0.0; t.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; t.numel()];
        for r in 0..rows {
            let row = &t.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = xh * g[j] + b[j];
            }
        }
        let shape = t.shape().to_vec();
        self.emit(
            "layer_norm",
            shape,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Inverted dropout. Active when the graph is in training mode or `always` is set.
    pub fn dropout(&mut self, x: Var, p: f64, always: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(NdError::Contract(format!("dropout probability {p} not in [0, 1)")));
        }
        if p == 0.0 || !(self.training || always) {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        self.dropout_with_mask(x, mask)
    }

    /// Dropout with an explicit multiplicative mask (entries `0` or `1/(1-p)`).
    pub fn dropout_with_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(x).numel() {
            return shape_err(
                "dropout",
                format!("mask of {} for input {:?}", mask.len(), self.shape(x)),
            );
        }
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.emit("dropout", shape, out, Op::Dropout(x, mask), &[x])
    }

    /// Rows of `table` (`[vocab, dim]`) selected by `ids`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return shape_err("embedding_lookup", format!("table {:?}", t.shape()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NdError::Vocab { index: id, size: v });
            }
            out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
        }
        self.emit(
            "embedding_lookup",
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// 2-D convolution of a `[c_in, h, w]` input with `[c_out, c_in, kh, kw]` weights.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 4 || sx[0] != sw[1] || stride.0 == 0 || stride.1 == 0 {
            return shape_err(
                "conv2d",
                format!("input {:?}, weight {:?}, stride {:?}", sx, sw, stride),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return shape_err("conv2d", format!("bias {:?}", self.shape(b)));
            }
        }
        let (c_in, h, wd) = (sx[0], sx[1], sx[2]);
        let (c_out, kh, kw) = (sw[0], sw[2], sw[3]);
        let (sh, swd) = stride;
        let (h_out, w_out, pad_top, pad_left) = match padding {
            Padding::Same => {
                let ho = h.div_ceil(sh);
                let wo = wd.div_ceil(swd);
                let ph = ((ho.saturating_sub(1)) * sh + kh).saturating_sub(h);
                let pw = ((wo.saturating_sub(1)) * swd + kw).saturating_sub(wd);
                (ho, wo, ph / 2, pw / 2)
            }
            Padding::Valid => {
                if h < kh || wd < kw {
                    return shape_err(
                        "conv2d",
                        format!("valid padding with input {:?} smaller than kernel {:?}", sx, sw),
                    );
                }
                ((h - kh) / sh + 1, (wd - kw) / swd + 1, 0, 0)
            }
        };
        let geom = ConvGeom {
            c_in,
            h,
            w: wd,
            c_out,
            kh,
            kw,
            sh,
            sw: swd,
            pad_top,
            pad_left,
            h_out,
            w_out,
        };
        let cols = im2col(self.value(x).data(), &geom);
        let kdim = c_in * kh * kw;
        let hw = h_out * w_out;
        let mut out = matmul_raw(self.value(w).data(), &cols, c_out, kdim, hw);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for (co, chunk) in out.chunks_mut(hw.max(1)).enumerate().take(c_out) {
                for v in chunk {
                    *v += bv[co];
                }
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.emit(
            "conv2d",
            vec![c_out, h_out, w_out],
            out,
            Op::Conv2d { x, w, b, geom, cols },
            &inputs,
        )
    }

    // ---- shape ops ----------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return shape_err("reshape", format!("{:?} -> {:?}", t.shape(), shape));
        }
        let out = t.data().to_vec();
        self.emit("reshape", shape.to_vec(), out, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return shape_err("concat", "no inputs"),
        };
        if axis >= first.len() {
            return shape_err("concat", format!("axis {axis} for rank {}", first.len()));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return shape_err("concat", format!("{:?} vs {:?} on axis {axis}", s, first));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.emit(
            "concat",
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return shape_err("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, s));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let t = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner + start * inner;
            out.extend_from_slice(&t[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.emit("slice", shape, out, Op::Slice { x, axis, start }, &[x])
    }

    /// Swaps axes `a` and `b`.
    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if a >= s.len() || b >= s.len() {
            return shape_err("transpose", format!("axes ({a}, {b}) of {:?}", s));
        }
        let (out, shape) = swap_axes(self.value(x).data(), &s, a, b);
        self.emit("transpose", shape, out, Op::Transpose { x, a, b }, &[x])
    }

    /// 2-D transpose shorthand.
    pub fn t(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r != 2 {
            return shape_err("transpose", format!("t() needs rank 2, got {r}"));
        }
        self.transpose(x, 0, 1)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.emit("sum", vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return shape_err("mean", "empty tensor");
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.emit("mean", vec![], vec![s], Op::Mean(a), &[a])
    }

    // ---- backward -----------------------------------------------------

    /// Reverse pass from a scalar loss; returns gradients for every reachable parameter.
    pub fn backward(&self, loss: Var) -> Result<GradientMap> {
        let grads = self.run_backward(loss)?;
        let mut map = GradientMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(Some(g))) = (node.param, grads.get(i)) {
                let mut g = g.clone();
                self.precision.round_slice(&mut g);
                map.insert(id, Tensor::new(node.value.shape().to_vec(), g)?);
            }
        }
        Ok(map)
    }

    /// Gradients with respect to arbitrary nodes (zeros where unreachable).
    pub fn backward_inputs(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.run_backward(loss)?;
        wrt.iter()
            .map(|v| {
                let shape = self.shape(*v).to_vec();
                match &grads[v.0] {
                    Some(g) => Tensor::new(shape, g.clone()),
                    None => Ok(Tensor::zeros(&shape)),
                }
            })
            .collect()
    }

    fn run_backward(&self, loss: Var) -> Result<Vec<Option<Vec<f64>>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(NdError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.ng(loss) {
            return Err(NdError::Contract(
                "loss does not depend on any tensor that requires a gradient".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.ng(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] += dot(grow, brow);
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    // dB = Aᵀ · G
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = va[i * k + p];
                            if a_ip != 0.0 {
                                axpy(a_ip, grow, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| axpy(1.0, g, ga));
                let nb = self.value(*b).numel();
                self.accumulate(grads, *b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += sign * gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let nb = vb.len();
                self.accumulate(grads, *a, |ga| {
                    for (i, gi) in g.iter().enumerate() {
                        ga[i] += gi * vb[i % nb];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for (i, gi) in g.iter().enumerate() {
                        gb[i % nb] += gi * va[i];
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |ga| axpy(*c, g, ga)),
            Op::Relu(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        ga[i] += g[i];
                    }
                }
            }),
            Op::Tanh(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Sigmoid(a) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Softplus(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sigmoid(x[i]);
                    }
                })
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * sign(x[i]);
                    }
                })
            }
            Op::Softmax(a) | Op::MaskedSoftmax(a) => {
                let n = last_dim(node.value.shape());
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.len() / n.max(1) {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let s = dot(gr, yr);
                        for j in 0..n {
                            ga[r * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                })
            }
            Op::LogSoftmax(a) => {
                let n = last_dim(node.value.shape());
                self.accumulate(grads, *a, |ga| {
                    for r in 0..g.len() / n.max(1) {
                        let (gr, yr) = (&g[r * n..(r + 1) * n], &y[r * n..(r + 1) * n]);
                        let s: f64 = gr.iter().sum();
                        for j in 0..n {
                            ga[r * n + j] += gr[j] - yr[j].exp() * s;
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = last_dim(node.value.shape());
                let gv = self.value(*gain).data();
                let rows = g.len() / n.max(1);
                self.accumulate(grads, *x, |gx| {
                    let mut dxh = vec![0.0; n];
                    for r in 0..rows {
                        let (gr, xr) = (&g[r * n..(r + 1) * n], &xhat[r * n..(r + 1) * n]);
                        for j in 0..n {
                            dxh[j] = gr[j] * gv[j];
                        }
                        let s1: f64 = dxh.iter().sum();
                        let s2 = dot(&dxh, xr);
                        let nf = n as f64;
                        for j in 0..n {
                            gx[r * n + j] += rstd[r] / nf * (nf * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for r in 0..rows {
                        for j in 0..n {
                            gg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for r in 0..rows {
                        axpy(1.0, &g[r * n..(r + 1) * n], gb);
                    }
                });
            }
            Op::Dropout(a, mask) => self.accumulate(grads, *a, |ga| {
                for i in 0..g.len() {
                    ga[i] += g[i] * mask[i];
                }
            }),
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut gt[id * d..(id + 1) * d]);
                    }
                })
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let kdim = geom.c_in * geom.kh * geom.kw;
                let hw = geom.h_out * geom.w_out;
                let wv = self.value(*w).data();
                self.accumulate(grads, *w, |gw| {
                    // dW = G [c_out, hw] · colsᵀ [hw, kdim]
                    for co in 0..geom.c_out {
                        let grow = &g[co * hw..(co + 1) * hw];
                        for p in 0..kdim {
                            gw[co * kdim + p] += dot(grow, &cols[p * hw..(p + 1) * hw]);
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for co in 0..geom.c_out {
                            gb[co] += g[co * hw..(co + 1) * hw].iter().sum::<f64>();
                        }
                    });
                }
                self.accumulate(grads, *x, |gx| {
                    // dcols = Wᵀ · G, then scatter back.
                    let mut dcols = vec![0.0; kdim * hw];
                    for co in 0..geom.c_out {
                        let grow = &g[co * hw..(co + 1) * hw];
                        for p in 0..kdim {
                            let wv = wv[co * kdim + p];
                            if wv != 0.0 {
                                axpy(wv, grow, &mut dcols[p * hw..(p + 1) * hw]);
                            }
                        }
                    }
                    col2im(&dcols, geom, gx);
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| axpy(1.0, g, ga)),
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    self.accumulate(grads, *v, |gv| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            axpy(
                                1.0,
                                &g[src..src + len * inner],
                                &mut gv[o * len * inner..(o + 1) * len * inner],
                            );
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let s = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        let dst = o * s[*axis] * inner + start * inner;
                        axpy(
                            1.0,
                            &g[o * len * inner..(o + 1) * len * inner],
                            &mut gx[dst..dst + len * inner],
                        );
                    }
                });
            }
            Op::Transpose { x, a, b } => {
                let (back, _) = swap_axes(g, node.value.shape(), *a, *b);
                self.accumulate(grads, *x, |gx| axpy(1.0, &back, gx));
            }
            Op::Sum(a) => {
                let gv = g[0];
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += gv));
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let gv = g[0] / n;
                self.accumulate(grads, *a, |ga| ga.iter_mut().for_each(|v| *v += gv));
            }
        }
    }
}

// ---- kernels ----------------------------------------------------------

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn softmax_in_place(row: &mut [f64], allowed: Option<&[bool]>) {
    let ok = |j: usize| allowed.is_none_or(|m| m[j]);
    let mut m = f64::NEG_INFINITY;
    for (j, x) in row.iter().enumerate() {
        if ok(j) {
            m = m.max(*x);
        }
    }
    let mut z = 0.0;
    for (j, x) in row.iter_mut().enumerate() {
        if ok(j) {
            *x = (*x - m).exp();
            z += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            if a_ip != 0.0 {
                axpy(a_ip, &b[p * n..(p + 1) * n], orow);
            }
        }
    }
    out
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.h_out * g.w_out;
    let mut cols = vec![0.0; g.c_in * g.kh * g.kw * hw];
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for oi in 0..g.h_out {
                    let ii = (oi * g.sh + ki) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.w_out {
                        let jj = (oj * g.sw + kj) as isize - g.pad_left as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        cols[row * hw + oi * g.w_out + oj] =
                            x[(c * g.h + ii as usize) * g.w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let hw = g.h_out * g.w_out;
    for c in 0..g.c_in {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                for oi in 0..g.h_out {
                    let ii = (oi * g.sh + ki) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for oj in 0..g.w_out {
                        let jj = (oj * g.sw + kj) as isize - g.pad_left as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        dx[(c * g.h + ii as usize) * g.w + jj as usize] +=
                            dcols[row * hw + oi * g.w_out + oj];
                    }
                }
            }
        }
    }
}

/// Returns `data` with axes `a` and `b` exchanged, plus the new shape.
fn swap_axes(data: &[f64], shape: &[usize], a: usize, b: usize) -> (Vec<f64>, Vec<usize>) {
    let mut new_shape = shape.to_vec();
    new_shape.swap(a, b);
    if a == b {
        return (data.to_vec(), new_shape);
    }
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    // Strides of the source laid out in output-axis order.
    let mut src_strides = strides.clone();
    src_strides.swap(a, b);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..data.len() {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < new_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    (out, new_shape)
}
