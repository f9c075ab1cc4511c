//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every op appends a node holding its output value and whatever it needs
//! for the backward pass. [`Tape::backward`] walks the nodes once, newest to
//! oldest, and accumulates gradients into every node that requires them.

use std::cell::RefCell;
use std::sync::Arc;

use crate::decoders::ctc;
use crate::error::{Error, Result};
use crate::ssm::scan::{self, ScanMode};
use crate::tensor::{self, Conv2dGeom, Float, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Gelu,
    Silu,
    Softplus,
    Exp,
}

struct ScanSaved<T> {
    mode: ScanMode,
    dims: (usize, usize, usize),
    a_bar: Vec<T>,
    gain: Vec<T>,
    h: Vec<T>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Unary(Var, Unary),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    ChannelNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    FlipRows(Var),
    RepeatCols(Var),
    CausalConv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    SelectiveScan {
        inputs: [Var; 6],
        saved: Box<ScanSaved<T>>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    Ctc {
        logits: Var,
        grad: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of operations. Single-threaded; create one per forward.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor<impl Float>, b: &Tensor<impl Float>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Existing [`Var`]s become invalid.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
    }

    pub fn leaf(&self, value: impl Into<Arc<Tensor<T>>>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: value.into(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: impl Into<Arc<Tensor<T>>>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = inputs.iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(&self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, &x, &y)?;
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("add", a, b, |p, q| p + q)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("sub", a, b, |p, q| p - q)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with("mul", a, b, |p, q| p * q)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&self, a: Var, s: T) -> Result<Var> {
        let x = self.value(a);
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| v * s).collect())?;
        self.push("scale", out, Op::Scale(a, s), &[a])
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let n = *x.shape().last().unwrap_or(&0);
        if b.shape() != [n] {
            return Err(Error::dim("add_bias", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(n.max(1)) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        self.push("add_bias", out, Op::AddBias(a, bias), &[a, bias])
    }

    pub fn unary(&self, a: Var, kind: Unary) -> Result<Var> {
        let x = self.value(a);
        let f: fn(T) -> T = match kind {
            Unary::Gelu => tensor::gelu,
            Unary::Silu => tensor::silu,
            Unary::Softplus => tensor::softplus,
            Unary::Exp => |v: T| v.exp(),
        };
        let out = Tensor::new(x.shape(), x.data().iter().map(|&v| f(v)).collect())?;
        self.push("unary", out, Op::Unary(a, kind), &[a])
    }

    pub fn gelu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Gelu)
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Silu)
    }

    pub fn softplus(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Softplus)
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }

    pub fn softmax(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let cols = *x.shape().last().unwrap_or(&1);
        let out = Tensor::new(x.shape(), tensor::softmax_rows(x.data(), cols.max(1)))?;
        self.push("softmax", out, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layernorm(&self, a: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (x, g, b) = (self.value(a), self.value(gamma), self.value(beta));
        let n = *x.shape().last().unwrap_or(&0);
        if n == 0 || g.shape() != [n] || b.shape() != [n] {
            return Err(Error::dim(
                "layernorm",
                format!("x {:?}, gamma {:?}, beta {:?}", x.shape(), g.shape(), b.shape()),
            ));
        }
        let mut data = vec![T::zero(); x.len()];
        let mut stats = Vec::with_capacity(x.len() / n);
        for (row, out) in x.data().chunks(n).zip(data.chunks_mut(n)) {
            stats.push(tensor::layernorm_row(row, g.data(), b.data(), out));
        }
        let out = Tensor::new(x.shape(), data)?;
        self.push(
            "layernorm",
            out,
            Op::LayerNorm { x: a, gamma, beta, stats },
            &[a, gamma, beta],
        )
    }

    /// `x`: `C_in×H×W`, `w`: `C_out×C_in×kh×kw`, optional bias of length `C_out`.
    pub fn conv2d(&self, a: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (x, k) = (self.value(a), self.value(w));
        let (c_in, h, wd) = x.dims3()?;
        let (c_out, kc, kh, kw) = match k.shape()[..] {
            [co, ci, kh, kw] => (co, ci, kh, kw),
            _ => return Err(Error::dim("conv2d", format!("kernel shape {:?}", k.shape()))),
        };
        if kc != c_in {
            return Err(Error::dim(
                "conv2d",
                format!("input {:?} vs kernel {:?}", x.shape(), k.shape()),
            ));
        }
        let geom = Conv2dGeom { c_in, h, w: wd, c_out, kh, kw, stride, pad };
        geom.validate()?;
        let bias = b.map(|b| self.value(b));
        if let Some(bias) = &bias {
            if bias.shape() != [c_out] {
                return Err(Error::dim("conv2d", format!("bias {:?}", bias.shape())));
            }
        }
        let data = tensor::conv2d(x.data(), k.data(), bias.as_ref().map(|b| b.data()), &geom);
        let out = Tensor::new([c_out, geom.out_h(), geom.out_w()], data)?;
        let mut inputs = vec![a, w];
        inputs.extend(b);
        self.push("conv2d", out, Op::Conv2d { x: a, w, b, geom }, &inputs)
    }

    pub fn maxpool2d(&self, a: Var, ph: usize, pw: usize) -> Result<Var> {
        if ph == 0 || pw == 0 {
            return Err(Error::Argument("maxpool window must be non-empty".into()));
        }
        let x = self.value(a);
        let (c, h, w) = x.dims3()?;
        if h == 0 || w == 0 {
            return Err(Error::dim("maxpool2d", format!("empty input {:?}", x.shape())));
        }
        let (data, argmax) = tensor::maxpool2d(x.data(), c, h, w, ph, pw);
        let out = Tensor::new([c, h.div_ceil(ph), w.div_ceil(pw)], data)?;
        self.push("maxpool2d", out, Op::MaxPool { x: a, argmax }, &[a])
    }

    /// Per-channel normalization of a `C×H×W` map with fixed statistics
    /// followed by a learned affine transform.
    pub fn channel_norm(&self, a: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let (x, g, b) = (self.value(a), self.value(gamma), self.value(beta));
        let (c, h, w) = x.dims3()?;
        if g.shape() != [c] || b.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::dim("channel_norm", format!("input {:?}", x.shape())));
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut data = x.data().to_vec();
        for (ch, plane) in data.chunks_mut(h * w).enumerate() {
            for v in plane {
                *v = (*v - mean[ch]) * rstd[ch] * g.data()[ch] + b.data()[ch];
            }
        }
        let out = Tensor::new(x.shape(), data)?;
        self.push(
            "channel_norm",
            out,
            Op::ChannelNorm { x: a, gamma, beta, mean: mean.to_vec(), rstd },
            &[a, gamma, beta],
        )
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x.data()[i * c + j];
            }
        }
        self.push("transpose", Tensor::new([c, r], data)?, Op::Transpose(a), &[a])
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = (*self.value(a)).clone().reshape(shape)?;
        self.push("reshape", x, Op::Reshape(a), &[a])
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        if start + len > c {
            return Err(Error::dim("slice_cols", format!("{start}+{len} > {c}")));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x.data()[i * c + start..i * c + start + len]);
        }
        self.push("slice_cols", Tensor::new([r, len], data)?, Op::SliceCols { x: a, start }, &[a])
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        if start + len > r {
            return Err(Error::dim("slice_rows", format!("{start}+{len} > {r}")));
        }
        let data = x.data()[start * c..(start + len) * c].to_vec();
        self.push("slice_rows", Tensor::new([len, c], data)?, Op::SliceRows { x: a, start }, &[a])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::Argument("concat of nothing".into()))?);
        let (_, c) = first.dims2()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            let (r, c2) = x.dims2()?;
            if c2 != c {
                return Err(Error::dim("concat_rows", format!("{c} vs {c2} columns")));
            }
            rows += r;
            data.extend_from_slice(x.data());
        }
        self.push("concat_rows", Tensor::new([rows, c], data)?, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn flip_rows(&self, a: Var) -> Result<Var> {
        let out = self.value(a).flip_rows()?;
        self.push("flip_rows", out, Op::FlipRows(a), &[a])
    }

    /// Broadcasts an `r×1` column to `r×n`.
    pub fn repeat_cols(&self, a: Var, n: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        if c != 1 {
            return Err(Error::dim("repeat_cols", format!("expected one column, got {c}")));
        }
        let data = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        self.push("repeat_cols", Tensor::new([r, n], data)?, Op::RepeatCols(a), &[a])
    }

    /// Depthwise causal convolution along the first axis of `x` (`L×C`) with
    /// per-channel taps `w` (`C×K`, oldest tap first) and bias `b` (`C`).
    pub fn causal_conv1d(&self, a: Var, w: Var, b: Var) -> Result<Var> {
        let (x, k, bias) = (self.value(a), self.value(w), self.value(b));
        let (l, c) = x.dims2()?;
        let (kc, taps) = k.dims2()?;
        if kc != c || bias.shape() != [c] {
            return Err(Error::dim(
                "causal_conv1d",
                format!("x {:?}, w {:?}, b {:?}", x.shape(), k.shape(), bias.shape()),
            ));
        }
        let mut data = vec![T::zero(); l * c];
        for t in 0..l {
            for ch in 0..c {
                let mut acc = bias.data()[ch];
                for j in 0..taps {
                    let src = t as isize - (taps - 1 - j) as isize;
                    if src >= 0 {
                        acc += k.data()[ch * taps + j] * x.data()[src as usize * c + ch];
                    }
                }
                data[t * c + ch] = acc;
            }
        }
        self.push(
            "causal_conv1d",
            Tensor::new([l, c], data)?,
            Op::CausalConv1d { x: a, w, b },
            &[a, w, b],
        )
    }

    /// Fused ZOH discretization, selective scan and readout.
    ///
    /// `u`, `delta`: `L×D_inner`; `a`: `D_inner×N`; `b`, `c`: `L×N`;
    /// `d_skip`: `D_inner`. Output `L×D_inner`.
    pub fn selective_scan(
        &self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        mode: ScanMode,
    ) -> Result<Var> {
        let (uv, dv, av, bv, cv, sv) = (
            self.value(u),
            self.value(delta),
            self.value(a),
            self.value(b),
            self.value(c),
            self.value(d_skip),
        );
        let (l, di) = uv.dims2()?;
        let (_, n) = av.dims2()?;
        if dv.shape() != [l, di]
            || av.shape() != [di, n]
            || bv.shape() != [l, n]
            || cv.shape() != [l, n]
            || sv.shape() != [di]
        {
            return Err(Error::dim(
                "selective_scan",
                format!(
                    "u {:?}, delta {:?}, a {:?}, b {:?}, c {:?}, d {:?}",
                    uv.shape(),
                    dv.shape(),
                    av.shape(),
                    bv.shape(),
                    cv.shape(),
                    sv.shape()
                ),
            ));
        }
        let width = di * n;
        let mut a_bar = vec![T::zero(); l * width];
        let mut gain = vec![T::zero(); l * width];
        let mut bx = vec![T::zero(); l * width];
        for t in 0..l {
            for d in 0..di {
                let dt = dv.data()[t * di + d];
                let x = uv.data()[t * di + d];
                for s in 0..n {
                    let idx = (t * di + d) * n + s;
                    let (ab, g) = scan::zoh_coeff(dt, av.data()[d * n + s]);
                    a_bar[idx] = ab;
                    gain[idx] = g;
                    bx[idx] = g * bv.data()[t * n + s] * x;
                }
            }
        }
        let h = scan::scan_states(&a_bar, &bx, l, width, mode);
        let y = scan::readout(&h, cv.data(), uv.data(), sv.data(), l, di, n);
        let saved = Box::new(ScanSaved { mode, dims: (l, di, n), a_bar, gain, h });
        let inputs = [u, delta, a, b, c, d_skip];
        self.push(
            "selective_scan",
            Tensor::new([l, di], y)?,
            Op::SelectiveScan { inputs, saved },
            &inputs,
        )
    }

    /// Gathers rows of `table` (`V×D`).
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary(format!("token id {id} outside table of {v}")));
            }
            data.extend_from_slice(t.row(id));
        }
        self.push(
            "embedding",
            Tensor::new([ids.len(), d], data)?,
            Op::Embedding { table, ids: ids.to_vec() },
            &[table],
        )
    }

    /// Mean cross-entropy over the rows whose target is `Some`.
    pub fn cross_entropy(&self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let x = self.value(logits);
        let (r, k) = x.dims2()?;
        if targets.len() != r {
            return Err(Error::dim("cross_entropy", format!("{r} rows, {} targets", targets.len())));
        }
        let logp = tensor::log_softmax_rows(x.data(), k);
        let mut total = T::zero();
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= k {
                    return Err(Error::Vocabulary(format!("target id {t} outside {k} classes")));
                }
                total -= logp[i * k + t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Argument("cross-entropy with no supervised positions".into()));
        }
        let probs = logp.iter().map(|v| v.exp()).collect();
        let loss = Tensor::scalar(total / T::of(count as f64));
        self.push(
            "cross_entropy",
            loss,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            &[logits],
        )
    }

    /// CTC negative log-likelihood of `target` under per-frame `logits`
    /// (`L×|V′|`, blank at index `blank`).
    pub fn ctc_loss(&self, logits: Var, target: &[usize], blank: usize) -> Result<Var> {
        let x = self.value(logits);
        let (l, k) = x.dims2()?;
        let (loss, grad) = ctc::ctc_forward_backward(x.data(), l, k, target, blank)?;
        self.push("ctc_loss", Tensor::scalar(loss), Op::Ctc { logits, grad }, &[logits])
    }

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(Error::Argument("mean of empty tensor".into()));
        }
        let s = x.data().iter().copied().sum::<T>() / T::of(x.len() as f64);
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Usage("loss is not on this tape".into()))?;
        if root.value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        if !root.requires_grad {
            return Err(Error::Usage("backward on a tensor detached from every parameter".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let mut acc = Accum { nodes: &nodes, grads: &mut grads };
            backprop(&node.op, &node.value, &g, &mut acc);
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }
}

struct Accum<'a, T> {
    nodes: &'a [Node<T>],
    grads: &'a mut [Option<Vec<T>>],
}

impl<T: Float> Accum<'_, T> {
    fn val(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Hands a mutable gradient buffer for `v` to `f`, allocating it on
    /// first use. Skips inputs that do not require gradients.
    fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]);
        f(buf);
    }

    fn add(&mut self, v: Var, g: &[T]) {
        self.with(v, |buf| {
            for (b, &x) in buf.iter_mut().zip(g) {
                *b += x;
            }
        });
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }
}

fn backprop<T: Float>(op: &Op<T>, out: &Tensor<T>, g: &[T], acc: &mut Accum<'_, T>) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = acc.val(*a).dims2().unwrap();
            let n = acc.val(*b).shape()[1];
            if acc.wants(*a) {
                let ga = tensor::matmul_bt(g, acc.val(*b).data(), m, k, n);
                acc.add(*a, &ga);
            }
            if acc.wants(*b) {
                let gb = tensor::matmul_at(acc.val(*a).data(), g, m, k, n);
                acc.add(*b, &gb);
            }
        }
        Op::Add(a, b) => {
            acc.add(*a, g);
            acc.add(*b, g);
        }
        Op::Sub(a, b) => {
            acc.add(*a, g);
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            acc.add(*b, &neg);
        }
        Op::Mul(a, b) => {
            if acc.wants(*a) {
                let ga: Vec<T> = g.iter().zip(acc.val(*b).data()).map(|(&x, &y)| x * y).collect();
                acc.add(*a, &ga);
            }
            if acc.wants(*b) {
                let gb: Vec<T> = g.iter().zip(acc.val(*a).data()).map(|(&x, &y)| x * y).collect();
                acc.add(*b, &gb);
            }
        }
        Op::Scale(a, s) => {
            let ga: Vec<T> = g.iter().map(|&v| v * *s).collect();
            acc.add(*a, &ga);
        }
        Op::AddBias(a, bias) => {
            acc.add(*a, g);
            let n = acc.val(*bias).len();
            acc.with(*bias, |buf| {
                for row in g.chunks(n.max(1)) {
                    for (b, &x) in buf.iter_mut().zip(row) {
                        *b += x;
                    }
                }
            });
        }
        Op::Unary(a, kind) => {
            let x = acc.val(*a).data();
            let ga: Vec<T> = match kind {
                Unary::Gelu => g.iter().zip(x).map(|(&gv, &xv)| gv * tensor::gelu_grad(xv)).collect(),
                Unary::Silu => g.iter().zip(x).map(|(&gv, &xv)| gv * tensor::silu_grad(xv)).collect(),
                Unary::Softplus => g.iter().zip(x).map(|(&gv, &xv)| gv * tensor::sigmoid(xv)).collect(),
                Unary::Exp => g.iter().zip(out.data()).map(|(&gv, &yv)| gv * yv).collect(),
            };
            acc.add(*a, &ga);
        }
        Op::Softmax(a) => {
            let cols = *out.shape().last().unwrap_or(&1);
            let mut ga = vec![T::zero(); g.len()];
            for ((grow, yrow), orow) in g.chunks(cols).zip(out.data().chunks(cols)).zip(ga.chunks_mut(cols)) {
                let dot: T = grow.iter().zip(yrow).map(|(&p, &q)| p * q).sum();
                for i in 0..cols {
                    orow[i] = yrow[i] * (grow[i] - dot);
                }
            }
            acc.add(*a, &ga);
        }
        Op::LayerNorm { x, gamma, beta, stats } => {
            let xv = acc.val(*x);
            let n = *xv.shape().last().unwrap();
            let gam = acc.val(*gamma).data().to_vec();
            let mut gx = vec![T::zero(); xv.len()];
            let mut gg = vec![T::zero(); n];
            let mut gb = vec![T::zero(); n];
            let nf = T::of(n as f64);
            for (r, (&(mean, rstd), grow)) in stats.iter().zip(g.chunks(n)).enumerate() {
                let xrow = &xv.data()[r * n..(r + 1) * n];
                let mut sum_gh = T::zero();
                let mut sum_gh_xh = T::zero();
                for i in 0..n {
                    let xh = (xrow[i] - mean) * rstd;
                    gb[i] += grow[i];
                    gg[i] += grow[i] * xh;
                    let gh = grow[i] * gam[i];
                    sum_gh += gh;
                    sum_gh_xh += gh * xh;
                }
                for i in 0..n {
                    let xh = (xrow[i] - mean) * rstd;
                    let gh = grow[i] * gam[i];
                    gx[r * n + i] = rstd * (gh - sum_gh / nf - xh * sum_gh_xh / nf);
                }
            }
            acc.add(*x, &gx);
            acc.add(*gamma, &gg);
            acc.add(*beta, &gb);
        }
        Op::Conv2d { x, w, b, geom } => {
            let (gx, gk, gb) = tensor::conv2d_backward(acc.val(*x).data(), acc.val(*w).data(), g, geom);
            acc.add(*x, &gx);
            acc.add(*w, &gk);
            if let Some(b) = b {
                acc.add(*b, &gb);
            }
        }
        Op::MaxPool { x, argmax } => {
            acc.with(*x, |buf| {
                for (&i, &gv) in argmax.iter().zip(g) {
                    buf[i] += gv;
                }
            });
        }
        Op::ChannelNorm { x, gamma, beta, mean, rstd } => {
            let xv = acc.val(*x);
            let c = mean.len();
            let plane = xv.len() / c.max(1);
            let gam = acc.val(*gamma).data().to_vec();
            let mut gx = vec![T::zero(); xv.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for ch in 0..c {
                for i in ch * plane..(ch + 1) * plane {
                    let xh = (xv.data()[i] - mean[ch]) * rstd[ch];
                    gg[ch] += g[i] * xh;
                    gb[ch] += g[i];
                    gx[i] = g[i] * rstd[ch] * gam[ch];
                }
            }
            acc.add(*x, &gx);
            acc.add(*gamma, &gg);
            acc.add(*beta, &gb);
        }
        Op::Transpose(a) => {
            let (r, c) = out.dims2().unwrap();
            let mut ga = vec![T::zero(); g.len()];
            for i in 0..r {
                for j in 0..c {
                    ga[j * r + i] = g[i * c + j];
                }
            }
            acc.add(*a, &ga);
        }
        Op::Reshape(a) => acc.add(*a, g),
        Op::SliceCols { x, start } => {
            let c = acc.val(*x).shape()[1];
            let (r, len) = out.dims2().unwrap();
            acc.with(*x, |buf| {
                for i in 0..r {
                    for j in 0..len {
                        buf[i * c + start + j] += g[i * len + j];
                    }
                }
            });
        }
        Op::SliceRows { x, start } => {
            let c = acc.val(*x).shape()[1];
            acc.with(*x, |buf| {
                for (b, &gv) in buf[start * c..].iter_mut().zip(g) {
                    *b += gv;
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = acc.val(p).len();
                acc.add(p, &g[offset..offset + n]);
                offset += n;
            }
        }
        Op::FlipRows(a) => {
            let (r, c) = out.dims2().unwrap();
            let mut ga = Vec::with_capacity(g.len());
            for i in (0..r).rev() {
                ga.extend_from_slice(&g[i * c..(i + 1) * c]);
            }
            acc.add(*a, &ga);
        }
        Op::RepeatCols(a) => {
            let n = out.shape()[1];
            let ga: Vec<T> = g.chunks(n.max(1)).map(|row| row.iter().copied().sum()).collect();
            acc.add(*a, &ga);
        }
        Op::CausalConv1d { x, w, b } => {
            let xv = acc.val(*x).data().to_vec();
            let kv = acc.val(*w).data().to_vec();
            let (l, c) = out.dims2().unwrap();
            let taps = kv.len() / c.max(1);
            let mut gx = vec![T::zero(); xv.len()];
            let mut gw = vec![T::zero(); kv.len()];
            let mut gb = vec![T::zero(); c];
            for t in 0..l {
                for ch in 0..c {
                    let gv = g[t * c + ch];
                    gb[ch] += gv;
                    for j in 0..taps {
                        let src = t as isize - (taps - 1 - j) as isize;
                        if src >= 0 {
                            let si = src as usize * c + ch;
                            gw[ch * taps + j] += gv * xv[si];
                            gx[si] += gv * kv[ch * taps + j];
                        }
                    }
                }
            }
            acc.add(*x, &gx);
            acc.add(*w, &gw);
            acc.add(*b, &gb);
        }
        Op::SelectiveScan { inputs, saved } => scan_backward(inputs, saved, g, acc),
        Op::Embedding { table, ids } => {
            let d = acc.val(*table).shape()[1];
            acc.with(*table, |buf| {
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[id * d + j] += g[r * d + j];
                    }
                }
            });
        }
        Op::CrossEntropy { logits, targets, probs, count } => {
            let k = acc.val(*logits).shape()[1];
            let scale = g[0] / T::of(*count as f64);
            let mut gl = vec![T::zero(); probs.len()];
            for (r, t) in targets.iter().enumerate() {
                if let Some(t) = *t {
                    for j in 0..k {
                        gl[r * k + j] = probs[r * k + j] * scale;
                    }
                    gl[r * k + t] -= scale;
                }
            }
            acc.add(*logits, &gl);
        }
        Op::Ctc { logits, grad } => {
            let gl: Vec<T> = grad.iter().map(|&v| v * g[0]).collect();
            acc.add(*logits, &gl);
        }
        Op::Sum(a) => {
            let n = acc.val(*a).len();
            acc.add(*a, &vec![g[0]; n]);
        }
        Op::Mean(a) => {
            let n = acc.val(*a).len();
            acc.add(*a, &vec![g[0] / T::of(n as f64); n]);
        }
    }
}

fn scan_backward<T: Float>(inputs: &[Var; 6], saved: &ScanSaved<T>, gy: &[T], acc: &mut Accum<'_, T>) {
    let [u, delta, a, b, c, d_skip] = *inputs;
    let (l, di, n) = saved.dims;
    let _ = saved.mode;
    let uv = acc.val(u).data().to_vec();
    let dv = acc.val(delta).data().to_vec();
    let av = acc.val(a).data().to_vec();
    let bv = acc.val(b).data().to_vec();
    let cv = acc.val(c).data().to_vec();
    let sv = acc.val(d_skip).data().to_vec();

    let mut g_u = vec![T::zero(); l * di];
    let mut g_delta = vec![T::zero(); l * di];
    let mut g_a = vec![T::zero(); di * n];
    let mut g_b = vec![T::zero(); l * n];
    let mut g_c = vec![T::zero(); l * n];
    let mut g_d = vec![T::zero(); di];
    // ā_{t+1} ⊙ ∂L/∂h_{t+1}, carried backwards through time.
    let mut carry = vec![T::zero(); di * n];
    let width = di * n;

    for t in (0..l).rev() {
        for d in 0..di {
            let gyd = gy[t * di + d];
            let x = uv[t * di + d];
            let dt = dv[t * di + d];
            g_d[d] += gyd * x;
            g_u[t * di + d] += gyd * sv[d];
            for s in 0..n {
                let idx = (t * di + d) * n + s;
                let h = saved.h[idx];
                g_c[t * n + s] += gyd * h;
                let dh = gyd * cv[t * n + s] + carry[d * n + s];
                let h_prev = if t > 0 { saved.h[idx - width] } else { T::zero() };
                let a_bar = saved.a_bar[idx];
                let gain = saved.gain[idx];
                carry[d * n + s] = a_bar * dh;

                let g_abar = dh * h_prev;
                let bval = bv[t * n + s];
                g_u[t * di + d] += dh * gain * bval;
                let g_bbar = dh * x;
                g_b[t * n + s] += g_bbar * gain;
                let g_gain = g_bbar * bval;

                let av_ds = av[d * n + s];
                let (dg_ddelta, dg_da) = scan::zoh_gain_grad(dt, av_ds);
                g_delta[t * di + d] += g_abar * av_ds * a_bar + g_gain * dg_ddelta;
                g_a[d * n + s] += g_abar * dt * a_bar + g_gain * dg_da;
            }
        }
    }
    acc.add(u, &g_u);
    acc.add(delta, &g_delta);
    acc.add(a, &g_a);
    acc.add(b, &g_b);
    acc.add(c, &g_c);
    acc.add(d_skip, &g_d);
}
