//! Tape-based reverse-mode autodiff.
//!
//! Every builder method evaluates its op eagerly and appends a node, so node
//! order is a valid topological order by construction. `backward` walks the
//! tape once in reverse.

use super::linalg::{col2im_add, gemm, im2col, ConvGeometry};
use super::{NumericsError, Tensor};

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Option<Vec<f64>>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Softmax(Var),
    LogSumExpLast(Var),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Acos(Var),
    Cos(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    SumLeading(Var),
    BroadcastLast(Var),
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherLast {
        x: Var,
        index: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

/// One forward pass worth of recorded computation.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn fmt_shape(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: receives a gradient on `backward`.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, true, true)
    }

    /// Non-trainable leaf (inputs, frozen weights, labels).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_node(value, Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like the node value.
    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.to_vec()).expect("grad shape"))
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool, is_param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_node(value, op, rg, false)
    }

    fn check(&self, v: Var) -> Result<(), NumericsError> {
        if v.0 >= self.nodes.len() {
            return Err(NumericsError::UnknownVar {
                id: v.0,
                len: self.nodes.len(),
            });
        }
        Ok(())
    }

    fn shape_err(&self, op: &'static str, expected: String, actual: String) -> NumericsError {
        NumericsError::Shape {
            op,
            node: self.nodes.len(),
            expected,
            actual,
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(self.shape_err(op, fmt_shape(sa), fmt_shape(sb)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var, NumericsError> {
        self.check(x)?;
        let out = self.value(x).map(f);
        Ok(self.push(out, op, &[x]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("div", a, b)?;
        let out = self.zip(a, b, |x, y| x / y);
        Ok(self.push(out, Op::Div(a, b), &[a, b]))
    }

    /// `x[..., c] + b[c]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        self.check(b)?;
        let c = self.value(x).last_dim();
        if self.shape(b) != [c] {
            return Err(self.shape_err("add_bias", format!("[{c}]"), fmt_shape(self.shape(b))));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var, NumericsError> {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", "[m, k] x [k, n]".into(), format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut c,
            0.0,
        );
        let out = Tensor::new(vec![m, n], c)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// NHWC convolution. `w` is `[kh, kw, c_in, c_out]`, `b` is `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var, NumericsError> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[3] != ws[2] || stride == 0 {
            return Err(self.shape_err(
                "conv2d",
                "x [n, h, w, c], w [kh, kw, c, o], stride >= 1".into(),
                format!("x {xs:?}, w {ws:?}, stride {stride}"),
            ));
        }
        if self.shape(b) != [ws[3]] {
            return Err(self.shape_err("conv2d", format!("bias [{}]", ws[3]), fmt_shape(self.shape(b))));
        }
        if xs[1] + 2 * pad < ws[0] || xs[2] + 2 * pad < ws[1] {
            return Err(self.shape_err(
                "conv2d",
                "kernel no larger than padded input".into(),
                format!("x {xs:?}, w {ws:?}, pad {pad}"),
            ));
        }
        let geom = ConvGeometry {
            batch: xs[0],
            height: xs[1],
            width: xs[2],
            in_channels: xs[3],
            kernel_h: ws[0],
            kernel_w: ws[1],
            stride,
            pad,
            out_h: (xs[1] + 2 * pad - ws[0]) / stride + 1,
            out_w: (xs[2] + 2 * pad - ws[1]) / stride + 1,
        };
        let co = ws[3];
        let cols = im2col(self.value(x).data(), &geom);
        let rows = geom.rows();
        let mut out = Vec::with_capacity(rows * co);
        let bias = self.value(b).data();
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        gemm(
            rows,
            geom.patch(),
            co,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            1.0,
        );
        let out = Tensor::new(vec![geom.batch, geom.out_h, geom.out_w, co], out)?;
        // cols are only needed for the weight gradient
        let keep = self.requires_grad(w).then_some(cols);
        Ok(self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: keep,
            },
            &[x, w, b],
        ))
    }

    /// 2x2 max-pool with stride 2 over NHWC; H and W must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(self.shape_err("max_pool2", "[n, even h, even w, c]".into(), fmt_shape(&s)));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        let mut argmax = vec![0usize; out.len()];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut at = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
                        let mut best = xv[at];
                        // first maximum in scan order wins
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let i = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                            if xv[i] > best {
                                best = xv[i];
                                at = i;
                            }
                        }
                        let o = ((b * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour upsampling of an NHWC tensor by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 4 || factor == 0 {
            return Err(self.shape_err("upsample_nearest", "[n, h, w, c], factor >= 1".into(), fmt_shape(&s)));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * oh * ow * c];
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    let src = ((b * h + oy / factor) * w + ox / factor) * c;
                    let dst = ((b * oh + oy) * ow + ox) * c;
                    out[dst..dst + c].copy_from_slice(&xv[src..src + c]);
                }
            }
        }
        let out = Tensor::new(vec![n, oh, ow, c], out)?;
        Ok(self.push(out, Op::Upsample { x, factor }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NumericsError> {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let c = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        if c > 0 {
            for row in out.data_mut().chunks_mut(c) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        Ok(self.push(out, Op::Softmax(x), &[x]))
    }

    /// `log(sum(exp(x)))` along the last axis, dropping it.
    pub fn log_sum_exp_last(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.is_empty() || s[s.len() - 1] == 0 {
            return Err(self.shape_err("log_sum_exp_last", "non-empty last axis".into(), fmt_shape(&s)));
        }
        let c = s[s.len() - 1];
        let data: Vec<f64> = self
            .value(x)
            .data()
            .chunks(c)
            .map(|row| {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let out = Tensor::new(s[..s.len() - 1].to_vec(), data)?;
        Ok(self.push(out, Op::LogSumExpLast(x), &[x]))
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::ln, Op::Log(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::sqrt, Op::Sqrt(x))
    }

    /// Callers clamp the argument into the open interval (-1, 1) first.
    pub fn acos(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::acos, Op::Acos(x))
    }

    pub fn cos(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    /// Elementwise clamp; the gradient passes through inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumericsError> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(NumericsError::InvalidArgument {
                op: "clamp",
                message: format!("lo {lo} > hi {hi}"),
            });
        }
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let n = self.value(x).len();
        if n == 0 {
            return Err(self.shape_err("mean", "non-empty tensor".into(), fmt_shape(self.shape(x))));
        }
        let s: f64 = self.value(x).data().iter().sum();
        Ok(self.push(Tensor::scalar(s / n as f64), Op::Mean(x), &[x]))
    }

    /// Reduce the last axis: `[..., n] -> [...]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(self.shape_err("sum_last", "rank >= 1".into(), fmt_shape(&s)));
        }
        let c = s[s.len() - 1];
        let data = if c == 0 {
            vec![0.0; s[..s.len() - 1].iter().product()]
        } else {
            self.value(x).data().chunks(c).map(|r| r.iter().sum()).collect()
        };
        let out = Tensor::new(s[..s.len() - 1].to_vec(), data)?;
        Ok(self.push(out, Op::SumLast(x), &[x]))
    }

    /// Reduce every axis but the last: `[..., n] -> [n]`.
    pub fn sum_leading(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.check(x)?;
        let c = self.value(x).last_dim();
        let mut acc = vec![0.0; c];
        if c > 0 {
            for row in self.value(x).data().chunks(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        Ok(self.push(Tensor::from_vec(acc), Op::SumLeading(x), &[x]))
    }

    /// Repeat along a new last axis: `[...] -> [..., n]`.
    pub fn broadcast_last(&mut self, x: Var, n: usize) -> Result<Var, NumericsError> {
        self.check(x)?;
        let mut shape = self.shape(x).to_vec();
        shape.push(n);
        let data = self
            .value(x)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::BroadcastLast(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        self.check(x)?;
        let n: usize = shape.iter().product();
        if n != self.value(x).len() {
            return Err(self.shape_err("reshape", fmt_shape(shape), fmt_shape(self.shape(x))));
        }
        let out = Tensor::new(shape.to_vec(), self.value(x).data().to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Rows `start..start + len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.is_empty() || start + len > s[0] {
            return Err(self.shape_err(
                "slice_rows",
                format!("axis 0 covering {start}..{}", start + len),
                fmt_shape(&s),
            ));
        }
        let rs: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * rs..(start + len) * rs].to_vec();
        let mut shape = s;
        shape[0] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SliceRows { x, start }, &[x]))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var, NumericsError> {
        let Some(&first) = xs.first() else {
            return Err(self.shape_err("concat_rows", "at least one input".into(), "none".into()));
        };
        for &x in xs {
            self.check(x)?;
        }
        let tail = self.shape(first).get(1..).unwrap_or(&[]).to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(self.shape_err("concat_rows", format!("[_, {tail:?}]"), fmt_shape(s)));
            }
            rows += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatRows(xs.to_vec()), xs))
    }

    /// `out[p] = x[p, index[p]]` for a `[P, L]` input.
    pub fn gather_last(&mut self, x: Var, index: &[usize]) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() || index.iter().any(|&i| i >= s[1]) {
            return Err(self.shape_err("gather_last", format!("[{}, > max index]", index.len()), fmt_shape(&s)));
        }
        let xv = self.value(x).data();
        let data = index.iter().enumerate().map(|(p, &i)| xv[p * s[1] + i]).collect();
        let out = Tensor::from_vec(data);
        Ok(self.push(
            out,
            Op::GatherLast {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Pick rows along axis 0 (repeats allowed).
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, NumericsError> {
        self.check(x)?;
        let s = self.shape(x).to_vec();
        if s.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(self.shape_err("select_rows", "row indices within axis 0".into(), fmt_shape(&s)));
        }
        let rs: usize = s[1..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * rs);
        for &r in rows {
            data.extend_from_slice(&xv[r * rs..(r + 1) * rs]);
        }
        let mut shape = s;
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Populate gradients of the scalar `output` with respect to every node
    /// that requires one. Parameters unreachable from `output` get zeros.
    pub fn backward(&mut self, output: Var) -> Result<(), NumericsError> {
        if self.nodes.is_empty() {
            return Err(NumericsError::EmptyGraph);
        }
        self.check(output)?;
        if self.value(output).len() != 1 {
            return Err(NumericsError::NotScalar {
                shape: self.shape(output).to_vec(),
            });
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        for (i, node) in self.nodes.iter().enumerate() {
            if node.is_param {
                self.grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        self.grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc_with(&mut self, v: Var, f: impl Fn(usize, f64) -> f64, g: &[f64]) {
        if let Some(buf) = self.acc(v) {
            for (j, (b, &gj)) in buf.iter_mut().zip(g).enumerate() {
                *b += f(j, gj);
            }
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        // Temporarily move the op out so we can borrow self mutably.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_with(*a, |_, gj| gj, g);
                self.acc_with(*b, |_, gj| gj, g);
            }
            Op::Sub(a, b) => {
                self.acc_with(*a, |_, gj| gj, g);
                self.acc_with(*b, |_, gj| -gj, g);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data().to_vec();
                let vb = self.value(*b).data().to_vec();
                self.acc_with(*a, |j, gj| gj * vb[j], g);
                self.acc_with(*b, |j, gj| gj * va[j], g);
            }
            Op::Div(a, b) => {
                let va = self.value(*a).data().to_vec();
                let vb = self.value(*b).data().to_vec();
                self.acc_with(*a, |j, gj| gj / vb[j], g);
                self.acc_with(*b, |j, gj| -gj * va[j] / (vb[j] * vb[j]), g);
            }
            Op::AddBias(x, b) => {
                self.acc_with(*x, |_, gj| gj, g);
                if let Some(buf) = self.acc(*b) {
                    let c = buf.len();
                    for row in g.chunks(c) {
                        for (bb, gj) in buf.iter_mut().zip(row) {
                            *bb += gj;
                        }
                    }
                }
            }
            Op::Scale(x, s) => self.acc_with(*x, |_, gj| gj * s, g),
            Op::AddScalar(x) | Op::Reshape(x) => self.acc_with(*x, |_, gj| gj, g),
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let vb = self.value(*b).data().to_vec();
                    let buf = self.acc(*a).expect("requires grad");
                    gemm(m, n, k, g, false, &vb, true, buf, 1.0);
                }
                if self.requires_grad(*b) {
                    let va = self.value(*a).data().to_vec();
                    let buf = self.acc(*b).expect("requires grad");
                    gemm(k, m, n, &va, true, g, false, buf, 1.0);
                }
            }
            Op::Conv2d { x, w, b, geom, cols } => {
                let rows = geom.rows();
                let patch = geom.patch();
                let co = self.shape(*w)[3];
                if let Some(buf) = self.acc(*b) {
                    for row in g.chunks(co) {
                        for (bb, gj) in buf.iter_mut().zip(row) {
                            *bb += gj;
                        }
                    }
                }
                if let (true, Some(cols)) = (self.requires_grad(*w), cols) {
                    let buf = self.acc(*w).expect("requires grad");
                    gemm(patch, rows, co, cols, true, g, false, buf, 1.0);
                }
                if self.requires_grad(*x) {
                    let wv = self.value(*w).data().to_vec();
                    let mut dcols = vec![0.0; rows * patch];
                    gemm(rows, co, patch, g, false, &wv, true, &mut dcols, 0.0);
                    let buf = self.acc(*x).expect("requires grad");
                    col2im_add(&dcols, geom, buf);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(buf) = self.acc(*x) {
                    for (&at, gj) in argmax.iter().zip(g) {
                        buf[at] += gj;
                    }
                }
            }
            Op::Upsample { x, factor } => {
                let s = self.shape(*x).to_vec();
                let (h, w, c) = (s[1], s[2], s[3]);
                let (oh, ow) = (h * factor, w * factor);
                if let Some(buf) = self.acc(*x) {
                    for b in 0..s[0] {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let src = ((b * h + oy / factor) * w + ox / factor) * c;
                                let dst = ((b * oh + oy) * ow + ox) * c;
                                for ch in 0..c {
                                    buf[src + ch] += g[dst + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data().to_vec();
                self.acc_with(*x, |j, gj| if xv[j] > 0.0 { gj } else { gj * slope }, g);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(*x, |j, gj| gj * y[j] * (1.0 - y[j]), g);
            }
            Op::Softmax(x) => {
                let y = self.nodes[i].value.data().to_vec();
                let c = self.nodes[i].value.last_dim();
                if let Some(buf) = self.acc(*x) {
                    for ((yr, gr), br) in y.chunks(c).zip(g.chunks(c)).zip(buf.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((bb, yy), gg) in br.iter_mut().zip(yr).zip(gr) {
                            *bb += yy * (gg - dot);
                        }
                    }
                }
            }
            Op::LogSumExpLast(x) => {
                let xv = self.value(*x).data().to_vec();
                let c = self.value(*x).last_dim();
                let lse = self.nodes[i].value.data().to_vec();
                self.acc_with(*x, |j, _| g[j / c] * (xv[j] - lse[j / c]).exp(), &xv);
            }
            Op::Log(x) => {
                let xv = self.value(*x).data().to_vec();
                self.acc_with(*x, |j, gj| gj / xv[j], g);
            }
            Op::Exp(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(*x, |j, gj| gj * y[j], g);
            }
            Op::Sqrt(x) => {
                let y = self.nodes[i].value.data().to_vec();
                self.acc_with(*x, |j, gj| gj * 0.5 / y[j], g);
            }
            Op::Acos(x) => {
                let xv = self.value(*x).data().to_vec();
                self.acc_with(*x, |j, gj| -gj / (1.0 - xv[j] * xv[j]).sqrt(), g);
            }
            Op::Cos(x) => {
                let xv = self.value(*x).data().to_vec();
                self.acc_with(*x, |j, gj| -gj * xv[j].sin(), g);
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data().to_vec();
                self.acc_with(*x, |j, gj| if xv[j] >= *lo && xv[j] <= *hi { gj } else { 0.0 }, g);
            }
            Op::Sum(x) => self.acc_with(*x, |_, _| g[0], &vec![0.0; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.acc_with(*x, |_, _| g[0] / n as f64, &vec![0.0; n]);
            }
            Op::SumLast(x) => {
                let c = self.value(*x).last_dim();
                let n = self.value(*x).len();
                self.acc_with(*x, |j, _| g[j / c], &vec![0.0; n]);
            }
            Op::SumLeading(x) => {
                let c = self.value(*x).last_dim();
                let n = self.value(*x).len();
                self.acc_with(*x, |j, _| g[j % c], &vec![0.0; n]);
            }
            Op::BroadcastLast(x) => {
                let c = self.nodes[i].value.last_dim();
                if let Some(buf) = self.acc(*x) {
                    for (bb, gr) in buf.iter_mut().zip(g.chunks(c.max(1))) {
                        *bb += gr.iter().sum::<f64>();
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let rs: usize = self.shape(*x)[1..].iter().product();
                let off = start * rs;
                if let Some(buf) = self.acc(*x) {
                    for (bb, gj) in buf[off..off + g.len()].iter_mut().zip(g) {
                        *bb += gj;
                    }
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    self.acc_with(x, |j, _| g[off + j], &vec![0.0; n]);
                    off += n;
                }
            }
            Op::GatherLast { x, index } => {
                let c = self.value(*x).last_dim();
                if let Some(buf) = self.acc(*x) {
                    for (p, (&k, gj)) in index.iter().zip(g).enumerate() {
                        buf[p * c + k] += gj;
                    }
                }
            }
            Op::SelectRows { x, rows } => {
                let rs: usize = self.shape(*x)[1..].iter().product();
                if let Some(buf) = self.acc(*x) {
                    for (k, &r) in rows.iter().enumerate() {
                        for c in 0..rs {
                            buf[r * rs + c] += g[k * rs + c];
                        }
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
