//! Reverse-mode tape.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. `backward` walks the nodes in reverse and
//! accumulates vector-Jacobian products into per-node gradient buffers.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Clamp applied to probabilities before taking logarithms.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Axis-aligned cell window used by RoI pooling; `r1`/`c1` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellWindow {
    pub r0: usize,
    pub r1: usize,
    pub c0: usize,
    pub c1: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
        rows: usize,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Sum {
        x: Var,
    },
    WeightedBce {
        p: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    WeightedL1 {
        pred: Var,
        target: Vec<f64>,
        weight: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    RoiMaxPool {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded computation graph. Not meant to be shared across threads; build
/// one tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

// Row-major GEMM views. `trans` reinterprets a stored `[cols, rows]` matrix.
struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    trans: bool,
}

impl<'a> MatRef<'a> {
    fn n(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            trans: false,
        }
    }

    fn t(data: &'a [f64], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            trans: true,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` where `c` is row-major `[a.rows, b.cols]`.
fn gemm(a: MatRef<'_>, b: MatRef<'_>, c: &mut [f64], beta: f64) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(a.data.len(), a.rows * a.cols, "gemm lhs length");
    assert_eq!(b.data.len(), b.rows * b.cols, "gemm rhs length");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output length");
    if a.rows == 0 || b.cols == 0 {
        return;
    }
    if a.cols == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: the asserts above guarantee every index reachable through these
    // strides lies within the three slices.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

fn im2col(src: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut cols = vec![0.0; g.patch_len() * positions];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let src_row = (c * g.height + ii as usize) * g.width;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[oi * g.out_w + oj] = src[src_row + jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dst: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for oi in 0..g.out_h {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst_row = (c * g.height + ii as usize) * g.width;
                    for oj in 0..g.out_w {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[dst_row + jj as usize] += src[oi * g.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

/// Cross-entropy of a single probability against a {0,1} target.
pub fn cross_entropy(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -target * p.ln() - (1.0 - target) * (1.0 - p).ln()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulate operations recorded by conv, linear and matmul ops.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers a constant or parameter tensor. Its grad slot is ignored.
    pub fn leaf(&mut self, mut value: Tensor) -> Var {
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Invariant(format!(
                "non-finite value produced by {op_name}"
            )));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {xs:?} must be C×H×W and kernel {ks:?} O×C×Kh×Kw"),
            ));
        }
        if ks[1] != xs[0] {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {} input channels, input has {}", ks[1], xs[0]),
            ));
        }
        if stride == 0 || ks[2] > xs[1] + 2 * pad || ks[3] > xs[2] + 2 * pad {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks:?} with stride {stride} pad {pad} does not fit input {xs:?}"),
            ));
        }
        let geom = ConvGeom {
            channels: xs[0],
            height: xs[1],
            width: xs[2],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            out_h: (xs[1] + 2 * pad - ks[2]) / stride + 1,
            out_w: (xs[2] + 2 * pad - ks[3]) / stride + 1,
        };
        let out_ch = ks[0];
        let cols = im2col(self.data(x), &geom);
        let mut out = vec![0.0; out_ch * geom.positions()];
        gemm(
            MatRef::n(self.data(k), out_ch, geom.patch_len()),
            MatRef::n(&cols, geom.patch_len(), geom.positions()),
            &mut out,
            0.0,
        );
        self.macs += (out_ch * geom.patch_len() * geom.positions()) as u64;
        let value = Tensor::new(vec![out_ch, geom.out_h, geom.out_w], out)?;
        self.push("conv2d", value, Op::Conv2d { x, k, geom, cols })
    }

    /// Transposed convolution; kernel layout is `C_in × C_out × Kh × Kw` and the
    /// output side is `(H − 1)·stride − 2·pad + K`.
    pub fn conv_transpose2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 3 || ks.len() != 4 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("input {xs:?} must be C×H×W and kernel {ks:?} Ci×Co×Kh×Kw"),
            ));
        }
        if ks[0] != xs[0] {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("kernel expects {} input channels, input has {}", ks[0], xs[0]),
            ));
        }
        let out_h = ((xs[1] - 1) * stride + ks[2]) as isize - 2 * pad as isize;
        let out_w = ((xs[2] - 1) * stride + ks[3]) as isize - 2 * pad as isize;
        if stride == 0 || out_h < 1 || out_w < 1 {
            return Err(Error::shape(
                "conv_transpose2d",
                format!("kernel {ks:?} with stride {stride} pad {pad} gives empty output for {xs:?}"),
            ));
        }
        let (in_ch, out_ch) = (ks[0], ks[1]);
        // Geometry of the equivalent forward convolution from output back to input.
        let geom = ConvGeom {
            channels: out_ch,
            height: out_h as usize,
            width: out_w as usize,
            kh: ks[2],
            kw: ks[3],
            stride,
            pad,
            out_h: xs[1],
            out_w: xs[2],
        };
        let mut cols = vec![0.0; geom.patch_len() * geom.positions()];
        gemm(
            MatRef::t(self.data(k), geom.patch_len(), in_ch),
            MatRef::n(self.data(x), in_ch, geom.positions()),
            &mut cols,
            0.0,
        );
        self.macs += (in_ch * geom.patch_len() * geom.positions()) as u64;
        let mut out = vec![0.0; out_ch * geom.height * geom.width];
        col2im(&cols, &geom, &mut out);
        let value = Tensor::new(vec![out_ch, geom.height, geom.width], out)?;
        self.push("conv_transpose2d", value, Op::ConvTranspose2d { x, k, geom })
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`C × …`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b);
        if bs.len() != 1 || bs[0] != xs[0] {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias {bs:?} for input {xs:?}"),
            ));
        }
        let per = self.value(x).numel() / xs[0];
        let bias = self.data(b).to_vec();
        let mut out = self.data(x).to_vec();
        for (c, chunk) in out.chunks_mut(per).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[c]);
        }
        let value = Tensor::new(xs, out)?;
        self.push("add_channel_bias", value, Op::AddChannelBias { x, b })
    }

    /// Affine map `x·Wᵀ + b` over the last axis; `x` is `[n, in]` or `[in]`,
    /// `W` is `[out, in]`, `b` is `[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (rows, inner) = match xs.as_slice() {
            [n] => (1, *n),
            [r, n] => (*r, *n),
            _ => return Err(Error::shape("linear", format!("input {xs:?} must be 1-D or 2-D"))),
        };
        if ws.len() != 2 || ws[1] != inner || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let out_dim = ws[0];
        let mut out = Vec::with_capacity(rows * out_dim);
        for _ in 0..rows {
            out.extend_from_slice(self.data(b));
        }
        gemm(
            MatRef::n(self.data(x), rows, inner),
            MatRef::t(self.data(w), inner, out_dim),
            &mut out,
            1.0,
        );
        self.macs += (rows * inner * out_dim) as u64;
        let shape = if xs.len() == 1 { vec![out_dim] } else { vec![rows, out_dim] };
        let value = Tensor::new(shape, out)?;
        self.push("linear", value, Op::Linear { x, w, b, rows })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", format!("{as_:?} × {bs:?}")));
        }
        let mut out = vec![0.0; as_[0] * bs[1]];
        gemm(
            MatRef::n(self.data(a), as_[0], as_[1]),
            MatRef::n(self.data(b), bs[0], bs[1]),
            &mut out,
            0.0,
        );
        self.macs += (as_[0] * as_[1] * bs[1]) as u64;
        let value = Tensor::new(vec![as_[0], bs[1]], out)?;
        self.push("matmul", value, Op::MatMul { a, b })
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 {
            return Err(Error::shape("transpose", format!("{xs:?} is not 2-D")));
        }
        let (r, c) = (xs[0], xs[1]);
        let src = self.data(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], out)?;
        self.push("transpose", value, Op::Transpose { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push("reshape", value, Op::Reshape { x })
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dims {:?} vs {tail:?}", &s[1..]),
                ));
            }
            lead += s[0];
            out.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa.to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(shape, out)?;
        self.push("add", value, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("mul", a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(shape, out)?;
        self.push("mul", value, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|v| v * factor).collect();
        let value = Tensor::new(shape, out)?;
        self.push("scale", value, Op::Scale { x, factor })
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self
            .data(x)
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let value = Tensor::new(shape, out)?;
        self.push("leaky_relu", value, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let out = self.data(x).iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(shape, out)?;
        self.push("sigmoid", value, Op::Sigmoid { x })
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[at(j)] /= total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        self.push(
            "softmax",
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        )
    }

    /// Picks flat elements of `x` by index into a tensor of `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let n = self.value(x).numel();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(
                "gather",
                format!("index {bad} out of range for {n} elements"),
            ));
        }
        let src = self.data(x);
        let out: Vec<f64> = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), out)?;
        self.push("gather", value, Op::Gather { x, index })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// `Σ wᵢ·CE(pᵢ, tᵢ)` with probabilities clamped to `[ε, 1−ε]`. Weights are
    /// constants; a zero weight removes the term from both value and gradient.
    pub fn weighted_bce(&mut self, p: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let n = self.value(p).numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::shape(
                "weighted_bce",
                format!("{n} probabilities, {} targets, {} weights", target.len(), weight.len()),
            ));
        }
        if let Some(t) = target.iter().find(|&&t| t != 0.0 && t != 1.0) {
            return Err(Error::Input(format!("BCE target {t} is not 0 or 1")));
        }
        let total = self
            .data(p)
            .iter()
            .zip(&target)
            .zip(&weight)
            .filter(|(_, &w)| w != 0.0)
            .map(|((&p, &t), &w)| w * cross_entropy(p, t))
            .sum();
        self.push(
            "weighted_bce",
            Tensor::scalar(total),
            Op::WeightedBce { p, target, weight },
        )
    }

    /// Mean binary cross-entropy.
    pub fn bce_loss(&mut self, p: Var, target: Vec<f64>) -> Result<Var> {
        let n = self.value(p).numel();
        self.weighted_bce(p, target, vec![1.0 / n as f64; n])
    }

    /// `Σ wᵢ·|predᵢ − tᵢ|`; the subgradient at a tie is zero.
    pub fn weighted_l1(&mut self, pred: Var, target: Vec<f64>, weight: Vec<f64>) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || weight.len() != n {
            return Err(Error::shape(
                "weighted_l1",
                format!("{n} predictions, {} targets, {} weights", target.len(), weight.len()),
            ));
        }
        let total = self
            .data(pred)
            .iter()
            .zip(&target)
            .zip(&weight)
            .map(|((&p, &t), &w)| w * (p - t).abs())
            .sum();
        self.push(
            "weighted_l1",
            Tensor::scalar(total),
            Op::WeightedL1 {
                pred,
                target,
                weight,
            },
        )
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let n = self.value(pred).numel();
        self.weighted_l1(pred, target, vec![1.0 / n as f64; n])
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: Var, target: Vec<f64>) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n {
            return Err(Error::shape(
                "mse_loss",
                format!("{n} predictions, {} targets", target.len()),
            ));
        }
        let total: f64 = self
            .data(pred)
            .iter()
            .zip(&target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum();
        self.push(
            "mse_loss",
            Tensor::scalar(total / n as f64),
            Op::Mse { pred, target },
        )
    }

    /// Max-pools `window` of a `C×H×W` map into `C×g×g` bins. An empty window
    /// yields zeros; the returned flag reports that case.
    pub fn roi_max_pool(&mut self, x: Var, window: CellWindow, g: usize) -> Result<(Var, bool)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || g == 0 {
            return Err(Error::shape("roi_max_pool", format!("input {xs:?}, grid {g}")));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let r1 = window.r1.min(h);
        let c1 = window.c1.min(w);
        let empty = window.r0 >= r1 || window.c0 >= c1;
        let src = self.data(x);
        let mut out = vec![0.0; c * g * g];
        let mut argmax = vec![None; c * g * g];
        if !empty {
            let (rh, cw) = (r1 - window.r0, c1 - window.c0);
            for bi in 0..g {
                let rs = window.r0 + bi * rh / g;
                let re = window.r0 + ((bi + 1) * rh).div_ceil(g);
                for bj in 0..g {
                    let cs = window.c0 + bj * cw / g;
                    let ce = window.c0 + ((bj + 1) * cw).div_ceil(g);
                    for ch in 0..c {
                        let mut best: Option<(usize, f64)> = None;
                        for r in rs..re {
                            for col in cs..ce {
                                let idx = (ch * h + r) * w + col;
                                if best.is_none_or(|(_, v)| src[idx] > v) {
                                    best = Some((idx, src[idx]));
                                }
                            }
                        }
                        let o = (ch * g + bi) * g + bj;
                        if let Some((idx, v)) = best {
                            out[o] = v;
                            argmax[o] = Some(idx);
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![c, g, g], out)?;
        let v = self.push("roi_max_pool", value, Op::RoiMaxPool { x, argmax })?;
        Ok((v, empty))
    }

    /// Reverse pass from a scalar `loss`. Nodes the loss does not depend on
    /// get no entry (callers treat that as zero).
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            let slot =
                grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, k, geom, cols } => {
                let out_ch = self.shape(*k)[0];
                acc(*k, &|gk| {
                    gemm(
                        MatRef::n(gout, out_ch, geom.positions()),
                        MatRef::t(cols, geom.positions(), geom.patch_len()),
                        gk,
                        1.0,
                    )
                });
                let mut dcols = vec![0.0; cols.len()];
                gemm(
                    MatRef::t(self.data(*k), geom.patch_len(), out_ch),
                    MatRef::n(gout, out_ch, geom.positions()),
                    &mut dcols,
                    0.0,
                );
                acc(*x, &|gx| col2im(&dcols, geom, gx));
            }
            Op::ConvTranspose2d { x, k, geom } => {
                let in_ch = self.shape(*k)[0];
                let dcols = im2col(gout, geom);
                acc(*x, &|gx| {
                    gemm(
                        MatRef::n(self.data(*k), in_ch, geom.patch_len()),
                        MatRef::n(&dcols, geom.patch_len(), geom.positions()),
                        gx,
                        1.0,
                    )
                });
                acc(*k, &|gk| {
                    gemm(
                        MatRef::n(self.data(*x), in_ch, geom.positions()),
                        MatRef::t(&dcols, geom.positions(), geom.patch_len()),
                        gk,
                        1.0,
                    )
                });
            }
            Op::AddChannelBias { x, b } => {
                acc(*x, &|gx| add_into(gx, gout));
                let c = self.shape(*b)[0];
                let per = gout.len() / c;
                acc(*b, &|gb| {
                    for (ch, chunk) in gout.chunks(per).enumerate() {
                        gb[ch] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Linear { x, w, b, rows } => {
                let ws = self.shape(*w);
                let (out_dim, inner) = (ws[0], ws[1]);
                acc(*x, &|gx| {
                    gemm(
                        MatRef::n(gout, *rows, out_dim),
                        MatRef::n(self.data(*w), out_dim, inner),
                        gx,
                        1.0,
                    )
                });
                acc(*w, &|gw| {
                    gemm(
                        MatRef::t(gout, out_dim, *rows),
                        MatRef::n(self.data(*x), *rows, inner),
                        gw,
                        1.0,
                    )
                });
                acc(*b, &|gb| {
                    for row in gout.chunks(out_dim) {
                        add_into(gb, row);
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                acc(*a, &|ga| {
                    gemm(
                        MatRef::n(gout, m, n),
                        MatRef::t(self.data(*b), n, k),
                        ga,
                        1.0,
                    )
                });
                acc(*b, &|gb| {
                    gemm(
                        MatRef::t(self.data(*a), k, m),
                        MatRef::n(gout, m, n),
                        gb,
                        1.0,
                    )
                });
            }
            Op::Transpose { x } => {
                let s = self.shape(*x);
                let (r, c) = (s[0], s[1]);
                acc(*x, &|gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gout[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape { x } => acc(*x, &|gx| add_into(gx, gout)),
            Op::Concat { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    let slice = &gout[offset..offset + n];
                    acc(p, &|gp| add_into(gp, slice));
                    offset += n;
                }
            }
            Op::Add { a, b } => {
                acc(*a, &|ga| add_into(ga, gout));
                acc(*b, &|gb| add_into(gb, gout));
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                acc(*a, &|ga| {
                    for ((g, go), y) in ga.iter_mut().zip(gout).zip(db) {
                        *g += go * y;
                    }
                });
                acc(*b, &|gb| {
                    for ((g, go), x) in gb.iter_mut().zip(gout).zip(da) {
                        *g += go * x;
                    }
                });
            }
            Op::Scale { x, factor } => acc(*x, &|gx| {
                gx.iter_mut().zip(gout).for_each(|(g, go)| *g += go * factor)
            }),
            Op::LeakyRelu { x, slope } => {
                let src = self.data(*x);
                acc(*x, &|gx| {
                    for ((g, go), &v) in gx.iter_mut().zip(gout).zip(src) {
                        *g += if v > 0.0 { *go } else { slope * go };
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, &|gx| {
                    for ((g, go), &s) in gx.iter_mut().zip(gout).zip(y) {
                        *g += go * s * (1.0 - s);
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                acc(*x, &|gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| gout[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                gx[at(j)] += y[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Gather { x, index } => acc(*x, &|gx| {
                for (&i, go) in index.iter().zip(gout) {
                    gx[i] += go;
                }
            }),
            Op::Sum { x } => {
                let go = gout[0];
                acc(*x, &|gx| gx.iter_mut().for_each(|g| *g += go));
            }
            Op::WeightedBce { p, target, weight } => {
                let go = gout[0];
                let src = self.data(*p);
                acc(*p, &|gp| {
                    for i in 0..src.len() {
                        let (pi, t, w) = (src[i], target[i], weight[i]);
                        if w == 0.0 || !(BCE_EPS..=1.0 - BCE_EPS).contains(&pi) {
                            continue;
                        }
                        gp[i] += go * w * (-t / pi + (1.0 - t) / (1.0 - pi));
                    }
                });
            }
            Op::WeightedL1 {
                pred,
                target,
                weight,
            } => {
                let go = gout[0];
                let src = self.data(*pred);
                acc(*pred, &|gp| {
                    for i in 0..src.len() {
                        let d = src[i] - target[i];
                        if d != 0.0 {
                            gp[i] += go * weight[i] * d.signum();
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let go = gout[0];
                let src = self.data(*pred);
                let n = src.len() as f64;
                acc(*pred, &|gp| {
                    for i in 0..src.len() {
                        gp[i] += go * 2.0 * (src[i] - target[i]) / n;
                    }
                });
            }
            Op::RoiMaxPool { x, argmax } => acc(*x, &|gx| {
                for (o, idx) in argmax.iter().enumerate() {
                    if let Some(idx) = idx {
                        gx[*idx] += gout[o];
                    }
                }
            }),
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
