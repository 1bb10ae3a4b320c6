//! Dense f64 tensor engine with reverse-mode automatic differentiation.
//!
//! Every value is a node on a [`Tape`]: contiguous data, a shape, and the
//! operation that produced it. Operations are recorded in topological order
//! (inputs always precede outputs), so one reverse walk of the tape
//! propagates gradients to every `requires_grad` node. All arithmetic is
//! double precision; any non-finite value produced by an op is an error,
//! never a silent NaN.

mod conv;
mod norm;
mod reassemble;
mod scan;

pub mod gradcheck;

pub use scan::scan_forward_kernel;

use crate::error::{FamError, Result};

pub type TensorId = usize;

/// Scan order over an H×W grid, one of the four axis-aligned directions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ScanDir {
    LeftRight,
    RightLeft,
    TopBottom,
    BottomTop,
}

impl ScanDir {
    pub const ALL: [ScanDir; 4] = [
        ScanDir::LeftRight,
        ScanDir::RightLeft,
        ScanDir::TopBottom,
        ScanDir::BottomTop,
    ];

    /// Grid position visited at `step` (0-based) of an H×W scan.
    pub fn position(self, step: usize, h: usize, w: usize) -> (usize, usize) {
        debug_assert!(step < h * w);
        match self {
            ScanDir::LeftRight => (step / w, step % w),
            ScanDir::RightLeft => {
                let r = h * w - 1 - step;
                (r / w, r % w)
            }
            ScanDir::TopBottom => (step % h, step / h),
            ScanDir::BottomTop => {
                let r = h * w - 1 - step;
                (r % h, r / h)
            }
        }
    }

    pub fn parse(s: &str) -> Option<ScanDir> {
        match s {
            "lr" => Some(ScanDir::LeftRight),
            "rl" => Some(ScanDir::RightLeft),
            "tb" => Some(ScanDir::TopBottom),
            "bt" => Some(ScanDir::BottomTop),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ScanDir::LeftRight => "lr",
            ScanDir::RightLeft => "rl",
            ScanDir::TopBottom => "tb",
            ScanDir::BottomTop => "bt",
        }
    }
}

/// Axis scanned by a strip convolution.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum StripAxis {
    Horizontal,
    Vertical,
}

enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    Scale(TensorId, f64),
    AddScalar(TensorId),
    Relu(TensorId),
    Gelu(TensorId),
    Sigmoid(TensorId),
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose2d {
        x: TensorId,
        rows: usize,
        cols: usize,
    },
    Softmax {
        x: TensorId,
        axis: usize,
    },
    GroupNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        eps: f64,
    },
    Conv2d {
        input: TensorId,
        weight: TensorId,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    },
    BiasChannel {
        x: TensorId,
        bias: TensorId,
    },
    BiasLastDim {
        x: TensorId,
        bias: TensorId,
    },
    AvgPool {
        x: TensorId,
        k: usize,
        stride: usize,
    },
    NearestResize {
        x: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Reshape {
        x: TensorId,
    },
    SliceChannels {
        x: TensorId,
        from: usize,
        to: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    CrossEntropy {
        logits: TensorId,
        targets: Vec<u32>,
    },
    Reassemble {
        input: TensorId,
        kernels: TensorId,
        k_up: usize,
        scale: usize,
    },
    SelectiveScan {
        x: TensorId,
        decay: TensorId,
        b_in: TensorId,
        c_out: TensorId,
        d_skip: TensorId,
        heads: usize,
        state_dim: usize,
        hist: Vec<f64>,
    },
    SpatialToSeq {
        x: TensorId,
        sample: usize,
        dir: ScanDir,
    },
    SeqToSpatial {
        seq: TensorId,
        dir: ScanDir,
        h: usize,
        w: usize,
    },
}

/// Recording tape. Owns every tensor created through it.
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    datas: Vec<Vec<f64>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Vec<f64>>>,
    done: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(FamError::NonFinite { op, at: None })
    }
}

fn shape_err(op: &'static str, detail: String) -> FamError {
    FamError::Shape { op, detail }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            shapes: Vec::new(),
            datas: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drop all recorded nodes; the tape can be reused for a fresh pass.
    pub fn reset(&mut self) {
        self.shapes.clear();
        self.datas.clear();
        self.ops.clear();
        self.requires.clear();
        self.grads.clear();
        self.done = false;
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.shapes[id]
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.datas[id]
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.requires[id]
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires: bool,
        op: Op,
    ) -> Result<TensorId> {
        debug_assert_eq!(numel(&shape), data.len());
        check_finite(op_name, &data)?;
        let id = self.ops.len();
        self.shapes.push(shape);
        self.datas.push(data);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        Ok(id)
    }

    /// New leaf tensor. `requires_grad` marks it as a differentiation target.
    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "leaf",
                format!("shape {:?} implies {} elements, data has {}", shape, numel(&shape), data.len()),
            ));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(shape_err("leaf", format!("zero-length axis in shape {:?}", shape)));
        }
        self.push("leaf", shape, data, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Result<TensorId> {
        self.constant(vec![v], vec![1])
    }

    fn binary_same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shapes[a] != self.shapes[b] {
            return Err(shape_err(
                op,
                format!("operands differ: {:?} vs {:?}", self.shapes[a], self.shapes[b]),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b)?;
        let data = self.datas[a].iter().zip(&self.datas[b]).map(|(x, y)| x + y).collect();
        let req = self.requires[a] || self.requires[b];
        self.push("add", self.shapes[a].clone(), data, req, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b)?;
        let data = self.datas[a].iter().zip(&self.datas[b]).map(|(x, y)| x - y).collect();
        let req = self.requires[a] || self.requires[b];
        self.push("sub", self.shapes[a].clone(), data, req, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b)?;
        let data = self.datas[a].iter().zip(&self.datas[b]).map(|(x, y)| x * y).collect();
        let req = self.requires[a] || self.requires[b];
        self.push("mul", self.shapes[a].clone(), data, req, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("div", a, b)?;
        let data = self.datas[a].iter().zip(&self.datas[b]).map(|(x, y)| x / y).collect();
        let req = self.requires[a] || self.requires[b];
        self.push("div", self.shapes[a].clone(), data, req, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data = self.datas[a].iter().map(|x| x * c).collect();
        let req = self.requires[a];
        self.push("scale", self.shapes[a].clone(), data, req, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let data = self.datas[a].iter().map(|x| x + c).collect();
        let req = self.requires[a];
        self.push("add_scalar", self.shapes[a].clone(), data, req, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.datas[a].iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let req = self.requires[a];
        self.push("relu", self.shapes[a].clone(), data, req, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.datas[a].iter().map(|&x| gelu_val(x)).collect();
        let req = self.requires[a];
        self.push("gelu", self.shapes[a].clone(), data, req, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let data = self.datas[a].iter().map(|&x| sigmoid_val(x)).collect();
        let req = self.requires[a];
        self.push("sigmoid", self.shapes[a].clone(), data, req, Op::Sigmoid(a))
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (&self.shapes[a], &self.shapes[b]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("incompatible {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_kernel(&self.datas[a], &self.datas[b], m, k, n, &mut out);
        let req = self.requires[a] || self.requires[b];
        self.push("matmul", vec![m, n], out, req, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = &self.shapes[x];
        if s.len() != 2 {
            return Err(shape_err("transpose2d", format!("expected 2-d, got {:?}", s)));
        }
        let (rows, cols) = (s[0], s[1]);
        let src = &self.datas[x];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let req = self.requires[x];
        self.push("transpose2d", vec![cols, rows], out, req, Op::Transpose2d { x, rows, cols })
    }

    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = &self.shapes[x];
        if axis >= s.len() {
            return Err(shape_err("softmax", format!("axis {} out of range for shape {:?}", axis, s)));
        }
        if s[axis] == 0 {
            return Err(shape_err("softmax", "zero-length axis".into()));
        }
        let (outer, alen, inner) = axis_split(s, axis);
        let out = norm::softmax_forward(&self.datas[x], outer, alen, inner);
        let req = self.requires[x];
        self.push("softmax", s.clone(), out, req, Op::Softmax { x, axis })
    }

    /// Group normalization over NCHW input with per-channel affine parameters.
    pub fn group_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        groups: usize,
        eps: f64,
    ) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let (n, c, h, w) = as_nchw("group_norm", &s)?;
        if groups == 0 || c % groups != 0 {
            return Err(shape_err("group_norm", format!("{} channels not divisible into {} groups", c, groups)));
        }
        if self.shapes[gamma] != [c] || self.shapes[beta] != [c] {
            return Err(shape_err("group_norm", format!("affine params must be [{}]", c)));
        }
        let out = norm::group_norm_forward(
            &self.datas[x],
            &self.datas[gamma],
            &self.datas[beta],
            n,
            c,
            h * w,
            groups,
            eps,
        );
        let req = self.requires[x] || self.requires[gamma] || self.requires[beta];
        self.push("group_norm", s, out, req, Op::GroupNorm { x, gamma, beta, groups, eps })
    }

    /// 2-d convolution, NCHW input, OIHW weight (I = C/groups).
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<TensorId> {
        let is = self.shapes[input].clone();
        let ws = self.shapes[weight].clone();
        let (n, c, h, w) = as_nchw("conv2d", &is)?;
        if ws.len() != 4 {
            return Err(shape_err("conv2d", format!("weight must be 4-d OIHW, got {:?}", ws)));
        }
        let (o, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh < 1 || kw < 1 {
            return Err(shape_err("conv2d", "kernel dims must be >= 1".into()));
        }
        if groups == 0 || c % groups != 0 || o % groups != 0 {
            return Err(shape_err(
                "conv2d",
                format!("channels in={} out={} not divisible by groups={}", c, o, groups),
            ));
        }
        if cg != c / groups {
            return Err(shape_err(
                "conv2d",
                format!("weight expects {} input channels per group, input supplies {}", cg, c / groups),
            ));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1".into()));
        }
        let oh = (h + 2 * padding.0).checked_sub(kh).map(|v| v / stride.0 + 1);
        let ow = (w + 2 * padding.1).checked_sub(kw).map(|v| v / stride.1 + 1);
        let (oh, ow) = match (oh, ow) {
            (Some(a), Some(b)) if a > 0 && b > 0 => (a, b),
            _ => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel {}x{} larger than padded input {}x{}", kh, kw, h + 2 * padding.0, w + 2 * padding.1),
                ))
            }
        };
        let out = conv::forward(
            &self.datas[input],
            (n, c, h, w),
            &self.datas[weight],
            (o, cg, kh, kw),
            stride,
            padding,
            groups,
        );
        let req = self.requires[input] || self.requires[weight];
        self.push(
            "conv2d",
            vec![n, o, oh, ow],
            out,
            req,
            Op::Conv2d { input, weight, stride, padding, groups },
        )
    }

    /// Depthwise strip convolution: 1×k horizontal or k×1 vertical kernel,
    /// odd k, same-size output. Weight layout `[C,1,1,k]` or `[C,1,k,1]`.
    pub fn strip_conv(&mut self, input: TensorId, weight: TensorId, axis: StripAxis, k: usize) -> Result<TensorId> {
        if k % 2 == 0 {
            return Err(FamError::Invalid {
                op: "strip_conv",
                detail: format!("kernel length {} is even; symmetric padding needs odd k", k),
            });
        }
        let (_, c, _, _) = as_nchw("strip_conv", &self.shapes[input].clone())?;
        let ws = self.shapes[weight].clone();
        let expect = match axis {
            StripAxis::Horizontal => vec![c, 1, 1, k],
            StripAxis::Vertical => vec![c, 1, k, 1],
        };
        if ws != expect {
            return Err(shape_err("strip_conv", format!("weight shape {:?}, expected {:?}", ws, expect)));
        }
        let pad = match axis {
            StripAxis::Horizontal => (0, (k - 1) / 2),
            StripAxis::Vertical => ((k - 1) / 2, 0),
        };
        self.conv2d(input, weight, (1, 1), pad, c)
    }

    /// Add a per-channel bias `[C]` to NCHW input.
    pub fn bias_channel(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let (n, c, h, w) = as_nchw("bias_channel", &s)?;
        if self.shapes[bias] != [c] {
            return Err(shape_err("bias_channel", format!("bias {:?}, expected [{}]", self.shapes[bias], c)));
        }
        let hw = h * w;
        let mut out = self.datas[x].clone();
        for ni in 0..n {
            for ci in 0..c {
                let b = self.datas[bias][ci];
                let base = (ni * c + ci) * hw;
                for v in &mut out[base..base + hw] {
                    *v += b;
                }
            }
        }
        let req = self.requires[x] || self.requires[bias];
        self.push("bias_channel", s, out, req, Op::BiasChannel { x, bias })
    }

    /// Add a bias `[K]` along the last axis of `x`.
    pub fn bias_last_dim(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let k = *s.last().ok_or_else(|| shape_err("bias_last_dim", "scalar input".into()))?;
        if self.shapes[bias] != [k] {
            return Err(shape_err("bias_last_dim", format!("bias {:?}, expected [{}]", self.shapes[bias], k)));
        }
        let mut out = self.datas[x].clone();
        for (i, v) in out.iter_mut().enumerate() {
            *v += self.datas[bias][i % k];
        }
        let req = self.requires[x] || self.requires[bias];
        self.push("bias_last_dim", s, out, req, Op::BiasLastDim { x, bias })
    }

    /// k×k average pooling with the given stride, no padding.
    pub fn avg_pool(&mut self, x: TensorId, k: usize, stride: usize) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let (n, c, h, w) = as_nchw("avg_pool", &s)?;
        if k == 0 || stride == 0 || h < k || w < k {
            return Err(shape_err("avg_pool", format!("window {} stride {} on {}x{}", k, stride, h, w)));
        }
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let mut out = vec![0.0; n * c * oh * ow];
        let inv = 1.0 / (k * k) as f64;
        for ni in 0..n {
            for ci in 0..c {
                let ib = (ni * c + ci) * h * w;
                let ob = (ni * c + ci) * oh * ow;
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            let row = ib + (yo * stride + dy) * w + xo * stride;
                            for dx in 0..k {
                                acc += self.datas[x][row + dx];
                            }
                        }
                        out[ob + yo * ow + xo] = acc * inv;
                    }
                }
            }
        }
        let req = self.requires[x];
        self.push("avg_pool", vec![n, c, oh, ow], out, req, Op::AvgPool { x, k, stride })
    }

    /// Nearest-neighbor resize to `(out_h, out_w)`; source index is
    /// `floor(dst * src / out)`, so integer factors reduce to replication
    /// or strided subsampling.
    pub fn nearest_resize(&mut self, x: TensorId, out_h: usize, out_w: usize) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let (n, c, h, w) = as_nchw("nearest_resize", &s)?;
        if out_h == 0 || out_w == 0 {
            return Err(shape_err("nearest_resize", "zero output size".into()));
        }
        let mut out = vec![0.0; n * c * out_h * out_w];
        for ni in 0..n {
            for ci in 0..c {
                let ib = (ni * c + ci) * h * w;
                let ob = (ni * c + ci) * out_h * out_w;
                for yo in 0..out_h {
                    let yi = yo * h / out_h;
                    for xo in 0..out_w {
                        let xi = xo * w / out_w;
                        out[ob + yo * out_w + xo] = self.datas[x][ib + yi * w + xi];
                    }
                }
            }
        }
        let req = self.requires[x];
        self.push("nearest_resize", vec![n, c, out_h, out_w], out, req, Op::NearestResize { x })
    }

    pub fn nearest_upsample(&mut self, x: TensorId, factor: usize) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let (_, _, h, w) = as_nchw("nearest_upsample", &s)?;
        if factor == 0 {
            return Err(shape_err("nearest_upsample", "factor must be >= 1".into()));
        }
        self.nearest_resize(x, h * factor, w * factor)
    }

    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(shape_err("concat", "empty input list".into()));
        }
        let first = self.shapes[parts[0]].clone();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {} out of range for {:?}", axis, first)));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.shapes[p];
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(shape_err("concat", format!("incompatible shapes {:?} vs {:?}", first, s)));
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![0.0; numel(&shape)];
        let row = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let alen = self.shapes[p][axis];
            for oi in 0..outer {
                let src = &self.datas[p][oi * alen * inner..(oi + 1) * alen * inner];
                out[oi * row + offset..oi * row + offset + alen * inner].copy_from_slice(src);
            }
            offset += alen * inner;
        }
        let req = parts.iter().any(|&p| self.requires[p]);
        self.push("concat", shape, out, req, Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn reshape(&mut self, x: TensorId, shape: Vec<usize>) -> Result<TensorId> {
        if numel(&shape) != self.datas[x].len() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {} elements as {:?}", self.datas[x].len(), shape),
            ));
        }
        let data = self.datas[x].clone();
        let req = self.requires[x];
        self.push("reshape", shape, data, req, Op::Reshape { x })
    }

    /// Channel slice `[N, from..to, H, W]` of NCHW input.
    pub fn slice_channels(&mut self, x: TensorId, from: usize, to: usize) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let (n, c, h, w) = as_nchw("slice_channels", &s)?;
        if from >= to || to > c {
            return Err(shape_err("slice_channels", format!("range {}..{} on {} channels", from, to, c)));
        }
        let cs = to - from;
        let hw = h * w;
        let mut out = vec![0.0; n * cs * hw];
        for ni in 0..n {
            for ci in 0..cs {
                let src = (ni * c + from + ci) * hw;
                let dst = (ni * cs + ci) * hw;
                out[dst..dst + hw].copy_from_slice(&self.datas[x][src..src + hw]);
            }
        }
        let req = self.requires[x];
        self.push("slice_channels", vec![n, cs, h, w], out, req, Op::SliceChannels { x, from, to })
    }

    pub fn sum_all(&mut self, x: TensorId) -> Result<TensorId> {
        let v: f64 = self.datas[x].iter().sum();
        let req = self.requires[x];
        self.push("sum_all", vec![1], vec![v], req, Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: TensorId) -> Result<TensorId> {
        let n = self.datas[x].len();
        let v: f64 = self.datas[x].iter().sum::<f64>() / n as f64;
        let req = self.requires[x];
        self.push("mean_all", vec![1], vec![v], req, Op::MeanAll(x))
    }

    /// Mean pixel-wise cross entropy of `[N,C,H,W]` logits against integer
    /// class targets of length N·H·W.
    pub fn cross_entropy(&mut self, logits: TensorId, targets: &[u32]) -> Result<TensorId> {
        let s = self.shapes[logits].clone();
        let (n, c, h, w) = as_nchw("cross_entropy", &s)?;
        if targets.len() != n * h * w {
            return Err(shape_err(
                "cross_entropy",
                format!("{} targets for {} pixels", targets.len(), n * h * w),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(FamError::Invalid {
                op: "cross_entropy",
                detail: format!("target class {} out of range for {} classes", bad, c),
            });
        }
        let hw = h * w;
        let mut loss = 0.0;
        for ni in 0..n {
            for pi in 0..hw {
                let gt = targets[ni * hw + pi] as usize;
                let mut maxv = f64::NEG_INFINITY;
                for ci in 0..c {
                    maxv = maxv.max(self.datas[logits][(ni * c + ci) * hw + pi]);
                }
                let mut lse = 0.0;
                for ci in 0..c {
                    lse += (self.datas[logits][(ni * c + ci) * hw + pi] - maxv).exp();
                }
                let lse = lse.ln() + maxv;
                loss += lse - self.datas[logits][(ni * c + gt) * hw + pi];
            }
        }
        loss /= (n * hw) as f64;
        let req = self.requires[logits];
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            req,
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    /// Content-aware reassembly: each output pixel is a kernel-weighted sum
    /// of the k×k input neighborhood around its source location.
    ///
    /// `input` is `[N,C,H,W]`; `kernels` is `[N, scale², k², H, W]` and is
    /// expected to be normalized over the k² axis. Output `[N,C,scale·H,scale·W]`.
    pub fn reassemble(&mut self, input: TensorId, kernels: TensorId, k_up: usize, scale: usize) -> Result<TensorId> {
        if k_up % 2 == 0 {
            return Err(FamError::Invalid { op: "reassemble", detail: format!("kernel size {} must be odd", k_up) });
        }
        if scale < 1 {
            return Err(FamError::Invalid { op: "reassemble", detail: "scale must be >= 1".into() });
        }
        let is = self.shapes[input].clone();
        let (n, c, h, w) = as_nchw("reassemble", &is)?;
        let ks = self.shapes[kernels].clone();
        let expect = vec![n, scale * scale, k_up * k_up, h, w];
        if ks != expect {
            return Err(shape_err("reassemble", format!("kernels {:?}, expected {:?}", ks, expect)));
        }
        let out = reassemble::forward(&self.datas[input], &self.datas[kernels], n, c, h, w, k_up, scale);
        let req = self.requires[input] || self.requires[kernels];
        self.push(
            "reassemble",
            vec![n, c, scale * h, scale * w],
            out,
            req,
            Op::Reassemble { input, kernels, k_up, scale },
        )
    }

    /// Selective state-space scan over a `[L,d]` sequence.
    ///
    /// Per head (d split into `heads` contiguous blocks) with state size S:
    /// `h_t = a_t·h_{t-1} + B_t⊗x_t`, `y_t = C_t·h_t + D·x_t`, `h_0 = 0`.
    /// `decay` is `[L,heads]` in (0,1), `b_in`/`c_out` are `[L,S]`,
    /// `d_skip` is `[heads]`.
    pub fn selective_scan(
        &mut self,
        x: TensorId,
        decay: TensorId,
        b_in: TensorId,
        c_out: TensorId,
        d_skip: TensorId,
        heads: usize,
        state_dim: usize,
    ) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        if s.len() != 2 {
            return Err(shape_err("selective_scan", format!("expected [L,d] input, got {:?}", s)));
        }
        let (l, d) = (s[0], s[1]);
        if l < 1 {
            return Err(shape_err("selective_scan", "empty sequence".into()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("selective_scan", format!("{} channels not divisible into {} heads", d, heads)));
        }
        if state_dim < 1 {
            return Err(FamError::Invalid { op: "selective_scan", detail: "state_dim must be >= 1".into() });
        }
        if self.shapes[decay] != [l, heads] {
            return Err(shape_err("selective_scan", format!("decay {:?}, expected [{},{}]", self.shapes[decay], l, heads)));
        }
        if self.shapes[b_in] != [l, state_dim] || self.shapes[c_out] != [l, state_dim] {
            return Err(shape_err("selective_scan", format!("B/C must be [{},{}]", l, state_dim)));
        }
        if self.shapes[d_skip] != [heads] {
            return Err(shape_err("selective_scan", format!("skip coefficients must be [{}]", heads)));
        }
        let (y, hist) = scan::forward(
            &self.datas[x],
            &self.datas[decay],
            &self.datas[b_in],
            &self.datas[c_out],
            &self.datas[d_skip],
            l,
            d,
            heads,
            state_dim,
        )?;
        let req = self.requires[x]
            || self.requires[decay]
            || self.requires[b_in]
            || self.requires[c_out]
            || self.requires[d_skip];
        self.push(
            "selective_scan",
            vec![l, d],
            y,
            req,
            Op::SelectiveScan { x, decay, b_in, c_out, d_skip, heads, state_dim, hist },
        )
    }

    /// Extract sample `sample` of an NCHW tensor as a `[H·W, C]` sequence in
    /// the given scan order.
    pub fn spatial_to_seq(&mut self, x: TensorId, sample: usize, dir: ScanDir) -> Result<TensorId> {
        let s = self.shapes[x].clone();
        let (n, c, h, w) = as_nchw("spatial_to_seq", &s)?;
        if sample >= n {
            return Err(shape_err("spatial_to_seq", format!("sample {} of batch {}", sample, n)));
        }
        let l = h * w;
        let mut out = vec![0.0; l * c];
        for step in 0..l {
            let (y, xp) = dir.position(step, h, w);
            for ci in 0..c {
                out[step * c + ci] = self.datas[x][((sample * c) + ci) * l + y * w + xp];
            }
        }
        let req = self.requires[x];
        self.push("spatial_to_seq", vec![l, c], out, req, Op::SpatialToSeq { x, sample, dir })
    }

    /// Inverse of [`Tape::spatial_to_seq`]: place a `[H·W, C]` sequence back
    /// on the grid as a `[1,C,H,W]` tensor.
    pub fn seq_to_spatial(&mut self, seq: TensorId, dir: ScanDir, h: usize, w: usize) -> Result<TensorId> {
        let s = self.shapes[seq].clone();
        if s.len() != 2 || s[0] != h * w {
            return Err(shape_err("seq_to_spatial", format!("sequence {:?} does not cover {}x{}", s, h, w)));
        }
        let c = s[1];
        let l = h * w;
        let mut out = vec![0.0; c * l];
        for step in 0..l {
            let (y, xp) = dir.position(step, h, w);
            for ci in 0..c {
                out[ci * l + y * w + xp] = self.datas[seq][step * c + ci];
            }
        }
        let req = self.requires[seq];
        self.push("seq_to_spatial", vec![1, c, h, w], out, req, Op::SeqToSpatial { seq, dir, h, w })
    }

    /// Reverse pass from a scalar loss. Populates `grad` for every
    /// `requires_grad` tensor on the tape (zeros where the loss does not
    /// depend on them). Errors if called twice without a reset.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.done {
            return Err(FamError::BackwardTwice);
        }
        if self.ops.is_empty() {
            return Err(FamError::Invalid { op: "backward", detail: "empty tape".into() });
        }
        if self.datas[loss].len() != 1 {
            return Err(shape_err("backward", format!("loss must be scalar, got {:?}", self.shapes[loss])));
        }
        self.done = true;
        for i in 0..self.ops.len() {
            if self.requires[i] {
                self.grads[i] = Some(vec![0.0; self.datas[i].len()]);
            }
        }
        if self.requires[loss] {
            self.grads[loss].as_mut().unwrap()[0] = 1.0;
        }
        for id in (0..=loss).rev() {
            let g = match self.grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(id, &g)?;
            self.grads[id] = Some(g);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(FamError::NonFinite { op: "backward", at: Some(i) });
                }
            }
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: TensorId, g: &[f64]) -> Result<()> {
        match &self.ops[id] {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                if let Some(ga) = self.grads[a].as_mut() {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
                if let Some(gb) = self.grads[b].as_mut() {
                    for (gi, &gv) in gb.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = self.grads[a].as_mut() {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
                if let Some(gb) = self.grads[b].as_mut() {
                    for (gi, &gv) in gb.iter_mut().zip(g) {
                        *gi -= gv;
                    }
                }
            }
            &Op::Mul(a, b) => {
                if self.grads[a].is_some() {
                    let contrib: Vec<f64> = g.iter().zip(&self.datas[b]).map(|(gv, bv)| gv * bv).collect();
                    let ga = self.grads[a].as_mut().unwrap();
                    for (gi, cv) in ga.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
                if self.grads[b].is_some() {
                    let contrib: Vec<f64> = g.iter().zip(&self.datas[a]).map(|(gv, av)| gv * av).collect();
                    let gb = self.grads[b].as_mut().unwrap();
                    for (gi, cv) in gb.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::Div(a, b) => {
                if self.grads[a].is_some() {
                    let contrib: Vec<f64> = g.iter().zip(&self.datas[b]).map(|(gv, bv)| gv / bv).collect();
                    let ga = self.grads[a].as_mut().unwrap();
                    for (gi, cv) in ga.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
                if self.grads[b].is_some() {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(self.datas[a].iter().zip(&self.datas[b]))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    let gb = self.grads[b].as_mut().unwrap();
                    for (gi, cv) in gb.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = self.grads[a].as_mut() {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv * c;
                    }
                }
            }
            &Op::AddScalar(a) => {
                if let Some(ga) = self.grads[a].as_mut() {
                    for (gi, &gv) in ga.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
            }
            &Op::Relu(a) => {
                if self.grads[a].is_some() {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&self.datas[a])
                        .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                        .collect();
                    let ga = self.grads[a].as_mut().unwrap();
                    for (gi, cv) in ga.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::Gelu(a) => {
                if self.grads[a].is_some() {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&self.datas[a])
                        .map(|(gv, &xv)| gv * gelu_grad(xv))
                        .collect();
                    let ga = self.grads[a].as_mut().unwrap();
                    for (gi, cv) in ga.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if self.grads[a].is_some() {
                    let contrib: Vec<f64> = g
                        .iter()
                        .zip(&self.datas[id])
                        .map(|(gv, &yv)| gv * yv * (1.0 - yv))
                        .collect();
                    let ga = self.grads[a].as_mut().unwrap();
                    for (gi, cv) in ga.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::MatMul { a, b, m, k, n } => {
                if self.grads[a].is_some() {
                    // dA = g · Bᵀ
                    let mut contrib = vec![0.0; m * k];
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv != 0.0 {
                                for p in 0..k {
                                    contrib[i * k + p] += gv * self.datas[b][p * n + j];
                                }
                            }
                        }
                    }
                    let ga = self.grads[a].as_mut().unwrap();
                    for (gi, cv) in ga.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
                if self.grads[b].is_some() {
                    // dB = Aᵀ · g
                    let mut contrib = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let av = self.datas[a][i * k + p];
                            if av != 0.0 {
                                for j in 0..n {
                                    contrib[p * n + j] += av * g[i * n + j];
                                }
                            }
                        }
                    }
                    let gb = self.grads[b].as_mut().unwrap();
                    for (gi, cv) in gb.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::Transpose2d { x, rows, cols } => {
                if self.grads[x].is_some() {
                    let gx = self.grads[x].as_mut().unwrap();
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
            &Op::Softmax { x, axis } => {
                if self.grads[x].is_some() {
                    let (outer, alen, inner) = axis_split(&self.shapes[id], axis);
                    let contrib = norm::softmax_backward(&self.datas[id], g, outer, alen, inner);
                    let gx = self.grads[x].as_mut().unwrap();
                    for (gi, cv) in gx.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::GroupNorm { x, gamma, beta, groups, eps } => {
                let (n, c, h, w) = as_nchw("group_norm", &self.shapes[x])?;
                let (dx, dgamma, dbeta) = norm::group_norm_backward(
                    &self.datas[x],
                    &self.datas[gamma],
                    g,
                    n,
                    c,
                    h * w,
                    groups,
                    eps,
                    self.grads[x].is_some(),
                );
                if let Some(gx) = self.grads[x].as_mut() {
                    for (gi, cv) in gx.iter_mut().zip(dx) {
                        *gi += cv;
                    }
                }
                if let Some(gg) = self.grads[gamma].as_mut() {
                    for (gi, cv) in gg.iter_mut().zip(dgamma) {
                        *gi += cv;
                    }
                }
                if let Some(gb) = self.grads[beta].as_mut() {
                    for (gi, cv) in gb.iter_mut().zip(dbeta) {
                        *gi += cv;
                    }
                }
            }
            &Op::Conv2d { input, weight, stride, padding, groups } => {
                let (n, c, h, w) = as_nchw("conv2d", &self.shapes[input])?;
                let ws = &self.shapes[weight];
                let wsh = (ws[0], ws[1], ws[2], ws[3]);
                let os = &self.shapes[id];
                let osh = (os[2], os[3]);
                if self.grads[input].is_some() {
                    let contrib = conv::backward_input(
                        g,
                        (n, c, h, w),
                        &self.datas[weight],
                        wsh,
                        osh,
                        stride,
                        padding,
                        groups,
                    );
                    let gi = self.grads[input].as_mut().unwrap();
                    for (gv, cv) in gi.iter_mut().zip(contrib) {
                        *gv += cv;
                    }
                }
                if self.grads[weight].is_some() {
                    let contrib = conv::backward_weight(
                        g,
                        &self.datas[input],
                        (n, c, h, w),
                        wsh,
                        osh,
                        stride,
                        padding,
                        groups,
                    );
                    let gw = self.grads[weight].as_mut().unwrap();
                    for (gv, cv) in gw.iter_mut().zip(contrib) {
                        *gv += cv;
                    }
                }
            }
            &Op::BiasChannel { x, bias } => {
                let (n, c, h, w) = as_nchw("bias_channel", &self.shapes[x])?;
                let hw = h * w;
                if let Some(gx) = self.grads[x].as_mut() {
                    for (gi, &gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
                if let Some(gb) = self.grads[bias].as_mut() {
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            gb[ci] += g[base..base + hw].iter().sum::<f64>();
                        }
                    }
                }
            }
            &Op::BiasLastDim { x, bias } => {
                let k = *self.shapes[x].last().unwrap();
                if let Some(gx) = self.grads[x].as_mut() {
                    for (gi, &gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
                if let Some(gb) = self.grads[bias].as_mut() {
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % k] += gv;
                    }
                }
            }
            &Op::AvgPool { x, k, stride } => {
                if self.grads[x].is_some() {
                    let (n, c, h, w) = as_nchw("avg_pool", &self.shapes[x])?;
                    let os = &self.shapes[id];
                    let (oh, ow) = (os[2], os[3]);
                    let inv = 1.0 / (k * k) as f64;
                    let gx = self.grads[x].as_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let ib = (ni * c + ci) * h * w;
                            let ob = (ni * c + ci) * oh * ow;
                            for yo in 0..oh {
                                for xo in 0..ow {
                                    let gv = g[ob + yo * ow + xo] * inv;
                                    for dy in 0..k {
                                        let row = ib + (yo * stride + dy) * w + xo * stride;
                                        for dx in 0..k {
                                            gx[row + dx] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            &Op::NearestResize { x } => {
                if self.grads[x].is_some() {
                    let (n, c, h, w) = as_nchw("nearest_resize", &self.shapes[x])?;
                    let os = &self.shapes[id];
                    let (oh, ow) = (os[2], os[3]);
                    let gx = self.grads[x].as_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let ib = (ni * c + ci) * h * w;
                            let ob = (ni * c + ci) * oh * ow;
                            for yo in 0..oh {
                                let yi = yo * h / oh;
                                for xo in 0..ow {
                                    let xi = xo * w / ow;
                                    gx[ib + yi * w + xi] += g[ob + yo * ow + xo];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let parts = parts.clone();
                let axis = *axis;
                let shape = self.shapes[id].clone();
                let outer: usize = shape[..axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[axis] * inner;
                let mut offset = 0;
                for &p in &parts {
                    let alen = self.shapes[p][axis];
                    if self.grads[p].is_some() {
                        let gp = self.grads[p].as_mut().unwrap();
                        for oi in 0..outer {
                            let src = &g[oi * row + offset..oi * row + offset + alen * inner];
                            let dst = &mut gp[oi * alen * inner..(oi + 1) * alen * inner];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += alen * inner;
                }
            }
            &Op::Reshape { x } => {
                if let Some(gx) = self.grads[x].as_mut() {
                    for (gi, &gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
            }
            &Op::SliceChannels { x, from, to } => {
                if self.grads[x].is_some() {
                    let (n, c, h, w) = as_nchw("slice_channels", &self.shapes[x])?;
                    let cs = to - from;
                    let hw = h * w;
                    let gx = self.grads[x].as_mut().unwrap();
                    for ni in 0..n {
                        for ci in 0..cs {
                            let dst = (ni * c + from + ci) * hw;
                            let src = (ni * cs + ci) * hw;
                            for k in 0..hw {
                                gx[dst + k] += g[src + k];
                            }
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = self.grads[x].as_mut() {
                    let gv = g[0];
                    for gi in gx.iter_mut() {
                        *gi += gv;
                    }
                }
            }
            &Op::MeanAll(x) => {
                if self.grads[x].is_some() {
                    let n = self.datas[x].len() as f64;
                    let gv = g[0] / n;
                    let gx = self.grads[x].as_mut().unwrap();
                    for gi in gx.iter_mut() {
                        *gi += gv;
                    }
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let logits = *logits;
                if self.grads[logits].is_some() {
                    let (n, c, h, w) = as_nchw("cross_entropy", &self.shapes[logits])?;
                    let hw = h * w;
                    let scale = g[0] / (n * hw) as f64;
                    let mut contrib = vec![0.0; n * c * hw];
                    for ni in 0..n {
                        for pi in 0..hw {
                            let gt = targets[ni * hw + pi] as usize;
                            let mut maxv = f64::NEG_INFINITY;
                            for ci in 0..c {
                                maxv = maxv.max(self.datas[logits][(ni * c + ci) * hw + pi]);
                            }
                            let mut z = 0.0;
                            for ci in 0..c {
                                z += (self.datas[logits][(ni * c + ci) * hw + pi] - maxv).exp();
                            }
                            for ci in 0..c {
                                let p = (self.datas[logits][(ni * c + ci) * hw + pi] - maxv).exp() / z;
                                let y = if ci == gt { 1.0 } else { 0.0 };
                                contrib[(ni * c + ci) * hw + pi] = (p - y) * scale;
                            }
                        }
                    }
                    let gl = self.grads[logits].as_mut().unwrap();
                    for (gi, cv) in gl.iter_mut().zip(contrib) {
                        *gi += cv;
                    }
                }
            }
            &Op::Reassemble { input, kernels, k_up, scale } => {
                let (n, c, h, w) = as_nchw("reassemble", &self.shapes[input])?;
                if self.grads[input].is_some() {
                    let contrib =
                        reassemble::backward_input(g, &self.datas[kernels], n, c, h, w, k_up, scale);
                    let gi = self.grads[input].as_mut().unwrap();
                    for (gv, cv) in gi.iter_mut().zip(contrib) {
                        *gv += cv;
                    }
                }
                if self.grads[kernels].is_some() {
                    let contrib =
                        reassemble::backward_kernels(g, &self.datas[input], n, c, h, w, k_up, scale);
                    let gk = self.grads[kernels].as_mut().unwrap();
                    for (gv, cv) in gk.iter_mut().zip(contrib) {
                        *gv += cv;
                    }
                }
            }
            Op::SelectiveScan { x, decay, b_in, c_out, d_skip, heads, state_dim, hist } => {
                let (x, decay, b_in, c_out, d_skip) = (*x, *decay, *b_in, *c_out, *d_skip);
                let (heads, state_dim) = (*heads, *state_dim);
                let l = self.shapes[x][0];
                let d = self.shapes[x][1];
                let grads = scan::backward(
                    g,
                    &self.datas[x],
                    &self.datas[decay],
                    &self.datas[b_in],
                    &self.datas[c_out],
                    &self.datas[d_skip],
                    hist,
                    l,
                    d,
                    heads,
                    state_dim,
                );
                let (dx, da, db, dc, dd) = grads;
                if let Some(gx) = self.grads[x].as_mut() {
                    for (gi, cv) in gx.iter_mut().zip(dx) {
                        *gi += cv;
                    }
                }
                if let Some(ga) = self.grads[decay].as_mut() {
                    for (gi, cv) in ga.iter_mut().zip(da) {
                        *gi += cv;
                    }
                }
                if let Some(gb) = self.grads[b_in].as_mut() {
                    for (gi, cv) in gb.iter_mut().zip(db) {
                        *gi += cv;
                    }
                }
                if let Some(gc) = self.grads[c_out].as_mut() {
                    for (gi, cv) in gc.iter_mut().zip(dc) {
                        *gi += cv;
                    }
                }
                if let Some(gd) = self.grads[d_skip].as_mut() {
                    for (gi, cv) in gd.iter_mut().zip(dd) {
                        *gi += cv;
                    }
                }
            }
            &Op::SpatialToSeq { x, sample, dir } => {
                if self.grads[x].is_some() {
                    let (_, c, h, w) = as_nchw("spatial_to_seq", &self.shapes[x])?;
                    let l = h * w;
                    let gx = self.grads[x].as_mut().unwrap();
                    for step in 0..l {
                        let (y, xp) = dir.position(step, h, w);
                        for ci in 0..c {
                            gx[((sample * c) + ci) * l + y * w + xp] += g[step * c + ci];
                        }
                    }
                }
            }
            &Op::SeqToSpatial { seq, dir, h, w } => {
                if self.grads[seq].is_some() {
                    let c = self.shapes[seq][1];
                    let l = h * w;
                    let gs = self.grads[seq].as_mut().unwrap();
                    for step in 0..l {
                        let (y, xp) = dir.position(step, h, w);
                        for ci in 0..c {
                            gs[step * c + ci] += g[ci * l + y * w + xp];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn as_nchw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(shape_err(op, format!("expected NCHW tensor, got {:?}", shape)));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (ov, bv) in orow.iter_mut().zip(brow) {
                    *ov += av * bv;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_val(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn sigmoid_val(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Independent six-loop convolution, bounds-checked per pixel.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        input: &[f64],
        (n, c, h, w): (usize, usize, usize, usize),
        weight: &[f64],
        (o, cg, kh, kw): (usize, usize, usize, usize),
        (sh, sw): (usize, usize),
        (ph, pw): (usize, usize),
        groups: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * ph - kh) / sh + 1;
        let ow = (w + 2 * pw - kw) / sw + 1;
        let og = o / groups;
        let mut out = vec![0.0; n * o * oh * ow];
        for ni in 0..n {
            for oc in 0..o {
                let g = oc / og;
                for yo in 0..oh {
                    for xo in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cg {
                            let ic = g * cg + ci;
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let yi = (yo * sh + ky) as i64 - ph as i64;
                                    let xi = (xo * sw + kx) as i64 - pw as i64;
                                    if yi >= 0 && yi < h as i64 && xi >= 0 && xi < w as i64 {
                                        acc += weight[((oc * cg + ci) * kh + ky) * kw + kx]
                                            * input[((ni * c + ic) * h + yi as usize) * w + xi as usize];
                                    }
                                }
                            }
                        }
                        out[((ni * o + oc) * oh + yo) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    fn randvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn conv2d_all_ones_sums() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0; 9], vec![1, 1, 3, 3]).unwrap();
        let w = t.constant(vec![1.0; 9], vec![1, 1, 3, 3]).unwrap();
        let y = t.conv2d(x, w, (1, 1), (0, 0), 1).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 1]);
        assert_eq!(t.data(y), &[9.0]);
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut t = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = randvec(&mut rng, 2 * 3 * 4 * 4);
        let x = t.constant(data.clone(), vec![2, 3, 4, 4]).unwrap();
        // depthwise 1x1 identity
        let w = t.constant(vec![1.0; 3], vec![3, 1, 1, 1]).unwrap();
        let y = t.conv2d(x, w, (1, 1), (0, 0), 3).unwrap();
        assert_eq!(t.data(y), data.as_slice());
    }

    #[test]
    fn conv2d_matches_oracle_on_shape_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cases: Vec<((usize, usize, usize, usize), (usize, usize, usize), (usize, usize), (usize, usize), usize)> = vec![
            ((1, 2, 5, 5), (3, 3, 3), (1, 1), (0, 0), 1),
            ((1, 1, 3, 3), (1, 3, 3), (1, 1), (1, 1), 1),
            ((2, 4, 8, 8), (4, 3, 3), (2, 2), (1, 1), 1),
            ((2, 4, 8, 8), (8, 1, 1), (1, 1), (0, 0), 1),
            ((1, 4, 8, 8), (4, 1, 7), (1, 1), (0, 3), 4),
            ((1, 4, 8, 8), (4, 7, 1), (1, 1), (3, 0), 4),
            ((2, 4, 7, 6), (6, 3, 3), (2, 2), (2, 2), 2),
            ((1, 3, 8, 8), (5, 5, 5), (1, 1), (2, 2), 1),
            ((2, 2, 4, 8), (2, 2, 4), (2, 1), (0, 2), 2),
            ((1, 4, 6, 6), (4, 5, 5), (1, 1), (2, 2), 4),
        ];
        for (ishape, (o, kh, kw), stride, pad, groups) in cases {
            let (n, c, h, w) = ishape;
            let cg = c / groups;
            let input = randvec(&mut rng, n * c * h * w);
            let weight = randvec(&mut rng, o * cg * kh * kw);
            let mut t = Tape::new();
            let xi = t.constant(input.clone(), vec![n, c, h, w]).unwrap();
            let wi = t.constant(weight.clone(), vec![o, cg, kh, kw]).unwrap();
            let y = t.conv2d(xi, wi, stride, pad, groups).unwrap();
            let want = conv_oracle(&input, ishape, &weight, (o, cg, kh, kw), stride, pad, groups);
            assert!(
                max_abs_diff(t.data(y), &want) <= 1e-12,
                "conv mismatch for {:?} k={}x{} s={:?} p={:?} g={}",
                ishape, kh, kw, stride, pad, groups
            );
        }
    }

    #[test]
    fn strip_conv_impulse_response() {
        // single-row image with a centered impulse: output row equals the kernel
        let k = 7;
        let mut x = vec![0.0; 15];
        x[7] = 1.0;
        let wdata: Vec<f64> = (1..=k).map(|v| v as f64).collect();
        let mut t = Tape::new();
        let xi = t.constant(x, vec![1, 1, 1, 15]).unwrap();
        let wi = t.constant(wdata.clone(), vec![1, 1, 1, k]).unwrap();
        let y = t.strip_conv(xi, wi, StripAxis::Horizontal, k).unwrap();
        assert_eq!(t.shape(y), &[1, 1, 1, 15]);
        // cross-correlation of an impulse flips the kernel around the center
        let row = t.data(y);
        for (i, &wv) in wdata.iter().enumerate() {
            assert_eq!(row[7 + 3 - i], wv);
        }
    }

    #[test]
    fn strip_conv_equals_grouped_conv2d() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (c, h, w, k) = (3, 5, 6, 7);
        let x = randvec(&mut rng, c * h * w);
        let wt = randvec(&mut rng, c * k);
        let mut t = Tape::new();
        let xi = t.constant(x, vec![1, c, h, w]).unwrap();
        let wi = t.constant(wt.clone(), vec![c, 1, 1, k]).unwrap();
        let a = t.strip_conv(xi, wi, StripAxis::Horizontal, k).unwrap();
        let wi2 = t.constant(wt, vec![c, 1, 1, k]).unwrap();
        let b = t.conv2d(xi, wi2, (1, 1), (0, (k - 1) / 2), c).unwrap();
        assert_eq!(t.data(a), t.data(b));
    }

    #[test]
    fn strip_conv_vertical_is_transposed_horizontal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w, k) = (2, 6, 6, 7);
        let x = randvec(&mut rng, c * h * w);
        // transpose spatial dims
        let mut xt = vec![0.0; c * h * w];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    xt[ci * h * w + xx * h + y] = x[ci * h * w + y * w + xx];
                }
            }
        }
        let wt = randvec(&mut rng, c * k);
        let mut t = Tape::new();
        let xi = t.constant(x, vec![1, c, h, w]).unwrap();
        let wh = t.constant(wt.clone(), vec![c, 1, 1, k]).unwrap();
        let horiz = t.strip_conv(xi, wh, StripAxis::Horizontal, k).unwrap();
        let xti = t.constant(xt, vec![1, c, w, h]).unwrap();
        let wv = t.constant(wt, vec![c, 1, k, 1]).unwrap();
        let vert = t.strip_conv(xti, wv, StripAxis::Vertical, k).unwrap();
        // vert on transposed input == transpose of horiz on original
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    assert_eq!(
                        t.data(vert)[ci * h * w + xx * h + y],
                        t.data(horiz)[ci * h * w + y * w + xx]
                    );
                }
            }
        }
    }

    #[test]
    fn strip_conv_rejects_even_kernel() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0; 16], vec![1, 1, 4, 4]).unwrap();
        let w = t.constant(vec![0.0; 4], vec![1, 1, 1, 4]).unwrap();
        assert!(t.strip_conv(x, w, StripAxis::Horizontal, 4).is_err());
    }

    #[test]
    fn softmax_uniform_and_sum() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0, 0.0, 0.0], vec![3]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        for &v in t.data(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = randvec(&mut rng, 2 * 4 * 3);
        let x = t.constant(data, vec![2, 4, 3]).unwrap();
        let y = t.softmax(x, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..4).map(|a| t.data(y)[(o * 4 + a) * 3 + i]).sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!((0..4).all(|a| t.data(y)[(o * 4 + a) * 3 + i] >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_axis_out_of_range() {
        let mut t = Tape::new();
        let x = t.constant(vec![0.0; 4], vec![4]).unwrap();
        assert!(t.softmax(x, 1).is_err());
    }

    #[test]
    fn group_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (n, c, h, w, groups) = (2, 8, 4, 4, 4);
        let data = randvec(&mut rng, n * c * h * w);
        let mut t = Tape::new();
        let x = t.constant(data, vec![n, c, h, w]).unwrap();
        let gamma = t.constant(vec![1.0; c], vec![c]).unwrap();
        let beta = t.constant(vec![0.0; c], vec![c]).unwrap();
        let y = t.group_norm(x, gamma, beta, groups, 1e-6).unwrap();
        let cg = c / groups;
        let m = (cg * h * w) as f64;
        for ni in 0..n {
            for gi in 0..groups {
                let start = (ni * c + gi * cg) * h * w;
                let slice = &t.data(y)[start..start + cg * h * w];
                let mean = slice.iter().sum::<f64>() / m;
                let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
                assert!(mean.abs() < 1e-5, "group mean {}", mean);
                assert!((var - 1.0).abs() < 1e-5, "group var {}", var);
            }
        }
    }

    #[test]
    fn nearest_upsample_replicates_blocks() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0, 2.0, 3.0, 4.0], vec![1, 1, 2, 2]).unwrap();
        let y = t.nearest_upsample(x, 2).unwrap();
        assert_eq!(
            t.data(y),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![3], true).unwrap();
        let sq = t.mul(x, x).unwrap();
        let loss = t.sum_all(sq).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_constant_loss_zero_grads() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        let loss = t.scalar(5.0).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0], vec![1], true).unwrap();
        let loss = t.sum_all(x).unwrap();
        t.backward(loss).unwrap();
        assert!(matches!(t.backward(loss), Err(FamError::BackwardTwice)));
        t.reset();
        assert!(t.is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn tape_replay_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut t = Tape::new();
            let x = t
                .leaf(randvec(&mut rng, 2 * 4 * 6 * 6), vec![2, 4, 6, 6], true)
                .unwrap();
            let w = t.leaf(randvec(&mut rng, 8 * 4 * 9), vec![8, 4, 3, 3], true).unwrap();
            let y = t.conv2d(x, w, (1, 1), (1, 1), 1).unwrap();
            let a = t.gelu(y).unwrap();
            let loss = t.mean_all(a).unwrap();
            t.backward(loss).unwrap();
            (t.grad(x).unwrap().to_vec(), t.grad(w).unwrap().to_vec())
        };
        let (gx1, gw1) = run();
        let (gx2, gw2) = run();
        assert_eq!(gx1, gx2);
        assert_eq!(gw1, gw2);
    }

    #[test]
    fn gradcheck_identity_is_exact() {
        // power-of-two probe point and step: x ± h, the difference quotient,
        // and the probe weight are all exact in f64, so the error is zero
        let rep = gradcheck::gradcheck(|_, x| Ok(x), &[0.25], &[1], 0.0001220703125, 1e-12).unwrap();
        assert_eq!(rep.max_rel_err, 0.0);
    }

    #[test]
    fn gradcheck_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data = randvec(&mut rng, 12);
        let rep = gradcheck::gradcheck(
            |t, x| t.softmax(x, 1),
            &data,
            &[3, 4],
            gradcheck::DEFAULT_H,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed(), "softmax gradcheck err {}", rep.max_rel_err);
    }

    #[test]
    fn gradcheck_detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0);
        let res = gradcheck::gradcheck(
            |t, x| {
                counter.set(counter.get() + 1.0);
                t.add_scalar(x, counter.get())
            },
            &[1.0],
            &[1],
            1e-4,
            1e-4,
        );
        assert!(matches!(res, Err(FamError::NonDeterministic)));
    }

    /// Gradcheck battery over every differentiable op at tol 1e-4.
    #[test]
    fn gradcheck_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = gradcheck::DEFAULT_H;
        let tol = gradcheck::DEFAULT_TOL;

        type OpCase = (&'static str, Vec<usize>, Box<dyn Fn(&mut Tape, TensorId) -> Result<TensorId>>);
        let other = randvec(&mut rng, 24);
        let other2 = randvec(&mut rng, 24).iter().map(|v| v + 2.5).collect::<Vec<_>>();
        let cases: Vec<OpCase> = vec![
            ("add", vec![2, 3, 4], {
                let o = other.clone();
                Box::new(move |t, x| {
                    let b = t.constant(o.clone(), vec![2, 3, 4])?;
                    t.add(x, b)
                })
            }),
            ("sub", vec![2, 3, 4], {
                let o = other.clone();
                Box::new(move |t, x| {
                    let b = t.constant(o.clone(), vec![2, 3, 4])?;
                    t.sub(b, x)
                })
            }),
            ("mul", vec![2, 3, 4], {
                let o = other.clone();
                Box::new(move |t, x| {
                    let b = t.constant(o.clone(), vec![2, 3, 4])?;
                    t.mul(x, b)
                })
            }),
            ("div", vec![2, 3, 4], {
                let o = other2.clone();
                Box::new(move |t, x| {
                    let b = t.constant(o.clone(), vec![2, 3, 4])?;
                    t.div(x, b)
                })
            }),
            ("div_denominator", vec![2, 3, 4], {
                let o = other.clone();
                Box::new(move |t, x| {
                    let num = t.constant(o.clone(), vec![2, 3, 4])?;
                    let shifted = t.add_scalar(x, 3.0)?; // keep denominator away from zero
                    t.div(num, shifted)
                })
            }),
            ("scale", vec![6], Box::new(|t, x| t.scale(x, -1.7))),
            ("relu_shifted", vec![6], Box::new(|t, x| {
                let s = t.add_scalar(x, 2.0)?; // inputs in (1,3): away from the kink
                t.relu(s)
            })),
            ("gelu", vec![6], Box::new(|t, x| t.gelu(x))),
            ("sigmoid", vec![6], Box::new(|t, x| t.sigmoid(x))),
            ("matmul_lhs", vec![3, 4], {
                let o = other.clone();
                Box::new(move |t, x| {
                    let b = t.constant(o[..8].to_vec(), vec![4, 2])?;
                    t.matmul(x, b)
                })
            }),
            ("matmul_rhs", vec![4, 2], {
                let o = other.clone();
                Box::new(move |t, x| {
                    let a = t.constant(o[..12].to_vec(), vec![3, 4])?;
                    t.matmul(a, x)
                })
            }),
            ("transpose2d", vec![3, 4], Box::new(|t, x| t.transpose2d(x))),
            ("softmax_axis0", vec![3, 4], Box::new(|t, x| t.softmax(x, 0))),
            ("group_norm_x", vec![1, 4, 3, 3], Box::new(|t, x| {
                let gamma = t.leaf(vec![1.3, 0.7, -0.4, 1.1], vec![4], false)?;
                let beta = t.leaf(vec![0.1, -0.2, 0.3, 0.0], vec![4], false)?;
                t.group_norm(x, gamma, beta, 2, 1e-5)
            })),
            ("conv2d_input", vec![1, 2, 5, 5], {
                let o = randvec(&mut rng, 3 * 2 * 9);
                Box::new(move |t, x| {
                    let w = t.constant(o.clone(), vec![3, 2, 3, 3])?;
                    t.conv2d(x, w, (2, 2), (1, 1), 1)
                })
            }),
            ("conv2d_weight", vec![3, 2, 3, 3], {
                let o = randvec(&mut rng, 2 * 5 * 5);
                Box::new(move |t, x| {
                    let i = t.constant(o.clone(), vec![1, 2, 5, 5])?;
                    t.conv2d(i, x, (1, 1), (1, 1), 1)
                })
            }),
            ("bias_channel", vec![3], {
                let o = randvec(&mut rng, 2 * 3 * 4);
                Box::new(move |t, x| {
                    let i = t.constant(o.clone(), vec![1, 3, 2, 4])?;
                    t.bias_channel(i, x)
                })
            }),
            ("bias_last_dim", vec![4], {
                let o = randvec(&mut rng, 12);
                Box::new(move |t, x| {
                    let i = t.constant(o.clone(), vec![3, 4])?;
                    t.bias_last_dim(i, x)
                })
            }),
            ("avg_pool", vec![1, 2, 6, 6], Box::new(|t, x| t.avg_pool(x, 2, 2))),
            ("nearest_resize_up", vec![1, 2, 3, 3], Box::new(|t, x| t.nearest_resize(x, 6, 6))),
            ("nearest_resize_down", vec![1, 2, 6, 6], Box::new(|t, x| t.nearest_resize(x, 3, 3))),
            ("concat", vec![1, 2, 3, 3], {
                let o = randvec(&mut rng, 18);
                Box::new(move |t, x| {
                    let b = t.constant(o.clone(), vec![1, 2, 3, 3])?;
                    t.concat(&[x, b, x], 1)
                })
            }),
            ("reshape", vec![2, 6], Box::new(|t, x| t.reshape(x, vec![3, 4]))),
            ("slice_channels", vec![1, 4, 3, 3], Box::new(|t, x| t.slice_channels(x, 1, 3))),
            ("sum_all", vec![7], Box::new(|t, x| t.sum_all(x))),
            ("mean_all", vec![7], Box::new(|t, x| t.mean_all(x))),
            ("cross_entropy", vec![1, 3, 2, 2], Box::new(|t, x| {
                t.cross_entropy(x, &[0, 1, 2, 1])
            })),
            ("spatial_roundtrip", vec![2, 3, 2, 4], Box::new(|t, x| {
                let seq = t.spatial_to_seq(x, 1, ScanDir::TopBottom)?;
                t.seq_to_spatial(seq, ScanDir::BottomTop, 2, 4)
            })),
        ];
        for (name, shape, f) in cases {
            let data = randvec(&mut rng, numel(&shape));
            let rep = gradcheck::gradcheck(f.as_ref(), &data, &shape, h, tol).unwrap();
            assert!(rep.passed(), "op {} gradcheck err {}", name, rep.max_rel_err);
        }
    }

    #[test]
    fn gradcheck_reassemble_and_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let h = gradcheck::DEFAULT_H;
        let tol = gradcheck::DEFAULT_TOL;
        // reassemble wrt input, with softmax-normalized random kernels
        let (n, c, hh, ww, k, scale) = (1, 2, 3, 3, 3, 2);
        let ker_logits = randvec(&mut rng, n * scale * scale * k * k * hh * ww);
        let kl = ker_logits.clone();
        let rep = gradcheck::gradcheck(
            move |t, x| {
                let kid = t.constant(kl.clone(), vec![n, scale * scale, k * k, hh, ww])?;
                let ker = t.softmax(kid, 2)?;
                t.reassemble(x, ker, k, scale)
            },
            &randvec(&mut rng, n * c * hh * ww),
            &[n, c, hh, ww],
            h,
            tol,
        )
        .unwrap();
        assert!(rep.passed(), "reassemble input err {}", rep.max_rel_err);
        // reassemble wrt kernel logits
        let xdata = randvec(&mut rng, n * c * hh * ww);
        let rep = gradcheck::gradcheck(
            move |t, lg| {
                let x = t.constant(xdata.clone(), vec![n, c, hh, ww])?;
                let ker = t.softmax(lg, 2)?;
                t.reassemble(x, ker, k, scale)
            },
            &ker_logits,
            &[n, scale * scale, k * k, hh, ww],
            h,
            tol,
        )
        .unwrap();
        assert!(rep.passed(), "reassemble kernels err {}", rep.max_rel_err);

        // selective scan: check all five inputs jointly
        let (l, d, heads, s) = (5, 4, 2, 3);
        let inputs = vec![
            (randvec(&mut rng, l * d), vec![l, d]),
            (
                randvec(&mut rng, l * heads).iter().map(|v| 0.5 + 0.4 * v).collect(),
                vec![l, heads],
            ),
            (randvec(&mut rng, l * s), vec![l, s]),
            (randvec(&mut rng, l * s), vec![l, s]),
            (randvec(&mut rng, heads), vec![heads]),
        ];
        let rep = gradcheck::gradcheck_inputs(
            |t, ids| t.selective_scan(ids[0], ids[1], ids[2], ids[3], ids[4], heads, s),
            &inputs,
            h,
            tol,
            usize::MAX,
        )
        .unwrap();
        assert!(rep.passed(), "selective_scan err {}", rep.max_rel_err);
    }

    #[test]
    fn leaf_shape_validation() {
        let mut t = Tape::new();
        assert!(t.leaf(vec![1.0, 2.0], vec![3], false).is_err());
        assert!(t.leaf(vec![], vec![0], false).is_err());
        assert!(t.leaf(vec![f64::NAN], vec![1], false).is_err());
    }

    #[test]
    fn concat_rejects_empty_and_mismatch() {
        let mut t = Tape::new();
        assert!(t.concat(&[], 0).is_err());
        let a = t.constant(vec![0.0; 4], vec![2, 2]).unwrap();
        let b = t.constant(vec![0.0; 6], vec![2, 3]).unwrap();
        assert!(t.concat(&[a, b], 0).is_err());
        assert!(t.concat(&[a, b], 1).is_ok());
    }
}
