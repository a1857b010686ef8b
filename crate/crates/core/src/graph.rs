//! Reverse-mode autodiff over a flat tape.
//!
//! Ops append nodes to a [`Graph`]; each node owns its forward value and the
//! metadata its backward rule needs. [`Graph::backward`] seeds d(loss)/d(loss)
//! with 1 and walks the tape in exact reverse construction order (which is a
//! topological order by construction), accumulating gradients additively.
//! Repeated backward calls without a reset keep accumulating.
//!
//! All data is f64. There is no implicit broadcasting: elementwise binaries
//! require identical shapes, and the only scalar forms are [`Graph::affine`]
//! (constant `a*x + b`) and the dedicated row-bias op [`Graph::add_row`].

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_str, Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// One bilinear sample: four flat pixel offsets (in H*W units, channels
/// excluded) and their weights.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil4 {
    pub idx: [usize; 4],
    pub w: [f64; 4],
}

/// Coordinate convention for [`Graph::point_sample`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// `(0,0)` maps to the center of cell `(0,0)`, `(1,1)` to the center of
    /// the last cell; grid is `N x G x G x C` and row `n` of `pts` samples
    /// grid `n`. Coordinates outside `[0,1]^2` are a contract error.
    AlignCorners,
    /// Pixel `(i,j)` of an `H x W x C` map sits at continuous `(j+0.5, i+0.5)`
    /// in pixel units; coordinates are normalized image coordinates and
    /// samples clamp to edge pixels. All query rows sample the same map.
    PixelCenter,
}

enum Op {
    Leaf,
    Matmul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        batch: usize,
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        ksize: usize,
        oh: usize,
        ow: usize,
        cols: Vec<f64>,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Div {
        a: Var,
        b: Var,
    },
    MinElem {
        a: Var,
        b: Var,
    },
    MaxElem {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        b: Var,
    },
    Sigmoid {
        x: Var,
    },
    Relu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Sin {
        x: Var,
    },
    Cos {
        x: Var,
    },
    PowConst {
        x: Var,
        e: f64,
    },
    Affine {
        x: Var,
        a: f64,
    },
    Concat {
        axis: usize,
        parts: Vec<Var>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Transpose {
        x: Var,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    ReduceSum {
        x: Var,
        axis: usize,
    },
    ReduceMean {
        x: Var,
        axis: usize,
    },
    ReduceMax {
        x: Var,
        axis: usize,
        arg: Vec<usize>,
    },
    SumAll {
        x: Var,
    },
    MeanAll {
        x: Var,
    },
    /// Fixed-stencil gather from an `H x W x C` map, differentiable wrt the
    /// map only. Backs RoIAlign.
    StencilGather {
        f: Var,
        channels: usize,
        stencils: Vec<Stencil4>,
    },
    PointSample {
        grid: Var,
        pts: Var,
        mode: SampleMode,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tensor as a leaf. Gradients are only tracked when
    /// `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
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

    /// Accumulated leaf gradient, if any backward pass has run.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Leaf gradient as an owned vector, zeros if the node was never reached.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].value.len()],
        }
    }

    pub fn zero_grads(&mut self) {
        for g in self.grads.iter_mut() {
            *g = None;
        }
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape(
                "matmul",
                format!("incompatible operands {} and {}", shape_str(sa), shape_str(sb)),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(m, k, n, self.value(a).data(), self.value(b).data());
        let t = Tensor::new(&[m, n], data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, Op::Matmul { a, b }, req))
    }

    /// 2D convolution. `x` is `cin x h x w` or `batch x cin x h x w`,
    /// `k` is `cout x cin x ksize x ksize`; output rank matches the input.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(k).to_vec();
        if sk.len() != 4 || sk[2] != sk[3] {
            return Err(Error::shape(
                "conv2d",
                format!("kernels must be cout x cin x k x k, got {}", shape_str(&sk)),
            ));
        }
        let (batch, cin, h, w, batched) = match sx.len() {
            3 => (1, sx[0], sx[1], sx[2], false),
            4 => (sx[0], sx[1], sx[2], sx[3], true),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("input must be rank 3 or 4, got {}", shape_str(&sx)),
                ))
            }
        };
        let (cout, ksize) = (sk[0], sk[2]);
        if sk[1] != cin {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {cin} vs kernel channels {}", sk[1]),
            ));
        }
        if let Some(bv) = bias {
            let sb = self.shape(bv);
            if sb != [cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {} does not match cout {cout}", shape_str(sb)),
                ));
            }
        }
        if stride == 0 {
            return Err(Error::value("conv2d", "stride must be >= 1"));
        }
        let oh = kernels::conv_out_dim(h, ksize, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {ksize} exceeds padded input {h}x{w}")))?;
        let ow = kernels::conv_out_dim(w, ksize, stride, pad)
            .ok_or_else(|| Error::shape("conv2d", format!("kernel {ksize} exceeds padded input {h}x{w}")))?;
        let bias_data = bias.map(|bv| self.value(bv).data().to_vec());
        let (out, cols) = kernels::conv2d_fwd(
            self.value(x).data(),
            batch,
            cin,
            h,
            w,
            self.value(k).data(),
            cout,
            ksize,
            bias_data.as_deref(),
            stride,
            pad,
            oh,
            ow,
        );
        let req = self.req(x) || self.req(k) || bias.map(|b| self.req(b)).unwrap_or(false);
        let shape: Vec<usize> =
            if batched { vec![batch, cout, oh, ow] } else { vec![cout, oh, ow] };
        let t = Tensor::new(&shape, out)?;
        let op = Op::Conv2d {
            x,
            k,
            bias,
            stride,
            pad,
            batch,
            cin,
            h,
            w,
            cout,
            ksize,
            oh,
            ow,
            // The backward pass consumes the unfolded input; skip the copy
            // on inference-only graphs.
            cols: if req { cols } else { Vec::new() },
        };
        Ok(self.push(t, op, req))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} out of range for {}", shape_str(&shape)),
            ));
        }
        let mut data = self.value(x).data().to_vec();
        kernels::softmax_axis(&mut data, &shape, axis);
        let t = Tensor::new(&shape, data)?;
        let req = self.req(x);
        Ok(self.push(t, Op::Softmax { x, axis }, req))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gain {} / bias {} must both be rank-1 of {d}",
                    shape_str(self.shape(gamma)),
                    shape_str(self.shape(beta))
                ),
            ));
        }
        let rows = self.value(x).len() / d;
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + EPS);
            inv_std[r] = is;
            for i in 0..d {
                let xh = (row[i] - mean) * is;
                xhat[r * d + i] = xh;
                out[r * d + i] = xh * gd[i] + bd[i];
            }
        }
        let req = self.req(x) || self.req(gamma) || self.req(beta);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, req))
    }

    // ----- elementwise -----

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                name,
                format!("{} vs {}", shape_str(self.shape(a)), shape_str(self.shape(b))),
            ));
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        let req = self.req(a) || self.req(b);
        Ok(self.push(t, op(a, b), req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, |a, b| Op::Div { a, b })
    }

    /// Elementwise minimum; on ties the gradient routes to the left operand.
    pub fn min_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("min_elem", a, b, f64::min, |a, b| Op::MinElem { a, b })
    }

    /// Elementwise maximum; on ties the gradient routes to the left operand.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max_elem", a, b, f64::max, |a, b| Op::MaxElem { a, b })
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 || self.shape(b) != [sx[1]] {
            return Err(Error::shape(
                "add_row",
                format!("{} plus row {}", shape_str(&sx), shape_str(self.shape(b))),
            ));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bd = self.value(b).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bd[c];
            }
        }
        let t = Tensor::new(&sx, data)?;
        let req = self.req(x) || self.req(b);
        Ok(self.push(t, Op::AddRow { x, b }, req))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.value(x).data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(self.shape(x), data).expect("unary keeps shape");
        let req = self.req(x);
        self.push(t, op, req)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid_scalar, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu { x })
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus_scalar, Op::Softplus { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, libm::sin, Op::Sin { x })
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, libm::cos, Op::Cos { x })
    }

    /// Elementwise `x^e` for a constant exponent.
    pub fn pow_const(&mut self, x: Var, e: f64) -> Var {
        self.unary(x, |v| libm::pow(v, e), Op::PowConst { x, e })
    }

    /// Elementwise `a*x + b` with constant coefficients.
    pub fn affine(&mut self, x: Var, a: f64, b: f64) -> Var {
        self.unary(x, |v| a * v + b, Op::Affine { x, a })
    }

    /// Constant scalar multiply.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    // ----- structural -----

    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::value("concat", "no parts"));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {}", shape_str(&first)),
            ));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp.iter().enumerate().any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::shape(
                    "concat",
                    format!("part {} does not align with {}", shape_str(sp), shape_str(&first)),
                ));
            }
            axis_total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut data = vec![0.0; outer * axis_total * inner];
        let mut offset = 0usize;
        for &p in parts {
            let sp_axis = self.shape(p)[axis];
            let pd = self.value(p).data();
            for o in 0..outer {
                let src = &pd[o * sp_axis * inner..(o + 1) * sp_axis * inner];
                let dst_start = (o * axis_total + offset) * inner;
                data[dst_start..dst_start + sp_axis * inner].copy_from_slice(src);
            }
            offset += sp_axis;
        }
        let req = parts.iter().any(|&p| self.req(p));
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Concat { axis, parts: parts.to_vec() }, req))
    }

    /// Contiguous range along one axis.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape(
                "slice",
                format!("axis {axis} out of range for {}", shape_str(&sx)),
            ));
        }
        if len == 0 || start + len > sx[axis] {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} exceeds axis size {}", start + len, sx[axis]),
            ));
        }
        let inner: usize = sx[axis + 1..].iter().product();
        let outer: usize = sx[..axis].iter().product();
        let mut shape = sx.clone();
        shape[axis] = len;
        let xd = self.value(x).data();
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src = (o * sx[axis] + start) * inner;
            data[o * len * inner..(o + 1) * len * inner]
                .copy_from_slice(&xd[src..src + len * inner]);
        }
        let req = self.req(x);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Slice { x, axis, start }, req))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape(
                "reshape",
                format!("{} cannot reshape to {}", shape_str(self.shape(x)), shape_str(shape)),
            ));
        }
        let t = Tensor::new(shape, self.value(x).data().to_vec())?;
        let req = self.req(x);
        Ok(self.push(t, Op::Reshape { x }, req))
    }

    /// Rank-2 transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("expects rank 2, got {}", shape_str(&sx)),
            ));
        }
        let (m, n) = (sx[0], sx[1]);
        let xd = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = xd[i * n + j];
            }
        }
        let req = self.req(x);
        let t = Tensor::new(&[n, m], data)?;
        Ok(self.push(t, Op::Transpose { x }, req))
    }

    /// General axis permutation; `axes[i]` is the source axis of output axis `i`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let rank = sx.len();
        let mut seen = [false; crate::tensor::MAX_RANK];
        if axes.len() != rank
            || axes.iter().any(|&a| a >= rank || core::mem::replace(&mut seen[a], true))
        {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} is not a permutation of rank {rank}"),
            ));
        }
        let shape: Vec<usize> = axes.iter().map(|&a| sx[a]).collect();
        let data = permute_data(self.value(x).data(), &sx, axes);
        let req = self.req(x);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Permute { x, axes: axes.to_vec() }, req))
    }

    // ----- reductions -----

    fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
        if shape.len() == 1 {
            vec![1]
        } else {
            let mut s = shape.to_vec();
            s.remove(axis);
            s
        }
    }

    pub fn reduce_sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_impl(x, axis, false)
    }

    pub fn reduce_mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_impl(x, axis, true)
    }

    fn reduce_impl(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let name: &'static str = if mean { "reduce_mean" } else { "reduce_sum" };
        if axis >= sx.len() {
            return Err(Error::shape(name, format!("axis {axis} out of range for {}", shape_str(&sx))));
        }
        let lane = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let outer: usize = sx[..axis].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += xd[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / lane as f64;
            for v in data.iter_mut() {
                *v *= inv;
            }
        }
        let req = self.req(x);
        let t = Tensor::new(&Self::reduced_shape(&sx, axis), data)?;
        let op = if mean { Op::ReduceMean { x, axis } } else { Op::ReduceSum { x, axis } };
        Ok(self.push(t, op, req))
    }

    /// Max along an axis; gradient flows to the first (lowest-index) argmax.
    pub fn reduce_max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::shape(
                "reduce_max",
                format!("axis {axis} out of range for {}", shape_str(&sx)),
            ));
        }
        let lane = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let outer: usize = sx[..axis].iter().product();
        let xd = self.value(x).data();
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                for i in 0..inner {
                    let v = xd[base + i];
                    let slot = o * inner + i;
                    if v > data[slot] {
                        data[slot] = v;
                        arg[slot] = l;
                    }
                }
            }
        }
        let req = self.req(x);
        let t = Tensor::new(&Self::reduced_shape(&sx, axis), data)?;
        Ok(self.push(t, Op::ReduceMax { x, axis, arg }, req))
    }

    /// Sum of all elements as a 1-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.req(x);
        self.push(Tensor::scalar(s), Op::SumAll { x }, req)
    }

    /// Mean of all elements as a 1-element tensor.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).data().iter().sum();
        let req = self.req(x);
        self.push(Tensor::scalar(s / n as f64), Op::MeanAll { x }, req)
    }

    // ----- sampling -----

    /// Gather through a fixed bilinear stencil; `f` is `H x W x C`, output
    /// shape is the caller's choice with `stencils.len() * C` elements.
    /// Differentiable wrt `f` only; the stencil geometry is constant.
    pub(crate) fn stencil_gather(
        &mut self,
        f: Var,
        stencils: Vec<Stencil4>,
        out_shape: &[usize],
    ) -> Result<Var> {
        let sf = self.shape(f).to_vec();
        if sf.len() != 3 {
            return Err(Error::shape(
                "roi_align",
                format!("feature map must be H x W x C, got {}", shape_str(&sf)),
            ));
        }
        let channels = sf[2];
        let fd = self.value(f).data();
        let mut data = vec![0.0; stencils.len() * channels];
        for (si, st) in stencils.iter().enumerate() {
            let out = &mut data[si * channels..(si + 1) * channels];
            for j in 0..4 {
                let base = st.idx[j] * channels;
                let w = st.w[j];
                if w == 0.0 {
                    continue;
                }
                for (c, o) in out.iter_mut().enumerate() {
                    *o += w * fd[base + c];
                }
            }
        }
        let req = self.req(f);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::StencilGather { f, channels, stencils }, req))
    }

    /// Bilinear point sampling, differentiable wrt both operands.
    ///
    /// `AlignCorners`: `grid` is `N x G x G x C`, `pts` is `N x M x 2`
    /// (x, y in `[0,1]`, box-relative); output `N x M x C`.
    /// `PixelCenter`: `grid` is `H x W x C`, `pts` is `N x M x 2` normalized
    /// image coordinates; output `N x M x C`.
    pub fn point_sample(&mut self, grid: Var, pts: Var, mode: SampleMode) -> Result<Var> {
        let sg = self.shape(grid).to_vec();
        let sp = self.shape(pts).to_vec();
        if sp.len() != 3 || sp[2] != 2 {
            return Err(Error::shape(
                "point_sample",
                format!("pts must be N x M x 2, got {}", shape_str(&sp)),
            ));
        }
        let (n, m) = (sp[0], sp[1]);
        match mode {
            SampleMode::AlignCorners => {
                if sg.len() != 4 || sg[1] != sg[2] || sg[0] != n {
                    return Err(Error::shape(
                        "point_sample",
                        format!("grid {} does not match pts {}", shape_str(&sg), shape_str(&sp)),
                    ));
                }
                let pd = self.value(pts).data();
                for (i, p) in pd.chunks_exact(2).enumerate() {
                    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                        return Err(Error::value(
                            "point_sample",
                            format!(
                                "point {} of query {} is ({}, {}), outside [0,1]^2",
                                i % m,
                                i / m,
                                p[0],
                                p[1]
                            ),
                        ));
                    }
                }
            }
            SampleMode::PixelCenter => {
                if sg.len() != 3 {
                    return Err(Error::shape(
                        "point_sample",
                        format!("map must be H x W x C, got {}", shape_str(&sg)),
                    ));
                }
            }
        }
        let c = *sg.last().unwrap();
        let gd = self.value(grid).data();
        let pd = self.value(pts).data();
        let mut data = vec![0.0; n * m * c];
        for q in 0..n {
            for pi in 0..m {
                let px = pd[(q * m + pi) * 2];
                let py = pd[(q * m + pi) * 2 + 1];
                let (st, plane_off) = match mode {
                    SampleMode::AlignCorners => {
                        (align_corner_stencil(px, py, sg[1]), q * sg[1] * sg[1] * c)
                    }
                    SampleMode::PixelCenter => (pixel_center_stencil(px, py, sg[0], sg[1]), 0),
                };
                let out = &mut data[(q * m + pi) * c..(q * m + pi + 1) * c];
                for j in 0..4 {
                    let w = st.w[j];
                    if w == 0.0 {
                        continue;
                    }
                    let base = plane_off + st.idx[j] * c;
                    for (ch, o) in out.iter_mut().enumerate() {
                        *o += w * gd[base + ch];
                    }
                }
            }
        }
        let req = self.req(grid) || self.req(pts);
        let t = Tensor::new(&[n, m, c], data)?;
        Ok(self.push(t, Op::PointSample { grid, pts, mode }, req))
    }

    // ----- backward -----

    /// Reverse pass from a 1-element loss.
    ///
    /// Intermediate gradients live in per-pass scratch buffers; only leaf
    /// gradients persist on the graph. They accumulate additively, so calling
    /// backward twice without [`Graph::zero_grads`] doubles leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a 1-element tensor, got {}", shape_str(self.shape(loss))),
            ));
        }
        if self.req(loss) {
            let nodes = &self.nodes;
            let mut scratch: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
            scratch[loss.0] = Some(vec![1.0]);
            for id in (0..=loss.0).rev() {
                if !nodes[id].requires_grad {
                    continue;
                }
                let Some(gout) = scratch[id].take() else { continue };
                step_backward(nodes, &mut scratch, id, &gout);
                if matches!(nodes[id].op, Op::Leaf) {
                    scratch[id] = Some(gout);
                }
            }
            for (id, s) in scratch.into_iter().enumerate() {
                if let Some(s) = s {
                    let n = self.nodes[id].value.len();
                    let g = self.grads[id].get_or_insert_with(|| vec![0.0; n]);
                    add_into(g, &s, 1.0);
                }
            }
        }
        self.fill_leaf_zeros();
        Ok(())
    }

    /// Tracked leaves that no backward pass reached expose zero gradients.
    fn fill_leaf_zeros(&mut self) {
        for id in 0..self.nodes.len() {
            if self.nodes[id].requires_grad
                && matches!(self.nodes[id].op, Op::Leaf)
                && self.grads[id].is_none()
            {
                self.grads[id] = Some(vec![0.0; self.nodes[id].value.len()]);
            }
        }
    }
}

type Grads = [Option<Vec<f64>>];

/// Adds a contribution to `v`'s gradient buffer if it tracks gradients.
/// Takes `nodes` and `grads` as split borrows so values stay readable.
fn acc(nodes: &[Node], grads: &mut Grads, v: Var, f: impl FnOnce(&mut [f64])) {
    if !nodes[v.0].requires_grad {
        return;
    }
    let n = nodes[v.0].value.len();
    let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
    f(g);
}

#[allow(clippy::too_many_lines)]
fn step_backward(nodes: &[Node], grads: &mut Grads, id: usize, gout: &[f64]) {
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Matmul { a, b } => {
            let (a, b) = (*a, *b);
            let (m, k) = (shp(a)[0], shp(a)[1]);
            let n = shp(b)[1];
            acc(nodes, grads, a, |ga| {
                // ga (m x k) += gout (m x n) * b^T; the transpose is expressed
                // through swapped strides.
                kernels::dgemm_strided(m, n, k, 1.0, gout, n, 1, val(b), 1, n, 1.0, ga, k, 1);
            });
            acc(nodes, grads, b, |gb| {
                // gb (k x n) += a^T (k x m) * gout (m x n).
                kernels::dgemm_strided(k, m, n, 1.0, val(a), 1, k, gout, n, 1, 1.0, gb, n, 1);
            });
        }
        Op::Conv2d {
            x,
            k,
            bias,
            stride,
            pad,
            batch,
            cin,
            h,
            w,
            cout,
            ksize,
            oh,
            ow,
            cols,
        } => {
            let (x, k, bias) = (*x, *k, *bias);
            let need_x = nodes[x.0].requires_grad;
            let need_b = bias.map(|b| nodes[b.0].requires_grad).unwrap_or(false);
            let mut dk = vec![0.0; nodes[k.0].value.len()];
            let mut dx = need_x.then(|| vec![0.0; nodes[x.0].value.len()]);
            let mut db = need_b.then(|| vec![0.0; *cout]);
            kernels::conv2d_bwd(
                gout,
                cols,
                val(k),
                *batch,
                *cin,
                *h,
                *w,
                *cout,
                *ksize,
                *stride,
                *pad,
                *oh,
                *ow,
                dx.as_deref_mut(),
                &mut dk,
                db.as_deref_mut(),
            );
            acc(nodes, grads, k, |g| add_into(g, &dk, 1.0));
            if let Some(dx) = dx {
                acc(nodes, grads, x, |g| add_into(g, &dx, 1.0));
            }
            if let (Some(bv), Some(db)) = (bias, db) {
                acc(nodes, grads, bv, |g| add_into(g, &db, 1.0));
            }
        }
        Op::Softmax { x, axis } => {
            let (x, axis) = (*x, *axis);
            let shape = nodes[id].value.shape();
            let lane = shape[axis];
            let inner: usize = shape[axis + 1..].iter().product();
            let outer: usize = shape[..axis].iter().product();
            let y = nodes[id].value.data();
            acc(nodes, grads, x, |gx| {
                for o in 0..outer {
                    for i in 0..inner {
                        let mut dot = 0.0;
                        for l in 0..lane {
                            let p = (o * lane + l) * inner + i;
                            dot += gout[p] * y[p];
                        }
                        for l in 0..lane {
                            let p = (o * lane + l) * inner + i;
                            gx[p] += y[p] * (gout[p] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let d = shp(gamma)[0];
            let rows = xhat.len() / d;
            let gd = val(gamma);
            acc(nodes, grads, gamma, |g| {
                for r in 0..rows {
                    for i in 0..d {
                        g[i] += gout[r * d + i] * xhat[r * d + i];
                    }
                }
            });
            acc(nodes, grads, beta, |g| {
                for r in 0..rows {
                    for i in 0..d {
                        g[i] += gout[r * d + i];
                    }
                }
            });
            acc(nodes, grads, x, |gx| {
                for r in 0..rows {
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for i in 0..d {
                        let dxh = gout[r * d + i] * gd[i];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xhat[r * d + i];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for i in 0..d {
                        let dxh = gout[r * d + i] * gd[i];
                        gx[r * d + i] +=
                            inv_std[r] * (dxh - mean_dxh - xhat[r * d + i] * mean_dxh_xh);
                    }
                }
            });
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            acc(nodes, grads, a, |g| add_into(g, gout, 1.0));
            acc(nodes, grads, b, |g| add_into(g, gout, 1.0));
        }
        Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            acc(nodes, grads, a, |g| add_into(g, gout, 1.0));
            acc(nodes, grads, b, |g| add_into(g, gout, -1.0));
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            acc(nodes, grads, a, |g| mul_add_into(g, gout, val(b)));
            acc(nodes, grads, b, |g| mul_add_into(g, gout, val(a)));
        }
        Op::Div { a, b } => {
            let (a, b) = (*a, *b);
            acc(nodes, grads, a, |g| {
                let bd = val(b);
                for i in 0..g.len() {
                    g[i] += gout[i] / bd[i];
                }
            });
            acc(nodes, grads, b, |g| {
                let (ad, bd) = (val(a), val(b));
                for i in 0..g.len() {
                    g[i] -= gout[i] * ad[i] / (bd[i] * bd[i]);
                }
            });
        }
        Op::MinElem { a, b } | Op::MaxElem { a, b } => {
            let is_min = matches!(nodes[id].op, Op::MinElem { .. });
            let (a, b) = (*a, *b);
            let a_wins = |i: usize| {
                let (av, bv) = (val(a)[i], val(b)[i]);
                if is_min {
                    av <= bv
                } else {
                    av >= bv
                }
            };
            acc(nodes, grads, a, |g| {
                for i in 0..g.len() {
                    if a_wins(i) {
                        g[i] += gout[i];
                    }
                }
            });
            acc(nodes, grads, b, |g| {
                for i in 0..g.len() {
                    if !a_wins(i) {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::AddRow { x, b } => {
            let (x, b) = (*x, *b);
            let cols = shp(b)[0];
            acc(nodes, grads, x, |g| add_into(g, gout, 1.0));
            acc(nodes, grads, b, |g| {
                for (i, &go) in gout.iter().enumerate() {
                    g[i % cols] += go;
                }
            });
        }
        Op::Sigmoid { x } => {
            let x = *x;
            let y = nodes[id].value.data();
            acc(nodes, grads, x, |g| {
                for i in 0..g.len() {
                    g[i] += gout[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Relu { x } => {
            let x = *x;
            acc(nodes, grads, x, |g| {
                let xv = val(x);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            });
        }
        Op::Softplus { x } => {
            let x = *x;
            acc(nodes, grads, x, |g| {
                let xv = val(x);
                for i in 0..g.len() {
                    g[i] += gout[i] * sigmoid_scalar(xv[i]);
                }
            });
        }
        Op::Abs { x } => {
            let x = *x;
            acc(nodes, grads, x, |g| {
                let xv = val(x);
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        g[i] += gout[i];
                    } else if xv[i] < 0.0 {
                        g[i] -= gout[i];
                    }
                }
            });
        }
        Op::Sin { x } => {
            let x = *x;
            acc(nodes, grads, x, |g| {
                let xv = val(x);
                for i in 0..g.len() {
                    g[i] += gout[i] * libm::cos(xv[i]);
                }
            });
        }
        Op::Cos { x } => {
            let x = *x;
            acc(nodes, grads, x, |g| {
                let xv = val(x);
                for i in 0..g.len() {
                    g[i] -= gout[i] * libm::sin(xv[i]);
                }
            });
        }
        Op::PowConst { x, e } => {
            let (x, e) = (*x, *e);
            acc(nodes, grads, x, |g| {
                let xv = val(x);
                for i in 0..g.len() {
                    g[i] += gout[i] * e * libm::pow(xv[i], e - 1.0);
                }
            });
        }
        Op::Affine { x, a } => {
            let (x, a) = (*x, *a);
            acc(nodes, grads, x, |g| add_into(g, gout, a));
        }
        Op::Concat { axis, parts } => {
            let axis = *axis;
            let out_shape = nodes[id].value.shape();
            let inner: usize = out_shape[axis + 1..].iter().product();
            let outer: usize = out_shape[..axis].iter().product();
            let total = out_shape[axis];
            let mut offset = 0usize;
            for &p in parts {
                let p_axis = shp(p)[axis];
                let off = offset;
                acc(nodes, grads, p, |g| {
                    for o in 0..outer {
                        let src = (o * total + off) * inner;
                        let dst = o * p_axis * inner;
                        for i in 0..p_axis * inner {
                            g[dst + i] += gout[src + i];
                        }
                    }
                });
                offset += p_axis;
            }
        }
        Op::Slice { x, axis, start } => {
            let (x, axis, start) = (*x, *axis, *start);
            let sx = shp(x);
            let out_shape = nodes[id].value.shape();
            // A rank-1 slice keeps rank 1, so the axis position still holds.
            let out_len = out_shape[axis.min(out_shape.len() - 1)];
            let inner: usize = sx[axis + 1..].iter().product();
            let outer: usize = sx[..axis].iter().product();
            let lane = sx[axis];
            acc(nodes, grads, x, |g| {
                for o in 0..outer {
                    let dst = (o * lane + start) * inner;
                    let src = o * out_len * inner;
                    for i in 0..out_len * inner {
                        g[dst + i] += gout[src + i];
                    }
                }
            });
        }
        Op::Reshape { x } => {
            let x = *x;
            acc(nodes, grads, x, |g| add_into(g, gout, 1.0));
        }
        Op::Transpose { x } => {
            let x = *x;
            let (m, n) = (shp(x)[0], shp(x)[1]);
            acc(nodes, grads, x, |g| {
                for i in 0..m {
                    for j in 0..n {
                        g[i * n + j] += gout[j * m + i];
                    }
                }
            });
        }
        Op::Permute { x, axes } => {
            let x = *x;
            let out_shape = nodes[id].value.shape();
            // The inverse permutation routes output gradients back to source.
            let mut inv = vec![0usize; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            let scattered = permute_data(gout, out_shape, &inv);
            acc(nodes, grads, x, |g| add_into(g, &scattered, 1.0));
        }
        Op::ReduceSum { x, axis } | Op::ReduceMean { x, axis } => {
            let mean = matches!(nodes[id].op, Op::ReduceMean { .. });
            let (x, axis) = (*x, *axis);
            let sx = shp(x);
            let lane = sx[axis];
            let inner: usize = sx[axis + 1..].iter().product();
            let outer: usize = sx[..axis].iter().product();
            let scale = if mean { 1.0 / lane as f64 } else { 1.0 };
            acc(nodes, grads, x, |g| {
                for o in 0..outer {
                    for l in 0..lane {
                        let base = (o * lane + l) * inner;
                        for i in 0..inner {
                            g[base + i] += gout[o * inner + i] * scale;
                        }
                    }
                }
            });
        }
        Op::ReduceMax { x, axis, arg } => {
            let (x, axis) = (*x, *axis);
            let sx = shp(x);
            let lane = sx[axis];
            let inner: usize = sx[axis + 1..].iter().product();
            let outer: usize = sx[..axis].iter().product();
            acc(nodes, grads, x, |g| {
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        g[(o * lane + arg[slot]) * inner + i] += gout[slot];
                    }
                }
            });
        }
        Op::SumAll { x } => {
            let x = *x;
            let s = gout[0];
            acc(nodes, grads, x, |g| {
                for gi in g.iter_mut() {
                    *gi += s;
                }
            });
        }
        Op::MeanAll { x } => {
            let x = *x;
            let s = gout[0] / nodes[x.0].value.len() as f64;
            acc(nodes, grads, x, |g| {
                for gi in g.iter_mut() {
                    *gi += s;
                }
            });
        }
        Op::StencilGather { f, channels, stencils } => {
            let f = *f;
            let channels = *channels;
            acc(nodes, grads, f, |g| {
                for (si, st) in stencils.iter().enumerate() {
                    let src = &gout[si * channels..(si + 1) * channels];
                    for j in 0..4 {
                        let w = st.w[j];
                        if w == 0.0 {
                            continue;
                        }
                        let base = st.idx[j] * channels;
                        for (c, &go) in src.iter().enumerate() {
                            g[base + c] += w * go;
                        }
                    }
                }
            });
        }
        Op::PointSample { grid, pts, mode } => {
            let (grid, pts, mode) = (*grid, *pts, *mode);
            let sg = shp(grid);
            let sp = shp(pts);
            let (n, m) = (sp[0], sp[1]);
            let c = *sg.last().unwrap();
            let gd = val(grid);
            let pd = val(pts);
            let need_grid = nodes[grid.0].requires_grad;
            let need_pts = nodes[pts.0].requires_grad;
            let mut dgrid = need_grid.then(|| vec![0.0; gd.len()]);
            let mut dpts = need_pts.then(|| vec![0.0; n * m * 2]);
            for q in 0..n {
                for pi in 0..m {
                    let px = pd[(q * m + pi) * 2];
                    let py = pd[(q * m + pi) * 2 + 1];
                    let (st, dwx, dwy, plane_off) = match mode {
                        SampleMode::AlignCorners => {
                            let g1 = sg[1];
                            let (st, dwx, dwy) = align_corner_stencil_d(px, py, g1);
                            (st, dwx, dwy, q * g1 * g1 * c)
                        }
                        SampleMode::PixelCenter => {
                            let (st, dwx, dwy) = pixel_center_stencil_d(px, py, sg[0], sg[1]);
                            (st, dwx, dwy, 0)
                        }
                    };
                    let go = &gout[(q * m + pi) * c..(q * m + pi + 1) * c];
                    if let Some(ref mut dg) = dgrid {
                        for j in 0..4 {
                            let w = st.w[j];
                            if w == 0.0 {
                                continue;
                            }
                            let base = plane_off + st.idx[j] * c;
                            for (ch, &g) in go.iter().enumerate() {
                                dg[base + ch] += w * g;
                            }
                        }
                    }
                    if let Some(ref mut dp) = dpts {
                        let mut gx = 0.0;
                        let mut gy = 0.0;
                        for j in 0..4 {
                            let base = plane_off + st.idx[j] * c;
                            let mut dot = 0.0;
                            for (ch, &g) in go.iter().enumerate() {
                                dot += g * gd[base + ch];
                            }
                            gx += dwx[j] * dot;
                            gy += dwy[j] * dot;
                        }
                        dp[(q * m + pi) * 2] += gx;
                        dp[(q * m + pi) * 2 + 1] += gy;
                    }
                }
            }
            if let Some(dg) = dgrid {
                acc(nodes, grads, grid, |g| add_into(g, &dg, 1.0));
            }
            if let Some(dp) = dpts {
                acc(nodes, grads, pts, |g| add_into(g, &dp, 1.0));
            }
        }
    }
}

// ----- scalar helpers and stencil math -----

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus_scalar(x: f64) -> f64 {
    // max(x, 0) + log1p(exp(-|x|)) holds for both signs and never overflows.
    let m = if x > 0.0 { x } else { 0.0 };
    m + libm::log1p(libm::exp(-libm::fabs(x)))
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn mul_add_into(dst: &mut [f64], a: &[f64], b: &[f64]) {
    for i in 0..dst.len() {
        dst[i] += a[i] * b[i];
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank - 1).rev() {
        src_strides[i] = src_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src = 0usize;
        for (i, &ax) in axes.iter().enumerate() {
            src += idx[i] * src_strides[ax];
        }
        *slot = data[src];
        for i in (0..rank).rev() {
            idx[i] += 1;
            if idx[i] < out_shape[i] {
                break;
            }
            idx[i] = 0;
        }
    }
    out
}

/// Align-corners bilinear stencil on a `G x G` grid for `(x, y)` in `[0,1]^2`.
/// Index layout is row-major `(row, col) = (y, x)`.
fn align_corner_stencil(x: f64, y: f64, g: usize) -> Stencil4 {
    align_corner_stencil_d(x, y, g).0
}

fn align_corner_stencil_d(x: f64, y: f64, g: usize) -> (Stencil4, [f64; 4], [f64; 4]) {
    let scale = (g - 1) as f64;
    bilinear_stencil(x * scale, y * scale, g, g, scale, scale)
}

/// Pixel-center stencil on an `H x W` map for normalized `(x, y)`; samples
/// clamp to edge pixels.
fn pixel_center_stencil(x: f64, y: f64, h: usize, w: usize) -> Stencil4 {
    pixel_center_stencil_d(x, y, h, w).0
}

fn pixel_center_stencil_d(x: f64, y: f64, h: usize, w: usize) -> (Stencil4, [f64; 4], [f64; 4]) {
    let cx = x * w as f64 - 0.5;
    let cy = y * h as f64 - 0.5;
    bilinear_stencil(cx, cy, h, w, w as f64, h as f64)
}

/// Shared bilinear stencil for continuous grid coords `(cx, cy)` with
/// `(row, col)` layout; `dscale_*` are d(grid coord)/d(normalized coord),
/// used for the point gradients. Corner order: (y0,x0), (y0,x1), (y1,x0),
/// (y1,x1).
pub(crate) fn bilinear_stencil(
    cx: f64,
    cy: f64,
    h: usize,
    w: usize,
    dscale_x: f64,
    dscale_y: f64,
) -> (Stencil4, [f64; 4], [f64; 4]) {
    let fx = libm::floor(cx);
    let fy = libm::floor(cy);
    let tx = cx - fx;
    let ty = cy - fy;
    let clamp = |v: f64, hi: usize| -> usize {
        if v < 0.0 {
            0
        } else if v >= hi as f64 {
            hi - 1
        } else {
            v as usize
        }
    };
    let x0 = clamp(fx, w);
    let x1 = clamp(fx + 1.0, w);
    let y0 = clamp(fy, h);
    let y1 = clamp(fy + 1.0, h);
    let w00 = (1.0 - tx) * (1.0 - ty);
    let w01 = tx * (1.0 - ty);
    let w10 = (1.0 - tx) * ty;
    let w11 = tx * ty;
    let st = Stencil4 {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        w: [w00, w01, w10, w11],
    };
    // d(weight)/d(normalized x) and /d(normalized y). Where both corners on
    // an axis clamp to the same cell the sampled value is locally constant
    // along that axis; the weight derivatives then cancel against the equal
    // corner values, so no special casing is needed.
    let dx = [
        -(1.0 - ty) * dscale_x,
        (1.0 - ty) * dscale_x,
        -ty * dscale_x,
        ty * dscale_x,
    ];
    let dy = [
        -(1.0 - tx) * dscale_y,
        -tx * dscale_y,
        (1.0 - tx) * dscale_y,
        tx * dscale_y,
    ];
    (st, dx, dy)
}
