//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Graph`] is a write-once tape: every builder method evaluates its
//! result immediately (define-by-run, so control flow may inspect values)
//! and records the op for the backward sweep. [`Graph::backward`] walks the
//! tape once in reverse and returns gradients for every leaf that requires
//! them. Evaluation order is fixed, so forward values and gradients are
//! bitwise reproducible on a given target.
//!
//! The op set is exactly what the model needs — dense linear algebra,
//! convolutions (plain and deformable), bilinear resizing, a few structured
//! gather/scatter ops for patch attention, and fused loss heads.

mod kernels;
mod tensor;

pub mod check;

pub use check::{finite_diff, GradCheck};
pub use tensor::Tensor;

pub(crate) use kernels::{area_downsample as area_downsample_raw, bilinear_resize as bilinear_resize_raw};

use kernels::ConvDims;

/// Handle to a node in a [`Graph`]. Cheap to copy; only meaningful for the
/// graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleVar(Var, Var),
    DivScalarVar(Var, Var),
    AddBias(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    MatMul(Var, Var),
    MatMulTn(Var, Var),
    MatMulNt(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    DeformConv3x3 {
        x: Var,
        w: Var,
        off: Var,
    },
    BilinearResize(Var),
    SoftmaxRows(Var),
    ColNormEps(Var, f64),
    DivOuter {
        s: Var,
        row_norms: Var,
        col_norms: Var,
    },
    LayerNormRows {
        x: Var,
        gain: Var,
        shift: Var,
        eps: f64,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatDim0(Vec<Var>),
    SliceDim0(Var, usize, usize),
    SelectDim0(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    SumCols(Var),
    BroadcastCols(Var),
    AddRowBroadcast(Var, Var),
    AddColBroadcast(Var, Var),
    LogSumExpDim0(Var),
    PickSum(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    MaskedZero(Var, Vec<bool>),
    ExtractPatches {
        x: Var,
        cells: Vec<usize>,
        patch: usize,
    },
    ScatterPatches {
        base: Var,
        rows: Var,
        cells: Vec<usize>,
        patch: usize,
    },
    BceWithLogitsSum(Var, Var),
    L1Mean(Var, Var),
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    inner: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.inner.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`; panics if none was recorded (constant or unreached).
    pub fn wrt(&self, v: Var) -> &[f64] {
        self.get(v)
            .unwrap_or_else(|| panic!("no gradient recorded for var {}", v.0))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.inner.get_mut(v.0).and_then(|g| g.take())
    }
}

/// Reverse-mode tape. See module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_stable(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input (parameters, or anything whose gradient a test
    /// wants to read back).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-differentiable input (images, targets, fixed masks).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "add: dims mismatch");
        let v = Tensor::from_vec(
            self.dims(a),
            self.value(a)
                .iter()
                .zip(self.value(b).iter())
                .map(|(x, y)| x + y)
                .collect(),
        );
        self.push(Op::Add(a, b), v, self.req(a) || self.req(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "sub: dims mismatch");
        let v = Tensor::from_vec(
            self.dims(a),
            self.value(a)
                .iter()
                .zip(self.value(b).iter())
                .map(|(x, y)| x - y)
                .collect(),
        );
        self.push(Op::Sub(a, b), v, self.req(a) || self.req(b))
    }

    /// Hadamard product; shapes must match exactly.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "mul: dims mismatch");
        let v = Tensor::from_vec(
            self.dims(a),
            self.value(a)
                .iter()
                .zip(self.value(b).iter())
                .map(|(x, y)| x * y)
                .collect(),
        );
        self.push(Op::Mul(a, b), v, self.req(a) || self.req(b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = Tensor::from_vec(self.dims(x), self.value(x).iter().map(|a| a * c).collect());
        self.push(Op::Scale(x, c), v, self.req(x))
    }

    /// `x * s` where `s` is a learnable one-element tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "scale_by: scalar expected");
        let sv = self.value(s).item();
        let v = Tensor::from_vec(self.dims(x), self.value(x).iter().map(|a| a * sv).collect());
        self.push(Op::ScaleVar(x, s), v, self.req(x) || self.req(s))
    }

    /// `x / s` where `s` is a learnable one-element tensor.
    pub fn div_by(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).numel(), 1, "div_by: scalar expected");
        let sv = self.value(s).item();
        let v = Tensor::from_vec(self.dims(x), self.value(x).iter().map(|a| a / sv).collect());
        self.push(Op::DivScalarVar(x, s), v, self.req(x) || self.req(s))
    }

    /// Adds `b` (numel = dims\[0\]) along the leading dimension: channel bias
    /// for `(C,H,W)` maps, gate bias for `(4H,1)` columns.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.dims(x)[0];
        assert_eq!(self.value(b).numel(), c, "add_bias: bias numel != dims[0]");
        let rest = self.value(x).numel() / c;
        let mut data = self.value(x).data().to_vec();
        for ch in 0..c {
            let bv = self.value(b).data()[ch];
            for e in &mut data[ch * rest..(ch + 1) * rest] {
                *e += bv;
            }
        }
        let v = Tensor::from_vec(self.dims(x), data);
        self.push(Op::AddBias(x, b), v, self.req(x) || self.req(b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = Tensor::from_vec(self.dims(x), self.value(x).iter().map(|a| a.max(0.0)).collect());
        self.push(Op::Relu(x), v, self.req(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = Tensor::from_vec(
            self.dims(x),
            self.value(x)
                .iter()
                .map(|&a| if a > 0.0 { a } else { slope * a })
                .collect(),
        );
        self.push(Op::LeakyRelu(x, slope), v, self.req(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = Tensor::from_vec(self.dims(x), self.value(x).iter().map(|&a| sigmoid_stable(a)).collect());
        self.push(Op::Sigmoid(x), v, self.req(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = Tensor::from_vec(self.dims(x), self.value(x).iter().map(|a| a.tanh()).collect());
        self.push(Op::Tanh(x), v, self.req(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = Tensor::from_vec(self.dims(x), self.value(x).iter().map(|&a| softplus_stable(a)).collect());
        self.push(Op::Softplus(x), v, self.req(x))
    }

    // ---- linear algebra --------------------------------------------------

    /// `a(m,k) * b(k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        assert!(da.len() == 2 && db.len() == 2 && da[1] == db[0], "matmul: {da:?} x {db:?}");
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(
            Op::MatMul(a, b),
            Tensor::from_vec(&[m, n], out),
            self.req(a) || self.req(b),
        )
    }

    /// `a(k,m)^T * b(k,n)`.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        assert!(da.len() == 2 && db.len() == 2 && da[0] == db[0], "matmul_tn: {da:?} x {db:?}");
        let (k, m, n) = (da[0], da[1], db[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_tn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(
            Op::MatMulTn(a, b),
            Tensor::from_vec(&[m, n], out),
            self.req(a) || self.req(b),
        )
    }

    /// `a(m,k) * b(n,k)^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (da, db) = (self.dims(a).to_vec(), self.dims(b).to_vec());
        assert!(da.len() == 2 && db.len() == 2 && da[1] == db[1], "matmul_nt: {da:?} x {db:?}");
        let (m, k, n) = (da[0], da[1], db[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(
            Op::MatMulNt(a, b),
            Tensor::from_vec(&[m, n], out),
            self.req(a) || self.req(b),
        )
    }

    // ---- convolutions & resampling ----------------------------------------

    /// Zero-padded cross-correlation of `x(ci,h,w)` with `w(co,ci,kh,kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize, dilation: usize) -> Var {
        let dx = self.dims(x).to_vec();
        let dw = self.dims(w).to_vec();
        assert!(dx.len() == 3 && dw.len() == 4 && dx[0] == dw[1], "conv2d: x {dx:?} w {dw:?}");
        let dims = ConvDims {
            ci: dx[0],
            h: dx[1],
            w: dx[2],
            co: dw[0],
            kh: dw[2],
            kw: dw[3],
            stride,
            pad,
            dilation,
        };
        let (ho, wo) = dims.out_hw();
        let out = kernels::conv2d_forward(self.value(x).data(), self.value(w).data(), &dims);
        self.push(
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                dilation,
            },
            Tensor::from_vec(&[dims.co, ho, wo], out),
            self.req(x) || self.req(w),
        )
    }

    /// Deformable 3x3 conv (stride 1, pad 1) with per-pixel, per-tap offsets
    /// `(18,h,w)`. Sampling is bilinear with zero padding.
    pub fn deform_conv3x3(&mut self, x: Var, w: Var, off: Var) -> Var {
        let dx = self.dims(x).to_vec();
        let dw = self.dims(w).to_vec();
        let doff = self.dims(off).to_vec();
        assert!(dx.len() == 3 && dw.len() == 4, "deform_conv3x3: x {dx:?} w {dw:?}");
        assert_eq!(dw[1], dx[0], "deform_conv3x3: channel mismatch");
        assert_eq!((dw[2], dw[3]), (3, 3), "deform_conv3x3: kernel must be 3x3");
        assert_eq!(doff, vec![18, dx[1], dx[2]], "deform_conv3x3: offsets must be (18,h,w)");
        let out = kernels::deform_conv3x3_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(off).data(),
            dx[0],
            dw[0],
            dx[1],
            dx[2],
        );
        self.push(
            Op::DeformConv3x3 { x, w, off },
            Tensor::from_vec(&[dw[0], dx[1], dx[2]], out),
            self.req(x) || self.req(w) || self.req(off),
        )
    }

    /// Half-pixel bilinear resize of `(c,h,w)` to `(c,oh,ow)`, borders
    /// clamped.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 3, "bilinear_resize: (c,h,w) expected, got {d:?}");
        let out = kernels::bilinear_resize(self.value(x).data(), d[0], d[1], d[2], oh, ow);
        self.push(
            Op::BilinearResize(x),
            Tensor::from_vec(&[d[0], oh, ow], out),
            self.req(x),
        )
    }

    // ---- normalization & attention helpers ---------------------------------

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2, "softmax_rows: 2-D expected");
        let (r, c) = (d[0], d[1]);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in row.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in row.iter_mut() {
                *e /= z;
            }
        }
        self.push(Op::SoftmaxRows(x), Tensor::from_vec(&[r, c], data), self.req(x))
    }

    /// Column L2 norms of `x(c,n)` plus `eps`: output `(1,n)`.
    pub fn col_norm_eps(&mut self, x: Var, eps: f64) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2, "col_norm_eps: 2-D expected");
        let (c, n) = (d[0], d[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let mut acc = 0.0;
            for i in 0..c {
                let v = xd[i * n + j];
                acc += v * v;
            }
            out[j] = acc.sqrt() + eps;
        }
        self.push(Op::ColNormEps(x, eps), Tensor::from_vec(&[1, n], out), self.req(x))
    }

    /// `out[i,j] = s[i,j] / (row_norms[i] * col_norms[j])` — the
    /// normalization step of cosine similarity.
    pub fn div_outer(&mut self, s: Var, row_norms: Var, col_norms: Var) -> Var {
        let d = self.dims(s).to_vec();
        let (m, n) = (d[0], d[1]);
        assert_eq!(self.value(row_norms).numel(), m, "div_outer: row norms");
        assert_eq!(self.value(col_norms).numel(), n, "div_outer: col norms");
        let sv = self.value(s).data();
        let rv = self.value(row_norms).data();
        let cv = self.value(col_norms).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = sv[i * n + j] / (rv[i] * cv[j]);
            }
        }
        self.push(
            Op::DivOuter { s, row_norms, col_norms },
            Tensor::from_vec(&[m, n], out),
            self.req(s) || self.req(row_norms) || self.req(col_norms),
        )
    }

    /// LayerNorm over the last axis of `x(n,c)` with learnable gain/shift of
    /// numel `c`.
    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, shift: Var) -> Var {
        let eps = 1e-5;
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2, "layer_norm_rows: 2-D expected");
        let (n, c) = (d[0], d[1]);
        assert_eq!(self.value(gain).numel(), c);
        assert_eq!(self.value(shift).numel(), c);
        let xd = self.value(x).data();
        let gv = self.value(gain).data();
        let sv = self.value(shift).data();
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &xd[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = (row[j] - mu) * inv * gv[j] + sv[j];
            }
        }
        self.push(
            Op::LayerNormRows { x, gain, shift, eps },
            Tensor::from_vec(&[n, c], out),
            self.req(x) || self.req(gain) || self.req(shift),
        )
    }

    // ---- shape plumbing ----------------------------------------------------

    pub fn transpose(&mut self, x: Var) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2, "transpose: 2-D expected");
        let (m, n) = (d[0], d[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xd[i * n + j];
            }
        }
        self.push(Op::Transpose(x), Tensor::from_vec(&[n, m], out), self.req(x))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Var {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.value(x).numel(),
            "reshape: numel mismatch"
        );
        let v = Tensor::from_vec(dims, self.value(x).data().to_vec());
        self.push(Op::Reshape(x), v, self.req(x))
    }

    /// Concatenation along dim 0; trailing dims must match.
    pub fn concat_dim0(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rest: Vec<usize> = self.dims(xs[0])[1..].to_vec();
        let mut d0 = 0;
        let mut data = Vec::new();
        for &v in xs {
            assert_eq!(&self.dims(v)[1..], &rest[..], "concat_dim0: trailing dims differ");
            d0 += self.dims(v)[0];
            data.extend_from_slice(self.value(v).data());
        }
        let mut dims = vec![d0];
        dims.extend_from_slice(&rest);
        let req = xs.iter().any(|&v| self.req(v));
        self.push(Op::ConcatDim0(xs.to_vec()), Tensor::from_vec(&dims, data), req)
    }

    /// Rows `r0..r1` along dim 0.
    pub fn slice_dim0(&mut self, x: Var, r0: usize, r1: usize) -> Var {
        let d = self.dims(x).to_vec();
        assert!(r0 < r1 && r1 <= d[0], "slice_dim0: {r0}..{r1} of {}", d[0]);
        let rest: usize = d[1..].iter().product();
        let data = self.value(x).data()[r0 * rest..r1 * rest].to_vec();
        let mut dims = vec![r1 - r0];
        dims.extend_from_slice(&d[1..]);
        self.push(Op::SliceDim0(x, r0, r1), Tensor::from_vec(&dims, data), self.req(x))
    }

    /// Gather along dim 0 (duplicates allowed) — embedding lookup, window
    /// permutation.
    pub fn select_dim0(&mut self, x: Var, idxs: &[usize]) -> Var {
        let d = self.dims(x).to_vec();
        let rest: usize = d[1..].iter().product();
        let xd = self.value(x).data();
        let mut data = Vec::with_capacity(idxs.len() * rest);
        for &i in idxs {
            assert!(i < d[0], "select_dim0: index {i} out of {}", d[0]);
            data.extend_from_slice(&xd[i * rest..(i + 1) * rest]);
        }
        let mut dims = vec![idxs.len()];
        dims.extend_from_slice(&d[1..]);
        self.push(
            Op::SelectDim0(x, idxs.to_vec()),
            Tensor::from_vec(&dims, data),
            self.req(x),
        )
    }

    /// Gather columns of a 2-D tensor (duplicates allowed).
    pub fn select_cols(&mut self, x: Var, idxs: &[usize]) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2, "select_cols: 2-D expected");
        let (c, n) = (d[0], d[1]);
        let xd = self.value(x).data();
        let k = idxs.len();
        let mut data = vec![0.0; c * k];
        for (out_j, &j) in idxs.iter().enumerate() {
            assert!(j < n, "select_cols: index {j} out of {n}");
            for i in 0..c {
                data[i * k + out_j] = xd[i * n + j];
            }
        }
        self.push(
            Op::SelectCols(x, idxs.to_vec()),
            Tensor::from_vec(&[c, k], data),
            self.req(x),
        )
    }

    /// Sum of columns of `x(c,n)` as `(c,1)`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2, "sum_cols: 2-D expected");
        let (c, n) = (d[0], d[1]);
        let xd = self.value(x).data();
        let data: Vec<f64> = (0..c).map(|i| xd[i * n..(i + 1) * n].iter().sum()).collect();
        self.push(Op::SumCols(x), Tensor::from_vec(&[c, 1], data), self.req(x))
    }

    /// Repeat a `(c,1)` column `n` times to `(c,n)`.
    pub fn broadcast_cols(&mut self, x: Var, n: usize) -> Var {
        let d = self.dims(x).to_vec();
        assert!(d.len() == 2 && d[1] == 1, "broadcast_cols: (c,1) expected");
        let c = d[0];
        let xd = self.value(x).data();
        let mut data = vec![0.0; c * n];
        for i in 0..c {
            data[i * n..(i + 1) * n].fill(xd[i]);
        }
        self.push(Op::BroadcastCols(x), Tensor::from_vec(&[c, n], data), self.req(x))
    }

    /// `out[i,j] = x[i,j] + v[j]` (v numel = cols).
    pub fn add_row_broadcast(&mut self, x: Var, v: Var) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2);
        assert_eq!(self.value(v).numel(), d[1], "add_row_broadcast: v numel != cols");
        let vd = self.value(v).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(d[1]) {
            for (e, b) in row.iter_mut().zip(vd.iter()) {
                *e += b;
            }
        }
        self.push(
            Op::AddRowBroadcast(x, v),
            Tensor::from_vec(&d, data),
            self.req(x) || self.req(v),
        )
    }

    /// `out[i,j] = x[i,j] + v[i]` (v numel = rows).
    pub fn add_col_broadcast(&mut self, x: Var, v: Var) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2);
        assert_eq!(self.value(v).numel(), d[0], "add_col_broadcast: v numel != rows");
        let vd = self.value(v).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for (i, row) in data.chunks_mut(d[1]).enumerate() {
            for e in row.iter_mut() {
                *e += vd[i];
            }
        }
        self.push(
            Op::AddColBroadcast(x, v),
            Tensor::from_vec(&d, data),
            self.req(x) || self.req(v),
        )
    }

    /// Stable log-sum-exp over dim 0 of `x(r,c)`: output `(1,c)`.
    pub fn logsumexp_dim0(&mut self, x: Var) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 2);
        let (r, c) = (d[0], d[1]);
        let xd = self.value(x).data();
        let mut out = vec![0.0; c];
        for j in 0..c {
            let mut m = f64::NEG_INFINITY;
            for i in 0..r {
                m = m.max(xd[i * c + j]);
            }
            let mut z = 0.0;
            for i in 0..r {
                z += (xd[i * c + j] - m).exp();
            }
            out[j] = m + z.ln();
        }
        self.push(Op::LogSumExpDim0(x), Tensor::from_vec(&[1, c], out), self.req(x))
    }

    /// Sum of elements at flat indices (duplicates accumulate) — score
    /// gathering for sequence models.
    pub fn pick_sum(&mut self, x: Var, idxs: &[usize]) -> Var {
        let xd = self.value(x).data();
        let s: f64 = idxs.iter().map(|&i| xd[i]).sum();
        self.push(
            Op::PickSum(x, idxs.to_vec()),
            Tensor::scalar(s),
            self.req(x),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::SumAll(x), Tensor::scalar(s), self.req(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::MeanAll(x), Tensor::scalar(s / n as f64), self.req(x))
    }

    /// Zero out the pixels where `mask` is true, across all channels of a
    /// `(c,h,w)` tensor. `mask.len()` must equal `h*w`.
    pub fn masked_zero(&mut self, x: Var, mask: &[bool]) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 3, "masked_zero: (c,h,w) expected");
        let hw = d[1] * d[2];
        assert_eq!(mask.len(), hw, "masked_zero: mask len != h*w");
        let mut data = self.value(x).data().to_vec();
        for c in 0..d[0] {
            for (p, &m) in mask.iter().enumerate() {
                if m {
                    data[c * hw + p] = 0.0;
                }
            }
        }
        self.push(
            Op::MaskedZero(x, mask.to_vec()),
            Tensor::from_vec(&d, data),
            self.req(x),
        )
    }

    /// Extract square patches as rows. `cells` are linear indices into the
    /// `(h/p, w/p)` patch grid; each output row is the patch flattened
    /// channel-major: element `(c*p + py)*p + px`.
    pub fn extract_patches(&mut self, x: Var, cells: &[usize], patch: usize) -> Var {
        let d = self.dims(x).to_vec();
        assert_eq!(d.len(), 3, "extract_patches: (c,h,w) expected");
        let (c, h, w) = (d[0], d[1], d[2]);
        assert!(h % patch == 0 && w % patch == 0, "extract_patches: {h}x{w} not divisible by {patch}");
        let gw = w / patch;
        let gh = h / patch;
        let row_len = patch * patch * c;
        let xd = self.value(x).data();
        let mut data = vec![0.0; cells.len() * row_len];
        for (k, &cell) in cells.iter().enumerate() {
            assert!(cell < gh * gw, "extract_patches: cell {cell} out of grid");
            let (gy, gx) = (cell / gw, cell % gw);
            for ch in 0..c {
                for py in 0..patch {
                    let src = (ch * h + gy * patch + py) * w + gx * patch;
                    let dst = k * row_len + (ch * patch + py) * patch;
                    data[dst..dst + patch].copy_from_slice(&xd[src..src + patch]);
                }
            }
        }
        self.push(
            Op::ExtractPatches {
                x,
                cells: cells.to_vec(),
                patch,
            },
            Tensor::from_vec(&[cells.len(), row_len], data),
            self.req(x),
        )
    }

    /// Write patch rows (layout as in [`Graph::extract_patches`]) back into a
    /// copy of `base` at the given grid cells; all other pixels pass through.
    pub fn scatter_patches(&mut self, base: Var, rows: Var, cells: &[usize], patch: usize) -> Var {
        let d = self.dims(base).to_vec();
        assert_eq!(d.len(), 3, "scatter_patches: (c,h,w) expected");
        let (c, h, w) = (d[0], d[1], d[2]);
        let gw = w / patch;
        let row_len = patch * patch * c;
        assert_eq!(
            self.dims(rows),
            &[cells.len(), row_len],
            "scatter_patches: rows shape"
        );
        let mut data = self.value(base).data().to_vec();
        let rd = self.value(rows).data();
        for (k, &cell) in cells.iter().enumerate() {
            let (gy, gx) = (cell / gw, cell % gw);
            for ch in 0..c {
                for py in 0..patch {
                    let dst = (ch * h + gy * patch + py) * w + gx * patch;
                    let src = k * row_len + (ch * patch + py) * patch;
                    data[dst..dst + patch].copy_from_slice(&rd[src..src + patch]);
                }
            }
        }
        self.push(
            Op::ScatterPatches {
                base,
                rows,
                cells: cells.to_vec(),
                patch,
            },
            Tensor::from_vec(&d, data),
            self.req(base) || self.req(rows),
        )
    }

    // ---- fused loss heads ---------------------------------------------------

    /// Numerically stable `sum(max(x,0) - x*t + ln(1+e^{-|x|}))` — binary
    /// cross-entropy on logits, summed over all elements.
    pub fn bce_with_logits_sum(&mut self, x: Var, t: Var) -> Var {
        assert_eq!(self.dims(x), self.dims(t), "bce_with_logits_sum: dims mismatch");
        let s: f64 = self
            .value(x)
            .iter()
            .zip(self.value(t).iter())
            .map(|(&xv, &tv)| xv.max(0.0) - xv * tv + (-xv.abs()).exp().ln_1p())
            .sum();
        self.push(
            Op::BceWithLogitsSum(x, t),
            Tensor::scalar(s),
            self.req(x) || self.req(t),
        )
    }

    /// Mean absolute difference.
    pub fn l1_mean(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.dims(a), self.dims(b), "l1_mean: dims mismatch");
        let n = self.value(a).numel();
        let s: f64 = self
            .value(a)
            .iter()
            .zip(self.value(b).iter())
            .map(|(x, y)| (x - y).abs())
            .sum();
        self.push(
            Op::L1Mean(a, b),
            Tensor::scalar(s / n as f64),
            self.req(a) || self.req(b),
        )
    }

    // ---- backward -----------------------------------------------------------

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()])
    }

    /// Reverse sweep from a scalar root. Returns accumulated gradients for
    /// every reachable node that requires grad; interior gradients are
    /// consumed during the sweep, leaf gradients are kept.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.numel(),
            1,
            "backward: root must be scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        if !self.req(root) {
            return Gradients { inner: grads };
        }
        grads[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue; // keep the accumulated gradient in place
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_op(idx, &g, &mut grads);
        }
        Gradients { inner: grads }
    }

    fn backward_op(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out_val = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => unreachable!("leaf handled by caller"),
            Op::Add(a, b) => {
                for &(p, sgn) in [(*a, 1.0), (*b, 1.0)].iter() {
                    if self.req(p) {
                        let dst = self.slot(grads, p);
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += sgn * gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for &(p, sgn) in [(*a, 1.0), (*b, -1.0)].iter() {
                    if self.req(p) {
                        let dst = self.slot(grads, p);
                        for (d, gv) in dst.iter_mut().zip(g) {
                            *d += sgn * gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    let dst = self.slot(grads, *a);
                    for ((d, gv), yv) in dst.iter_mut().zip(g).zip(bv.iter()) {
                        *d += gv * yv;
                    }
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let dst = self.slot(grads, *b);
                    for ((d, gv), xv) in dst.iter_mut().zip(g).zip(av.iter()) {
                        *d += gv * xv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.req(*a) {
                    let c = *c;
                    let dst = self.slot(grads, *a);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::ScaleVar(x, s) => {
                let sv = self.value(*s).item();
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += sv * gv;
                    }
                }
                if self.req(*s) {
                    let acc: f64 = g
                        .iter()
                        .zip(self.value(*x).iter())
                        .map(|(gv, xv)| gv * xv)
                        .sum();
                    self.slot(grads, *s)[0] += acc;
                }
            }
            Op::DivScalarVar(x, s) => {
                let sv = self.value(*s).item();
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv / sv;
                    }
                }
                if self.req(*s) {
                    // d(x/s)/ds = -x/s^2 = -out/s
                    let acc: f64 = g
                        .iter()
                        .zip(out_val.iter())
                        .map(|(gv, ov)| gv * ov)
                        .sum();
                    self.slot(grads, *s)[0] -= acc / sv;
                }
            }
            Op::AddBias(x, b) => {
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.req(*b) {
                    let c = self.value(*b).numel();
                    let rest = out_val.numel() / c;
                    let dst = self.slot(grads, *b);
                    for ch in 0..c {
                        dst[ch] += g[ch * rest..(ch + 1) * rest].iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                if self.req(*x) {
                    let xv = self.value(*x).data();
                    let dst = self.slot(grads, *x);
                    for ((d, gv), xe) in dst.iter_mut().zip(g).zip(xv.iter()) {
                        if *xe > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.req(*x) {
                    let slope = *slope;
                    let xv = self.value(*x).data();
                    let dst = self.slot(grads, *x);
                    for ((d, gv), xe) in dst.iter_mut().zip(g).zip(xv.iter()) {
                        *d += gv * if *xe > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.req(*x) {
                    let yv = out_val.data();
                    let dst = self.slot(grads, *x);
                    for ((d, gv), ye) in dst.iter_mut().zip(g).zip(yv.iter()) {
                        *d += gv * ye * (1.0 - ye);
                    }
                }
            }
            Op::Tanh(x) => {
                if self.req(*x) {
                    let yv = out_val.data();
                    let dst = self.slot(grads, *x);
                    for ((d, gv), ye) in dst.iter_mut().zip(g).zip(yv.iter()) {
                        *d += gv * (1.0 - ye * ye);
                    }
                }
            }
            Op::Softplus(x) => {
                if self.req(*x) {
                    let xv = self.value(*x).data();
                    let dst = self.slot(grads, *x);
                    for ((d, gv), xe) in dst.iter_mut().zip(g).zip(xv.iter()) {
                        *d += gv * sigmoid_stable(*xe);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    let dst = self.slot(grads, *a);
                    kernels::matmul_nt(g, &bv, dst, m, n, k);
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let dst = self.slot(grads, *b);
                    kernels::matmul_tn(&av, g, dst, k, m, n);
                }
            }
            Op::MatMulTn(a, b) => {
                let (k, m) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[1];
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    let dst = self.slot(grads, *a);
                    kernels::matmul_nt(&bv, g, dst, k, n, m);
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let dst = self.slot(grads, *b);
                    kernels::matmul_nn(&av, g, dst, k, m, n);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.dims(*a)[0], self.dims(*a)[1]);
                let n = self.dims(*b)[0];
                if self.req(*a) {
                    let bv = self.value(*b).data();
                    let dst = self.slot(grads, *a);
                    kernels::matmul_nn(g, &bv, dst, m, n, k);
                }
                if self.req(*b) {
                    let av = self.value(*a).data();
                    let dst = self.slot(grads, *b);
                    kernels::matmul_tn(g, &av, dst, n, m, k);
                }
            }
            Op::Conv2d {
                x,
                w,
                stride,
                pad,
                dilation,
            } => {
                let dx = self.dims(*x);
                let dw = self.dims(*w);
                let dims = ConvDims {
                    ci: dx[0],
                    h: dx[1],
                    w: dx[2],
                    co: dw[0],
                    kh: dw[2],
                    kw: dw[3],
                    stride: *stride,
                    pad: *pad,
                    dilation: *dilation,
                };
                let (gx, gw) = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    &dims,
                    self.req(*x),
                );
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, v) in dst.iter_mut().zip(gx.iter()) {
                        *d += v;
                    }
                }
                if self.req(*w) {
                    let dst = self.slot(grads, *w);
                    for (d, v) in dst.iter_mut().zip(gw.iter()) {
                        *d += v;
                    }
                }
            }
            Op::DeformConv3x3 { x, w, off } => {
                let dx = self.dims(*x);
                let dw = self.dims(*w);
                let (gx, gw, goff) = kernels::deform_conv3x3_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    self.value(*off).data(),
                    g,
                    dx[0],
                    dw[0],
                    dx[1],
                    dx[2],
                );
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, v) in dst.iter_mut().zip(gx.iter()) {
                        *d += v;
                    }
                }
                if self.req(*w) {
                    let dst = self.slot(grads, *w);
                    for (d, v) in dst.iter_mut().zip(gw.iter()) {
                        *d += v;
                    }
                }
                if self.req(*off) {
                    let dst = self.slot(grads, *off);
                    for (d, v) in dst.iter_mut().zip(goff.iter()) {
                        *d += v;
                    }
                }
            }
            Op::BilinearResize(x) => {
                if self.req(*x) {
                    let d = self.dims(*x);
                    let (c, h, w) = (d[0], d[1], d[2]);
                    let od = out_val.dims();
                    let gx = kernels::bilinear_resize_backward(g, c, h, w, od[1], od[2]);
                    let dst = self.slot(grads, *x);
                    for (d, v) in dst.iter_mut().zip(gx.iter()) {
                        *d += v;
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.req(*x) {
                    let c = out_val.dims()[1];
                    let yv = out_val.data();
                    let dst = self.slot(grads, *x);
                    for ((yrow, grow), drow) in
                        yv.chunks(c).zip(g.chunks(c)).zip(dst.chunks_mut(c))
                    {
                        let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                        for ((d, gv), ye) in drow.iter_mut().zip(grow).zip(yrow.iter()) {
                            *d += ye * (gv - dot);
                        }
                    }
                }
            }
            Op::ColNormEps(x, eps) => {
                if self.req(*x) {
                    let d = self.dims(*x);
                    let (c, n) = (d[0], d[1]);
                    let xv = self.value(*x).data();
                    let ov = out_val.data();
                    let dst = self.slot(grads, *x);
                    for j in 0..n {
                        let r = ov[j] - eps;
                        if r > 0.0 {
                            let coef = g[j] / r;
                            for i in 0..c {
                                dst[i * n + j] += coef * xv[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::DivOuter { s, row_norms, col_norms } => {
                let (m, n) = (out_val.dims()[0], out_val.dims()[1]);
                let rv = self.value(*row_norms).data();
                let cv = self.value(*col_norms).data();
                let ov = out_val.data();
                if self.req(*s) {
                    let dst = self.slot(grads, *s);
                    for i in 0..m {
                        for j in 0..n {
                            dst[i * n + j] += g[i * n + j] / (rv[i] * cv[j]);
                        }
                    }
                }
                if self.req(*row_norms) {
                    let mut acc = vec![0.0; m];
                    for i in 0..m {
                        for j in 0..n {
                            acc[i] += g[i * n + j] * ov[i * n + j];
                        }
                    }
                    let dst = self.slot(grads, *row_norms);
                    for i in 0..m {
                        dst[i] -= acc[i] / rv[i];
                    }
                }
                if self.req(*col_norms) {
                    let mut acc = vec![0.0; n];
                    for i in 0..m {
                        for j in 0..n {
                            acc[j] += g[i * n + j] * ov[i * n + j];
                        }
                    }
                    let dst = self.slot(grads, *col_norms);
                    for j in 0..n {
                        dst[j] -= acc[j] / cv[j];
                    }
                }
            }
            Op::LayerNormRows { x, gain, shift, eps } => {
                let d = self.dims(*x);
                let (n, c) = (d[0], d[1]);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let cf = c as f64;
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for i in 0..n {
                        let row = &xv[i * c..(i + 1) * c];
                        let mu = row.iter().sum::<f64>() / cf;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cf;
                        let inv = 1.0 / (var + eps).sqrt();
                        let grow = &g[i * c..(i + 1) * c];
                        // a = g * gain; dx = (a - mean(a) - xhat*mean(a*xhat)) * inv
                        let mut mean_a = 0.0;
                        let mut mean_ax = 0.0;
                        for j in 0..c {
                            let a = grow[j] * gv[j];
                            let xh = (row[j] - mu) * inv;
                            mean_a += a;
                            mean_ax += a * xh;
                        }
                        mean_a /= cf;
                        mean_ax /= cf;
                        for j in 0..c {
                            let a = grow[j] * gv[j];
                            let xh = (row[j] - mu) * inv;
                            dst[i * c + j] += (a - mean_a - xh * mean_ax) * inv;
                        }
                    }
                }
                if self.req(*gain) {
                    let dst = self.slot(grads, *gain);
                    for i in 0..n {
                        let row = &xv[i * c..(i + 1) * c];
                        let mu = row.iter().sum::<f64>() / cf;
                        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cf;
                        let inv = 1.0 / (var + eps).sqrt();
                        for j in 0..c {
                            dst[j] += g[i * c + j] * (row[j] - mu) * inv;
                        }
                    }
                }
                if self.req(*shift) {
                    let dst = self.slot(grads, *shift);
                    for i in 0..n {
                        for j in 0..c {
                            dst[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if self.req(*x) {
                    let (n, m) = (out_val.dims()[0], out_val.dims()[1]);
                    let dst = self.slot(grads, *x);
                    for i in 0..n {
                        for j in 0..m {
                            dst[j * n + i] += g[i * m + j];
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::ConcatDim0(xs) => {
                let mut off = 0;
                for &p in xs {
                    let n = self.value(p).numel();
                    if self.req(p) {
                        let dst = self.slot(grads, p);
                        for (d, gv) in dst.iter_mut().zip(&g[off..off + n]) {
                            *d += gv;
                        }
                    }
                    off += n;
                }
            }
            Op::SliceDim0(x, r0, _r1) => {
                if self.req(*x) {
                    let rest: usize = self.dims(*x)[1..].iter().product();
                    let dst = self.slot(grads, *x);
                    for (d, gv) in dst[r0 * rest..].iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::SelectDim0(x, idxs) => {
                if self.req(*x) {
                    let rest: usize = self.dims(*x)[1..].iter().product();
                    let dst = self.slot(grads, *x);
                    for (k, &i) in idxs.iter().enumerate() {
                        for (d, gv) in dst[i * rest..(i + 1) * rest]
                            .iter_mut()
                            .zip(&g[k * rest..(k + 1) * rest])
                        {
                            *d += gv;
                        }
                    }
                }
            }
            Op::SelectCols(x, idxs) => {
                if self.req(*x) {
                    let (c, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                    let k = idxs.len();
                    let dst = self.slot(grads, *x);
                    for (out_j, &j) in idxs.iter().enumerate() {
                        for i in 0..c {
                            dst[i * n + j] += g[i * k + out_j];
                        }
                    }
                }
            }
            Op::SumCols(x) => {
                if self.req(*x) {
                    let (c, n) = (self.dims(*x)[0], self.dims(*x)[1]);
                    let dst = self.slot(grads, *x);
                    for i in 0..c {
                        for j in 0..n {
                            dst[i * n + j] += g[i];
                        }
                    }
                }
            }
            Op::BroadcastCols(x) => {
                if self.req(*x) {
                    let (c, n) = (out_val.dims()[0], out_val.dims()[1]);
                    let dst = self.slot(grads, *x);
                    for i in 0..c {
                        dst[i] += g[i * n..(i + 1) * n].iter().sum::<f64>();
                    }
                }
            }
            Op::AddRowBroadcast(x, v) => {
                let (r, c) = (out_val.dims()[0], out_val.dims()[1]);
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.req(*v) {
                    let dst = self.slot(grads, *v);
                    for i in 0..r {
                        for j in 0..c {
                            dst[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::AddColBroadcast(x, v) => {
                let (r, c) = (out_val.dims()[0], out_val.dims()[1]);
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for (d, gv) in dst.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.req(*v) {
                    let dst = self.slot(grads, *v);
                    for i in 0..r {
                        dst[i] += g[i * c..(i + 1) * c].iter().sum::<f64>();
                    }
                }
            }
            Op::LogSumExpDim0(x) => {
                if self.req(*x) {
                    let (r, c) = (self.dims(*x)[0], self.dims(*x)[1]);
                    let xv = self.value(*x).data();
                    let ov = out_val.data();
                    let dst = self.slot(grads, *x);
                    for j in 0..c {
                        for i in 0..r {
                            dst[i * c + j] += g[j] * (xv[i * c + j] - ov[j]).exp();
                        }
                    }
                }
            }
            Op::PickSum(x, idxs) => {
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for &i in idxs {
                        dst[i] += g[0];
                    }
                }
            }
            Op::SumAll(x) => {
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.req(*x) {
                    let n = self.value(*x).numel() as f64;
                    let dst = self.slot(grads, *x);
                    for d in dst.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::MaskedZero(x, mask) => {
                if self.req(*x) {
                    let hw = mask.len();
                    let c = self.dims(*x)[0];
                    let dst = self.slot(grads, *x);
                    for ch in 0..c {
                        for (p, &m) in mask.iter().enumerate() {
                            if !m {
                                dst[ch * hw + p] += g[ch * hw + p];
                            }
                        }
                    }
                }
            }
            Op::ExtractPatches { x, cells, patch } => {
                if self.req(*x) {
                    let d = self.dims(*x);
                    let (c, h, w) = (d[0], d[1], d[2]);
                    let gw = w / patch;
                    let row_len = patch * patch * c;
                    let dst = self.slot(grads, *x);
                    for (k, &cell) in cells.iter().enumerate() {
                        let (gy, gx) = (cell / gw, cell % gw);
                        for ch in 0..c {
                            for py in 0..*patch {
                                let xbase = (ch * h + gy * patch + py) * w + gx * patch;
                                let gbase = k * row_len + (ch * patch + py) * patch;
                                for px in 0..*patch {
                                    dst[xbase + px] += g[gbase + px];
                                }
                            }
                        }
                    }
                }
            }
            Op::ScatterPatches {
                base,
                rows,
                cells,
                patch,
            } => {
                let d = self.dims(*base);
                let (c, h, w) = (d[0], d[1], d[2]);
                let gw = w / patch;
                let row_len = patch * patch * c;
                if self.req(*rows) {
                    let dst = self.slot(grads, *rows);
                    for (k, &cell) in cells.iter().enumerate() {
                        let (gy, gx) = (cell / gw, cell % gw);
                        for ch in 0..c {
                            for py in 0..*patch {
                                let gbase = (ch * h + gy * patch + py) * w + gx * patch;
                                let rbase = k * row_len + (ch * patch + py) * patch;
                                for px in 0..*patch {
                                    dst[rbase + px] += g[gbase + px];
                                }
                            }
                        }
                    }
                }
                if self.req(*base) {
                    // pass-through everywhere except the overwritten cells
                    let mut overwritten = vec![false; h * w];
                    for &cell in cells {
                        let (gy, gx) = (cell / gw, cell % gw);
                        for py in 0..*patch {
                            let base_px = (gy * patch + py) * w + gx * patch;
                            overwritten[base_px..base_px + patch].fill(true);
                        }
                    }
                    let dst = self.slot(grads, *base);
                    for ch in 0..c {
                        for p in 0..h * w {
                            if !overwritten[p] {
                                dst[ch * h * w + p] += g[ch * h * w + p];
                            }
                        }
                    }
                }
            }
            Op::BceWithLogitsSum(x, t) => {
                let xv = self.value(*x).data();
                let tv = self.value(*t).data();
                if self.req(*x) {
                    let dst = self.slot(grads, *x);
                    for i in 0..xv.len() {
                        dst[i] += g[0] * (sigmoid_stable(xv[i]) - tv[i]);
                    }
                }
                if self.req(*t) {
                    let dst = self.slot(grads, *t);
                    for i in 0..xv.len() {
                        dst[i] -= g[0] * xv[i];
                    }
                }
            }
            Op::L1Mean(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = av.len() as f64;
                if self.req(*a) {
                    let dst = self.slot(grads, *a);
                    for i in 0..av.len() {
                        dst[i] += g[0] * (av[i] - bv[i]).signum_or_zero() / n;
                    }
                }
                if self.req(*b) {
                    let dst = self.slot(grads, *b);
                    for i in 0..av.len() {
                        dst[i] -= g[0] * (av[i] - bv[i]).signum_or_zero() / n;
                    }
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    /// `signum` that treats an exact zero difference as flat rather than +1.
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
    }
}
