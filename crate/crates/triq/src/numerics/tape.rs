//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every differentiable operation appends a node holding its output value
//! and a closure that maps the output gradient back to input gradients.
//! `backward` walks the tape in reverse execution order and deposits
//! gradients into the shared tensors registered as leaves.

use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::numerics::tensor::{SharedTensor, Tensor};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Value of one tape node: shape plus row-major data.
pub struct NodeValue {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

type BackwardFn = Box<dyn Fn(&[NodeValue], Var, &[f64]) -> Vec<Vec<f64>>>;

enum GradFn {
    /// Leaf node; `Some` links back to a shared parameter tensor.
    Leaf(Option<SharedTensor>),
    Op(BackwardFn),
}

struct NodeMeta {
    parents: Vec<Var>,
    grad_fn: GradFn,
}

#[derive(Default)]
pub struct Tape {
    values: Vec<NodeValue>,
    meta: Vec<NodeMeta>,
}

fn sqrt_2() -> f64 {
    std::f64::consts::SQRT_2
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / sqrt_2()))
}

/// Standard normal density.
fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.values[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.values[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.values[v.0].shape.clone(),
            data: self.values[v.0].data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Var>,
        grad_fn: GradFn,
    ) -> Var {
        self.values.push(NodeValue { shape, data });
        self.meta.push(NodeMeta { parents, grad_fn });
        Var(self.values.len() - 1)
    }

    /// Register a shared parameter as a leaf. Gradients flow back into
    /// the tensor's `grad` buffer when `requires_grad` is set.
    pub fn leaf(&mut self, t: &SharedTensor) -> Var {
        let b = t.borrow();
        self.push(
            b.shape.clone(),
            b.data.clone(),
            vec![],
            GradFn::Leaf(Some(t.clone())),
        )
    }

    /// A value that participates in the forward pass but receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.shape, t.data, vec![], GradFn::Leaf(None))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "add: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            data,
            vec![a, b],
            GradFn::Op(Box::new(|_, _, dout| {
                vec![dout.to_vec(), dout.to_vec()]
            })),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dim(format!(
                "mul: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            data,
            vec![a, b],
            GradFn::Op(Box::new(move |vals, _, dout| {
                let av = &vals[a.0].data;
                let bv = &vals[b.0].data;
                vec![
                    dout.iter().zip(bv).map(|(d, y)| d * y).collect(),
                    dout.iter().zip(av).map(|(d, x)| d * x).collect(),
                ]
            })),
        ))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| c * x).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            data,
            vec![a],
            GradFn::Op(Box::new(move |_, _, dout| {
                vec![dout.iter().map(|d| c * d).collect()]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            data,
            vec![a],
            GradFn::Op(Box::new(move |vals, _, dout| {
                let av = &vals[a.0].data;
                vec![dout
                    .iter()
                    .zip(av)
                    .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                    .collect()]
            })),
        )
    }

    /// Exact GELU: x * Phi(x) with the Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x * normal_cdf(*x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            data,
            vec![a],
            GradFn::Op(Box::new(move |vals, _, dout| {
                let av = &vals[a.0].data;
                vec![dout
                    .iter()
                    .zip(av)
                    .map(|(d, x)| d * (normal_cdf(*x) + x * normal_pdf(*x)))
                    .collect()]
            })),
        )
    }

    /// Elementwise ln(max(x, floor)); used by the cross-entropy loss.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let data: Vec<f64> = self.data(a).iter().map(|x| x.max(floor).ln()).collect();
        let shape = self.shape(a).to_vec();
        self.push(
            shape,
            data,
            vec![a],
            GradFn::Op(Box::new(move |vals, _, dout| {
                let av = &vals[a.0].data;
                vec![dout
                    .iter()
                    .zip(av)
                    .map(|(d, x)| if *x > floor { d / x } else { 0.0 })
                    .collect()]
            })),
        )
    }

    /// Inverted dropout with a precomputed mask of {0, 1/(1-rate)} factors.
    pub fn dropout_mask(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.data(a).len() {
            return Err(Error::Dim("dropout mask length mismatch".into()));
        }
        let data: Vec<f64> = self
            .data(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(
            shape,
            data,
            vec![a],
            GradFn::Op(Box::new(move |_, _, dout| {
                vec![dout.iter().zip(&mask).map(|(d, m)| d * m).collect()]
            })),
        ))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.data(a).len() {
            return Err(Error::Dim(format!(
                "reshape {:?} -> {:?}",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        Ok(self.push(
            shape,
            data,
            vec![a],
            GradFn::Op(Box::new(|_, _, dout| vec![dout.to_vec()])),
        ))
    }

    /// Rows `start..end` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 || end > sh[0] || start >= end {
            return Err(Error::Dim(format!(
                "slice_rows {start}..{end} of {:?}",
                sh
            )));
        }
        let cols = sh[1];
        let data = self.data(a)[start * cols..end * cols].to_vec();
        let rows_in = sh[0];
        Ok(self.push(
            vec![end - start, cols],
            data,
            vec![a],
            GradFn::Op(Box::new(move |_, _, dout| {
                let mut g = vec![0.0; rows_in * cols];
                g[start * cols..end * cols].copy_from_slice(dout);
                vec![g]
            })),
        ))
    }

    /// Vertical concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_rows: empty".into()));
        }
        let cols = self.shape(parts[0])[1];
        let mut rows = 0;
        let mut data = Vec::new();
        let mut sizes = Vec::new();
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != 2 || sh[1] != cols {
                return Err(Error::Dim("concat_rows: column mismatch".into()));
            }
            rows += sh[0];
            sizes.push(sh[0] * cols);
            data.extend_from_slice(self.data(p));
        }
        Ok(self.push(
            vec![rows, cols],
            data,
            parts.to_vec(),
            GradFn::Op(Box::new(move |_, _, dout| {
                let mut out = Vec::with_capacity(sizes.len());
                let mut off = 0;
                for &n in &sizes {
                    out.push(dout[off..off + n].to_vec());
                    off += n;
                }
                out
            })),
        ))
    }

    /// Horizontal concatenation of 2-D tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dim("concat_cols: empty".into()));
        }
        let rows = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let sh = self.shape(p);
                sh[1]
            })
            .collect();
        for &p in parts {
            if self.shape(p).len() != 2 || self.shape(p)[0] != rows {
                return Err(Error::Dim("concat_cols: row mismatch".into()));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut off = 0;
        for (i, &p) in parts.iter().enumerate() {
            let w = widths[i];
            let src = self.data(p);
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let widths_b = widths.clone();
        Ok(self.push(
            vec![rows, total],
            data,
            parts.to_vec(),
            GradFn::Op(Box::new(move |_, _, dout| {
                let mut out = Vec::with_capacity(widths_b.len());
                let mut off = 0;
                for &w in &widths_b {
                    let mut g = vec![0.0; rows * w];
                    for r in 0..rows {
                        g[r * w..(r + 1) * w]
                            .copy_from_slice(&dout[r * total + off..r * total + off + w]);
                    }
                    out.push(g);
                    off += w;
                }
                out
            })),
        ))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul: {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(self.data(a), self.data(b), m, k, n);
        Ok(self.push(
            vec![m, n],
            data,
            vec![a, b],
            GradFn::Op(Box::new(move |vals, _, dout| {
                let av = &vals[a.0].data;
                let bv = &vals[b.0].data;
                // dA = dC . B^T ; dB = A^T . dC
                let bt = transpose_raw(bv, k, n);
                let da = matmul_raw(dout, &bt, m, n, k);
                let at = transpose_raw(av, m, k);
                let db = matmul_raw(&at, dout, k, m, n);
                vec![da, db]
            })),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(Error::Dim(format!("transpose: {:?}", sh)));
        }
        let (r, c) = (sh[0], sh[1]);
        let data = transpose_raw(self.data(a), r, c);
        Ok(self.push(
            vec![c, r],
            data,
            vec![a],
            GradFn::Op(Box::new(move |_, _, dout| {
                vec![transpose_raw(dout, c, r)]
            })),
        ))
    }

    /// Add a length-D bias vector to every row of an [N, D] tensor.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 2 || sb != vec![sx[1]] {
            return Err(Error::Dim(format!("add_row_bias: {:?} + {:?}", sx, sb)));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let bv = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bv[c];
            }
        }
        Ok(self.push(
            sx,
            data,
            vec![x, bias],
            GradFn::Op(Box::new(move |_, _, dout| {
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        db[c] += dout[r * cols + c];
                    }
                }
                vec![dout.to_vec(), db]
            })),
        ))
    }

    /// Add a per-channel bias to an [h, w, c] tensor.
    pub fn add_chan_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        if sx.len() != 3 || sb != vec![sx[2]] {
            return Err(Error::Dim(format!("add_chan_bias: {:?} + {:?}", sx, sb)));
        }
        let c = sx[2];
        let spatial = sx[0] * sx[1];
        let bv = self.data(bias).to_vec();
        let mut data = self.data(x).to_vec();
        for p in 0..spatial {
            for ch in 0..c {
                data[p * c + ch] += bv[ch];
            }
        }
        Ok(self.push(
            sx,
            data,
            vec![x, bias],
            GradFn::Op(Box::new(move |_, _, dout| {
                let mut db = vec![0.0; c];
                for p in 0..spatial {
                    for ch in 0..c {
                        db[ch] += dout[p * c + ch];
                    }
                }
                vec![dout.to_vec(), db]
            })),
        ))
    }

    // ---- reductions / normalization ----

    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.data(a).iter().sum();
        let n = self.data(a).len();
        self.push(
            vec![1],
            vec![s],
            vec![a],
            GradFn::Op(Box::new(move |_, _, dout| vec![vec![dout[0]; n]])),
        )
    }

    /// Numerically stabilized softmax over the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let sh = self.shape(a).to_vec();
        let cols = *sh.last().expect("softmax on 0-d tensor");
        let rows = self.data(a).len() / cols;
        let mut data = self.data(a).to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        self.push(
            sh,
            data,
            vec![a],
            GradFn::Op(Box::new(move |vals, out, dout| {
                let y = &vals[out.0].data;
                let mut dx = vec![0.0; y.len()];
                for r in 0..rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let dr = &dout[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(dr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (dr[c] - dot);
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Layer normalization over the last axis, then elementwise affine
    /// with gamma/beta of length D.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let cols = *sh
            .last()
            .ok_or_else(|| Error::Dim("layer_norm on 0-d tensor".into()))?;
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::Dim("layer_norm: gamma/beta length mismatch".into()));
        }
        if eps <= 0.0 {
            return Err(Error::Param("layer_norm: eps must be > 0".into()));
        }
        let rows = self.data(x).len() / cols;
        let gv = self.data(gamma).to_vec();
        let bv = self.data(beta).to_vec();
        let xv = self.data(x);
        let mut data = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for c in 0..cols {
                data[r * cols + c] = gv[c] * (row[c] - mean) * inv + bv[c];
            }
        }
        Ok(self.push(
            sh,
            data,
            vec![x, gamma, beta],
            GradFn::Op(Box::new(move |vals, _, dout| {
                let xv = &vals[x.0].data;
                let gv = &vals[gamma.0].data;
                let mut dx = vec![0.0; xv.len()];
                let mut dg = vec![0.0; cols];
                let mut db = vec![0.0; cols];
                for r in 0..rows {
                    let row = &xv[r * cols..(r + 1) * cols];
                    let dr = &dout[r * cols..(r + 1) * cols];
                    let mean = row.iter().sum::<f64>() / cols as f64;
                    let var =
                        row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = dr.iter().zip(gv).map(|(d, g)| d * g).collect();
                    let mean_dxhat = dxhat.iter().sum::<f64>() / cols as f64;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dg[c] += dr[c] * xhat[c];
                        db[c] += dr[c];
                        dx[r * cols + c] =
                            inv * (dxhat[c] - mean_dxhat - xhat[c] * mean_dxhat_xhat);
                    }
                }
                vec![dx, dg, db]
            })),
        ))
    }

    // ---- spatial ----

    /// 2-D cross-correlation on [h, w, c_in] with kernels [k, k, c_in, c_out].
    pub fn conv2d(&mut self, x: Var, kernels: Var, stride: usize, zero_pad: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sk = self.shape(kernels).to_vec();
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::Dim(format!("conv2d: input {:?} kernel {:?}", sx, sk)));
        }
        if stride == 0 {
            return Err(Error::Param("conv2d: stride must be >= 1".into()));
        }
        let (h, w, cin) = (sx[0], sx[1], sx[2]);
        let (kh, kw, kcin, cout) = (sk[0], sk[1], sk[2], sk[3]);
        if kcin != cin {
            return Err(Error::Dim(format!(
                "conv2d: input channels {cin} != kernel channels {kcin}"
            )));
        }
        if kh > h + 2 * zero_pad || kw > w + 2 * zero_pad {
            return Err(Error::Dim(format!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * zero_pad,
                w + 2 * zero_pad
            )));
        }
        let oh = (h + 2 * zero_pad - kh) / stride + 1;
        let ow = (w + 2 * zero_pad - kw) / stride + 1;
        let data = conv2d_raw(
            self.data(x),
            self.data(kernels),
            h,
            w,
            cin,
            kh,
            kw,
            cout,
            stride,
            zero_pad,
        );
        Ok(self.push(
            vec![oh, ow, cout],
            data,
            vec![x, kernels],
            GradFn::Op(Box::new(move |vals, _, dout| {
                let xv = &vals[x.0].data;
                let kv = &vals[kernels.0].data;
                let mut dx = vec![0.0; xv.len()];
                let mut dk = vec![0.0; kv.len()];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let dslice = &dout[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
                        for a in 0..kh {
                            let iy = (oy * stride + a) as isize - zero_pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for b in 0..kw {
                                let ix = (ox * stride + b) as isize - zero_pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let xoff = (iy as usize * w + ix as usize) * cin;
                                let koff = (a * kw + b) * cin * cout;
                                for ic in 0..cin {
                                    let xval = xv[xoff + ic];
                                    let krow = &kv[koff + ic * cout..koff + (ic + 1) * cout];
                                    let mut acc = 0.0;
                                    for oc in 0..cout {
                                        acc += dslice[oc] * krow[oc];
                                        dk[koff + ic * cout + oc] += dslice[oc] * xval;
                                    }
                                    dx[xoff + ic] += acc;
                                }
                            }
                        }
                    }
                }
                vec![dx, dk]
            })),
        ))
    }

    /// Channel-wise max pooling with ceil semantics: edge windows may be
    /// partial, so output is [ceil(h/p), ceil(w/p), c]. Gradient routes to
    /// the first (row-major) maximal position of each window.
    pub fn maxpool2d(&mut self, x: Var, pool: usize) -> Result<Var> {
        if pool == 0 {
            return Err(Error::Param("maxpool2d: pool must be >= 1".into()));
        }
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            return Err(Error::Dim(format!("maxpool2d: input {:?}", sx)));
        }
        let (h, w, c) = (sx[0], sx[1], sx[2]);
        let oh = h.div_ceil(pool);
        let ow = w.div_ceil(pool);
        let xv = self.data(x);
        let mut data = vec![0.0; oh * ow * c];
        let mut argmax = vec![0usize; oh * ow * c];
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for iy in oy * pool..((oy + 1) * pool).min(h) {
                        for ix in ox * pool..((ox + 1) * pool).min(w) {
                            let idx = (iy * w + ix) * c + ch;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    data[(oy * ow + ox) * c + ch] = best;
                    argmax[(oy * ow + ox) * c + ch] = best_idx;
                }
            }
        }
        let n_in = xv.len();
        Ok(self.push(
            vec![oh, ow, c],
            data,
            vec![x],
            GradFn::Op(Box::new(move |_, _, dout| {
                let mut dx = vec![0.0; n_in];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += dout[o];
                }
                vec![dx]
            })),
        ))
    }

    // ---- backward ----

    /// Backpropagate from a scalar loss, accumulating into every
    /// registered leaf whose tensor has `requires_grad` set. Calling twice
    /// without resetting parameter grads accumulates.
    pub fn backward(&self, loss: Var) -> Result<()> {
        if self.data(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.data(loss)[0].is_finite() {
            return Err(Error::Numeric("backward: non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(dout) = grads[i].take() else {
                continue;
            };
            match &self.meta[i].grad_fn {
                GradFn::Leaf(Some(shared)) => {
                    let mut t = shared.borrow_mut();
                    if t.requires_grad {
                        t.accumulate_grad(&dout);
                    }
                }
                GradFn::Leaf(None) => {}
                GradFn::Op(f) => {
                    let parent_grads = f(&self.values, Var(i), &dout);
                    for (p, g) in self.meta[i].parents.iter().zip(parent_grads) {
                        match &mut grads[p.0] {
                            Some(acc) => {
                                for (a, gi) in acc.iter_mut().zip(&g) {
                                    *a += gi;
                                }
                            }
                            slot => *slot = Some(g),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

pub fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_raw(
    x: &[f64],
    k: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let orow = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for a in 0..kh {
                let iy = (oy * stride + a) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for b in 0..kw {
                    let ix = (ox * stride + b) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xoff = (iy as usize * w + ix as usize) * cin;
                    let koff = (a * kw + b) * cin * cout;
                    for ic in 0..cin {
                        let xv = x[xoff + ic];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &k[koff + ic * cout..koff + (ic + 1) * cout];
                        for oc in 0..cout {
                            orow[oc] += xv * krow[oc];
                        }
                    }
                }
            }
        }
    }
    out
}
