use super::graph::{CustomOp, Graph, Op, Var};
use super::linalg::gemm;
use super::Tensor;
use crate::error::{dim_err, PahError, Result};

/// Lower bound applied to log arguments.
pub const LN_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BnState {
    pub fn new(dim: usize, eps: f64, momentum: f64) -> Self {
        BnState {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            eps,
            momentum,
        }
    }
}

fn same_shape(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return dim_err(format!(
            "{what}: shapes {:?} and {:?} differ",
            g.shape(a),
            g.shape(b)
        ));
    }
    Ok(())
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, n] => Ok((m, n)),
        _ => dim_err(format!("{what}: expected a matrix, got {:?}", t.shape())),
    }
}

fn map_dims(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => dim_err(format!("{what}: expected [h, w, c], got {:?}", t.shape())),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

/// Output spatial size of a convolution.
pub fn conv_out_dim(n: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = n + 2 * padding;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "add")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "sub")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, a, b, "mul")?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let v = self.value(x).map(|a| a * s);
        self.push(v, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return dim_err("mean of empty tensor");
        }
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        self.push(v, Op::Mean(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x).map(f64::exp);
        self.push(v, Op::Exp(x))
    }

    /// Natural log with arguments clamped from below at [`LN_CLAMP`];
    /// clamped positions get zero gradient and are counted on the graph.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let clamped = t.data().iter().filter(|&&a| a < LN_CLAMP).count();
        let v = t.map(|a| a.max(LN_CLAMP).ln());
        self.note_ln_clamped(clamped);
        self.push(v, Op::Ln(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x))
    }

    /// Adds `bias[C]` along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return dim_err(format!(
                "add_bias: bias {:?} vs last axis {c}",
                self.shape(bias)
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(c) {
            for (a, bb) in chunk.iter_mut().zip(&b) {
                *a += bb;
            }
        }
        self.push(v, Op::AddBias { x, bias })
    }

    /// 2-D convolution of an `[H, W, Cin]` map with a `[kh, kw, Cin, Cout]`
    /// kernel, zero padding on all sides.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (h, w, cin) = map_dims(self.value(x), "conv2d input")?;
        let (kh, kw, kc, cout) = match *self.shape(kernel) {
            [a, b, c, d] => (a, b, c, d),
            ref s => return dim_err(format!("conv2d kernel: expected 4 axes, got {s:?}")),
        };
        if kc != cin {
            return dim_err(format!("conv2d: input has {cin} channels, kernel expects {kc}"));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return dim_err(format!("conv2d: kernel {kh}x{kw} must be odd-sized"));
        }
        if stride == 0 {
            return dim_err("conv2d: stride must be at least 1");
        }
        let (Some(ho), Some(wo)) = (
            conv_out_dim(h, kh, stride, padding),
            conv_out_dim(w, kw, stride, padding),
        ) else {
            return dim_err(format!("conv2d: {h}x{w} input too small for {kh}x{kw} kernel"));
        };
        let kk = kh * kw * cin;
        let cols = im2col(self.value(x).data(), h, w, cin, kh, kw, stride, padding, ho, wo);
        let mut out = vec![0.0; ho * wo * cout];
        gemm(ho * wo, kk, cout, &cols, false, self.value(kernel).data(), false, 0.0, &mut out);
        let v = Tensor::new(&[ho, wo, cout], out)?;
        let keep = if self.requires_grad(kernel) || self.requires_grad(x) {
            cols
        } else {
            Vec::new()
        };
        self.push(
            v,
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                cols: keep,
            },
        )
    }

    /// `x[M, K] * w[N, K]^T`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(x), "linear input")?;
        let (n, k2) = matrix_dims(self.value(w), "linear weight")?;
        if k != k2 {
            return dim_err(format!("linear: input width {k} vs weight width {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        self.push(Tensor::new(&[m, n], out)?, Op::Linear { x, w })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul lhs")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul rhs")?;
        if k != k2 {
            return dim_err(format!("matmul: inner dims {k} vs {k2}"));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let v = softmax_last(self.value(x));
        self.push(v, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let k = *t.shape().last().unwrap_or(&1);
        let mut v = t.clone();
        for row in v.data_mut().chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|a| (a - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|a| *a -= lse);
        }
        self.push(v, Op::LogSoftmax(x))
    }

    /// Batch normalization of `x[N, D]` followed by the per-feature affine
    /// `gamma * xhat + beta`. Train mode normalizes by (biased) batch
    /// statistics and updates the running statistics; eval mode uses them.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BnState,
        mode: BnMode,
    ) -> Result<Var> {
        let (n, d) = matrix_dims(self.value(x), "batch_norm input")?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!("batch_norm: gamma/beta must be [{d}]"));
        }
        if state.running_mean.len() != d || state.running_var.len() != d {
            return dim_err(format!("batch_norm: running stats must have length {d}"));
        }
        let xv = self.value(x).data();
        let (mean, var) = match mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(PahError::InsufficientBatch(n));
                }
                let mut mean = vec![0.0; d];
                for row in xv.chunks(d) {
                    for (m, a) in mean.iter_mut().zip(row) {
                        *m += a;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; d];
                for row in xv.chunks(d) {
                    for ((s, a), m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (a - m) * (a - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                (mean, var)
            }
            BnMode::Eval => (state.running_mean.clone(), state.running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; n * d];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            for c in 0..d {
                let i = r * d + c;
                xhat[i] = (xv[i] - mean[c]) * inv_std[c];
                out[i] = gv[c] * xhat[i] + bv[c];
            }
        }
        if mode == BnMode::Train {
            let m = state.momentum;
            let unbias = n as f64 / (n as f64 - 1.0);
            for c in 0..d {
                state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean[c];
                state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var[c] * unbias;
            }
        }
        let v = Tensor::new(&[n, d], out)?;
        self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
        )
    }

    /// Per-channel maximum over all spatial positions of `[h, w, C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = map_dims(self.value(x), "global_max_pool")?;
        if h == 0 || w == 0 {
            return dim_err("global_max_pool: empty map");
        }
        let (v, argmax) = masked_max(self.value(x).data(), h, w, c, None);
        self.push(Tensor::vector(v), Op::GlobalMax { x, argmax })
    }

    /// Per-channel mean over all spatial positions of `[h, w, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (h, w, c) = map_dims(self.value(x), "global_avg_pool")?;
        if h == 0 || w == 0 {
            return dim_err("global_avg_pool: empty map");
        }
        let mut v = vec![0.0; c];
        for px in self.value(x).data().chunks(c) {
            for (s, a) in v.iter_mut().zip(px) {
                *s += a;
            }
        }
        let n = (h * w) as f64;
        v.iter_mut().for_each(|s| *s /= n);
        self.push(Tensor::vector(v), Op::GlobalAvg(x))
    }

    /// Per-channel maximum of `x ⊙ mask`, where `mask[h]` scales whole rows.
    pub fn masked_max_pool(&mut self, x: Var, row_mask: &[f64]) -> Result<Var> {
        let (h, w, c) = map_dims(self.value(x), "masked_max_pool")?;
        if row_mask.len() != h {
            return dim_err(format!("masked_max_pool: mask length {} vs {h} rows", row_mask.len()));
        }
        if w == 0 || h == 0 {
            return dim_err("masked_max_pool: empty map");
        }
        let (v, argmax) = masked_max(self.value(x).data(), h, w, c, Some(row_mask));
        self.push(
            Tensor::vector(v),
            Op::MaskedMax {
                x,
                mask: row_mask.to_vec(),
                argmax,
            },
        )
    }

    /// Probability-weighted average pooling. With `probs[h, w, K]` and
    /// `feats[h, w, C]`, returns the concatenation over `k = 1..K-1` of
    /// `(1 / hw) * sum_ij probs[i, j, k] * feats[i, j, :]`; channel 0 is
    /// skipped.
    pub fn part_pool(&mut self, probs: Var, feats: Var) -> Result<Var> {
        let (h, w, k) = map_dims(self.value(probs), "part_pool probabilities")?;
        let (h2, w2, c) = map_dims(self.value(feats), "part_pool features")?;
        if (h, w) != (h2, w2) {
            return dim_err(format!("part_pool: maps {h}x{w} and {h2}x{w2} differ"));
        }
        if k < 2 {
            return dim_err("part_pool: need at least one non-background channel");
        }
        let n = h * w;
        let mut full = vec![0.0; k * c];
        gemm(k, n, c, self.value(probs).data(), true, self.value(feats).data(), false, 0.0, &mut full);
        let inv = 1.0 / n as f64;
        let v: Vec<f64> = full[c..].iter().map(|a| a * inv).collect();
        self.push(Tensor::vector(v), Op::PartPool { probs, feats })
    }

    /// Concatenate 1-D tensors, or 2-D tensors with equal row counts along
    /// their columns.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return dim_err("concat of nothing");
        }
        let nd = self.value(xs[0]).ndim();
        let v = match nd {
            1 => {
                let mut data = Vec::new();
                for &x in xs {
                    if self.value(x).ndim() != 1 {
                        return dim_err("concat: mixed ranks");
                    }
                    data.extend_from_slice(self.value(x).data());
                }
                Tensor::vector(data)
            }
            2 => {
                let rows = self.shape(xs[0])[0];
                let mut widths = Vec::new();
                for &x in xs {
                    match *self.shape(x) {
                        [r, c] if r == rows => widths.push(c),
                        ref s => return dim_err(format!("concat: incompatible shape {s:?}")),
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (&x, &wd) in xs.iter().zip(&widths) {
                        data.extend_from_slice(&self.value(x).data()[r * wd..(r + 1) * wd]);
                    }
                }
                Tensor::new(&[rows, total], data)?
            }
            _ => return dim_err("concat supports rank 1 and 2 only"),
        };
        self.push(v, Op::Concat(xs.to_vec()))
    }

    /// Stack equal-length vectors into `[N, D]`.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let rows: Vec<&[f64]> = xs
            .iter()
            .map(|&x| {
                if self.value(x).ndim() == 1 {
                    Ok(self.value(x).data())
                } else {
                    dim_err("stack_rows expects vectors")
                }
            })
            .collect::<Result<_>>()?;
        let v = Tensor::stack_rows(&rows)?;
        self.push(v, Op::StackRows(xs.to_vec()))
    }

    /// `out[i] = x[i, index[i]]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = matrix_dims(self.value(x), "gather")?;
        if index.len() != n || index.iter().any(|&i| i >= c) {
            return dim_err("gather: index out of range or wrong length");
        }
        let data = index
            .iter()
            .enumerate()
            .map(|(r, &i)| self.value(x).data()[r * c + i])
            .collect();
        self.push(
            Tensor::vector(data),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        )
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let v = op.forward(&vals)?;
        self.push(
            v,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
        )
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    pub(crate) fn vjp(&self, i: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
        let out = &self.nodes[i].value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(*b), |x, y| x * y)),
                (*b, zip_map(g, val(*a), |x, y| x * y)),
            ],
            Op::Scale(x, s) => vec![(*x, g.map(|a| a * s))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::Relu(x) => vec![(*x, zip_map(g, val(*x), |gg, a| if a > 0.0 { gg } else { 0.0 }))],
            Op::Exp(x) => vec![(*x, zip_map(g, out, |gg, y| gg * y))],
            Op::Ln(x) => vec![(
                *x,
                zip_map(g, val(*x), |gg, a| if a < LN_CLAMP { 0.0 } else { gg / a }),
            )],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape()).expect("same size"))],
            Op::AddBias { x, bias } => {
                let c = val(*bias).len();
                let mut gb = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (s, a) in gb.iter_mut().zip(chunk) {
                        *s += a;
                    }
                }
                vec![(*x, g.clone()), (*bias, Tensor::vector(gb))]
            }
            Op::Conv2d {
                x,
                kernel,
                stride,
                padding,
                cols,
            } => {
                let (h, w, cin) = map_dims(val(*x), "").expect("checked");
                let ks = val(*kernel).shape();
                let (kh, kw, cout) = (ks[0], ks[1], ks[3]);
                let (ho, wo) = (g.shape()[0], g.shape()[1]);
                let kk = kh * kw * cin;
                let mut res = Vec::new();
                if self.requires_grad(*kernel) {
                    let mut gk = vec![0.0; kk * cout];
                    gemm(kk, ho * wo, cout, cols, true, g.data(), false, 0.0, &mut gk);
                    res.push((*kernel, Tensor::new(ks, gk).expect("shape")));
                }
                if self.requires_grad(*x) {
                    let mut gcols = vec![0.0; ho * wo * kk];
                    gemm(ho * wo, cout, kk, g.data(), false, val(*kernel).data(), true, 0.0, &mut gcols);
                    let gx = col2im(&gcols, h, w, cin, kh, kw, *stride, *padding, ho, wo);
                    res.push((*x, Tensor::new(&[h, w, cin], gx).expect("shape")));
                }
                res
            }
            Op::Linear { x, w } => {
                let (m, k) = matrix_dims(val(*x), "").expect("checked");
                let n = val(*w).shape()[0];
                let mut gx = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, val(*w).data(), false, 0.0, &mut gx);
                let mut gw = vec![0.0; n * k];
                gemm(n, m, k, g.data(), true, val(*x).data(), false, 0.0, &mut gw);
                vec![
                    (*x, Tensor::new(&[m, k], gx).expect("shape")),
                    (*w, Tensor::new(&[n, k], gw).expect("shape")),
                ]
            }
            Op::MatMul { a, b } => {
                let (m, k) = matrix_dims(val(*a), "").expect("checked");
                let n = val(*b).shape()[1];
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, val(*b).data(), true, 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(*a).data(), true, g.data(), false, 0.0, &mut gb);
                vec![
                    (*a, Tensor::new(&[m, k], ga).expect("shape")),
                    (*b, Tensor::new(&[k, n], gb).expect("shape")),
                ]
            }
            Op::Softmax(x) => {
                let k = *out.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gg, y) in gr.iter_mut().zip(yr) {
                        *gg = y * (*gg - dot);
                    }
                }
                vec![(*x, gx)]
            }
            Op::LogSoftmax(x) => {
                let k = *out.shape().last().unwrap_or(&1);
                let mut gx = g.clone();
                for (gr, yr) in gx.data_mut().chunks_mut(k).zip(out.data().chunks(k)) {
                    let s: f64 = gr.iter().sum();
                    for (gg, y) in gr.iter_mut().zip(yr) {
                        *gg -= y.exp() * s;
                    }
                }
                vec![(*x, gx)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, d) = matrix_dims(val(*x), "").expect("checked");
                let gv = val(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..n {
                    for c in 0..d {
                        dgamma[c] += gd[r * d + c] * xhat[r * d + c];
                        dbeta[c] += gd[r * d + c];
                    }
                }
                let mut dx = vec![0.0; n * d];
                if *train {
                    // dxhat = g * gamma; sums below are per feature.
                    let nf = n as f64;
                    for c in 0..d {
                        let sum_dxhat = dbeta[c] * gv[c];
                        let sum_dxhat_xhat = dgamma[c] * gv[c];
                        for r in 0..n {
                            let i = r * d + c;
                            let dxhat = gd[i] * gv[c];
                            dx[i] = inv_std[c] / nf * (nf * dxhat - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                        }
                    }
                } else {
                    for r in 0..n {
                        for c in 0..d {
                            let i = r * d + c;
                            dx[i] = gd[i] * gv[c] * inv_std[c];
                        }
                    }
                }
                vec![
                    (*x, Tensor::new(&[n, d], dx).expect("shape")),
                    (*gamma, Tensor::vector(dgamma)),
                    (*beta, Tensor::vector(dbeta)),
                ]
            }
            Op::GlobalMax { x, argmax } => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (c, &idx) in argmax.iter().enumerate() {
                    gx.data_mut()[idx] += g.data()[c];
                }
                vec![(*x, gx)]
            }
            Op::MaskedMax { x, mask, argmax } => {
                let s = val(*x).shape();
                let row_len = s[1] * s[2];
                let mut gx = Tensor::zeros(s);
                for (c, &idx) in argmax.iter().enumerate() {
                    gx.data_mut()[idx] += g.data()[c] * mask[idx / row_len];
                }
                vec![(*x, gx)]
            }
            Op::GlobalAvg(x) => {
                let s = val(*x).shape();
                let c = s[2];
                let inv = 1.0 / (s[0] * s[1]) as f64;
                let mut gx = Tensor::zeros(s);
                for px in gx.data_mut().chunks_mut(c) {
                    for (a, gg) in px.iter_mut().zip(g.data()) {
                        *a = gg * inv;
                    }
                }
                vec![(*x, gx)]
            }
            Op::PartPool { probs, feats } => {
                let ps = val(*probs).shape();
                let (h, w, k) = (ps[0], ps[1], ps[2]);
                let c = val(*feats).shape()[2];
                let n = h * w;
                let inv = 1.0 / n as f64;
                let mut gfull = vec![0.0; k * c];
                for (a, gg) in gfull[c..].iter_mut().zip(g.data()) {
                    *a = gg * inv;
                }
                let mut gf = vec![0.0; n * c];
                gemm(n, k, c, val(*probs).data(), false, &gfull, false, 0.0, &mut gf);
                let mut gp = vec![0.0; n * k];
                gemm(n, c, k, val(*feats).data(), false, &gfull, true, 0.0, &mut gp);
                vec![
                    (*probs, Tensor::new(ps, gp).expect("shape")),
                    (*feats, Tensor::new(&[h, w, c], gf).expect("shape")),
                ]
            }
            Op::Concat(xs) => {
                if out.ndim() == 1 {
                    let mut off = 0;
                    xs.iter()
                        .map(|&x| {
                            let l = val(x).len();
                            let part = Tensor::vector(g.data()[off..off + l].to_vec());
                            off += l;
                            (x, part)
                        })
                        .collect()
                } else {
                    let rows = out.shape()[0];
                    let total = out.shape()[1];
                    let mut off = 0;
                    xs.iter()
                        .map(|&x| {
                            let wd = val(x).shape()[1];
                            let mut d = Vec::with_capacity(rows * wd);
                            for r in 0..rows {
                                d.extend_from_slice(&g.data()[r * total + off..r * total + off + wd]);
                            }
                            off += wd;
                            (x, Tensor::new(&[rows, wd], d).expect("shape"))
                        })
                        .collect()
                }
            }
            Op::StackRows(xs) => xs
                .iter()
                .enumerate()
                .map(|(r, &x)| (x, Tensor::vector(g.row(r).to_vec())))
                .collect(),
            Op::Gather { x, index } => {
                let c = val(*x).shape()[1];
                let mut gx = Tensor::zeros(val(*x).shape());
                for (r, &i) in index.iter().enumerate() {
                    gx.data_mut()[r * c + i] = g.data()[r];
                }
                vec![(*x, gx)]
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                op.backward(&vals, out, g)
                    .into_iter()
                    .zip(inputs)
                    .filter_map(|(gi, &v)| gi.map(|t| (v, t)))
                    .collect()
            }
        }
    }
}

pub(crate) fn softmax_last(t: &Tensor) -> Tensor {
    let k = *t.shape().last().unwrap_or(&1);
    let mut v = t.clone();
    for row in v.data_mut().chunks_mut(k) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for a in row.iter_mut() {
            *a = (*a - m).exp();
            s += *a;
        }
        row.iter_mut().for_each(|a| *a /= s);
    }
    v
}

/// Per-channel max of `x * mask[row]`; first occurrence in row-major scan
/// order wins ties. Returns values and flat argmax indices.
fn masked_max(x: &[f64], h: usize, w: usize, c: usize, mask: Option<&[f64]>) -> (Vec<f64>, Vec<usize>) {
    let mut best = vec![f64::NEG_INFINITY; c];
    let mut arg = vec![0; c];
    for i in 0..h {
        let m = mask.map_or(1.0, |m| m[i]);
        for j in 0..w {
            let base = (i * w + j) * c;
            for ch in 0..c {
                let v = x[base + ch] * m;
                if v > best[ch] {
                    best[ch] = v;
                    arg[ch] = base + ch;
                }
            }
        }
    }
    (best, arg)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let kk = kh * kw * cin;
    let mut cols = vec![0.0; ho * wo * kk];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &mut cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let src = (iy as usize * w + ix as usize) * cin;
                    let dst = (ky * kw + kx) * cin;
                    row[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f64],
    h: usize,
    w: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let kk = kh * kw * cin;
    let mut x = vec![0.0; h * w * cin];
    for oy in 0..ho {
        for ox in 0..wo {
            let row = &cols[(oy * wo + ox) * kk..(oy * wo + ox + 1) * kk];
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let dst = (iy as usize * w + ix as usize) * cin;
                    let src = (ky * kw + kx) * cin;
                    for ch in 0..cin {
                        x[dst + ch] += row[src + ch];
                    }
                }
            }
        }
    }
    x
}
