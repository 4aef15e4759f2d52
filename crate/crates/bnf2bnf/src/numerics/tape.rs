use rand::Rng;

use super::tensor::{ParamId, ParamStore, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    /// y = x W + b, x is [N x D] (or [D]), W is [D x M], b is [M].
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    // the scalar is applied eagerly in forward; kept here so Debug dumps show it
    AddScalar(Var, #[allow(dead_code)] f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        x: Var,
        start: usize,
        end: usize,
    },
    ConcatRows(Vec<Var>),
    SumAll(Var),
    MeanAll(Var),
    Detach(#[allow(dead_code)] Var),
    /// Full 1-D convolution, same zero padding: x [T x Cin], kernel [K x Cin x Cout].
    Conv1d {
        x: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    /// Per-channel 1-D convolution: x [T x C], kernel [K x C].
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    /// Mixture-of-Gaussians alignment weights over `len` source positions.
    GmmWeights {
        omega: Var,
        mu: Var,
        sigma: Var,
        len: usize,
    },
    RepeatRows {
        x: Var,
        r: usize,
    },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
}

/// Wengert tape: forward ops are evaluated eagerly and recorded so that
/// [`Tape::backward`] can replay them once, in reverse, accumulating
/// parameter gradients into the [`ParamStore`].
///
/// A tape is confined to one forward/backward pass; `backward` consumes it.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].data.len(), 1);
        self.nodes[v.0].data[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].data.clone()).unwrap()
    }

    fn rows_cols(&self, v: Var) -> (usize, usize) {
        let s = &self.nodes[v.0].shape;
        if s.len() >= 2 {
            (s[0], s[1])
        } else {
            (1, s.first().copied().unwrap_or(0))
        }
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.data.clone(), t.shape.clone(), Op::Constant, false)
    }

    pub fn constant_vec(&mut self, data: Vec<f64>) -> Var {
        let n = data.len();
        self.push(data, vec![n], Op::Constant, false)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        self.push(vec![0.0; n], shape, Op::Constant, false)
    }

    /// Record a parameter leaf. The value is snapshotted from the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let t = store.get(id);
        self.push(
            t.data.clone(),
            t.shape.clone(),
            Op::Param(id),
            t.requires_grad,
        )
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (n, d) = self.rows_cols(x);
        let (wd, m) = self.rows_cols(w);
        if d != wd || self.nodes[w.0].shape.len() != 2 {
            return Err(Error::dim("affine", &self.nodes[x.0].shape, &self.nodes[w.0].shape));
        }
        if let Some(b) = b {
            if self.nodes[b.0].data.len() != m {
                return Err(Error::dim("affine bias", &[m], &self.nodes[b.0].shape));
            }
        }
        let mut out = vec![0.0; n * m];
        {
            let xd = &self.nodes[x.0].data;
            let wd_ = &self.nodes[w.0].data;
            for i in 0..n {
                for k in 0..d {
                    let xv = xd[i * d + k];
                    if xv == 0.0 {
                        continue;
                    }
                    let wrow = &wd_[k * m..(k + 1) * m];
                    let orow = &mut out[i * m..(i + 1) * m];
                    for j in 0..m {
                        orow[j] += xv * wrow[j];
                    }
                }
            }
            if let Some(bv) = b {
                let bd = &self.nodes[bv.0].data;
                for i in 0..n {
                    for j in 0..m {
                        out[i * m + j] += bd[j];
                    }
                }
            }
        }
        let shape = if self.nodes[x.0].shape.len() >= 2 {
            vec![n, m]
        } else {
            vec![m]
        };
        let ng = self.needs(x) || self.needs(w) || b.map_or(false, |b| self.needs(b));
        Ok(self.push(out, shape, Op::Affine { x, w, b }, ng))
    }

    fn binary_shapes(&self, op: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(op, &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        Ok(self.nodes[a.0].shape.clone())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("add", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x + y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("sub", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x - y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.binary_shapes("mul", a, b)?;
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x * y)
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(data, shape, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v * k).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::Scale(x, k), ng)
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|v| v + k).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, Op::AddScalar(x, k), ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data: Vec<f64> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(data, shape, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Softmax along the last axis, one row at a time.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.rows_cols(x);
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        self.push(out, shape, Op::SoftmaxRows(x), ng)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, c) = self.rows_cols(x);
        if self.nodes[gain.0].data.len() != c || self.nodes[bias.0].data.len() != c {
            return Err(Error::dim(
                "layer_norm",
                &self.nodes[x.0].shape,
                &self.nodes[gain.0].shape,
            ));
        }
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = &self.nodes[x.0].data[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let istd = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                let xhat = (row[j] - mean) * istd;
                out[i * c + j] =
                    self.nodes[gain.0].data[j] * xhat + self.nodes[bias.0].data[j];
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(out, shape, Op::LayerNorm { x, gain, bias, eps }, ng))
    }

    /// Inverted dropout: train-time masking scaled by 1/(1-rate).
    /// Identity when `train` is false or the rate is zero.
    pub fn dropout(&mut self, x: Var, rate: f64, train: bool, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
        }
        if !train || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = (0..self.nodes[x.0].data.len())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = self.nodes[x.0]
            .data
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.needs(x);
        Ok(self.push(data, shape, Op::Dropout { x, mask }, ng))
    }

    /// Concatenate along the last axis; row counts must match.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca) = self.rows_cols(a);
        let (nb, cb) = self.rows_cols(b);
        if na != nb {
            return Err(Error::dim("concat_cols", &self.nodes[a.0].shape, &self.nodes[b.0].shape));
        }
        let c = ca + cb;
        let mut out = vec![0.0; na * c];
        for i in 0..na {
            out[i * c..i * c + ca]
                .copy_from_slice(&self.nodes[a.0].data[i * ca..(i + 1) * ca]);
            out[i * c + ca..(i + 1) * c]
                .copy_from_slice(&self.nodes[b.0].data[i * cb..(i + 1) * cb]);
        }
        let shape = if self.nodes[a.0].shape.len() >= 2 {
            vec![na, c]
        } else {
            vec![c]
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, shape, Op::ConcatCols(a, b), ng))
    }

    /// Columns [start, end) of every row.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.rows_cols(x);
        if start >= end || end > c {
            return Err(Error::Contract(format!(
                "slice_cols [{start},{end}) out of range for {c} columns"
            )));
        }
        let w = end - start;
        let mut out = vec![0.0; n * w];
        for i in 0..n {
            out[i * w..(i + 1) * w]
                .copy_from_slice(&self.nodes[x.0].data[i * c + start..i * c + end]);
        }
        let shape = if self.nodes[x.0].shape.len() >= 2 {
            vec![n, w]
        } else {
            vec![w]
        };
        let ng = self.needs(x);
        Ok(self.push(out, shape, Op::SliceCols { x, start, end }, ng))
    }

    /// Stack row blocks (vectors count as single rows) into one matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows on empty list".into()));
        }
        let (_, c) = self.rows_cols(parts[0]);
        let mut out = Vec::new();
        let mut total = 0;
        for &p in parts {
            let (np, cp) = self.rows_cols(p);
            if cp != c {
                return Err(Error::dim(
                    "concat_rows",
                    &self.nodes[parts[0].0].shape,
                    &self.nodes[p.0].shape,
                ));
            }
            out.extend_from_slice(&self.nodes[p.0].data);
            total += np;
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(out, vec![total, c], Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.nodes[x.0].data.iter().sum();
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].data.len() as f64;
        let s: f64 = self.nodes[x.0].data.iter().sum::<f64>() / n;
        let ng = self.needs(x);
        self.push(vec![s], vec![1], Op::MeanAll(x), ng)
    }

    /// Forward copy whose backward contributes nothing upstream.
    pub fn detach(&mut self, x: Var) -> Var {
        let data = self.nodes[x.0].data.clone();
        let shape = self.nodes[x.0].shape.clone();
        self.push(data, shape, Op::Detach(x), false)
    }

    /// Same-padded 1-D convolution mixing channels: kernel shape [K, Cin, Cout].
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (t, cin) = self.rows_cols(x);
        let ks = self.nodes[kernel.0].shape.clone();
        if ks.len() != 3 || ks[1] != cin {
            return Err(Error::dim("conv1d", &self.nodes[x.0].shape, &ks));
        }
        let (k, cout) = (ks[0], ks[2]);
        if k % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {k} must be odd")));
        }
        if let Some(b) = bias {
            if self.nodes[b.0].data.len() != cout {
                return Err(Error::dim("conv1d bias", &[cout], &self.nodes[b.0].shape));
            }
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; t * cout];
        {
            let xd = &self.nodes[x.0].data;
            let kd = &self.nodes[kernel.0].data;
            for ti in 0..t {
                for dk in 0..k {
                    let src = ti as isize + dk as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    let xrow = &xd[src as usize * cin..(src as usize + 1) * cin];
                    for ci in 0..cin {
                        let xv = xrow[ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let krow = &kd[(dk * cin + ci) * cout..(dk * cin + ci + 1) * cout];
                        let orow = &mut out[ti * cout..(ti + 1) * cout];
                        for co in 0..cout {
                            orow[co] += xv * krow[co];
                        }
                    }
                }
            }
            if let Some(b) = bias {
                let bd = &self.nodes[b.0].data;
                for ti in 0..t {
                    for co in 0..cout {
                        out[ti * cout + co] += bd[co];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel) || bias.map_or(false, |b| self.needs(b));
        Ok(self.push(out, vec![t, cout], Op::Conv1d { x, kernel, bias }, ng))
    }

    /// Same-padded per-channel 1-D convolution: kernel shape [K, C].
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (t, c) = self.rows_cols(x);
        let ks = self.nodes[kernel.0].shape.clone();
        if ks.len() != 2 || ks[1] != c {
            return Err(Error::dim("depthwise_conv1d", &self.nodes[x.0].shape, &ks));
        }
        let k = ks[0];
        if k % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel width {k} must be odd"
            )));
        }
        let pad = (k - 1) / 2;
        let mut out = vec![0.0; t * c];
        {
            let xd = &self.nodes[x.0].data;
            let kd = &self.nodes[kernel.0].data;
            for ti in 0..t {
                for dk in 0..k {
                    let src = ti as isize + dk as isize - pad as isize;
                    if src < 0 || src >= t as isize {
                        continue;
                    }
                    for ci in 0..c {
                        out[ti * c + ci] += xd[src as usize * c + ci] * kd[dk * c + ci];
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(kernel);
        Ok(self.push(out, vec![t, c], Op::DepthwiseConv1d { x, kernel }, ng))
    }

    /// Alignment weights w_j = sum_k omega_k * exp(-(j - mu_k)^2 / (2 sigma_k^2))
    /// for j in 0..len. omega, mu, sigma each hold K scalars; output is [1 x len].
    pub fn gmm_weights(&mut self, omega: Var, mu: Var, sigma: Var, len: usize) -> Result<Var> {
        if len == 0 {
            return Err(Error::Contract("gmm_weights over empty memory".into()));
        }
        let k = self.nodes[omega.0].data.len();
        if self.nodes[mu.0].data.len() != k || self.nodes[sigma.0].data.len() != k {
            return Err(Error::dim(
                "gmm_weights",
                &self.nodes[omega.0].shape,
                &self.nodes[mu.0].shape,
            ));
        }
        let mut out = vec![0.0; len];
        for (j, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for ki in 0..k {
                let om = self.nodes[omega.0].data[ki];
                let m = self.nodes[mu.0].data[ki];
                let sg = self.nodes[sigma.0].data[ki];
                let z = (j as f64 - m) / sg;
                s += om * (-0.5 * z * z).exp();
            }
            *o = s;
        }
        let ng = self.needs(omega) || self.needs(mu) || self.needs(sigma);
        Ok(self.push(
            out,
            vec![1, len],
            Op::GmmWeights {
                omega,
                mu,
                sigma,
                len,
            },
            ng,
        ))
    }

    /// Repeat every row `r` times (frame-rate upsampling).
    pub fn repeat_rows(&mut self, x: Var, r: usize) -> Result<Var> {
        if r == 0 {
            return Err(Error::Config("repeat_rows factor must be >= 1".into()));
        }
        let (n, c) = self.rows_cols(x);
        let mut out = Vec::with_capacity(n * r * c);
        for i in 0..n {
            for _ in 0..r {
                out.extend_from_slice(&self.nodes[x.0].data[i * c..(i + 1) * c]);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![n * r, c], Op::RepeatRows { x, r }, ng))
    }

    /// Reverse pass from a scalar loss. Consumes the tape; gradients for every
    /// parameter leaf are accumulated into the store (call `zero_grad` between
    /// steps to reset).
    pub fn backward(self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad && !matches!(self.nodes[i].op, Op::Param(_)) {
                grads[i] = None;
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant | Op::Detach(_) => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::Affine { x, w, b } => {
                    let (nr, d) = self.rows_cols(*x);
                    let m = self.nodes[w.0].shape[1];
                    if self.needs(*x) {
                        let wd = &self.nodes[w.0].data;
                        let gx = self.grad_mut(&mut grads, *x);
                        for r in 0..nr {
                            for k in 0..d {
                                let mut s = 0.0;
                                for j in 0..m {
                                    s += g[r * m + j] * wd[k * m + j];
                                }
                                gx[r * d + k] += s;
                            }
                        }
                    }
                    if self.needs(*w) {
                        let xd = &self.nodes[x.0].data;
                        let gw = self.grad_mut(&mut grads, *w);
                        for r in 0..nr {
                            for k in 0..d {
                                let xv = xd[r * d + k];
                                if xv == 0.0 {
                                    continue;
                                }
                                for j in 0..m {
                                    gw[k * m + j] += xv * g[r * m + j];
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        if self.needs(*b) {
                            let gb = self.grad_mut(&mut grads, *b);
                            for r in 0..nr {
                                for j in 0..m {
                                    gb[j] += g[r * m + j];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    self.acc(&mut grads, *a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                    self.acc(&mut grads, *b, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                }
                Op::Sub(a, b) => {
                    self.acc(&mut grads, *a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y)
                    });
                    self.acc(&mut grads, *b, |gb| {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y)
                    });
                }
                Op::Mul(a, b) => {
                    let bd = &self.nodes[b.0].data;
                    let ad = &self.nodes[a.0].data;
                    self.acc(&mut grads, *a, |ga| {
                        for j in 0..ga.len() {
                            ga[j] += g[j] * bd[j];
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for j in 0..gb.len() {
                            gb[j] += g[j] * ad[j];
                        }
                    });
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    self.acc(&mut grads, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * k;
                        }
                    });
                }
                Op::AddScalar(x, _) => {
                    self.acc(&mut grads, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j];
                        }
                    });
                }
                Op::Sigmoid(x) => {
                    let y = &node.data;
                    self.acc(&mut grads, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * y[j] * (1.0 - y[j]);
                        }
                    });
                }
                Op::Tanh(x) => {
                    let y = &node.data;
                    self.acc(&mut grads, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * (1.0 - y[j] * y[j]);
                        }
                    });
                }
                Op::Softplus(x) => {
                    // d softplus(x)/dx = sigmoid(x) = 1 - exp(-softplus(x))
                    let y = &node.data;
                    self.acc(&mut grads, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * (1.0 - (-y[j]).exp());
                        }
                    });
                }
                Op::Exp(x) => {
                    let y = &node.data;
                    self.acc(&mut grads, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * y[j];
                        }
                    });
                }
                Op::SoftmaxRows(x) => {
                    let (nr, c) = self.rows_cols(*x);
                    let y = &node.data;
                    self.acc(&mut grads, *x, |gx| {
                        for r in 0..nr {
                            let mut dot = 0.0;
                            for j in 0..c {
                                dot += g[r * c + j] * y[r * c + j];
                            }
                            for j in 0..c {
                                gx[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
                            }
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (nr, c) = self.rows_cols(*x);
                    let xd = &self.nodes[x.0].data;
                    let gd = &self.nodes[gain.0].data;
                    let eps = *eps;
                    if self.needs(*x) {
                        let gx = self.grad_mut(&mut grads, *x);
                        for r in 0..nr {
                            let row = &xd[r * c..(r + 1) * c];
                            let mean = row.iter().sum::<f64>() / c as f64;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                            let istd = 1.0 / (var + eps).sqrt();
                            let mut m1 = 0.0;
                            let mut m2 = 0.0;
                            let mut dxhat = vec![0.0; c];
                            for j in 0..c {
                                let xh = (row[j] - mean) * istd;
                                dxhat[j] = g[r * c + j] * gd[j];
                                m1 += dxhat[j];
                                m2 += dxhat[j] * xh;
                            }
                            m1 /= c as f64;
                            m2 /= c as f64;
                            for j in 0..c {
                                let xh = (row[j] - mean) * istd;
                                gx[r * c + j] += istd * (dxhat[j] - m1 - xh * m2);
                            }
                        }
                    }
                    if self.needs(*gain) {
                        let gg = self.grad_mut(&mut grads, *gain);
                        for r in 0..nr {
                            let row = &xd[r * c..(r + 1) * c];
                            let mean = row.iter().sum::<f64>() / c as f64;
                            let var =
                                row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                            let istd = 1.0 / (var + eps).sqrt();
                            for j in 0..c {
                                gg[j] += g[r * c + j] * (row[j] - mean) * istd;
                            }
                        }
                    }
                    if self.needs(*bias) {
                        let gb = self.grad_mut(&mut grads, *bias);
                        for r in 0..nr {
                            for j in 0..c {
                                gb[j] += g[r * c + j];
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    self.acc(&mut grads, *x, |gx| {
                        for j in 0..gx.len() {
                            gx[j] += g[j] * mask[j];
                        }
                    });
                }
                Op::ConcatCols(a, b) => {
                    let (nr, ca) = self.rows_cols(*a);
                    let (_, cb) = self.rows_cols(*b);
                    let c = ca + cb;
                    self.acc(&mut grads, *a, |ga| {
                        for r in 0..nr {
                            for j in 0..ca {
                                ga[r * ca + j] += g[r * c + j];
                            }
                        }
                    });
                    self.acc(&mut grads, *b, |gb| {
                        for r in 0..nr {
                            for j in 0..cb {
                                gb[r * cb + j] += g[r * c + ca + j];
                            }
                        }
                    });
                }
                Op::SliceCols { x, start, end } => {
                    let (nr, c) = self.rows_cols(*x);
                    let w = end - start;
                    let start = *start;
                    self.acc(&mut grads, *x, |gx| {
                        for r in 0..nr {
                            for j in 0..w {
                                gx[r * c + start + j] += g[r * w + j];
                            }
                        }
                    });
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].data.len();
                        let slice = &g[offset..offset + len];
                        self.acc(&mut grads, p, |gp| {
                            gp.iter_mut().zip(slice).for_each(|(x, y)| *x += y)
                        });
                        offset += len;
                    }
                }
                Op::SumAll(x) => {
                    let gv = g[0];
                    self.acc(&mut grads, *x, |gx| {
                        gx.iter_mut().for_each(|v| *v += gv)
                    });
                }
                Op::MeanAll(x) => {
                    let nn = self.nodes[x.0].data.len() as f64;
                    let gv = g[0] / nn;
                    self.acc(&mut grads, *x, |gx| {
                        gx.iter_mut().for_each(|v| *v += gv)
                    });
                }
                Op::Conv1d { x, kernel, bias } => {
                    let (t, cin) = self.rows_cols(*x);
                    let ks = &self.nodes[kernel.0].shape;
                    let (k, cout) = (ks[0], ks[2]);
                    let pad = (k - 1) / 2;
                    if self.needs(*x) {
                        let kd = &self.nodes[kernel.0].data;
                        let gx = self.grad_mut(&mut grads, *x);
                        for ti in 0..t {
                            for dk in 0..k {
                                let src = ti as isize + dk as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let mut s = 0.0;
                                    let krow =
                                        &kd[(dk * cin + ci) * cout..(dk * cin + ci + 1) * cout];
                                    for co in 0..cout {
                                        s += krow[co] * g[ti * cout + co];
                                    }
                                    gx[src as usize * cin + ci] += s;
                                }
                            }
                        }
                    }
                    if self.needs(*kernel) {
                        let xd = &self.nodes[x.0].data;
                        let gk = self.grad_mut(&mut grads, *kernel);
                        for ti in 0..t {
                            for dk in 0..k {
                                let src = ti as isize + dk as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                for ci in 0..cin {
                                    let xv = xd[src as usize * cin + ci];
                                    if xv == 0.0 {
                                        continue;
                                    }
                                    for co in 0..cout {
                                        gk[(dk * cin + ci) * cout + co] +=
                                            xv * g[ti * cout + co];
                                    }
                                }
                            }
                        }
                    }
                    if let Some(b) = bias {
                        if self.needs(*b) {
                            let gb = self.grad_mut(&mut grads, *b);
                            for ti in 0..t {
                                for co in 0..cout {
                                    gb[co] += g[ti * cout + co];
                                }
                            }
                        }
                    }
                }
                Op::DepthwiseConv1d { x, kernel } => {
                    let (t, c) = self.rows_cols(*x);
                    let k = self.nodes[kernel.0].shape[0];
                    let pad = (k - 1) / 2;
                    if self.needs(*x) {
                        let kd = &self.nodes[kernel.0].data;
                        let gx = self.grad_mut(&mut grads, *x);
                        for ti in 0..t {
                            for dk in 0..k {
                                let src = ti as isize + dk as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    gx[src as usize * c + ci] +=
                                        kd[dk * c + ci] * g[ti * c + ci];
                                }
                            }
                        }
                    }
                    if self.needs(*kernel) {
                        let xd = &self.nodes[x.0].data;
                        let gk = self.grad_mut(&mut grads, *kernel);
                        for ti in 0..t {
                            for dk in 0..k {
                                let src = ti as isize + dk as isize - pad as isize;
                                if src < 0 || src >= t as isize {
                                    continue;
                                }
                                for ci in 0..c {
                                    gk[dk * c + ci] +=
                                        xd[src as usize * c + ci] * g[ti * c + ci];
                                }
                            }
                        }
                    }
                }
                Op::GmmWeights {
                    omega,
                    mu,
                    sigma,
                    len,
                } => {
                    let kk = self.nodes[omega.0].data.len();
                    let od = &self.nodes[omega.0].data;
                    let md = &self.nodes[mu.0].data;
                    let sd = &self.nodes[sigma.0].data;
                    let mut go = vec![0.0; kk];
                    let mut gm = vec![0.0; kk];
                    let mut gs = vec![0.0; kk];
                    for j in 0..*len {
                        let gj = g[j];
                        if gj == 0.0 {
                            continue;
                        }
                        for ki in 0..kk {
                            let d = j as f64 - md[ki];
                            let s2 = sd[ki] * sd[ki];
                            let e = (-0.5 * d * d / s2).exp();
                            go[ki] += gj * e;
                            gm[ki] += gj * od[ki] * e * d / s2;
                            gs[ki] += gj * od[ki] * e * d * d / (s2 * sd[ki]);
                        }
                    }
                    self.acc(&mut grads, *omega, |ga| {
                        ga.iter_mut().zip(&go).for_each(|(x, y)| *x += y)
                    });
                    self.acc(&mut grads, *mu, |ga| {
                        ga.iter_mut().zip(&gm).for_each(|(x, y)| *x += y)
                    });
                    self.acc(&mut grads, *sigma, |ga| {
                        ga.iter_mut().zip(&gs).for_each(|(x, y)| *x += y)
                    });
                }
                Op::RepeatRows { x, r } => {
                    let (nr, c) = self.rows_cols(*x);
                    let r = *r;
                    self.acc(&mut grads, *x, |gx| {
                        for i in 0..nr {
                            for rep in 0..r {
                                for j in 0..c {
                                    gx[i * c + j] += g[(i * r + rep) * c + j];
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].data.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn grad_mut<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> &'a mut Vec<f64> {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[v.0].data.len()]);
        }
        slot.as_mut().unwrap()
    }
}

fn sigmoid(x: f64) -> f64 {
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
