use std::ops::Range;

use rand::Rng;

use super::{dot, Matrix, NormalizedAdjacency, TensorError};

/// Per-row slot range; `None` rows are left out entirely.
pub type SlotRanges = Vec<Option<Range<usize>>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A trainable tensor and its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Matrix,
    pub grad: Matrix,
}

impl Param {
    pub fn new(value: Matrix) -> Self {
        let grad = Matrix::zeros(value.rows(), value.cols());
        Self { value, grad }
    }

    /// Glorot-uniform initialization.
    pub fn glorot(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
            .collect();
        Self::new(Matrix::from_vec(rows, cols, data).expect("length matches"))
    }
}

/// Graph convolution `Â · H · W` without bias.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnConv {
    pub weight: Param,
    propagated: Option<Matrix>,
}

impl GcnConv {
    pub fn new(weight: Matrix) -> Self {
        Self {
            weight: Param::new(weight),
            propagated: None,
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::glorot(in_dim, out_dim, rng),
            propagated: None,
        }
    }

    pub fn forward(&mut self, adj: &NormalizedAdjacency, h: &Matrix) -> Result<Matrix, TensorError> {
        if h.cols() != self.weight.value.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "gcn forward",
                left: h.shape(),
                right: self.weight.value.shape(),
            });
        }
        let ah = adj.apply(h)?;
        let out = ah.matmul(&self.weight.value)?;
        self.propagated = Some(ah);
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn apply(&self, adj: &NormalizedAdjacency, h: &Matrix) -> Result<Matrix, TensorError> {
        if h.cols() != self.weight.value.rows() {
            return Err(TensorError::ShapeMismatch {
                op: "gcn forward",
                left: h.shape(),
                right: self.weight.value.shape(),
            });
        }
        adj.apply(h)?.matmul(&self.weight.value)
    }

    /// Stores `∂L/∂W` and returns `∂L/∂H`.
    pub fn backward(
        &mut self,
        adj: &NormalizedAdjacency,
        grad_out: &Matrix,
    ) -> Result<Matrix, TensorError> {
        let ah = self.propagated.as_ref().ok_or_else(|| TensorError::NotForwarded("gcn"))?;
        if grad_out.rows() != ah.rows() || grad_out.cols() != self.weight.value.cols() {
            return Err(TensorError::ShapeMismatch {
                op: "gcn backward",
                left: grad_out.shape(),
                right: (ah.rows(), self.weight.value.cols()),
            });
        }
        self.weight.grad = ah.t_matmul(grad_out)?;
        adj.apply(&grad_out.matmul_t(&self.weight.value)?)
    }
}

/// Dense affine map `H · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
    input: Option<Matrix>,
}

impl Linear {
    pub fn new(weight: Matrix, bias: Matrix) -> Self {
        Self {
            weight: Param::new(weight),
            bias: Param::new(bias),
            input: None,
        }
    }

    pub fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Param::glorot(in_dim, out_dim, rng),
            bias: Param::new(Matrix::zeros(1, out_dim)),
            input: None,
        }
    }

    pub fn forward(&mut self, h: &Matrix) -> Result<Matrix, TensorError> {
        let out = self.apply(h)?;
        self.input = Some(h.clone());
        Ok(out)
    }

    /// Forward pass without caching.
    pub fn apply(&self, h: &Matrix) -> Result<Matrix, TensorError> {
        let mut out = h.matmul(&self.weight.value)?;
        let bias = self.bias.value.row(0);
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(out)
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix, TensorError> {
        let h = self.input.as_ref().ok_or_else(|| TensorError::NotForwarded("linear"))?;
        self.weight.grad = h.t_matmul(grad_out)?;
        self.bias.grad = grad_out.sum_rows();
        grad_out.matmul_t(&self.weight.value)
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    normalized: Matrix,
    inv_std: Vec<f64>,
    mode: Mode,
}

/// Per-channel batch normalization over all rows of the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub const DEFAULT_MOMENTUM: f64 = 0.1;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(Matrix::filled(1, channels, 1.0)),
            beta: Param::new(Matrix::zeros(1, channels)),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// Train mode normalizes with batch statistics and updates the running
    /// averages (unbiased variance); eval mode uses the running averages.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<Matrix, TensorError> {
        let c = self.channels();
        if x.cols() != c {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm forward",
                left: x.shape(),
                right: (x.rows(), c),
            });
        }
        let n = x.rows();
        let (mean, var) = match mode {
            Mode::Train => {
                if n == 0 {
                    return Err(TensorError::State("batchnorm on an empty batch"));
                }
                let mut mean = vec![0.0; c];
                for r in 0..n {
                    for (m, v) in mean.iter_mut().zip(x.row(r)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for r in 0..n {
                    for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= n as f64);
                let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                for ch in 0..c {
                    self.running_mean[ch] =
                        (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean[ch];
                    self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch]
                        + self.momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (self.running_mean.clone(), self.running_var.clone()),
        };
        let (normalized, inv_std, out) = self.normalize(x, &mean, &var);
        self.cache = Some(BnCache {
            normalized,
            inv_std,
            mode,
        });
        Ok(out)
    }

    /// Eval-mode forward pass without caching.
    pub fn apply_eval(&self, x: &Matrix) -> Result<Matrix, TensorError> {
        if x.cols() != self.channels() {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm forward",
                left: x.shape(),
                right: (x.rows(), self.channels()),
            });
        }
        Ok(self.normalize(x, &self.running_mean, &self.running_var).2)
    }

    fn normalize(&self, x: &Matrix, mean: &[f64], var: &[f64]) -> (Matrix, Vec<f64>, Matrix) {
        let (n, c) = x.shape();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut normalized = Matrix::zeros(n, c);
        let mut out = Matrix::zeros(n, c);
        let gamma = self.gamma.value.row(0);
        let beta = self.beta.value.row(0);
        for r in 0..n {
            for ch in 0..c {
                let xh = (x[(r, ch)] - mean[ch]) * inv_std[ch];
                normalized[(r, ch)] = xh;
                out[(r, ch)] = gamma[ch] * xh + beta[ch];
            }
        }
        (normalized, inv_std, out)
    }

    pub fn backward(&mut self, grad_out: &Matrix) -> Result<Matrix, TensorError> {
        let cache = self.cache.as_ref().ok_or_else(|| TensorError::NotForwarded("batchnorm"))?;
        let xh = &cache.normalized;
        if grad_out.shape() != xh.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm backward",
                left: grad_out.shape(),
                right: xh.shape(),
            });
        }
        let (n, c) = xh.shape();
        let gamma = self.gamma.value.row(0).to_vec();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for r in 0..n {
            for ch in 0..c {
                dbeta[ch] += grad_out[(r, ch)];
                dgamma[ch] += grad_out[(r, ch)] * xh[(r, ch)];
            }
        }
        let mut dx = Matrix::zeros(n, c);
        match cache.mode {
            Mode::Eval => {
                for r in 0..n {
                    for ch in 0..c {
                        dx[(r, ch)] = grad_out[(r, ch)] * gamma[ch] * cache.inv_std[ch];
                    }
                }
            }
            Mode::Train => {
                // dxhat = dy * gamma; dx = inv_std / n * (n dxhat - Σ dxhat - xhat Σ dxhat xhat)
                let nf = n as f64;
                for ch in 0..c {
                    let sum_dxh = dbeta[ch] * gamma[ch];
                    let sum_dxh_xh = dgamma[ch] * gamma[ch];
                    for r in 0..n {
                        let dxh = grad_out[(r, ch)] * gamma[ch];
                        dx[(r, ch)] = cache.inv_std[ch] / nf
                            * (nf * dxh - sum_dxh - xh[(r, ch)] * sum_dxh_xh);
                    }
                }
            }
        }
        self.gamma.grad = Matrix::from_vec(1, c, dgamma)?;
        self.beta.grad = Matrix::from_vec(1, c, dbeta)?;
        Ok(dx)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Relu {
    active: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Matrix) -> Matrix {
        self.active = Some(x.data().iter().map(|&v| v > 0.0).collect());
        x.map(|v| v.max(0.0))
    }

    pub fn backward(&self, grad_out: &Matrix) -> Result<Matrix, TensorError> {
        let active = self.active.as_ref().ok_or_else(|| TensorError::NotForwarded("relu"))?;
        if active.len() != grad_out.data().len() {
            return Err(TensorError::ShapeMismatch {
                op: "relu backward",
                left: grad_out.shape(),
                right: (active.len(), 1),
            });
        }
        let data = grad_out
            .data()
            .iter()
            .zip(active)
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        Matrix::from_vec(grad_out.rows(), grad_out.cols(), data)
    }

    /// Which inputs were positive in the last forward pass.
    pub fn pattern(&self) -> Option<&[bool]> {
        self.active.as_deref()
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - p)` in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Dropout {
    p: f64,
    scale: Option<Matrix>,
}

impl Dropout {
    pub fn new(p: f64) -> Result<Self, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::BadDropout(p));
        }
        Ok(Self { p, scale: None })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn forward(&mut self, x: &Matrix, mode: Mode, rng: &mut impl Rng) -> Matrix {
        if mode == Mode::Eval || self.p == 0.0 {
            self.scale = None;
            return x.clone();
        }
        let keep = 1.0 / (1.0 - self.p);
        let data = (0..x.data().len())
            .map(|_| if rng.gen::<f64>() < self.p { 0.0 } else { keep })
            .collect();
        let scale = Matrix::from_vec(x.rows(), x.cols(), data).expect("length matches");
        let out = x.hadamard(&scale).expect("same shape");
        self.scale = Some(scale);
        out
    }

    /// Applies a caller-supplied scale mask, as if it had been sampled.
    pub fn forward_with_mask(&mut self, x: &Matrix, mask: Matrix) -> Result<Matrix, TensorError> {
        let out = x.hadamard(&mask)?;
        self.scale = Some(mask);
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Matrix) -> Result<Matrix, TensorError> {
        match &self.scale {
            Some(scale) => grad_out.hadamard(scale),
            None => Ok(grad_out.clone()),
        }
    }
}

/// Softmax applied independently inside each row's slot range; slots
/// outside the range are exactly zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroupSoftmax {
    output: Option<(Matrix, SlotRanges)>,
}

impl GroupSoftmax {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Matrix, ranges: &SlotRanges) -> Result<Matrix, TensorError> {
        let out = group_softmax(x, ranges)?;
        self.output = Some((out.clone(), ranges.clone()));
        Ok(out)
    }

    pub fn backward(&self, grad_out: &Matrix) -> Result<Matrix, TensorError> {
        let (y, ranges) = self.output.as_ref().ok_or_else(|| TensorError::NotForwarded("softmax"))?;
        if grad_out.shape() != y.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "group softmax backward",
                left: grad_out.shape(),
                right: y.shape(),
            });
        }
        let mut dx = Matrix::zeros(y.rows(), y.cols());
        for (r, range) in ranges.iter().enumerate() {
            let Some(range) = range else { continue };
            let yr = &y.row(r)[range.clone()];
            let gr = &grad_out.row(r)[range.clone()];
            let inner = dot(yr, gr);
            for ((d, &yv), &gv) in dx.row_mut(r)[range.clone()].iter_mut().zip(yr).zip(gr) {
                *d = yv * (gv - inner);
            }
        }
        Ok(dx)
    }
}

/// Stateless [`GroupSoftmax`] forward pass.
pub fn group_softmax(x: &Matrix, ranges: &SlotRanges) -> Result<Matrix, TensorError> {
    if ranges.len() != x.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "group softmax",
            left: x.shape(),
            right: (ranges.len(), x.cols()),
        });
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for (r, range) in ranges.iter().enumerate() {
        let Some(range) = range else { continue };
        if range.end > x.cols() {
            return Err(TensorError::IndexOutOfRange {
                index: range.end,
                n: x.cols(),
            });
        }
        let logits = &x.row(r)[range.clone()];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        for (o, e) in out.row_mut(r)[range.clone()].iter_mut().zip(&exps) {
            *o = e / total;
        }
    }
    Ok(out)
}

/// Mean squared error over the masked slots only, with its gradient.
/// An empty mask yields zero loss and zero gradient.
pub fn masked_mse(
    pred: &Matrix,
    target: &Matrix,
    mask: &SlotRanges,
) -> Result<(f64, Matrix), TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "masked mse",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    if mask.len() != pred.rows() {
        return Err(TensorError::ShapeMismatch {
            op: "masked mse mask",
            left: pred.shape(),
            right: (mask.len(), pred.cols()),
        });
    }
    let count: usize = mask.iter().flatten().map(|r| r.len()).sum();
    let mut grad = Matrix::zeros(pred.rows(), pred.cols());
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for (r, range) in mask.iter().enumerate() {
        let Some(range) = range else { continue };
        for c in range.clone() {
            let diff = pred[(r, c)] - target[(r, c)];
            loss += diff * diff;
            grad[(r, c)] = 2.0 * diff * inv;
        }
    }
    Ok((loss * inv, grad))
}
