//! Differentiable kernels. Every kernel has a forward function and a
//! hand-derived vector-Jacobian product; [`Differentiable`] wraps both so the
//! pair can be checked against finite differences.

use crate::error::{Result, StapError};
use crate::numerics::tensor::{dot, Tensor};

pub const LN_EPS: f64 = 1e-5;
pub const KL_EPS: f64 = 1e-8;
pub const DIV_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Inverse of softplus for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Gelu,
    Softplus,
    Exp,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => gelu(x),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Unary::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => x.exp(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Sigmoid => "sigmoid",
            Unary::Gelu => "gelu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
        }
    }
}

pub fn unary(op: Unary, x: &Tensor) -> Tensor {
    x.map(|v| op.apply(v))
}

pub fn unary_backward(op: Unary, x: &Tensor, grad: &Tensor) -> Tensor {
    let mut out = x.zeros_like();
    for ((o, &xi), &gi) in out.data_mut().iter_mut().zip(x.data()).zip(grad.data()) {
        *o = gi * op.derivative(xi);
    }
    out
}

fn require_rank2(t: &Tensor, what: &str) -> Result<()> {
    if t.rank() != 2 {
        return Err(StapError::shape(format!(
            "{what}: expected a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn require_same(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if !a.same_shape(b) {
        return Err(StapError::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_rank2(a, "matmul lhs")?;
    require_rank2(b, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(StapError::shape(format!(
            "matmul inner extents {k} and {k2} differ"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in od[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    Ok(out)
}

/// Returns `(g bᵀ, aᵀ g)`.
pub fn matmul_backward(a: &Tensor, b: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    grad.expect_shape(&[m, n], "matmul upstream gradient")?;
    let mut ga = a.zeros_like();
    let mut gb = b.zeros_like();
    for i in 0..m {
        let grow = grad.row(i);
        for p in 0..k {
            ga.data_mut()[i * k + p] = dot(grow, b.row(p));
            let aip = a.data()[i * k + p];
            for (o, gv) in gb.row_mut(p).iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    Ok((ga, gb))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same(a, b, "add")?;
    let mut out = a.clone();
    out.axpy(1.0, b);
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    require_same(a, b, "elementwise multiply")?;
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o *= v;
    }
    Ok(out)
}

pub fn l2_norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn l2_norm_backward(x: &[f64], grad: f64) -> Vec<f64> {
    let n = l2_norm(x).max(DIV_EPS);
    x.iter().map(|v| grad * v / n).collect()
}

/// Mean over the first axis of a matrix.
pub fn mean_pool(x: &Tensor) -> Result<Tensor> {
    require_rank2(x, "mean_pool")?;
    let (t, d) = (x.rows(), x.cols());
    let mut out = vec![0.0; d];
    for i in 0..t {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    let inv = 1.0 / t as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::vector(out))
}

pub fn mean_pool_backward(rows: usize, grad: &[f64]) -> Tensor {
    let inv = 1.0 / rows as f64;
    let mut out = Tensor::zeros(&[rows, grad.len()]);
    for i in 0..rows {
        for (o, g) in out.row_mut(i).iter_mut().zip(grad) {
            *o = g * inv;
        }
    }
    out
}

/// Concatenates rank-1 tensors.
pub fn concat(parts: &[&Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(StapError::shape("concat of nothing"));
    }
    let mut out = Vec::new();
    for p in parts {
        if p.rank() != 1 {
            return Err(StapError::shape("concat expects rank-1 tensors"));
        }
        out.extend_from_slice(p.data());
    }
    Ok(Tensor::vector(out))
}

pub fn concat_backward(lengths: &[usize], grad: &[f64]) -> Vec<Tensor> {
    let mut off = 0;
    lengths
        .iter()
        .map(|&n| {
            let t = Tensor::vector(grad[off..off + n].to_vec());
            off += n;
            t
        })
        .collect()
}

/// Stable softmax of `x / temperature` over a slice.
pub fn softmax_slice(x: &[f64], temperature: f64) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Gradient with respect to the logits `x / temperature` given softmax output `y`.
pub fn softmax_logit_grad(y: &[f64], grad: &[f64]) -> Vec<f64> {
    let inner = dot(y, grad);
    y.iter()
        .zip(grad)
        .map(|(yi, gi)| yi * (gi - inner))
        .collect()
}

fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_softmax_args(x: &Tensor, axis: usize, temperature: f64) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(StapError::invalid(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if axis >= x.rank() {
        return Err(StapError::shape(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    Ok(())
}

pub fn softmax_rows(x: &Tensor, axis: usize, temperature: f64) -> Result<Tensor> {
    check_softmax_args(x, axis, temperature)?;
    let (outer, n, inner) = axis_layout(x.shape(), axis);
    let mut out = x.zeros_like();
    let mut buf = vec![0.0; n];
    for o in 0..outer {
        for j in 0..inner {
            for (i, b) in buf.iter_mut().enumerate() {
                *b = x.data()[(o * n + i) * inner + j];
            }
            let y = softmax_slice(&buf, temperature);
            for (i, v) in y.into_iter().enumerate() {
                out.data_mut()[(o * n + i) * inner + j] = v;
            }
        }
    }
    Ok(out)
}

/// VJP of [`softmax_rows`] with respect to `x`, given its output `y`.
pub fn softmax_rows_backward(
    y: &Tensor,
    grad: &Tensor,
    axis: usize,
    temperature: f64,
) -> Result<Tensor> {
    check_softmax_args(y, axis, temperature)?;
    require_same(y, grad, "softmax upstream gradient")?;
    let (outer, n, inner) = axis_layout(y.shape(), axis);
    let mut out = y.zeros_like();
    let mut yb = vec![0.0; n];
    let mut gb = vec![0.0; n];
    for o in 0..outer {
        for j in 0..inner {
            for i in 0..n {
                let idx = (o * n + i) * inner + j;
                yb[i] = y.data()[idx];
                gb[i] = grad.data()[idx];
            }
            let gl = softmax_logit_grad(&yb, &gb);
            for (i, v) in gl.into_iter().enumerate() {
                out.data_mut()[(o * n + i) * inner + j] = v / temperature;
            }
        }
    }
    Ok(out)
}

/// Normalized values and inverse standard deviation kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    pub xhat: Vec<f64>,
    pub inv_std: f64,
}

pub fn layer_norm_slice(
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let y = xhat
        .iter()
        .zip(gamma)
        .zip(beta)
        .map(|((h, g), b)| g * h + b)
        .collect();
    (y, LayerNormCache { xhat, inv_std })
}

/// Returns `(gx, ggamma, gbeta)`.
pub fn layer_norm_backward_slice(
    cache: &LayerNormCache,
    gamma: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = grad.len() as f64;
    let gxhat: Vec<f64> = grad.iter().zip(gamma).map(|(g, w)| g * w).collect();
    let mean_g = gxhat.iter().sum::<f64>() / n;
    let mean_gx = dot(&gxhat, &cache.xhat) / n;
    let gx = gxhat
        .iter()
        .zip(&cache.xhat)
        .map(|(g, h)| cache.inv_std * (g - mean_g - h * mean_gx))
        .collect();
    let ggamma = grad.iter().zip(&cache.xhat).map(|(g, h)| g * h).collect();
    (gx, ggamma, grad.to_vec())
}

/// Layer norm without an affine transform.
pub fn normalize_slice(x: &[f64], eps: f64) -> (Vec<f64>, LayerNormCache) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + eps).sqrt();
    let xhat: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    (xhat.clone(), LayerNormCache { xhat, inv_std })
}

pub fn normalize_backward_slice(cache: &LayerNormCache, grad: &[f64]) -> Vec<f64> {
    let n = grad.len() as f64;
    let mean_g = grad.iter().sum::<f64>() / n;
    let mean_gx = dot(grad, &cache.xhat) / n;
    grad.iter()
        .zip(&cache.xhat)
        .map(|(g, h)| cache.inv_std * (g - mean_g - h * mean_gx))
        .collect()
}

pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    if x.rank() != 1 || gamma.len() != x.len() || beta.len() != x.len() {
        return Err(StapError::shape(format!(
            "layer_norm: x {:?}, gamma {:?}, beta {:?}",
            x.shape(),
            gamma.shape(),
            beta.shape()
        )));
    }
    if !(eps > 0.0) {
        return Err(StapError::invalid("layer_norm eps must be positive"));
    }
    let (y, _) = layer_norm_slice(x.data(), gamma.data(), beta.data(), eps);
    Ok(Tensor::vector(y))
}

pub fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

pub fn huber_grad(r: f64, delta: f64) -> f64 {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

/// Mean Huber loss over all elements.
pub fn huber_loss(pred: &Tensor, target: &Tensor, delta: f64) -> Result<f64> {
    require_same(pred, target, "huber_loss")?;
    if !(delta > 0.0) {
        return Err(StapError::invalid("huber delta must be positive"));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| huber(p - t, delta))
        .sum::<f64>()
        / n)
}

/// Returns `(gpred, gtarget)` for upstream scalar gradient `grad`.
pub fn huber_loss_backward(
    pred: &Tensor,
    target: &Tensor,
    delta: f64,
    grad: f64,
) -> (Tensor, Tensor) {
    let n = pred.len() as f64;
    let mut gp = pred.zeros_like();
    for ((o, p), t) in gp.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        *o = grad * huber_grad(p - t, delta) / n;
    }
    let gt = gp.map(|v| -v);
    (gp, gt)
}

/// KL value plus the number of `q` entries raised to the eps floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlOutput {
    pub value: f64,
    pub floored: usize,
}

pub fn kl_divergence(p: &[f64], q: &[f64], eps: f64) -> Result<KlOutput> {
    if p.len() != q.len() {
        return Err(StapError::shape(format!(
            "kl_divergence: lengths {} and {} differ",
            p.len(),
            q.len()
        )));
    }
    let mut value = 0.0;
    let mut floored = 0;
    for (&pi, &qi) in p.iter().zip(q) {
        if qi < eps {
            floored += 1;
        }
        if pi > 0.0 {
            value += pi * (pi / qi.max(eps)).ln();
        }
    }
    Ok(KlOutput { value, floored })
}

/// Returns `(gp, gq)`. Entries with `p == 0` receive zero gradient in `p`.
pub fn kl_divergence_backward(p: &[f64], q: &[f64], eps: f64, grad: f64) -> (Vec<f64>, Vec<f64>) {
    let mut gp = vec![0.0; p.len()];
    let mut gq = vec![0.0; q.len()];
    for i in 0..p.len() {
        let qf = q[i].max(eps);
        if p[i] > 0.0 {
            gp[i] = grad * ((p[i] / qf).ln() + 1.0);
            if q[i] >= eps {
                gq[i] = -grad * p[i] / qf;
            }
        }
    }
    (gp, gq)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let denom = (l2_norm(a) * l2_norm(b)).max(DIV_EPS);
    dot(a, b) / denom
}

/// Returns `(ga, gb)`.
pub fn cosine_similarity_backward(a: &[f64], b: &[f64], grad: f64) -> (Vec<f64>, Vec<f64>) {
    let na = l2_norm(a);
    let nb = l2_norm(b);
    let denom = na * nb;
    if denom < DIV_EPS {
        // guarded branch: value is dot / DIV_EPS
        let ga = b.iter().map(|v| grad * v / DIV_EPS).collect();
        let gb = a.iter().map(|v| grad * v / DIV_EPS).collect();
        return (ga, gb);
    }
    let c = dot(a, b) / denom;
    let ga = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| grad * (bi / denom - c * ai / (na * na)))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(ai, bi)| grad * (ai / denom - c * bi / (nb * nb)))
        .collect();
    (ga, gb)
}

/// A kernel with a forward map and its vector-Jacobian product.
pub trait Differentiable: Sync {
    fn name(&self) -> String;
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor>;
    /// Gradient of `<grad_output, forward(inputs)>` with respect to each input.
    fn backward(&self, inputs: &[Tensor], grad_output: &Tensor) -> Result<Vec<Tensor>>;
}

fn arity(inputs: &[Tensor], n: usize, name: &str) -> Result<()> {
    if inputs.len() != n {
        return Err(StapError::invalid(format!(
            "{name} takes {n} inputs, got {}",
            inputs.len()
        )));
    }
    Ok(())
}

pub struct Matmul;

impl Differentiable for Matmul {
    fn name(&self) -> String {
        "matmul".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 2, "matmul")?;
        matmul(&inputs[0], &inputs[1])
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let (ga, gb) = matmul_backward(&inputs[0], &inputs[1], g)?;
        Ok(vec![ga, gb])
    }
}

pub struct Add;

impl Differentiable for Add {
    fn name(&self) -> String {
        "add".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 2, "add")?;
        add(&inputs[0], &inputs[1])
    }
    fn backward(&self, _inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![g.clone(), g.clone()])
    }
}

pub struct Mul;

impl Differentiable for Mul {
    fn name(&self) -> String {
        "elementwise_multiply".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 2, "elementwise_multiply")?;
        mul(&inputs[0], &inputs[1])
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![mul(g, &inputs[1])?, mul(g, &inputs[0])?])
    }
}

pub struct UnaryKernel(pub Unary);

impl Differentiable for UnaryKernel {
    fn name(&self) -> String {
        self.0.name().into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 1, self.0.name())?;
        Ok(unary(self.0, &inputs[0]))
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![unary_backward(self.0, &inputs[0], g)])
    }
}

pub struct L2Norm;

impl Differentiable for L2Norm {
    fn name(&self) -> String {
        "l2_norm".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 1, "l2_norm")?;
        Ok(Tensor::scalar(l2_norm(inputs[0].data())))
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let gx = l2_norm_backward(inputs[0].data(), g.value());
        Ok(vec![Tensor::new(inputs[0].shape().to_vec(), gx)?])
    }
}

pub struct MeanPool;

impl Differentiable for MeanPool {
    fn name(&self) -> String {
        "mean_pool".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 1, "mean_pool")?;
        mean_pool(&inputs[0])
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![mean_pool_backward(inputs[0].rows(), g.data())])
    }
}

pub struct Concat;

impl Differentiable for Concat {
    fn name(&self) -> String {
        "concat".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        concat(&refs)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let lens: Vec<usize> = inputs.iter().map(Tensor::len).collect();
        Ok(concat_backward(&lens, g.data()))
    }
}

pub struct SoftmaxRows {
    pub axis: usize,
    pub temperature: f64,
}

impl Differentiable for SoftmaxRows {
    fn name(&self) -> String {
        "softmax_rows".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 1, "softmax_rows")?;
        softmax_rows(&inputs[0], self.axis, self.temperature)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let y = softmax_rows(&inputs[0], self.axis, self.temperature)?;
        Ok(vec![softmax_rows_backward(
            &y,
            g,
            self.axis,
            self.temperature,
        )?])
    }
}

/// Inputs: `x`, `gamma`, `beta`.
pub struct LayerNorm {
    pub eps: f64,
}

impl Differentiable for LayerNorm {
    fn name(&self) -> String {
        "layer_norm".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 3, "layer_norm")?;
        layer_norm(&inputs[0], &inputs[1], &inputs[2], self.eps)
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let (_, cache) = layer_norm_slice(
            inputs[0].data(),
            inputs[1].data(),
            inputs[2].data(),
            self.eps,
        );
        let (gx, gg, gb) = layer_norm_backward_slice(&cache, inputs[1].data(), g.data());
        Ok(vec![
            Tensor::vector(gx),
            Tensor::vector(gg),
            Tensor::vector(gb),
        ])
    }
}

/// Inputs: `pred`, `target`.
pub struct HuberLoss {
    pub delta: f64,
}

impl Differentiable for HuberLoss {
    fn name(&self) -> String {
        "huber_loss".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 2, "huber_loss")?;
        Ok(Tensor::scalar(huber_loss(
            &inputs[0], &inputs[1], self.delta,
        )?))
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let (gp, gt) = huber_loss_backward(&inputs[0], &inputs[1], self.delta, g.value());
        Ok(vec![gp, gt])
    }
}

/// Inputs: `p`, `q`.
pub struct KlDivergence {
    pub eps: f64,
}

impl Differentiable for KlDivergence {
    fn name(&self) -> String {
        "kl_divergence".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 2, "kl_divergence")?;
        Ok(Tensor::scalar(
            kl_divergence(inputs[0].data(), inputs[1].data(), self.eps)?.value,
        ))
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let (gp, gq) =
            kl_divergence_backward(inputs[0].data(), inputs[1].data(), self.eps, g.value());
        Ok(vec![Tensor::vector(gp), Tensor::vector(gq)])
    }
}

pub struct Cosine;

impl Differentiable for Cosine {
    fn name(&self) -> String {
        "cosine_similarity".into()
    }
    fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        arity(inputs, 2, "cosine_similarity")?;
        if inputs[0].len() != inputs[1].len() {
            return Err(StapError::shape("cosine_similarity length mismatch"));
        }
        Ok(Tensor::scalar(cosine_similarity(
            inputs[0].data(),
            inputs[1].data(),
        )))
    }
    fn backward(&self, inputs: &[Tensor], g: &Tensor) -> Result<Vec<Tensor>> {
        let (ga, gb) = cosine_similarity_backward(inputs[0].data(), inputs[1].data(), g.value());
        Ok(vec![Tensor::vector(ga), Tensor::vector(gb)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&Tensor::vector(vec![0.0, 0.0, 0.0]), 0, 1.0).unwrap();
        for v in y.data() {
            assert!(close(*v, 1.0 / 3.0, 1e-15));
        }
        let y = softmax_rows(&Tensor::vector(vec![2f64.ln(), 0.0]), 0, 1.0).unwrap();
        assert!(close(y.data()[0], 2.0 / 3.0, 1e-15));
        assert!(close(y.data()[1], 1.0 / 3.0, 1e-15));
        let y = softmax_rows(&Tensor::vector(vec![1000.0, 0.0]), 0, 1.0).unwrap();
        assert!(y.is_finite());
        assert!(close(y.data()[0], 1.0, 1e-12) && close(y.data()[1], 0.0, 1e-12));
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        assert!(matches!(
            softmax_rows(&x, 0, 0.0),
            Err(StapError::InvalidArgument(_))
        ));
        assert!(softmax_rows(&x, 0, -1.0).is_err());
    }

    #[test]
    fn softmax_along_first_axis_of_matrix() {
        let x = Tensor::matrix(2, 2, vec![0.0, 1.0, 0.0, 3.0]).unwrap();
        let y = softmax_rows(&x, 0, 1.0).unwrap();
        assert!(close(y.at(0, 0), 0.5, 1e-15));
        assert!(close(y.at(0, 1) + y.at(1, 1), 1.0, 1e-15));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[4], 1.0);
        let zeros = Tensor::zeros(&[4]);
        let y = layer_norm(&Tensor::filled(&[4], 3.7), &ones, &zeros, LN_EPS).unwrap();
        assert!(y.data().iter().all(|v| *v == 0.0));

        let y = layer_norm(
            &Tensor::vector(vec![1.0, -1.0]),
            &Tensor::filled(&[2], 1.0),
            &Tensor::zeros(&[2]),
            1e-12,
        )
        .unwrap();
        assert!(close(y.data()[0], 1.0, 1e-9) && close(y.data()[1], -1.0, 1e-9));

        let y = layer_norm(
            &Tensor::vector(vec![0.3, 9.0, -2.0]),
            &Tensor::zeros(&[3]),
            &Tensor::filled(&[3], 5.0),
            LN_EPS,
        )
        .unwrap();
        assert_eq!(y.data(), &[5.0, 5.0, 5.0]);

        assert!(matches!(
            layer_norm(&Tensor::zeros(&[3]), &ones, &zeros, LN_EPS),
            Err(StapError::Shape(_))
        ));
    }

    #[test]
    fn huber_examples() {
        let t = Tensor::scalar(0.0);
        assert_eq!(huber_loss(&Tensor::scalar(0.0), &t, 1.0).unwrap(), 0.0);
        assert_eq!(huber_loss(&Tensor::scalar(0.5), &t, 1.0).unwrap(), 0.125);
        assert_eq!(huber_loss(&Tensor::scalar(2.0), &t, 1.0).unwrap(), 1.5);
        assert!(huber_loss(&Tensor::zeros(&[2]), &t, 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p, KL_EPS).unwrap().value, 0.0);
        let v = kl_divergence(&[1.0, 0.0], &[0.5, 0.5], KL_EPS).unwrap();
        assert!(close(v.value, 2f64.ln(), 1e-15));
        let v = kl_divergence(&[0.5, 0.5], &[1.0, 0.0], KL_EPS).unwrap();
        assert!(v.value.is_finite());
        assert_eq!(v.floored, 1);
        assert!(close(
            v.value,
            0.5 * (0.5f64).ln() + 0.5 * (0.5 / KL_EPS).ln(),
            1e-12
        ));
        assert!(kl_divergence(&[1.0], &[0.5, 0.5], KL_EPS).is_err());
    }

    #[test]
    fn softplus_inverse_roundtrip() {
        for y in [1e-3, 0.5, 1.0, 1.5, 30.0] {
            assert!(close(softplus(softplus_inv(y)), y, 1e-12));
        }
    }

    #[test]
    fn cosine_of_parallel_vectors_is_one() {
        assert!(close(
            cosine_similarity(&[1.0, 2.0], &[2.0, 4.0]),
            1.0,
            1e-15
        ));
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
    }

    #[test]
    fn kernels_are_deterministic() {
        let x = Tensor::vector(vec![0.1, -2.0, 3.3, 0.7]);
        let a = softmax_rows(&x, 0, 0.7).unwrap();
        let b = softmax_rows(&x, 0, 0.7).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!(unary(Unary::Gelu, &x), unary(Unary::Gelu, &x));
    }
}
