use super::kernels::{affine_rows, matmul_a_bt, matmul_at_b_acc};
use super::{LinearParams, Tensor};
use crate::error::{shape_err, Error, Result};

pub const RMS_EPS: f64 = 1e-6;

fn out_shape(x: &Tensor, last: usize) -> Vec<usize> {
    let mut s = x.shape().to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

/// `y[.., j] = sum_i x[.., i] W[i, j] + b[j]` over the last axis.
pub fn matmul_affine(x: &Tensor, p: &LinearParams) -> Result<Tensor> {
    if x.last_dim() != p.in_dim() {
        return Err(shape_err!(
            "affine expects last axis {}, got shape {:?}",
            p.in_dim(),
            x.shape()
        ));
    }
    let mut y = Tensor::zeros(&out_shape(x, p.out_dim()));
    affine_rows(
        x.data(),
        p.in_dim(),
        p.weight.data(),
        p.bias.data(),
        y.data_mut(),
    );
    Ok(y)
}

/// Accumulates weight and bias gradients into `grad` and returns `dL/dx`.
pub fn matmul_affine_backward(
    x: &Tensor,
    p: &LinearParams,
    dy: &Tensor,
    grad: &mut LinearParams,
) -> Result<Tensor> {
    if dy.last_dim() != p.out_dim() || dy.rows() != x.rows() || x.last_dim() != p.in_dim() {
        return Err(shape_err!(
            "affine backward: x {:?}, dy {:?}, weight {:?}",
            x.shape(),
            dy.shape(),
            p.weight.shape()
        ));
    }
    let (din, dout) = (p.in_dim(), p.out_dim());
    matmul_at_b_acc(x.data(), din, dy.data(), dout, grad.weight.data_mut());
    let db = grad.bias.data_mut();
    for row in dy.data().chunks_exact(dout) {
        for (b, &g) in db.iter_mut().zip(row) {
            *b += g;
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    matmul_a_bt(dy.data(), dout, p.weight.data(), din, dx.data_mut());
    Ok(dx)
}

#[inline]
pub fn sigmoid_scalar(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[inline]
pub fn silu_scalar(z: f64) -> f64 {
    z * sigmoid_scalar(z)
}

#[inline]
fn silu_grad_scalar(z: f64) -> f64 {
    let s = sigmoid_scalar(z);
    s * (1.0 + z * (1.0 - s))
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Takes the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.zip_map(dy, |s, g| g * s * (1.0 - s))
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn silu_backward(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    x.zip_map(dy, |z, g| g * silu_grad_scalar(z))
}

/// Elementwise product; backward returns `(da, db)`.
pub fn mul_backward(a: &Tensor, b: &Tensor, dy: &Tensor) -> Result<(Tensor, Tensor)> {
    Ok((dy.mul(b)?, dy.mul(a)?))
}

fn check_gain(x: &Tensor, gain: &Tensor) -> Result<()> {
    if gain.shape() != [x.last_dim()] {
        return Err(shape_err!(
            "rms_norm gain {:?} does not match last axis of {:?}",
            gain.shape(),
            x.shape()
        ));
    }
    Ok(())
}

/// `y = x / sqrt(mean(x^2) + eps) * gain`, normalised over the last axis.
pub fn rms_norm(x: &Tensor, gain: &Tensor, eps: f64) -> Result<Tensor> {
    check_gain(x, gain)?;
    let d = x.last_dim();
    let mut y = Tensor::zeros(x.shape());
    for (xr, yr) in x.data().chunks_exact(d).zip(y.data_mut().chunks_exact_mut(d)) {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for ((o, &v), &g) in yr.iter_mut().zip(xr).zip(gain.data()) {
            *o = v * inv * g;
        }
    }
    Ok(y)
}

/// Returns `dL/dx` and accumulates `dL/dgain` into `dgain`.
pub fn rms_norm_backward(
    x: &Tensor,
    gain: &Tensor,
    eps: f64,
    dy: &Tensor,
    dgain: &mut Tensor,
) -> Result<Tensor> {
    check_gain(x, gain)?;
    x.expect_same_shape(dy)?;
    let d = x.last_dim();
    let mut dx = Tensor::zeros(x.shape());
    let dg = dgain.data_mut();
    for ((xr, gr), dxr) in x
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
    {
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        // u = dy * gain; dx = inv * (u - x * inv^2 * mean(u * x))
        let mut ux = 0.0;
        for i in 0..d {
            let u = gr[i] * gain.data()[i];
            ux += u * xr[i];
            dg[i] += gr[i] * xr[i] * inv;
        }
        let c = inv * inv * ux / d as f64;
        for i in 0..d {
            let u = gr[i] * gain.data()[i];
            dxr[i] = inv * (u - xr[i] * c);
        }
    }
    Ok(dx)
}

/// Row-wise softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut y = x.clone();
    for row in y.data_mut().chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    y
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Takes the forward output `y = softmax(x)`.
pub fn softmax_rows_backward(y: &Tensor, dy: &Tensor) -> Result<Tensor> {
    y.expect_same_shape(dy)?;
    let d = y.last_dim();
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, gr), dr) in y
        .data()
        .chunks_exact(d)
        .zip(dy.data().chunks_exact(d))
        .zip(dx.data_mut().chunks_exact_mut(d))
    {
        softmax_backward_row(yr, gr, dr);
    }
    Ok(dx)
}

pub fn softmax_backward_row(y: &[f64], dy: &[f64], dx: &mut [f64]) {
    let s: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    for ((d, &yv), &g) in dx.iter_mut().zip(y).zip(dy) {
        *d = yv * (g - s);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwigluParams {
    pub gate: LinearParams,
    pub up: LinearParams,
    pub down: LinearParams,
}

impl SwigluParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            gate: self.gate.zeros_like(),
            up: self.up.zeros_like(),
            down: self.down.zeros_like(),
        }
    }

    fn check(&self) -> Result<()> {
        let d = self.gate.in_dim();
        let h = self.gate.out_dim();
        if self.up.in_dim() != d
            || self.up.out_dim() != h
            || self.down.in_dim() != h
            || self.down.out_dim() != d
        {
            return Err(shape_err!(
                "swiglu projections disagree: gate {:?}, up {:?}, down {:?}",
                self.gate.weight.shape(),
                self.up.weight.shape(),
                self.down.weight.shape()
            ));
        }
        Ok(())
    }
}

/// Intermediates of a SwiGLU forward pass.
#[derive(Debug, Clone)]
pub struct SwigluCache {
    x: Tensor,
    gate_pre: Tensor,
    up: Tensor,
    hidden: Tensor,
}

/// `y = down(silu(gate(x)) * up(x))`
pub fn swiglu(x: &Tensor, p: &SwigluParams) -> Result<(Tensor, SwigluCache)> {
    p.check()?;
    let gate_pre = matmul_affine(x, &p.gate)?;
    let up = matmul_affine(x, &p.up)?;
    let hidden = silu(&gate_pre).mul(&up)?;
    let y = matmul_affine(&hidden, &p.down)?;
    Ok((
        y,
        SwigluCache {
            x: x.clone(),
            gate_pre,
            up,
            hidden,
        },
    ))
}

pub fn swiglu_backward(
    cache: &SwigluCache,
    p: &SwigluParams,
    dy: &Tensor,
    grad: &mut SwigluParams,
) -> Result<Tensor> {
    if dy.rows() != cache.x.rows() {
        return Err(Error::State(format!(
            "swiglu backward: saved input has {} rows, upstream has {}",
            cache.x.rows(),
            dy.rows()
        )));
    }
    let dhidden = matmul_affine_backward(&cache.hidden, &p.down, dy, &mut grad.down)?;
    let act = silu(&cache.gate_pre);
    let (dact, dup) = mul_backward(&act, &cache.up, &dhidden)?;
    let dgate = silu_backward(&cache.gate_pre, &dact)?;
    let mut dx = matmul_affine_backward(&cache.x, &p.gate, &dgate, &mut grad.gate)?;
    dx.add_assign(&matmul_affine_backward(&cache.x, &p.up, &dup, &mut grad.up)?)?;
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lin(w: &[f64], shape: [usize; 2], b: &[f64]) -> LinearParams {
        LinearParams::new(
            Tensor::new(shape.to_vec(), w.to_vec()).unwrap(),
            Tensor::from_vec(b.to_vec()),
        )
        .unwrap()
    }

    #[test]
    fn affine_identity_and_hand_sum() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let y = matmul_affine(&x, &lin(&[1.0, 0.0, 0.0, 1.0], [2, 2], &[0.0, 0.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let x = Tensor::from_vec(vec![1.0, 1.0]);
        let y = matmul_affine(&x, &lin(&[2.0, 3.0], [2, 1], &[1.0])).unwrap();
        assert_eq!(y.data(), &[6.0]);
    }

    #[test]
    fn affine_shape_mismatch() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        let err = matmul_affine(&x, &LinearParams::zeros(2, 2)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn identity_backward_passes_upstream() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.2, 0.3, 1.0, 2.0, 3.0]).unwrap();
        let p = LinearParams::identity(3);
        let dy = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        let mut g = p.zeros_like();
        let dx = matmul_affine_backward(&x, &p, &dy, &mut g).unwrap();
        assert_eq!(dx, dy);
        assert_eq!(g.bias.data(), &[0.0, 2.5, 3.25]);
    }

    #[test]
    fn rms_norm_examples() {
        let one = Tensor::full(&[4], 1.0);
        let y = rms_norm(&one, &one, RMS_EPS).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
        let g2 = Tensor::full(&[2], 1.0);
        let y = rms_norm(&Tensor::zeros(&[2]), &g2, RMS_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let y = rms_norm(&Tensor::from_vec(vec![3.0, 4.0]), &g2, RMS_EPS).unwrap();
        let rms = 12.5f64.sqrt();
        assert!((y.data()[0] - 3.0 / rms).abs() < 1e-6);
        assert!((y.data()[1] - 4.0 / rms).abs() < 1e-6);
        assert!((y.data()[0] - 0.8485).abs() < 1e-4);
        assert!((y.data()[1] - 1.1314).abs() < 1e-4);
    }

    #[test]
    fn rms_norm_gradient_orthogonal_to_constant_input() {
        let x = Tensor::full(&[5], 0.7);
        let gain = Tensor::full(&[5], 1.0);
        let dy = Tensor::from_vec(vec![0.3, -1.0, 2.0, 0.5, 0.1]);
        let mut dg = Tensor::zeros(&[5]);
        let dx = rms_norm_backward(&x, &gain, 0.0, &dy, &mut dg).unwrap();
        let along: f64 = dx.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!(along.abs() < 1e-12, "{along}");
    }

    #[test]
    fn rms_norm_scale_invariant_without_eps() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.5, 0.01]);
        let gain = Tensor::from_vec(vec![1.0, 2.0, 0.5, -1.0]);
        let a = rms_norm(&x, &gain, 0.0).unwrap();
        let b = rms_norm(&x.scale(37.5), &gain, 0.0).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn swiglu_examples() {
        let p = SwigluParams {
            gate: lin(&[1.0], [1, 1], &[0.0]),
            up: lin(&[1.0], [1, 1], &[0.0]),
            down: lin(&[1.0], [1, 1], &[0.0]),
        };
        let (y, _) = swiglu(&Tensor::from_vec(vec![0.0]), &p).unwrap();
        assert_eq!(y.data(), &[0.0]);
        let (y, _) = swiglu(&Tensor::from_vec(vec![1.0]), &p).unwrap();
        // silu(1) * 1 = sigmoid(1)
        assert!((y.data()[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((y.data()[0] - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let y = softmax_rows(&x);
        for r in 0..2 {
            assert!((y.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn swiglu_backward_rejects_foreign_cache() {
        let p = SwigluParams {
            gate: LinearParams::zeros(2, 3),
            up: LinearParams::zeros(2, 3),
            down: LinearParams::zeros(3, 2),
        };
        let (_, cache) = swiglu(&Tensor::zeros(&[4, 2]), &p).unwrap();
        let mut g = p.zeros_like();
        let err = swiglu_backward(&cache, &p, &Tensor::zeros(&[3, 2]), &mut g).unwrap_err();
        assert!(matches!(err, Error::State(_)));
    }
}
