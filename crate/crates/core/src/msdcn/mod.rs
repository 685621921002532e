//! Group-wise multiscale deformable convolution with decoupled scale and
//! direction.
//!
//! For every pixel `p0`, group `g` and point `k` the operator predicts a dynamic
//! weight `w`, an offset `dp` and a per-group scale
//! `s = sigmoid(W_s x + s0[g]) * s_max`, then gathers
//!
//! ```text
//! y_g(p0) = sum_k w_gk * x_g(p0 + s * (p_k + dp_gk))
//! ```
//!
//! with bilinear sampling. Out-of-map neighbours read zero. At inference the
//! scale can be stretched per axis by the test/train resolution ratio.
//!
//! Index layout: a pixel row is `r = (n * H + i) * W + j`; per-point arrays are
//! indexed `(r * G + g) * K + k`, per-group arrays `r * G + g`. Offsets store
//! `(dh, dw)` pairs.

mod conv;
mod oracle;
mod sampling;

pub use conv::static_conv_forward;
pub use oracle::msdcn_oracle;
pub use sampling::{bilinear_sample, Corners};

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    matmul_affine, matmul_affine_backward, nest, sigmoid_scalar, softmax_backward_row,
    softmax_in_place, LinearParams, ParamSet, Tensor,
};
use sampling::{corner_slices, gather};

/// Spatial tile edge used by the blocked gather.
pub const DEFAULT_TILE: usize = 8;

/// Ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsDcnOptions {
    /// Normalise the K dynamic weights of each group with a softmax.
    pub softmax_weights: bool,
    /// Train the direction prior grid `p_k` instead of keeping it fixed.
    pub learn_direction_prior: bool,
    /// Predict a per-pixel scale logit `W_s x` on top of the group prior.
    pub learn_relative_scale: bool,
    /// Spread the group scale priors; when off every `s0[g]` starts at 0.
    pub multiscale: bool,
}

impl Default for MsDcnOptions {
    fn default() -> Self {
        Self {
            softmax_weights: false,
            learn_direction_prior: false,
            learn_relative_scale: true,
            multiscale: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MsDcnParams {
    /// `D -> G*K` dynamic weights.
    pub proj_weight: LinearParams,
    /// `D -> G*K*2` deformable offsets.
    pub proj_offset: LinearParams,
    /// `D -> G` scale logits.
    pub proj_scale: LinearParams,
    /// `[G]`
    pub scale_prior: Tensor,
    /// `[K, 2]`, in feature-grid units.
    pub direction_prior: Tensor,
    pub s_max: f64,
    pub groups: usize,
    pub points: usize,
    pub channels: usize,
    pub options: MsDcnOptions,
}

/// Per-axis multipliers applied to the predicted scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleAdjust {
    pub h: f64,
    pub w: f64,
}

impl ScaleAdjust {
    pub const IDENTITY: ScaleAdjust = ScaleAdjust { h: 1.0, w: 1.0 };

    fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.w > 0.0 && self.h.is_finite() && self.w.is_finite()) {
            return Err(Error::Argument(format!(
                "scale adjustment must be positive and finite, got ({}, {})",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

impl Default for ScaleAdjust {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Ratio of test to training resolution per axis.
pub fn smax_adjust(train: (usize, usize), test: (usize, usize)) -> Result<ScaleAdjust> {
    if train.0 == 0 || train.1 == 0 {
        return Err(Error::Argument(format!(
            "training resolution must be positive, got {}x{}",
            train.0, train.1
        )));
    }
    if test.0 == 0 || test.1 == 0 {
        return Err(Error::Argument(format!(
            "test resolution must be positive, got {}x{}",
            test.0, test.1
        )));
    }
    Ok(ScaleAdjust {
        h: test.0 as f64 / train.0 as f64,
        w: test.1 as f64 / train.1 as f64,
    })
}

/// `s0[g] = ln(g / (G + 1 - g))` for `g = 1..=G`, so `sigmoid(s0[g]) = g / (G + 1)`.
pub fn init_scale_priors(groups: usize) -> Result<Vec<f64>> {
    if groups == 0 {
        return Err(Error::Argument("group count must be at least 1".into()));
    }
    Ok((1..=groups)
        .map(|g| (g as f64 / (groups + 1 - g) as f64).ln())
        .collect())
}

/// Base sampling grid `p_k` as `[K, 2]` `(dh, dw)` pairs.
///
/// Perfect squares give the centred `n x n` grid in row-major order (K = 9 is
/// `(-1,-1), (-1,0), ..., (1,1)`). Other counts put one point at the centre and
/// fill rings of radius `r = 1, 2, ...` holding `8r` evenly spaced points each;
/// the outermost ring spreads whatever is left evenly.
pub fn direction_prior_grid(points: usize) -> Result<Tensor> {
    if points == 0 {
        return Err(Error::Argument("point count must be at least 1".into()));
    }
    let n = (points as f64).sqrt().round() as usize;
    let mut data = Vec::with_capacity(points * 2);
    if n * n == points {
        let c = (n as f64 - 1.0) / 2.0;
        for a in 0..n {
            for b in 0..n {
                data.push(a as f64 - c);
                data.push(b as f64 - c);
            }
        }
    } else {
        data.extend([0.0, 0.0]);
        let mut left = points - 1;
        let mut ring = 1;
        while left > 0 {
            let here = left.min(8 * ring);
            for j in 0..here {
                let theta = std::f64::consts::TAU * j as f64 / here as f64;
                data.push(ring as f64 * theta.sin());
                data.push(ring as f64 * theta.cos());
            }
            left -= here;
            ring += 1;
        }
    }
    Tensor::new(vec![points, 2], data)
}

/// `4 K H W C / G`, the bilinear-gather cost of one layer.
pub fn flops_count(h: usize, w: usize, c: usize, k: usize, g: usize) -> Result<f64> {
    if g == 0 {
        return Err(Error::Argument("group count must be positive".into()));
    }
    if h == 0 || w == 0 || c == 0 || k == 0 {
        return Err(Error::Argument(format!(
            "flops_count needs positive extents, got H={h} W={w} C={c} K={k}"
        )));
    }
    Ok(4.0 * k as f64 * h as f64 * w as f64 * c as f64 / g as f64)
}

impl MsDcnParams {
    /// Dynamic weights ~ N(0, 0.02^2); offset and scale projections zero, so the
    /// initial sampling pattern is exactly the prior grid at the prior scales.
    pub fn init<R: Rng + ?Sized>(
        channels: usize,
        groups: usize,
        points: usize,
        s_max: f64,
        options: MsDcnOptions,
        rng: &mut R,
    ) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Config(format!(
                "channels {channels} not divisible into {groups} groups"
            )));
        }
        let scale_prior = if options.multiscale {
            init_scale_priors(groups)?
        } else {
            vec![0.0; groups]
        };
        let p = Self {
            proj_weight: LinearParams::normal(channels, groups * points, 0.02, rng),
            proj_offset: LinearParams::zeros(channels, groups * points * 2),
            proj_scale: LinearParams::zeros(channels, groups),
            scale_prior: Tensor::from_vec(scale_prior),
            direction_prior: direction_prior_grid(points)?,
            s_max,
            groups,
            points,
            channels,
            options,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn group_width(&self) -> usize {
        self.channels / self.groups
    }

    pub fn validate(&self) -> Result<()> {
        let (d, g, k) = (self.channels, self.groups, self.points);
        if g == 0 || k == 0 || d % g != 0 {
            return Err(Error::Config(format!(
                "invalid layer: D={d}, G={g}, K={k} (D must be divisible by G)"
            )));
        }
        if !(self.s_max > 0.0 && self.s_max.is_finite()) {
            return Err(Error::Config(format!("s_max must be positive, got {}", self.s_max)));
        }
        let ok = self.proj_weight.in_dim() == d
            && self.proj_weight.out_dim() == g * k
            && self.proj_offset.in_dim() == d
            && self.proj_offset.out_dim() == g * k * 2
            && self.proj_scale.in_dim() == d
            && self.proj_scale.out_dim() == g
            && self.scale_prior.shape() == [g]
            && self.direction_prior.shape() == [k, 2];
        if !ok {
            return Err(shape_err!(
                "layer tensors inconsistent with D={d}, G={g}, K={k}"
            ));
        }
        Ok(())
    }

    /// Same layout, all tensors zero; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        Self {
            proj_weight: self.proj_weight.zeros_like(),
            proj_offset: self.proj_offset.zeros_like(),
            proj_scale: self.proj_scale.zeros_like(),
            scale_prior: Tensor::zeros(self.scale_prior.shape()),
            direction_prior: Tensor::zeros(self.direction_prior.shape()),
            ..self.clone()
        }
    }
}

impl ParamSet for MsDcnParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = nest("proj_weight", self.proj_weight.named_tensors());
        v.extend(nest("proj_offset", self.proj_offset.named_tensors()));
        v.extend(nest("proj_scale", self.proj_scale.named_tensors()));
        v.push(("scale_prior".into(), &self.scale_prior));
        v.push(("direction_prior".into(), &self.direction_prior));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = nest("proj_weight", self.proj_weight.named_tensors_mut());
        v.extend(nest("proj_offset", self.proj_offset.named_tensors_mut()));
        v.extend(nest("proj_scale", self.proj_scale.named_tensors_mut()));
        v.push(("scale_prior".into(), &mut self.scale_prior));
        v.push(("direction_prior".into(), &mut self.direction_prior));
        v
    }
}

/// Where and with what weight every point samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    pub images: usize,
    pub height: usize,
    pub width: usize,
    pub groups: usize,
    pub points: usize,
    /// Absolute fractional `(h, w)` per point.
    pub positions: Vec<[f64; 2]>,
    /// `s * (p_k + dp)` per point, i.e. `position - p0`.
    pub displacements: Vec<[f64; 2]>,
    /// Dynamic weights per point (after the optional softmax).
    pub weights: Vec<f64>,
    /// Effective `(s_h, s_w)` per pixel and group.
    pub scales: Vec<[f64; 2]>,
}

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct MsDcnState {
    x: Tensor,
    adjust: ScaleAdjust,
    offsets: Tensor,
    sig: Vec<f64>,
    pub plan: SamplingPlan,
}

/// Splits `[H, W, D]` or `[N, H, W, D]` into `(N, H, W)`.
pub(crate) fn image_dims(x: &Tensor, channels: usize) -> Result<(usize, usize, usize)> {
    let (n, h, w, d) = match *x.shape() {
        [h, w, d] => (1, h, w, d),
        [n, h, w, d] => (n, h, w, d),
        _ => {
            return Err(shape_err!(
                "expected [H, W, D] or [N, H, W, D], got {:?}",
                x.shape()
            ))
        }
    };
    if d != channels {
        return Err(shape_err!("expected {channels} channels, got {d}"));
    }
    Ok((n, h, w))
}

pub fn msdcn_forward(
    x: &Tensor,
    p: &MsDcnParams,
    adjust: ScaleAdjust,
) -> Result<(Tensor, SamplingPlan)> {
    let (y, state) = msdcn_forward_saved(x, p, adjust)?;
    Ok((y, state.plan))
}

pub fn msdcn_forward_saved(
    x: &Tensor,
    p: &MsDcnParams,
    adjust: ScaleAdjust,
) -> Result<(Tensor, MsDcnState)> {
    p.validate()?;
    adjust.validate()?;
    let (n, h, w) = image_dims(x, p.channels)?;
    let (g, k) = (p.groups, p.points);
    let rows = n * h * w;

    let mut weights = matmul_affine(x, &p.proj_weight)?;
    weights.check_finite("dynamic weight projection")?;
    if p.options.softmax_weights {
        for chunk in weights.data_mut().chunks_exact_mut(k) {
            softmax_in_place(chunk);
        }
    }
    let offsets = matmul_affine(x, &p.proj_offset)?;
    offsets.check_finite("offset projection")?;

    let s0 = p.scale_prior.data();
    let logits: Vec<f64> = if p.options.learn_relative_scale {
        let z = matmul_affine(x, &p.proj_scale)?;
        z.data()
            .chunks_exact(g)
            .flat_map(|row| row.iter().zip(s0).map(|(a, b)| a + b))
            .collect()
    } else {
        (0..rows).flat_map(|_| s0.iter().copied()).collect()
    };
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("scale logits are not finite".into()));
    }
    let sig: Vec<f64> = logits.iter().map(|&z| sigmoid_scalar(z)).collect();

    let prior = p.direction_prior.data();
    let off = offsets.data();
    let mut positions = Vec::with_capacity(rows * g * k);
    let mut displacements = Vec::with_capacity(rows * g * k);
    let mut scales = Vec::with_capacity(rows * g);
    for row in 0..rows {
        let i = ((row / w) % h) as f64;
        let j = (row % w) as f64;
        for gi in 0..g {
            // The resolution ratio is applied last so adjusted displacements are
            // exactly the unadjusted ones times the ratio.
            let s = sig[row * g + gi] * p.s_max;
            scales.push([s * adjust.h, s * adjust.w]);
            for kk in 0..k {
                let o = ((row * g + gi) * k + kk) * 2;
                let dh = s * (prior[kk * 2] + off[o]) * adjust.h;
                let dw = s * (prior[kk * 2 + 1] + off[o + 1]) * adjust.w;
                displacements.push([dh, dw]);
                positions.push([i + dh, j + dw]);
            }
        }
    }
    if positions.iter().any(|q| !(q[0].is_finite() && q[1].is_finite())) {
        return Err(Error::Numeric("sampling positions are not finite".into()));
    }

    let plan = SamplingPlan {
        images: n,
        height: h,
        width: w,
        groups: g,
        points: k,
        positions,
        displacements,
        weights: weights.into_data(),
        scales,
    };
    let mut y = Tensor::zeros(x.shape());
    gather_blocked(x.data(), p.channels, &plan, DEFAULT_TILE, y.data_mut());
    Ok((
        y,
        MsDcnState {
            x: x.clone(),
            adjust,
            offsets,
            sig,
            plan,
        },
    ))
}

/// Weighted bilinear gather over `tile x tile` spatial blocks.
///
/// Accumulation order per output element is the point order `k = 0..K`, matching
/// the reference loops exactly.
pub fn gather_blocked(x: &[f64], d: usize, plan: &SamplingPlan, tile: usize, y: &mut [f64]) {
    let (h, w, g, k) = (plan.height, plan.width, plan.groups, plan.points);
    let c = d / g;
    let tile = tile.max(1);
    let mut v = vec![0.0; c];
    let plane = h * w * d;
    for img in 0..plan.images {
        let xi = &x[img * plane..(img + 1) * plane];
        let yi = &mut y[img * plane..(img + 1) * plane];
        for ti in (0..h).step_by(tile) {
            for tj in (0..w).step_by(tile) {
                for i in ti..(ti + tile).min(h) {
                    for j in tj..(tj + tile).min(w) {
                        let pix = i * w + j;
                        let row = img * h * w + pix;
                        for gi in 0..g {
                            let acc = &mut yi[pix * d + gi * c..pix * d + (gi + 1) * c];
                            let base = (row * g + gi) * k;
                            for kk in 0..k {
                                let [ph, pw] = plan.positions[base + kk];
                                let corners = Corners::new(ph, pw, h, w);
                                if !corners.any_inside() {
                                    continue;
                                }
                                let wt = plan.weights[base + kk];
                                gather(xi, d, gi * c, c, &corners, &mut v);
                                for (a, &vv) in acc.iter_mut().zip(&v) {
                                    *a += wt * vv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Returns `dL/dx` and adds parameter gradients into `grad`.
///
/// On integer lattice lines the bilinear position derivative is the right limit.
pub fn msdcn_backward(
    state: &MsDcnState,
    p: &MsDcnParams,
    dy: &Tensor,
    grad: &mut MsDcnParams,
) -> Result<Tensor> {
    let plan = &state.plan;
    if plan.groups != p.groups || plan.points != p.points || state.x.last_dim() != p.channels {
        return Err(Error::State(
            "saved forward state does not belong to this layer".into(),
        ));
    }
    if dy.shape() != state.x.shape() {
        return Err(Error::State(format!(
            "upstream gradient {:?} does not match saved output {:?}",
            dy.shape(),
            state.x.shape()
        )));
    }
    let (n, h, w) = (plan.images, plan.height, plan.width);
    let (g, k, d) = (p.groups, p.points, p.channels);
    let c = d / g;
    let rows = n * h * w;
    let plane = h * w * d;
    let x = state.x.data();
    let off = state.offsets.data();
    let prior = p.direction_prior.data();

    let mut dx = Tensor::zeros(state.x.shape());
    let mut dweights = Tensor::zeros(&[rows, g * k]);
    let mut doffsets = Tensor::zeros(state.offsets.shape());
    let mut dlogits = Tensor::zeros(&[rows, g]);
    let mut dprior = vec![0.0; k * 2];
    let mut v = vec![0.0; c];

    for row in 0..rows {
        let img = row / (h * w);
        let xi = &x[img * plane..(img + 1) * plane];
        let dxi = &mut dx.data_mut()[img * plane..(img + 1) * plane];
        for gi in 0..g {
            let gy = &dy.data()[row * d + gi * c..row * d + (gi + 1) * c];
            let [sh, sw] = plan.scales[row * g + gi];
            let (mut dsh, mut dsw) = (0.0, 0.0);
            for kk in 0..k {
                let idx = (row * g + gi) * k + kk;
                let [ph, pw] = plan.positions[idx];
                let corners = Corners::new(ph, pw, h, w);
                if !corners.any_inside() {
                    continue;
                }
                let wt = plan.weights[idx];
                gather(xi, d, gi * c, c, &corners, &mut v);
                dweights.data_mut()[idx] = crate::tensor::dot(gy, &v);

                let (lh, lw) = corners.frac;
                let [x00, x01, x10, x11] = corner_slices(xi, d, gi * c, c, &corners);
                let (mut dph, mut dpw) = (0.0, 0.0);
                for ch in 0..c {
                    let gv = wt * gy[ch];
                    dph += gv * ((1.0 - lw) * (x10[ch] - x00[ch]) + lw * (x11[ch] - x01[ch]));
                    dpw += gv * ((1.0 - lh) * (x01[ch] - x00[ch]) + lh * (x11[ch] - x10[ch]));
                }
                for (q, pixel) in corners.index.iter().enumerate() {
                    if let Some(px) = pixel {
                        let cw = corners.coeff[q] * wt;
                        let dst = &mut dxi[px * d + gi * c..px * d + (gi + 1) * c];
                        for (o, &gg) in dst.iter_mut().zip(gy) {
                            *o += cw * gg;
                        }
                    }
                }
                let o = idx * 2;
                doffsets.data_mut()[o] = dph * sh;
                doffsets.data_mut()[o + 1] = dpw * sw;
                dsh += dph * (prior[kk * 2] + off[o]);
                dsw += dpw * (prior[kk * 2 + 1] + off[o + 1]);
                dprior[kk * 2] += dph * sh;
                dprior[kk * 2 + 1] += dpw * sw;
            }
            let s = state.sig[row * g + gi];
            let dsig = dsh * p.s_max * state.adjust.h + dsw * p.s_max * state.adjust.w;
            dlogits.data_mut()[row * g + gi] = dsig * s * (1.0 - s);
        }
    }

    if p.options.softmax_weights {
        let mut raw = vec![0.0; k];
        for (wrow, drow) in plan
            .weights
            .chunks_exact(k)
            .zip(dweights.data_mut().chunks_exact_mut(k))
        {
            softmax_backward_row(wrow, drow, &mut raw);
            drow.copy_from_slice(&raw);
        }
    }
    let dweights = dweights.reshape(&out_shape(&state.x, g * k))?;
    dx.add_assign(&matmul_affine_backward(
        &state.x,
        &p.proj_weight,
        &dweights,
        &mut grad.proj_weight,
    )?)?;
    dx.add_assign(&matmul_affine_backward(
        &state.x,
        &p.proj_offset,
        &doffsets,
        &mut grad.proj_offset,
    )?)?;
    for row in dlogits.data().chunks_exact(g) {
        for (a, &b) in grad.scale_prior.data_mut().iter_mut().zip(row) {
            *a += b;
        }
    }
    if p.options.learn_relative_scale {
        let dlogits = dlogits.reshape(&out_shape(&state.x, g))?;
        dx.add_assign(&matmul_affine_backward(
            &state.x,
            &p.proj_scale,
            &dlogits,
            &mut grad.proj_scale,
        )?)?;
    }
    if p.options.learn_direction_prior {
        for (a, &b) in grad.direction_prior.data_mut().iter_mut().zip(&dprior) {
            *a += b;
        }
    }
    Ok(dx)
}

fn out_shape(x: &Tensor, last: usize) -> Vec<usize> {
    let mut s = x.shape().to_vec();
    if let Some(l) = s.last_mut() {
        *l = last;
    }
    s
}
