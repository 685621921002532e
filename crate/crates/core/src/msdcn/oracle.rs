//! Reference implementation: one pixel, one group, one point at a time, with
//! every projection written as an explicit dot-product loop.

use super::{image_dims, sampling::bilinear_sample, MsDcnParams, ScaleAdjust};
use crate::error::{Error, Result};
use crate::tensor::{sigmoid_scalar, softmax_in_place, Tensor};

fn project(x: &[f64], lin: &crate::tensor::LinearParams, j: usize) -> f64 {
    let out = lin.out_dim();
    let w = lin.weight.data();
    let mut s = 0.0;
    for (i, &xi) in x.iter().enumerate() {
        s += xi * w[i * out + j];
    }
    s + lin.bias.data()[j]
}

pub fn msdcn_oracle(x: &Tensor, p: &MsDcnParams, adjust: ScaleAdjust) -> Result<Tensor> {
    p.validate()?;
    adjust.validate()?;
    let (n, h, w) = image_dims(x, p.channels)?;
    let (g, k, d) = (p.groups, p.points, p.channels);
    let c = d / g;
    let prior = p.direction_prior.data();
    let mut y = Tensor::zeros(x.shape());

    for img in 0..n {
        let plane = &x.data()[img * h * w * d..(img + 1) * h * w * d];
        let image = Tensor::new(vec![h, w, d], plane.to_vec())?;
        for i in 0..h {
            for j in 0..w {
                let feat = &plane[(i * w + j) * d..(i * w + j + 1) * d];
                for gi in 0..g {
                    let mut wts: Vec<f64> = (0..k)
                        .map(|kk| project(feat, &p.proj_weight, gi * k + kk))
                        .collect();
                    if wts.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numeric("dynamic weights are not finite".into()));
                    }
                    if p.options.softmax_weights {
                        softmax_in_place(&mut wts);
                    }
                    let z = if p.options.learn_relative_scale {
                        project(feat, &p.proj_scale, gi) + p.scale_prior.data()[gi]
                    } else {
                        p.scale_prior.data()[gi]
                    };
                    let s = sigmoid_scalar(z) * p.s_max;

                    let mut acc = vec![0.0; c];
                    for kk in 0..k {
                        let dh = project(feat, &p.proj_offset, (gi * k + kk) * 2);
                        let dw = project(feat, &p.proj_offset, (gi * k + kk) * 2 + 1);
                        let ph = i as f64 + s * (prior[kk * 2] + dh) * adjust.h;
                        let pw = j as f64 + s * (prior[kk * 2 + 1] + dw) * adjust.w;
                        if !(ph.is_finite() && pw.is_finite()) {
                            return Err(Error::Numeric("sampling position is not finite".into()));
                        }
                        let v = bilinear_sample(&image, ph, pw)?;
                        for ch in 0..c {
                            acc[ch] += wts[kk] * v.data()[gi * c + ch];
                        }
                    }
                    let base = ((img * h + i) * w + j) * d + gi * c;
                    y.data_mut()[base..base + c].copy_from_slice(&acc);
                }
            }
        }
    }
    Ok(y)
}
