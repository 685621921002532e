use super::image_dims;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Group-wise static convolution with zero padding.
///
/// `weights` is `[G, ks, ks]` with odd `ks`; all channels of a group share the
/// group's kernel. Taps are visited row-major, the same order as the centred
/// direction prior grid.
pub fn static_conv_forward(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let &[g, ks, ks2] = weights.shape() else {
        return Err(shape_err!("kernel must be [G, ks, ks], got {:?}", weights.shape()));
    };
    if ks != ks2 || ks % 2 == 0 {
        return Err(shape_err!("kernel must be square with odd size, got {ks}x{ks2}"));
    }
    let d = x.last_dim();
    if g == 0 || d % g != 0 {
        return Err(shape_err!("{d} channels cannot be split into {g} groups"));
    }
    let (n, h, w) = image_dims(x, d)?;
    let c = d / g;
    let r = (ks / 2) as isize;
    let wt = weights.data();
    let mut y = Tensor::zeros(x.shape());
    let plane = h * w * d;
    for img in 0..n {
        let xi = &x.data()[img * plane..(img + 1) * plane];
        let yi = &mut y.data_mut()[img * plane..(img + 1) * plane];
        for i in 0..h as isize {
            for j in 0..w as isize {
                let out = ((i as usize) * w + j as usize) * d;
                for gi in 0..g {
                    let acc = &mut yi[out + gi * c..out + (gi + 1) * c];
                    for a in 0..ks as isize {
                        for b in 0..ks as isize {
                            let (si, sj) = (i + a - r, j + b - r);
                            if si < 0 || sj < 0 || si >= h as isize || sj >= w as isize {
                                continue;
                            }
                            let tap = wt[(gi * ks + a as usize) * ks + b as usize];
                            let src = ((si as usize) * w + sj as usize) * d + gi * c;
                            for (o, &v) in acc.iter_mut().zip(&xi[src..src + c]) {
                                *o += tap * v;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(y)
}
