use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// The four bilinear neighbours of a fractional `(h, w)` position.
///
/// Neighbours outside `[0, H-1] x [0, W-1]` have `index == None` and read as zero.
#[derive(Debug, Clone, Copy)]
pub struct Corners {
    /// Pixel indices (row-major `i * W + j`) of `(h0,w0) (h0,w0+1) (h0+1,w0) (h0+1,w0+1)`.
    pub index: [Option<usize>; 4],
    pub coeff: [f64; 4],
    /// Fractional parts `h - floor(h)` and `w - floor(w)`.
    pub frac: (f64, f64),
}

#[inline]
fn cell(i: f64, n: usize) -> Option<usize> {
    if i >= 0.0 && i < n as f64 {
        Some(i as usize)
    } else {
        None
    }
}

impl Corners {
    #[inline]
    pub fn new(h: f64, w: f64, height: usize, width: usize) -> Self {
        let h0 = h.floor();
        let w0 = w.floor();
        let lh = h - h0;
        let lw = w - w0;
        let hh = 1.0 - lh;
        let hw = 1.0 - lw;
        let r0 = cell(h0, height);
        let r1 = cell(h0 + 1.0, height);
        let c0 = cell(w0, width);
        let c1 = cell(w0 + 1.0, width);
        let at = |r: Option<usize>, c: Option<usize>| match (r, c) {
            (Some(r), Some(c)) => Some(r * width + c),
            _ => None,
        };
        Self {
            index: [at(r0, c0), at(r0, c1), at(r1, c0), at(r1, c1)],
            coeff: [hh * hw, hh * lw, lh * hw, lh * lw],
            frac: (lh, lw),
        }
    }

    pub fn any_inside(&self) -> bool {
        self.index.iter().any(Option::is_some)
    }
}

/// Bilinear read of channel vector `x[h, w, :]` for `x` shaped `[H, W, C]`.
pub fn bilinear_sample(x: &Tensor, h: f64, w: f64) -> Result<Tensor> {
    let &[height, width, c] = x.shape() else {
        return Err(shape_err!("bilinear_sample expects [H, W, C], got {:?}", x.shape()));
    };
    let corners = Corners::new(h, w, height, width);
    let mut out = vec![0.0; c];
    gather(x.data(), c, 0, c, &corners, &mut out);
    Ok(Tensor::from_vec(out))
}

static ZEROS: [f64; 4096] = [0.0; 4096];

/// `out[ch] = sum_corner coeff * x[corner, offset + ch]`, out-of-range corners read zero.
///
/// The sum is always formed over all four corners in a fixed order so every
/// caller reproduces the same rounding.
#[inline]
pub(crate) fn gather(
    x: &[f64],
    stride: usize,
    offset: usize,
    len: usize,
    corners: &Corners,
    out: &mut [f64],
) {
    let [a, b, c, d] = corner_slices(x, stride, offset, len, corners);
    let [k0, k1, k2, k3] = corners.coeff;
    for ((((o, &va), &vb), &vc), &vd) in out[..len].iter_mut().zip(a).zip(b).zip(c).zip(d) {
        *o = k0 * va + k1 * vb + k2 * vc + k3 * vd;
    }
}

/// Channel slices `x[corner, offset..offset + len]`, with a zero slice for
/// out-of-range corners.
#[inline]
pub(crate) fn corner_slices<'a>(
    x: &'a [f64],
    stride: usize,
    offset: usize,
    len: usize,
    corners: &Corners,
) -> [&'a [f64]; 4] {
    assert!(len <= ZEROS.len(), "group width {len} exceeds gather limit");
    corners.index.map(|i| match i {
        Some(p) => &x[p * stride + offset..p * stride + offset + len],
        None => &ZEROS[..len],
    })
}
