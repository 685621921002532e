use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Times are multiplied by this before the sinusoidal embedding so `t in [0, 1]`
/// covers the same phase range as integer diffusion steps.
pub const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// `[cos(t f_0), ..., cos(t f_{n-1}), sin(t f_0), ..., sin(t f_{n-1})]` with
/// `f_i = MAX_PERIOD^(-i/n)`, `n = dim / 2`. Returns `[B, dim]`.
pub fn timestep_embedding(times: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(MAX_PERIOD.ln()) * i as f64 / half as f64).exp())
        .collect();
    let mut out = Tensor::zeros(&[times.len(), dim]);
    for (row, &t) in out.data_mut().chunks_exact_mut(dim).zip(times) {
        for (i, &f) in freqs.iter().enumerate() {
            let a = t * TIME_SCALE * f;
            row[i] = a.cos();
            row[half + i] = a.sin();
        }
    }
    out
}

/// Space-to-depth: `[B, H, W, C] -> [B, H/p, W/p, p*p*C]`, each patch flattened
/// as `(a, b, c) -> (a * p + b) * C + c`.
pub fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let &[n, h, w, c] = x.shape() else {
        return Err(shape_err!("expected [B, H, W, C], got {:?}", x.shape()));
    };
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(shape_err!(
            "resolution {h}x{w} is not divisible by the patch size {p}"
        ));
    }
    let (gh, gw) = (h / p, w / p);
    let mut out = Tensor::zeros(&[n, gh, gw, p * p * c]);
    let src = x.data();
    let dst = out.data_mut();
    for img in 0..n {
        for i in 0..h {
            for j in 0..w {
                let from = ((img * h + i) * w + j) * c;
                let tok = (img * gh + i / p) * gw + j / p;
                let to = tok * p * p * c + ((i % p) * p + j % p) * c;
                dst[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Ok(out)
}

/// Depth-to-space, the exact inverse of [`patchify`].
pub fn unpatchify(t: &Tensor, p: usize, c: usize) -> Result<Tensor> {
    let &[n, gh, gw, pc] = t.shape() else {
        return Err(shape_err!("expected [B, h, w, p*p*C], got {:?}", t.shape()));
    };
    if pc != p * p * c {
        return Err(shape_err!("token width {pc} is not {p}*{p}*{c}"));
    }
    let (h, w) = (gh * p, gw * p);
    let mut out = Tensor::zeros(&[n, h, w, c]);
    let src = t.data();
    let dst = out.data_mut();
    for img in 0..n {
        for i in 0..h {
            for j in 0..w {
                let to = ((img * h + i) * w + j) * c;
                let tok = (img * gh + i / p) * gw + j / p;
                let from = tok * pc + ((i % p) * p + j % p) * c;
                dst[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_index_formula() {
        let x = Tensor::new(vec![1, 4, 4, 1], (0..16).map(f64::from).collect()).unwrap();
        let t = patchify(&x, 2).unwrap();
        assert_eq!(t.shape(), &[1, 2, 2, 4]);
        for i in 0..4 {
            for j in 0..4 {
                let tok = (i / 2) * 2 + j / 2;
                let slot = (i % 2) * 2 + j % 2;
                assert_eq!(t.data()[tok * 4 + slot], (i * 4 + j) as f64);
            }
        }
        assert_eq!(&t.data()[..4], &[0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn patch_one_is_identity_and_inverse_holds() {
        let x = Tensor::new(vec![2, 4, 6, 3], (0..144).map(f64::from).collect()).unwrap();
        assert_eq!(patchify(&x, 1).unwrap(), x);
        assert_eq!(unpatchify(&patchify(&x, 2).unwrap(), 2, 3).unwrap(), x);
        assert!(patchify(&x, 4).is_err());
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(&[0.0, 0.5], 8);
        assert_eq!(&e.data()[..8], &[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!((e.data()[8] - 500f64.cos()).abs() < 1e-12);
    }
}
