use rand::Rng;

use crate::error::{Error, Result};
use crate::msdcn::{
    msdcn_backward, msdcn_forward_saved, MsDcnOptions, MsDcnParams, MsDcnState, ScaleAdjust,
};
use crate::tensor::{
    matmul_affine, matmul_affine_backward, nest, rms_norm, rms_norm_backward,
    swiglu, swiglu_backward, LinearParams, ParamSet, SwigluCache, SwigluParams, Tensor,
    RMS_EPS,
};

/// Chunks of the per-image modulation vector, in storage order.
const SHIFT1: usize = 0;
const SCALE1: usize = 1;
const GATE1: usize = 2;
const SHIFT2: usize = 3;
const SCALE2: usize = 4;
const GATE2: usize = 5;

/// `ceil(8d/3)` rounded up to a multiple of 8.
pub fn swiglu_hidden(d: usize) -> usize {
    (8 * d).div_ceil(3).div_ceil(8) * 8
}

/// One residual stage: a deformable-convolution sub-block and a SwiGLU sub-block,
/// both modulated by the condition vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub norm1: Tensor,
    pub in_proj: LinearParams,
    pub dcn: MsDcnParams,
    pub out_proj: LinearParams,
    pub norm2: Tensor,
    pub mlp: SwigluParams,
    /// `d -> 6d`: shift, scale and gate for each sub-block.
    pub ada: LinearParams,
}

impl BlockParams {
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        groups: usize,
        points: usize,
        s_max: f64,
        options: MsDcnOptions,
        rng: &mut R,
    ) -> Result<Self> {
        let hidden = swiglu_hidden(d);
        Ok(Self {
            norm1: Tensor::full(&[d], 1.0),
            in_proj: LinearParams::xavier(d, d, rng),
            dcn: MsDcnParams::init(d, groups, points, s_max, options, rng)?,
            out_proj: LinearParams::xavier(d, d, rng),
            norm2: Tensor::full(&[d], 1.0),
            mlp: SwigluParams {
                gate: LinearParams::xavier(d, hidden, rng),
                up: LinearParams::xavier(d, hidden, rng),
                down: LinearParams::xavier(hidden, d, rng),
            },
            ada: LinearParams::zeros(d, 6 * d),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            norm1: Tensor::zeros(self.norm1.shape()),
            in_proj: self.in_proj.zeros_like(),
            dcn: self.dcn.zeros_like(),
            out_proj: self.out_proj.zeros_like(),
            norm2: Tensor::zeros(self.norm2.shape()),
            mlp: self.mlp.zeros_like(),
            ada: self.ada.zeros_like(),
        }
    }
}

impl ParamSet for BlockParams {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("norm1".to_string(), &self.norm1)];
        v.extend(nest("in_proj", self.in_proj.named_tensors()));
        v.extend(nest("dcn", self.dcn.named_tensors()));
        v.extend(nest("out_proj", self.out_proj.named_tensors()));
        v.push(("norm2".into(), &self.norm2));
        v.extend(nest("mlp", self.mlp.named_tensors()));
        v.extend(nest("ada", self.ada.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("norm1".to_string(), &mut self.norm1)];
        v.extend(nest("in_proj", self.in_proj.named_tensors_mut()));
        v.extend(nest("dcn", self.dcn.named_tensors_mut()));
        v.extend(nest("out_proj", self.out_proj.named_tensors_mut()));
        v.push(("norm2".into(), &mut self.norm2));
        v.extend(nest("mlp", self.mlp.named_tensors_mut()));
        v.extend(nest("ada", self.ada.named_tensors_mut()));
        v
    }
}

/// `x * (1 + scale_b) + shift_b`, chunks taken from the image's row of `m`.
pub(crate) fn modulate(x: &Tensor, m: &Tensor, shift: usize, scale: usize) -> Tensor {
    let d = x.last_dim();
    let per_image = x.len() / m.rows();
    let width = m.last_dim();
    let mut y = x.clone();
    for (b, chunk) in y.data_mut().chunks_mut(per_image).enumerate() {
        let row = &m.data()[b * width..(b + 1) * width];
        let sh = &row[shift * d..(shift + 1) * d];
        let sc = &row[scale * d..(scale + 1) * d];
        for tok in chunk.chunks_exact_mut(d) {
            for i in 0..d {
                tok[i] = tok[i] * (1.0 + sc[i]) + sh[i];
            }
        }
    }
    y
}

/// Backward of [`modulate`]: accumulates into `dm` and returns `dL/dx`.
pub(crate) fn modulate_backward(
    x: &Tensor,
    m: &Tensor,
    shift: usize,
    scale: usize,
    dy: &Tensor,
    dm: &mut Tensor,
) -> Tensor {
    let d = x.last_dim();
    let per_image = x.len() / m.rows();
    let width = m.last_dim();
    let mut dx = dy.clone();
    for b in 0..m.rows() {
        let row = &m.data()[b * width..(b + 1) * width];
        let drow = &mut dm.data_mut()[b * width..(b + 1) * width];
        let span = b * per_image..(b + 1) * per_image;
        for (tok, (gt, dt)) in x.data()[span.clone()].chunks_exact(d).zip(
            dy.data()[span.clone()]
                .chunks_exact(d)
                .zip(dx.data_mut()[span].chunks_exact_mut(d)),
        ) {
            for i in 0..d {
                drow[shift * d + i] += gt[i];
                drow[scale * d + i] += gt[i] * tok[i];
                dt[i] = gt[i] * (1.0 + row[scale * d + i]);
            }
        }
    }
    dx
}

/// `x + gate_b * branch`.
fn gated_residual(x: &Tensor, m: &Tensor, gate: usize, branch: &Tensor) -> Tensor {
    let d = x.last_dim();
    let per_image = x.len() / m.rows();
    let width = m.last_dim();
    let mut y = x.clone();
    for (b, (chunk, br)) in y
        .data_mut()
        .chunks_mut(per_image)
        .zip(branch.data().chunks(per_image))
        .enumerate()
    {
        let g = &m.data()[b * width + gate * d..b * width + (gate + 1) * d];
        for (tok, bt) in chunk.chunks_exact_mut(d).zip(br.chunks_exact(d)) {
            for i in 0..d {
                tok[i] += g[i] * bt[i];
            }
        }
    }
    y
}

/// Accumulates the gate gradient into `dm` and returns `dL/dbranch`.
fn gated_residual_backward(
    m: &Tensor,
    gate: usize,
    branch: &Tensor,
    dy: &Tensor,
    dm: &mut Tensor,
) -> Tensor {
    let d = branch.last_dim();
    let per_image = branch.len() / m.rows();
    let width = m.last_dim();
    let mut db = dy.clone();
    for b in 0..m.rows() {
        let g = &m.data()[b * width + gate * d..b * width + (gate + 1) * d];
        let dg = &mut dm.data_mut()[b * width + gate * d..b * width + (gate + 1) * d];
        let span = b * per_image..(b + 1) * per_image;
        for (bt, (gt, dt)) in branch.data()[span.clone()].chunks_exact(d).zip(
            dy.data()[span.clone()]
                .chunks_exact(d)
                .zip(db.data_mut()[span].chunks_exact_mut(d)),
        ) {
            for i in 0..d {
                dg[i] += gt[i] * bt[i];
                dt[i] = gt[i] * g[i];
            }
        }
    }
    db
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x: Tensor,
    silu_cond: Tensor,
    mods: Tensor,
    n1: Tensor,
    m1: Tensor,
    dcn: MsDcnState,
    dcn_out: Tensor,
    branch1: Tensor,
    x1: Tensor,
    n2: Tensor,
    mlp: SwigluCache,
    branch2: Tensor,
}

impl BlockCache {
    pub fn dcn_state(&self) -> &MsDcnState {
        &self.dcn
    }
}

/// `x` is `[B, h, w, d]`; `silu_cond` is the activated condition, `[B, d]`.
pub fn block_forward(
    p: &BlockParams,
    x: &Tensor,
    silu_cond: &Tensor,
    adjust: ScaleAdjust,
) -> Result<(Tensor, BlockCache)> {
    let mods = matmul_affine(silu_cond, &p.ada)?;
    let n1 = rms_norm(x, &p.norm1, RMS_EPS)?;
    let m1 = modulate(&n1, &mods, SHIFT1, SCALE1);
    let dcn_in = matmul_affine(&m1, &p.in_proj)?;
    let (dcn_out, dcn) = msdcn_forward_saved(&dcn_in, &p.dcn, adjust)?;
    let branch1 = matmul_affine(&dcn_out, &p.out_proj)?;
    let x1 = gated_residual(x, &mods, GATE1, &branch1);
    let n2 = rms_norm(&x1, &p.norm2, RMS_EPS)?;
    let m2 = modulate(&n2, &mods, SHIFT2, SCALE2);
    let (branch2, mlp) = swiglu(&m2, &p.mlp)?;
    let y = gated_residual(&x1, &mods, GATE2, &branch2);
    Ok((
        y,
        BlockCache {
            x: x.clone(),
            silu_cond: silu_cond.clone(),
            mods,
            n1,
            m1,
            dcn,
            dcn_out,
            branch1,
            x1,
            n2,
            mlp,
            branch2,
        },
    ))
}

/// Returns `dL/dx` and `dL/d silu(cond)`; the caller sums the latter over all
/// blocks before going through the activation. Parameter gradients are added
/// into `grad`.
pub fn block_backward(
    p: &BlockParams,
    cache: &BlockCache,
    dy: &Tensor,
    grad: &mut BlockParams,
) -> Result<(Tensor, Tensor)> {
    if dy.shape() != cache.x.shape() {
        return Err(Error::State(format!(
            "block backward: upstream {:?} does not match saved input {:?}",
            dy.shape(),
            cache.x.shape()
        )));
    }
    let mut dmods = Tensor::zeros(cache.mods.shape());

    let dbranch2 = gated_residual_backward(&cache.mods, GATE2, &cache.branch2, dy, &mut dmods);
    let dm2 = swiglu_backward(&cache.mlp, &p.mlp, &dbranch2, &mut grad.mlp)?;
    let dn2 = modulate_backward(&cache.n2, &cache.mods, SHIFT2, SCALE2, &dm2, &mut dmods);
    let mut dx1 = rms_norm_backward(&cache.x1, &p.norm2, RMS_EPS, &dn2, &mut grad.norm2)?;
    dx1.add_assign(dy)?;

    let dbranch1 = gated_residual_backward(&cache.mods, GATE1, &cache.branch1, &dx1, &mut dmods);
    let ddcn_out =
        matmul_affine_backward(&cache.dcn_out, &p.out_proj, &dbranch1, &mut grad.out_proj)?;
    let ddcn_in = msdcn_backward(&cache.dcn, &p.dcn, &ddcn_out, &mut grad.dcn)?;
    let dm1 = matmul_affine_backward(&cache.m1, &p.in_proj, &ddcn_in, &mut grad.in_proj)?;
    let dn1 = modulate_backward(&cache.n1, &cache.mods, SHIFT1, SCALE1, &dm1, &mut dmods);
    let mut dx = rms_norm_backward(&cache.x, &p.norm1, RMS_EPS, &dn1, &mut grad.norm1)?;
    dx.add_assign(&dx1)?;

    let dsilu = matmul_affine_backward(&cache.silu_cond, &p.ada, &dmods, &mut grad.ada)?;
    Ok((dx, dsilu))
}
