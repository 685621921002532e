//! The generative network: patch embedding, timestep and label conditioning,
//! a stack of modulated deformable-convolution blocks and a zero-initialised
//! output head. No parameter depends on the spatial size, so one set of
//! weights runs at any resolution divisible by the patch size.

mod block;
mod embed;

pub use block::{block_backward, block_forward, swiglu_hidden, BlockCache, BlockParams};
pub use embed::{patchify, timestep_embedding, unpatchify, TIME_SCALE};

use block::{modulate, modulate_backward};

use crate::error::{shape_err, Error, Result};
use crate::msdcn::{MsDcnOptions, SamplingPlan, ScaleAdjust};
use crate::rng::{stream, tag};
use crate::tensor::{
    matmul_affine, matmul_affine_backward, nest, rms_norm, rms_norm_backward, silu,
    silu_backward, LinearParams, ParamSet, Tensor, RMS_EPS,
};

pub const DEFAULT_FREQ_DIM: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    pub layers: usize,
    pub hidden: usize,
    pub groups: usize,
    pub points: usize,
    pub patch: usize,
    pub num_classes: usize,
    pub in_channels: usize,
    /// Pixel resolution `(H, W)` the model is trained at.
    pub train_size: (usize, usize),
    /// One entry per layer.
    pub s_max: Vec<f64>,
    pub options: MsDcnOptions,
    /// Width of the sinusoidal timestep embedding.
    pub freq_dim: usize,
}

impl ModelConfig {
    /// `S`, `B`, `L`, `XL` (patch 2) or the toy `T` (patch 1).
    pub fn named(
        name: &str,
        in_channels: usize,
        num_classes: usize,
        train_size: (usize, usize),
    ) -> Result<Self> {
        let (layers, hidden, groups, patch) = match name {
            "S" => (12, 384, 6, 2),
            "B" => (12, 768, 12, 2),
            "L" => (24, 1024, 16, 2),
            "XL" => (28, 1152, 16, 2),
            "T" => (2, 64, 4, 1),
            other => {
                return Err(Error::Config(format!(
                    "unknown model size '{other}' (expected S, B, L, XL or T)"
                )))
            }
        };
        let mut cfg = Self {
            name: name.to_string(),
            layers,
            hidden,
            groups,
            points: 9,
            patch,
            num_classes,
            in_channels,
            train_size,
            s_max: Vec::new(),
            options: MsDcnOptions::default(),
            freq_dim: DEFAULT_FREQ_DIM,
        };
        cfg.reset_s_max();
        Ok(cfg)
    }

    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny_for_tests() -> Self {
        let mut cfg = Self {
            name: "tiny".into(),
            layers: 2,
            hidden: 8,
            groups: 2,
            points: 4,
            patch: 2,
            num_classes: 3,
            in_channels: 2,
            train_size: (4, 4),
            s_max: Vec::new(),
            options: MsDcnOptions::default(),
            freq_dim: 16,
        };
        cfg.reset_s_max();
        cfg
    }

    /// Feature-grid size at the training resolution.
    pub fn train_grid(&self) -> (usize, usize) {
        (
            self.train_size.0 / self.patch.max(1),
            self.train_size.1 / self.patch.max(1),
        )
    }

    /// Sets every layer's `s_max` to the larger side of the training feature grid.
    pub fn reset_s_max(&mut self) {
        let (gh, gw) = self.train_grid();
        self.s_max = vec![gh.max(gw).max(1) as f64; self.layers];
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.layers == 0 {
            bad.push("layers must be at least 1".to_string());
        }
        if self.hidden == 0 || self.groups == 0 || self.hidden % self.groups != 0 {
            bad.push(format!(
                "hidden size {} must be a positive multiple of groups {}",
                self.hidden, self.groups
            ));
        }
        if self.points == 0 {
            bad.push("points must be at least 1".into());
        }
        if self.patch == 0 {
            bad.push("patch must be at least 1".into());
        }
        if self.in_channels == 0 {
            bad.push("in_channels must be at least 1".into());
        }
        if self.freq_dim < 2 || self.freq_dim % 2 != 0 {
            bad.push(format!("freq_dim must be a positive even number, got {}", self.freq_dim));
        }
        let (h, w) = self.train_size;
        if h == 0 || w == 0 || h % self.patch.max(1) != 0 || w % self.patch.max(1) != 0 {
            bad.push(format!(
                "training resolution {h}x{w} must be positive and divisible by the patch size {}",
                self.patch
            ));
        }
        if self.s_max.len() != self.layers {
            bad.push(format!(
                "s_max lists {} values for {} layers",
                self.s_max.len(),
                self.layers
            ));
        }
        if self.s_max.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            bad.push("every s_max must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }

    /// Number of scalars in a model built from this config.
    pub fn param_count(&self) -> usize {
        let d = self.hidden;
        let pc = self.patch * self.patch * self.in_channels;
        let lin = |i: usize, o: usize| i * o + o;
        let (g, k) = (self.groups, self.points);
        let hid = swiglu_hidden(d);
        let block = 2 * d
            + 2 * lin(d, d)
            + lin(d, g * k)
            + lin(d, 2 * g * k)
            + lin(d, g)
            + g
            + 2 * k
            + 2 * lin(d, hid)
            + lin(hid, d)
            + lin(d, 6 * d);
        lin(pc, d)
            + lin(self.freq_dim, d)
            + lin(d, d)
            + (self.num_classes + 1) * d
            + self.layers * block
            + d
            + lin(d, 2 * d)
            + lin(d, pc)
    }
}

/// Class condition; `Null` selects the unconditional embedding row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Null,
}

impl Label {
    fn row(self, num_classes: usize) -> Result<usize> {
        match self {
            Label::Class(c) if c < num_classes => Ok(c),
            Label::Class(c) => Err(Error::Argument(format!(
                "label {c} out of range for {num_classes} classes"
            ))),
            Label::Null => Ok(num_classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `p*p*C -> d`
    pub patch_embed: LinearParams,
    /// `freq_dim -> d`
    pub time_mlp1: LinearParams,
    pub time_mlp2: LinearParams,
    /// `[num_classes + 1, d]`, last row is the null label.
    pub label_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub final_norm: Tensor,
    /// `d -> 2d`: shift and scale.
    pub final_ada: LinearParams,
    /// `d -> p*p*C`
    pub final_proj: LinearParams,
}

/// Intermediates of one training forward pass.
#[derive(Debug, Clone)]
pub struct ModelTape {
    in_shape: Vec<usize>,
    patches: Tensor,
    temb: Tensor,
    t_hidden: Tensor,
    t_act: Tensor,
    label_rows: Vec<usize>,
    cond: Tensor,
    silu_cond: Tensor,
    blocks: Vec<BlockCache>,
    final_in: Tensor,
    final_normed: Tensor,
    final_mods: Tensor,
    final_modulated: Tensor,
}

impl ModelTape {
    /// Sampling plan of every deformable layer, first block first.
    pub fn dcn_plans(&self) -> Vec<&SamplingPlan> {
        self.blocks.iter().map(|b| &b.dcn_state().plan).collect()
    }
}

impl Model {
    /// Deterministic initialisation from `seed`. The modulation projections and
    /// the output projection start at zero, so a fresh model predicts zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[tag::INIT]);
        let d = config.hidden;
        let pc = config.patch * config.patch * config.in_channels;
        let patch_embed = LinearParams::xavier(pc, d, &mut rng);
        let time_mlp1 = LinearParams::normal(config.freq_dim, d, 0.02, &mut rng);
        let time_mlp2 = LinearParams::normal(d, d, 0.02, &mut rng);
        let label_embed = Tensor::randn(&[config.num_classes + 1, d], 0.02, &mut rng);
        let blocks = config
            .s_max
            .iter()
            .map(|&s| {
                BlockParams::init(d, config.groups, config.points, s, config.options, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            patch_embed,
            time_mlp1,
            time_mlp2,
            label_embed,
            blocks,
            final_norm: Tensor::full(&[d], 1.0),
            final_ada: LinearParams::zeros(d, 2 * d),
            final_proj: LinearParams::zeros(d, pc),
        })
    }

    /// Same structure with every tensor zero; used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            patch_embed: self.patch_embed.zeros_like(),
            time_mlp1: self.time_mlp1.zeros_like(),
            time_mlp2: self.time_mlp2.zeros_like(),
            label_embed: Tensor::zeros(self.label_embed.shape()),
            blocks: self.blocks.iter().map(BlockParams::zeros_like).collect(),
            final_norm: Tensor::zeros(self.final_norm.shape()),
            final_ada: self.final_ada.zeros_like(),
            final_proj: self.final_proj.zeros_like(),
        }
    }

    /// Predicted velocity for `x_t` of shape `[B, H, W, C]` (or `[H, W, C]`).
    pub fn forward(
        &self,
        x_t: &Tensor,
        times: &[f64],
        labels: &[Label],
        adjust: ScaleAdjust,
    ) -> Result<Tensor> {
        Ok(self.forward_train(x_t, times, labels, adjust)?.0)
    }

    /// Forward pass that also records what [`Model::backward`] needs.
    pub fn forward_train(
        &self,
        x_t: &Tensor,
        times: &[f64],
        labels: &[Label],
        adjust: ScaleAdjust,
    ) -> Result<(Tensor, ModelTape)> {
        let cfg = &self.config;
        let in_shape = x_t.shape().to_vec();
        let x4 = match in_shape.len() {
            3 => x_t.clone().reshape(&[1, in_shape[0], in_shape[1], in_shape[2]])?,
            4 => x_t.clone(),
            _ => {
                return Err(shape_err!(
                    "expected [B, H, W, C] or [H, W, C], got {in_shape:?}"
                ))
            }
        };
        let &[b, h, w, c] = x4.shape() else { unreachable!() };
        if c != cfg.in_channels {
            return Err(shape_err!("expected {} channels, got {c}", cfg.in_channels));
        }
        if h % cfg.patch != 0 || w % cfg.patch != 0 {
            return Err(shape_err!(
                "resolution {h}x{w} is not divisible by the patch size {}",
                cfg.patch
            ));
        }
        if times.len() != b || labels.len() != b {
            return Err(Error::Argument(format!(
                "batch of {b} needs {b} times and labels, got {} and {}",
                times.len(),
                labels.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::Numeric(format!("time {t} is not finite")));
        }
        x4.check_finite("model input")?;
        let label_rows = labels
            .iter()
            .map(|l| l.row(cfg.num_classes))
            .collect::<Result<Vec<_>>>()?;

        let d = cfg.hidden;
        let patches = patchify(&x4, cfg.patch)?;
        let mut hcur = matmul_affine(&patches, &self.patch_embed)?;

        let temb = timestep_embedding(times, cfg.freq_dim);
        let t_hidden = matmul_affine(&temb, &self.time_mlp1)?;
        let t_act = silu(&t_hidden);
        let mut cond = matmul_affine(&t_act, &self.time_mlp2)?;
        for (row, &l) in cond.data_mut().chunks_exact_mut(d).zip(&label_rows) {
            for (a, &e) in row.iter_mut().zip(self.label_embed.row(l)) {
                *a += e;
            }
        }
        let silu_cond = silu(&cond);

        let mut caches = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (next, cache) = block_forward(blk, &hcur, &silu_cond, adjust)?;
            hcur = next;
            caches.push(cache);
        }

        let final_normed = rms_norm(&hcur, &self.final_norm, RMS_EPS)?;
        let final_mods = matmul_affine(&silu_cond, &self.final_ada)?;
        let final_modulated = modulate(&final_normed, &final_mods, 0, 1);
        let tokens = matmul_affine(&final_modulated, &self.final_proj)?;
        let out = unpatchify(&tokens, cfg.patch, c)?;
        out.check_finite("model output")?;
        let out = out.reshape(&in_shape)?;
        Ok((
            out,
            ModelTape {
                in_shape,
                patches,
                temb,
                t_hidden,
                t_act,
                label_rows,
                cond,
                silu_cond,
                blocks: caches,
                final_in: hcur,
                final_normed,
                final_mods,
                final_modulated,
            },
        ))
    }

    /// Adds parameter gradients into `grad` and returns `dL/dx_t`.
    pub fn backward(&self, tape: &ModelTape, dout: &Tensor, grad: &mut Model) -> Result<Tensor> {
        if dout.shape() != tape.in_shape.as_slice() || tape.blocks.len() != self.blocks.len() {
            return Err(Error::State(format!(
                "model backward: upstream {:?} does not match the recorded pass {:?}",
                dout.shape(),
                tape.in_shape
            )));
        }
        let cfg = &self.config;
        let c = cfg.in_channels;
        let d = cfg.hidden;
        let dout4 = if dout.shape().len() == 3 {
            dout.clone().reshape(&[1, dout.shape()[0], dout.shape()[1], c])?
        } else {
            dout.clone()
        };
        let dtokens = patchify(&dout4, cfg.patch)?;
        let dmod = matmul_affine_backward(
            &tape.final_modulated,
            &self.final_proj,
            &dtokens,
            &mut grad.final_proj,
        )?;
        let mut dfm = Tensor::zeros(tape.final_mods.shape());
        let dnormed = modulate_backward(&tape.final_normed, &tape.final_mods, 0, 1, &dmod, &mut dfm);
        let mut dh = rms_norm_backward(
            &tape.final_in,
            &self.final_norm,
            RMS_EPS,
            &dnormed,
            &mut grad.final_norm,
        )?;
        let mut dsilu =
            matmul_affine_backward(&tape.silu_cond, &self.final_ada, &dfm, &mut grad.final_ada)?;

        for ((blk, cache), gblk) in self
            .blocks
            .iter()
            .zip(&tape.blocks)
            .zip(grad.blocks.iter_mut())
            .rev()
        {
            let (dx, ds) = block_backward(blk, cache, &dh, gblk)?;
            dh = dx;
            dsilu.add_assign(&ds)?;
        }

        let dcond = silu_backward(&tape.cond, &dsilu)?;
        for (row, &l) in dcond.data().chunks_exact(d).zip(&tape.label_rows) {
            let dst = &mut grad.label_embed.data_mut()[l * d..(l + 1) * d];
            for (a, &g) in dst.iter_mut().zip(row) {
                *a += g;
            }
        }
        let dact = matmul_affine_backward(&tape.t_act, &self.time_mlp2, &dcond, &mut grad.time_mlp2)?;
        let dth = silu_backward(&tape.t_hidden, &dact)?;
        matmul_affine_backward(&tape.temb, &self.time_mlp1, &dth, &mut grad.time_mlp1)?;

        let dpatches =
            matmul_affine_backward(&tape.patches, &self.patch_embed, &dh, &mut grad.patch_embed)?;
        unpatchify(&dpatches, cfg.patch, c)?.reshape(&tape.in_shape)
    }
}

impl ParamSet for Model {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = nest("patch_embed", self.patch_embed.named_tensors());
        v.extend(nest("time_mlp1", self.time_mlp1.named_tensors()));
        v.extend(nest("time_mlp2", self.time_mlp2.named_tensors()));
        v.push(("label_embed".into(), &self.label_embed));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(nest(&format!("blocks.{i}"), b.named_tensors()));
        }
        v.push(("final_norm".into(), &self.final_norm));
        v.extend(nest("final_ada", self.final_ada.named_tensors()));
        v.extend(nest("final_proj", self.final_proj.named_tensors()));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = nest("patch_embed", self.patch_embed.named_tensors_mut());
        v.extend(nest("time_mlp1", self.time_mlp1.named_tensors_mut()));
        v.extend(nest("time_mlp2", self.time_mlp2.named_tensors_mut()));
        v.push(("label_embed".into(), &mut self.label_embed));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(nest(&format!("blocks.{i}"), b.named_tensors_mut()));
        }
        v.push(("final_norm".into(), &mut self.final_norm));
        v.extend(nest("final_ada", self.final_ada.named_tensors_mut()));
        v.extend(nest("final_proj", self.final_proj.named_tensors_mut()));
        v
    }
}

#[cfg(test)]
mod tests;
