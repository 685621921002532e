//! Euler ODE and Euler-Maruyama SDE integration of a velocity field from noise
//! (`t = 0`) to data (`t = 1`), with classifier-free guidance on the velocity.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::msdcn::{smax_adjust, ScaleAdjust};
use crate::network::{Label, Model};
use crate::rng::{stream, tag, Rng};
use crate::tensor::Tensor;

/// Stochastic steps stop once `t >= 1 - DELTA`.
pub const DELTA: f64 = 1e-3;
/// Samples integrated together in one model call.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    EulerOde,
    EulerMaruyama,
}

impl Solver {
    pub fn default_steps(self) -> usize {
        match self {
            Solver::EulerOde => 50,
            Solver::EulerMaruyama => 250,
        }
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler_ode" | "ode" => Ok(Solver::EulerOde),
            "euler_maruyama" | "sde" => Ok(Solver::EulerMaruyama),
            _ => Err(Error::Argument(format!(
                "unknown solver '{s}' (expected euler_ode or euler_maruyama)"
            ))),
        }
    }
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::EulerOde => "euler_ode",
            Solver::EulerMaruyama => "euler_maruyama",
        })
    }
}

/// Diffusion coefficient `w_t` of the SDE.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diffusion {
    /// `w_t = 1 - t`
    Linear,
    /// `w_t = 0`; the drift reduces to the velocity and the path is the ODE path.
    Zero,
}

impl Diffusion {
    fn at(self, t: f64) -> f64 {
        match self {
            Diffusion::Linear => 1.0 - t,
            Diffusion::Zero => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSpec {
    pub solver: Solver,
    pub steps: usize,
    pub cfg_scale: f64,
    pub height: usize,
    pub width: usize,
    /// Stretch every layer's scale by the test/train resolution ratio.
    pub smax_adjust: bool,
    pub seed: u64,
    pub label: Label,
    pub count: usize,
}

impl SampleSpec {
    pub fn validate(&self) -> Result<()> {
        let min_steps = match self.solver {
            Solver::EulerOde => 1,
            Solver::EulerMaruyama => 2,
        };
        if self.steps < min_steps {
            return Err(Error::Argument(format!(
                "{} needs at least {min_steps} steps, got {}",
                self.solver, self.steps
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::Argument(format!(
                "cfg scale must be non-negative, got {}",
                self.cfg_scale
            )));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::Argument("target resolution must be positive".into()));
        }
        Ok(())
    }
}

/// `v_u + w (v_c - v_u)`; `w = 1` returns `v_c` and `w = 0` returns `v_u` as is.
pub fn cfg_velocity(v_cond: &Tensor, v_uncond: &Tensor, w: f64) -> Result<Tensor> {
    v_cond.expect_same_shape(v_uncond)?;
    if w == 1.0 {
        return Ok(v_cond.clone());
    }
    if w == 0.0 {
        return Ok(v_uncond.clone());
    }
    v_cond.zip_map(v_uncond, |c, u| u + w * (c - u))
}

/// `(t v - x_t) / (1 - t)`, the score of the marginal at time `t`.
pub fn score_from_velocity(x_t: &Tensor, v: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..1.0 - DELTA).contains(&t) {
        return Err(Error::Argument(format!(
            "score is only defined for t in [0, {}), got {t}",
            1.0 - DELTA
        )));
    }
    x_t.zip_map(v, |x, v| (t * v - x) / (1.0 - t))
}

/// Anything that predicts a velocity for a batch at a shared time.
pub trait VelocityField: Sync {
    fn velocity(&self, x: &Tensor, t: f64, labels: &[Label]) -> Result<Tensor>;
}

/// A trained model with optional guidance and scale adjustment.
pub struct GuidedModel<'a> {
    pub model: &'a Model,
    pub cfg_scale: f64,
    pub adjust: ScaleAdjust,
}

impl VelocityField for GuidedModel<'_> {
    fn velocity(&self, x: &Tensor, t: f64, labels: &[Label]) -> Result<Tensor> {
        let b = labels.len();
        let times = vec![t; b];
        let guided = self.cfg_scale != 1.0 && labels.iter().any(|l| *l != Label::Null);
        if !guided {
            return self.model.forward(x, &times, labels, self.adjust);
        }
        // Conditional and unconditional halves in one call.
        let both = Tensor::stack(&[x.clone(), x.clone()])?;
        let shape: Vec<usize> = std::iter::once(2 * b).chain(x.shape()[1..].iter().copied()).collect();
        let both = both.reshape(&shape)?;
        let mut all_labels = labels.to_vec();
        all_labels.extend(std::iter::repeat(Label::Null).take(b));
        let times2 = vec![t; 2 * b];
        let v = self.model.forward(&both, &times2, &all_labels, self.adjust)?;
        let half = v.len() / 2;
        let vc = Tensor::new(x.shape().to_vec(), v.data()[..half].to_vec())?;
        let vu = Tensor::new(x.shape().to_vec(), v.data()[half..].to_vec())?;
        cfg_velocity(&vc, &vu, self.cfg_scale)
    }
}

fn check_state(x: &Tensor, step: usize) -> Result<()> {
    if !x.all_finite() {
        return Err(Error::Numeric(format!("sampler state is not finite at step {step}")));
    }
    Ok(())
}

/// `x_{k+1} = x_k + dt v(x_k, k/N)` on the uniform grid.
pub fn euler_ode(
    field: &dyn VelocityField,
    x0: &Tensor,
    labels: &[Label],
    steps: usize,
) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::Argument("euler_ode needs at least 1 step".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field.velocity(&x, t, labels)?;
        x.axpy(dt, &v)?;
        check_state(&x, k)?;
    }
    Ok(x)
}

/// Euler-Maruyama for `dX = (v + w_t s) dt + sqrt(2 w_t) dW` on the uniform grid.
///
/// `rngs[i]` drives sample `i` (the leading axis of `x0`); each step draws one
/// normal per element whether or not it is used, so paths under different
/// diffusion schedules share their noise. The last step, and any step with
/// `t >= 1 - DELTA`, is a plain Euler step.
pub fn euler_maruyama(
    field: &dyn VelocityField,
    x0: &Tensor,
    labels: &[Label],
    steps: usize,
    diffusion: Diffusion,
    rngs: &mut [Rng],
) -> Result<Tensor> {
    if steps < 2 {
        return Err(Error::Argument("euler_maruyama needs at least 2 steps".into()));
    }
    let n = x0.shape().first().copied().unwrap_or(0);
    if rngs.len() != n {
        return Err(Error::Argument(format!("{n} samples but {} noise streams", rngs.len())));
    }
    let per = x0.len() / n.max(1);
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    let mut z = vec![0.0; x.len()];
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field.velocity(&x, t, labels)?;
        for (chunk, rng) in z.chunks_mut(per).zip(rngs.iter_mut()) {
            for e in chunk.iter_mut() {
                *e = StandardNormal.sample(rng);
            }
        }
        let w = diffusion.at(t);
        if k + 1 == steps || t >= 1.0 - DELTA || w == 0.0 {
            x.axpy(dt, &v)?;
        } else {
            let s = score_from_velocity(&x, &v, t)?;
            let amp = (2.0 * w * dt).sqrt();
            for (((xv, &vv), &sv), &zv) in x
                .data_mut()
                .iter_mut()
                .zip(v.data())
                .zip(s.data())
                .zip(&z)
            {
                *xv += (vv + w * sv) * dt + amp * zv;
            }
        }
        check_state(&x, k)?;
    }
    Ok(x)
}

/// Initial noise and the per-sample stream that continues from it.
pub fn sample_stream(seed: u64, index: usize, shape: &[usize]) -> (Tensor, Rng) {
    let mut rng = stream(seed, &[tag::SAMPLE, index as u64]);
    let x = Tensor::randn(shape, 1.0, &mut rng);
    (x, rng)
}

/// Draws `spec.count` images of `[H, W, C]`; returns `[count, H, W, C]`.
///
/// Chunks run on the rayon pool; every sample owns its noise stream, so the
/// result is independent of chunking and thread count.
pub fn sample(model: &Model, spec: &SampleSpec) -> Result<Tensor> {
    spec.validate()?;
    let cfg = &model.config;
    if spec.height % cfg.patch != 0 || spec.width % cfg.patch != 0 {
        return Err(Error::Argument(format!(
            "resolution {}x{} is not divisible by the patch size {}",
            spec.height, spec.width, cfg.patch
        )));
    }
    let adjust = if spec.smax_adjust {
        smax_adjust(cfg.train_size, (spec.height, spec.width))?
    } else {
        ScaleAdjust::IDENTITY
    };
    let field = GuidedModel {
        model,
        cfg_scale: spec.cfg_scale,
        adjust,
    };
    let img_shape = [spec.height, spec.width, cfg.in_channels];
    let starts: Vec<usize> = (0..spec.count).step_by(CHUNK).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK).min(spec.count);
            let (xs, mut rngs): (Vec<Tensor>, Vec<Rng>) = (start..end)
                .map(|i| sample_stream(spec.seed, i, &img_shape))
                .unzip();
            let x0 = Tensor::stack(&xs)?;
            let labels = vec![spec.label; end - start];
            match spec.solver {
                Solver::EulerOde => euler_ode(&field, &x0, &labels, spec.steps),
                Solver::EulerMaruyama => euler_maruyama(
                    &field,
                    &x0,
                    &labels,
                    spec.steps,
                    Diffusion::Linear,
                    &mut rngs,
                ),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut data = Vec::with_capacity(spec.count * img_shape.iter().product::<usize>());
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::new(
        vec![spec.count, spec.height, spec.width, cfg.in_channels],
        data,
    )
}

/// Velocity of the conditional flow towards a single point `x*`:
/// `v(x, t) = (x* - x) / (1 - t)`.
pub struct PointTarget {
    pub target: Vec<f64>,
}

impl VelocityField for PointTarget {
    fn velocity(&self, x: &Tensor, t: f64, _labels: &[Label]) -> Result<Tensor> {
        let d = self.target.len();
        if x.len() % d != 0 {
            return Err(Error::Shape(format!(
                "state of {} values is not a batch of {d}-vectors",
                x.len()
            )));
        }
        let mut v = x.clone();
        for row in v.data_mut().chunks_exact_mut(d) {
            for (a, &g) in row.iter_mut().zip(&self.target) {
                *a = (g - *a) / (1.0 - t);
            }
        }
        Ok(v)
    }
}
