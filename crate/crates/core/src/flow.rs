//! Linear flow matching: `x_t = t x + (1 - t) eps`, target velocity `x - eps`,
//! mean-squared regression, trained with Adam at a constant learning rate.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::msdcn::ScaleAdjust;
use crate::network::{Label, Model};
use crate::rng::{stream, tag};
use crate::tensor::{ParamSet, Tensor};

/// Training times are drawn from `[0, T_MAX)`.
pub const T_MAX: f64 = 1.0 - 1e-5;

pub fn interpolate(x: &Tensor, eps: &Tensor, t: f64) -> Result<Tensor> {
    x.zip_map(eps, |a, e| t * a + (1.0 - t) * e)
}

/// Per-sample times along the leading axis.
pub fn interpolate_batch(x: &Tensor, eps: &Tensor, times: &[f64]) -> Result<Tensor> {
    x.expect_same_shape(eps)?;
    let n = x.shape().first().copied().unwrap_or(0);
    if times.len() != n {
        return Err(Error::Argument(format!("{n} samples but {} times", times.len())));
    }
    let per = x.len() / n.max(1);
    let mut out = x.clone();
    for ((chunk, e), &t) in out
        .data_mut()
        .chunks_mut(per)
        .zip(eps.data().chunks(per))
        .zip(times)
    {
        for (a, &ev) in chunk.iter_mut().zip(e) {
            *a = t * *a + (1.0 - t) * ev;
        }
    }
    Ok(out)
}

pub fn target_velocity(x: &Tensor, eps: &Tensor) -> Result<Tensor> {
    x.sub(eps)
}

/// Mean squared error over all elements.
pub fn fm_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    pred.expect_same_shape(target)?;
    let n = pred.len().max(1) as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

pub fn fm_loss_grad(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    let n = pred.len().max(1) as f64;
    pred.zip_map(target, |a, b| 2.0 * (a - b) / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Probability of replacing a label with the null label.
    pub label_dropout: f64,
    /// Write a log line every this many steps (0 disables logging).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 32,
            steps: 1000,
            seed: 0,
            label_dropout: 0.1,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            bad.push(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            bad.push("Adam betas must lie in [0, 1)".to_string());
        }
        if !(self.adam_eps > 0.0) {
            bad.push("adam_eps must be positive".into());
        }
        if self.batch_size == 0 {
            bad.push("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.label_dropout) {
            bad.push("label_dropout must lie in [0, 1]".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Adam without weight decay or clipping. Moments follow the parameter order of
/// [`ParamSet::named_tensors`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &impl ParamSet, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .named_tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut impl ParamSet, grads: &impl ParamSet) -> Result<()> {
        let grads = grads.named_tensors();
        let mut params = params.named_tensors_mut();
        if grads.len() != params.len() || params.len() != self.m.len() {
            return Err(Error::State(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, ((_, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != p.len() {
                return Err(Error::State(format!("gradient {i} has the wrong size")));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One minibatch of the flow-matching objective.
#[derive(Debug, Clone)]
pub struct FlowBatch {
    pub x: Tensor,
    pub eps: Tensor,
    pub times: Vec<f64>,
    pub labels: Vec<Label>,
}

impl FlowBatch {
    /// Draws batch `step` from counter-based streams keyed on `(seed, step)`, so
    /// the batch does not depend on anything that happened before.
    pub fn draw(data: &Dataset, cfg: &TrainConfig, step: u64) -> Result<Self> {
        let n = data.len();
        if n == 0 {
            return Err(Error::Argument("cannot train on an empty dataset".into()));
        }
        let b = cfg.batch_size;
        let mut pick = stream(cfg.seed, &[tag::BATCH, step]);
        let idx: Vec<usize> = (0..b).map(|_| pick.gen_range(0..n)).collect();
        let x = data.gather(&idx)?;
        let mut noise = stream(cfg.seed, &[tag::NOISE, step]);
        let eps = Tensor::new(
            x.shape().to_vec(),
            (0..x.len())
                .map(|_| StandardNormal.sample(&mut noise))
                .collect(),
        )?;
        let mut trng = stream(cfg.seed, &[tag::TIME, step]);
        let times = (0..b).map(|_| trng.gen_range(0.0..T_MAX)).collect();
        let mut drop = stream(cfg.seed, &[tag::DROPOUT, step]);
        let labels = idx
            .iter()
            .map(|&i| {
                let keep = drop.gen::<f64>() >= cfg.label_dropout;
                match data.label(i) {
                    Some(c) if keep => Label::Class(c),
                    _ => Label::Null,
                }
            })
            .collect();
        Ok(Self {
            x,
            eps,
            times,
            labels,
        })
    }
}

/// Model plus optimizer state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub adam: Adam,
    pub step: u64,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&model, &config);
        Ok(Self {
            model,
            config,
            adam,
            step: 0,
        })
    }

    /// Loss and gradients of one batch without touching the parameters.
    pub fn loss_and_grad(&self, batch: &FlowBatch) -> Result<(f64, Model)> {
        let x_t = interpolate_batch(&batch.x, &batch.eps, &batch.times)?;
        let target = target_velocity(&batch.x, &batch.eps)?;
        let (pred, tape) =
            self.model
                .forward_train(&x_t, &batch.times, &batch.labels, ScaleAdjust::IDENTITY)?;
        let loss = fm_loss(&pred, &target)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {loss} at step {}",
                self.step
            )));
        }
        let dpred = fm_loss_grad(&pred, &target)?;
        let mut grads = self.model.zeros_like();
        self.model.backward(&tape, &dpred, &mut grads)?;
        Ok((loss, grads))
    }

    /// One Adam update; returns the batch loss before the update.
    pub fn train_step(&mut self, batch: &FlowBatch) -> Result<f64> {
        let (loss, grads) = self.loss_and_grad(batch)?;
        self.adam.step(&mut self.model, &grads)?;
        self.step += 1;
        Ok(loss)
    }

    /// Runs the remaining configured steps and returns every batch loss. Writes
    /// `step loss wallclock_ms` lines to `log`.
    pub fn run(&mut self, data: &Dataset, mut log: Option<&mut dyn Write>) -> Result<Vec<f64>> {
        let start = Instant::now();
        let mut losses = Vec::with_capacity(self.config.steps);
        while (self.step as usize) < self.config.steps {
            let batch = FlowBatch::draw(data, &self.config, self.step)?;
            let loss = self.train_step(&batch)?;
            losses.push(loss);
            let every = self.config.log_every;
            if let Some(out) = log.as_deref_mut() {
                if every > 0 && (self.step as usize % every == 0 || self.step as usize == self.config.steps) {
                    writeln!(
                        out,
                        "{} {:.6e} {}",
                        self.step,
                        loss,
                        start.elapsed().as_millis()
                    )?;
                }
            }
        }
        Ok(losses)
    }
}

/// Means of consecutive non-overlapping windows.
pub fn window_means(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks_exact(window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, DatasetKind};
    use crate::network::ModelConfig;
    use proptest::prelude::*;

    #[test]
    fn interpolation_examples() {
        let x = Tensor::from_vec(vec![2.0, -1.0]);
        let e = Tensor::from_vec(vec![0.0, 3.0]);
        assert_eq!(interpolate(&x, &e, 0.0).unwrap(), e);
        assert_eq!(interpolate(&x, &e, 1.0).unwrap(), x);
        assert_eq!(interpolate(&x, &e, 0.5).unwrap().data()[0], 1.0);
        assert!(interpolate(&x, &Tensor::zeros(&[3]), 0.5).is_err());
    }

    #[test]
    fn velocity_examples() {
        let v = target_velocity(&Tensor::scalar(3.0), &Tensor::scalar(1.0)).unwrap();
        assert_eq!(v.data(), &[2.0]);
        let x = Tensor::from_vec(vec![0.3, -2.0]);
        assert!(target_velocity(&x, &x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn loss_examples() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(fm_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(fm_loss(&a.map(|v| v + 1.0), &a).unwrap(), 1.0);
        let mut rng = stream(1, &[]);
        let p = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let q = Tensor::randn(&[7, 3], 1.0, &mut rng);
        let mut naive = 0.0;
        for i in 0..21 {
            naive += (p.data()[i] - q.data()[i]).powi(2);
        }
        assert!((fm_loss(&p, &q).unwrap() - naive / 21.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn reconstruction_identities(x in -5.0f64..5.0, e in -5.0f64..5.0, t in 0.0f64..1.0) {
            let (xs, es) = (Tensor::scalar(x), Tensor::scalar(e));
            let xt = interpolate(&xs, &es, t).unwrap().data()[0];
            let v = target_velocity(&xs, &es).unwrap().data()[0];
            prop_assert!((xt + (1.0 - t) * v - x).abs() < 1e-12);
            prop_assert!((xt - t * v - e).abs() < 1e-12);
        }
    }

    fn single_point() -> Dataset {
        Dataset::new(
            DatasetKind::Custom,
            Tensor::new(vec![1, 4, 4, 2], (0..32).map(|i| ((i % 5) as f64 - 2.0) / 2.0).collect())
                .unwrap(),
            vec![Some(1)],
            3,
        )
        .unwrap()
    }

    fn tiny_trainer(lr: f64, steps: usize) -> Trainer {
        let model = Model::init(&ModelConfig::tiny_for_tests(), 5).unwrap();
        Trainer::new(
            model,
            TrainConfig {
                lr,
                steps,
                batch_size: 16,
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let data = single_point();
        let mut tr = tiny_trainer(0.0, 3);
        let before = tr.model.clone();
        tr.run(&data, None).unwrap();
        assert_eq!(tr.model, before);
    }

    #[test]
    fn training_is_deterministic() {
        let data = single_point();
        let mut a = tiny_trainer(1e-3, 20);
        let mut b = tiny_trainer(1e-3, 20);
        let la = a.run(&data, None).unwrap();
        let lb = b.run(&data, None).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn loss_decreases_on_single_datapoint() {
        let data = single_point();
        let mut tr = tiny_trainer(1e-4, 2000);
        tr.config.batch_size = 64;
        let losses = tr.run(&data, None).unwrap();
        let early: f64 = losses[..10].iter().sum::<f64>() / 10.0;
        let late: f64 = losses[490..500].iter().sum::<f64>() / 10.0;
        assert!(late < early, "{late} vs {early}");
        let means = window_means(&losses, 100);
        for w in means.windows(2) {
            assert!(w[1] < w[0], "window means not decreasing: {means:?}");
        }
    }

    #[test]
    fn log_lines_have_three_fields() {
        let data = single_point();
        let mut tr = tiny_trainer(1e-3, 4);
        tr.config.log_every = 2;
        let mut buf = Vec::new();
        tr.run(&data, Some(&mut buf)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        for l in lines {
            let f: Vec<&str> = l.split(' ').collect();
            assert_eq!(f.len(), 3);
            assert!(f[1].parse::<f64>().unwrap() > 0.0);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = crate::tensor::LinearParams::zeros(1, 2);
        let mut g = p.zeros_like();
        g.weight.data_mut().copy_from_slice(&[3.0, -0.5]);
        let cfg = TrainConfig {
            lr: 0.1,
            ..Default::default()
        };
        let mut opt = Adam::new(&p, &cfg);
        opt.step(&mut p, &g).unwrap();
        assert!((p.weight.data()[0] + 0.1).abs() < 1e-8);
        assert!((p.weight.data()[1] - 0.1).abs() < 1e-8);
        assert_eq!(p.bias.data(), &[0.0, 0.0]);
    }
}
