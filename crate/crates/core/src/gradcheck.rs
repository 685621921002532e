//! Central finite-difference checks of the hand-written backward passes.
//!
//! Every check contracts the operator output with a fixed random tensor `r`,
//! `L = sum(r * y)`, compares the analytic `dL/dtheta` against
//! `(L(theta + h) - L(theta - h)) / 2h` elementwise and reports the worst
//! relative error per parameter group.

use rand::Rng;

use crate::error::Result;
use crate::msdcn::{
    msdcn_backward, msdcn_forward_saved, MsDcnOptions, MsDcnParams, ScaleAdjust,
};
use crate::network::{Label, Model, ModelConfig};
use crate::rng::stream;
use crate::tensor::{
    matmul_affine, matmul_affine_backward, mul_backward, rms_norm, rms_norm_backward, sigmoid,
    sigmoid_backward, silu, silu_backward, softmax_rows, softmax_rows_backward, swiglu,
    swiglu_backward, LinearParams, ParamSet, SwigluParams, Tensor,
};

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero up to
/// rounding do not divide by zero.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` with respect to every element of `x0`.
pub fn numeric_grad(x0: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + STEP;
            let up = f(&x);
            x[i] = orig - STEP;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn contract(r: &Tensor, y: &Tensor) -> f64 {
    r.data().iter().zip(y.data()).map(|(a, b)| a * b).sum()
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub group: String,
    pub checked: usize,
    pub worst_rel: f64,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub scope: String,
    pub threshold: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradReport {
    fn new(scope: &str, threshold: f64) -> Self {
        Self {
            scope: scope.into(),
            threshold,
            entries: Vec::new(),
        }
    }

    fn record(&mut self, group: impl Into<String>, analytic: &[f64], numeric: &[f64]) {
        let worst = analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| rel_err(a, n))
            .fold(0.0, f64::max);
        let group = group.into();
        match self.entries.iter_mut().find(|e| e.group == group) {
            Some(e) => {
                e.checked += analytic.len();
                e.worst_rel = e.worst_rel.max(worst);
            }
            None => self.entries.push(GradCheckEntry {
                group,
                checked: analytic.len(),
                worst_rel: worst,
            }),
        }
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.worst_rel).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.worst_rel < self.threshold)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{:<12} {:<36} n={:<5} worst_rel={:.3e} {}\n",
                self.scope,
                e.group,
                e.checked,
                e.worst_rel,
                if e.worst_rel < self.threshold { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "{} worst={:.3e} threshold={:.0e} {}\n",
            self.scope,
            self.worst(),
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn rand_linear(i: usize, o: usize, rng: &mut impl Rng) -> LinearParams {
    LinearParams {
        weight: rand_tensor(&[i, o], rng),
        bias: rand_tensor(&[o], rng),
    }
}

fn check_linear_like(
    report: &mut GradReport,
    prefix: &str,
    p: &LinearParams,
    g: &LinearParams,
    loss: impl Fn(&LinearParams) -> f64,
) {
    let nw = numeric_grad(p.weight.data(), |w| {
        let mut q = p.clone();
        q.weight.data_mut().copy_from_slice(w);
        loss(&q)
    });
    report.record(format!("{prefix}.weight"), g.weight.data(), &nw);
    let nb = numeric_grad(p.bias.data(), |b| {
        let mut q = p.clone();
        q.bias.data_mut().copy_from_slice(b);
        loss(&q)
    });
    report.record(format!("{prefix}.bias"), g.bias.data(), &nb);
}

/// Every primitive of the tensor module; threshold 1e-5.
pub fn check_primitives(seed: u64) -> Result<GradReport> {
    let mut rng = stream(seed, &[0x9c]);
    let mut report = GradReport::new("primitives", 1e-5);

    // affine
    let x = rand_tensor(&[3, 4], &mut rng);
    let p = rand_linear(4, 2, &mut rng);
    let r = rand_tensor(&[3, 2], &mut rng);
    let loss = |x: &Tensor, p: &LinearParams| contract(&r, &matmul_affine(x, p).unwrap());
    let mut g = p.zeros_like();
    let dx = matmul_affine_backward(&x, &p, &r, &mut g)?;
    let nx = numeric_grad(x.data(), |v| {
        loss(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &p)
    });
    report.record("affine.x", dx.data(), &nx);
    check_linear_like(&mut report, "affine", &p, &g, |q| loss(&x, q));

    // rms_norm
    let x = rand_tensor(&[3, 5], &mut rng);
    let gain = rand_tensor(&[5], &mut rng);
    let r = rand_tensor(&[3, 5], &mut rng);
    let eps = crate::tensor::RMS_EPS;
    let mut dgain = Tensor::zeros(&[5]);
    let dx = rms_norm_backward(&x, &gain, eps, &r, &mut dgain)?;
    let nx = numeric_grad(x.data(), |v| {
        let xt = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
        contract(&r, &rms_norm(&xt, &gain, eps).unwrap())
    });
    report.record("rms_norm.x", dx.data(), &nx);
    let ng = numeric_grad(gain.data(), |v| {
        contract(&r, &rms_norm(&x, &Tensor::from_vec(v.to_vec()), eps).unwrap())
    });
    report.record("rms_norm.gain", dgain.data(), &ng);

    // swiglu
    let x = rand_tensor(&[3, 4], &mut rng);
    let sp = SwigluParams {
        gate: rand_linear(4, 6, &mut rng),
        up: rand_linear(4, 6, &mut rng),
        down: rand_linear(6, 4, &mut rng),
    };
    let r = rand_tensor(&[3, 4], &mut rng);
    let sloss = |x: &Tensor, p: &SwigluParams| contract(&r, &swiglu(x, p).unwrap().0);
    let (_, cache) = swiglu(&x, &sp)?;
    let mut sg = sp.zeros_like();
    let dx = swiglu_backward(&cache, &sp, &r, &mut sg)?;
    let nx = numeric_grad(x.data(), |v| {
        sloss(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &sp)
    });
    report.record("swiglu.x", dx.data(), &nx);
    check_linear_like(&mut report, "swiglu.gate", &sp.gate, &sg.gate, |q| {
        sloss(&x, &SwigluParams { gate: q.clone(), ..sp.clone() })
    });
    check_linear_like(&mut report, "swiglu.up", &sp.up, &sg.up, |q| {
        sloss(&x, &SwigluParams { up: q.clone(), ..sp.clone() })
    });
    check_linear_like(&mut report, "swiglu.down", &sp.down, &sg.down, |q| {
        sloss(&x, &SwigluParams { down: q.clone(), ..sp.clone() })
    });

    // elementwise and softmax
    let x = rand_tensor(&[2, 5], &mut rng).scale(3.0);
    let r = rand_tensor(&[2, 5], &mut rng);
    let shape = x.shape().to_vec();
    let unary: [(&str, fn(&Tensor) -> Tensor); 3] =
        [("sigmoid", sigmoid), ("silu", silu), ("softmax", softmax_rows)];
    for (name, f) in unary {
        let y = f(&x);
        let dx = match name {
            "sigmoid" => sigmoid_backward(&y, &r)?,
            "silu" => silu_backward(&x, &r)?,
            _ => softmax_rows_backward(&y, &r)?,
        };
        let nx = numeric_grad(x.data(), |v| {
            contract(&r, &f(&Tensor::new(shape.clone(), v.to_vec()).unwrap()))
        });
        report.record(format!("{name}.x"), dx.data(), &nx);
    }
    let b = rand_tensor(&[2, 5], &mut rng);
    let (da, db) = mul_backward(&x, &b, &r)?;
    let na = numeric_grad(x.data(), |v| {
        contract(&r, &Tensor::new(shape.clone(), v.to_vec()).unwrap().mul(&b).unwrap())
    });
    let nb = numeric_grad(b.data(), |v| {
        contract(&r, &x.mul(&Tensor::new(shape.clone(), v.to_vec()).unwrap()).unwrap())
    });
    report.record("mul.a", da.data(), &na);
    report.record("mul.b", db.data(), &nb);
    Ok(report)
}

/// Random layer with non-trivial offsets and scale projection.
pub fn random_msdcn(
    channels: usize,
    groups: usize,
    points: usize,
    options: MsDcnOptions,
    rng: &mut impl Rng,
) -> Result<MsDcnParams> {
    let mut p = MsDcnParams::init(channels, groups, points, 1.0, options, rng)?;
    p.proj_weight = LinearParams {
        weight: rand_tensor(&[channels, groups * points], rng),
        bias: rand_tensor(&[groups * points], rng),
    };
    p.proj_offset = LinearParams {
        weight: rand_tensor(&[channels, groups * points * 2], rng).scale(0.5),
        bias: rand_tensor(&[groups * points * 2], rng).scale(0.5),
    };
    p.proj_scale = LinearParams {
        weight: rand_tensor(&[channels, groups], rng),
        bias: rand_tensor(&[groups], rng),
    };
    p.s_max = rng.gen_range(1.0..3.0);
    let pert = rand_tensor(p.direction_prior.shape(), rng).scale(0.1);
    p.direction_prior.add_assign(&pert)?;
    Ok(p)
}

/// Smallest distance of any sampling coordinate to an integer lattice line.
pub fn lattice_margin(positions: &[[f64; 2]]) -> f64 {
    positions
        .iter()
        .flat_map(|q| q.iter())
        .map(|&v| (v - v.round()).abs())
        .fold(f64::INFINITY, f64::min)
}

fn check_msdcn_case(
    report: &mut GradReport,
    label: &str,
    options: MsDcnOptions,
    adjust: ScaleAdjust,
    seed: u64,
) -> Result<()> {
    let (h, w, d, g, k) = (5, 5, 4, 2, 9);
    // Resample until every position keeps 1e-3 away from the lattice lines.
    let (x, p) = (0..)
        .map(|attempt| {
            let mut rng = stream(seed, &[0xdc, attempt]);
            let p = random_msdcn(d, g, k, options, &mut rng).unwrap();
            let x = rand_tensor(&[h, w, d], &mut rng);
            (x, p)
        })
        .find(|(x, p)| {
            let (_, st) = msdcn_forward_saved(x, p, adjust).unwrap();
            lattice_margin(&st.plan.positions) >= 1e-3
        })
        .expect("unbounded search");
    let mut rng = stream(seed, &[0xdd]);
    let r = rand_tensor(&[h, w, d], &mut rng);
    let loss = |x: &Tensor, p: &MsDcnParams| {
        contract(&r, &msdcn_forward_saved(x, p, adjust).unwrap().0)
    };
    let (_, state) = msdcn_forward_saved(&x, &p, adjust)?;
    let mut grad = p.zeros_like();
    let dx = msdcn_backward(&state, &p, &r, &mut grad)?;
    let nx = numeric_grad(x.data(), |v| {
        loss(&Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap(), &p)
    });
    report.record(format!("{label}.x"), dx.data(), &nx);

    let names: Vec<String> = p.named_tensors().into_iter().map(|(n, _)| n).collect();
    let analytic: Vec<Vec<f64>> = grad
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.data().to_vec())
        .collect();
    for (ti, name) in names.iter().enumerate() {
        if name == "direction_prior" && !options.learn_direction_prior {
            continue;
        }
        if name.starts_with("proj_scale") && !options.learn_relative_scale {
            continue;
        }
        let base = p.named_tensors()[ti].1.data().to_vec();
        let num = numeric_grad(&base, |v| {
            let mut q = p.clone();
            q.named_tensors_mut()[ti].1.data_mut().copy_from_slice(v);
            loss(&x, &q)
        });
        report.record(format!("{label}.{name}"), &analytic[ti], &num);
    }
    Ok(())
}

/// Deformable layer input and parameter gradients; threshold 1e-4.
pub fn check_msdcn(seed: u64) -> Result<GradReport> {
    let mut report = GradReport::new("msdcn", 1e-4);
    let base = MsDcnOptions::default();
    check_msdcn_case(&mut report, "default", base, ScaleAdjust::IDENTITY, seed)?;
    check_msdcn_case(
        &mut report,
        "softmax",
        MsDcnOptions {
            softmax_weights: true,
            ..base
        },
        ScaleAdjust::IDENTITY,
        seed + 1,
    )?;
    check_msdcn_case(
        &mut report,
        "learned_prior",
        MsDcnOptions {
            learn_direction_prior: true,
            ..base
        },
        ScaleAdjust { h: 1.5, w: 0.75 },
        seed + 2,
    )?;
    check_msdcn_case(
        &mut report,
        "fixed_scale",
        MsDcnOptions {
            learn_relative_scale: false,
            ..base
        },
        ScaleAdjust::IDENTITY,
        seed + 3,
    )?;
    Ok(report)
}

/// End-to-end flow-matching loss gradient of a tiny model with every parameter
/// randomised (zero-initialised ones included), checked at `samples` randomly
/// chosen parameter entries; threshold 1e-4.
pub fn check_model(seed: u64, samples: usize) -> Result<GradReport> {
    let mut report = GradReport::new("model", 1e-4);
    let cfg = ModelConfig::tiny_for_tests();
    let mut rng = stream(seed, &[0x30]);
    let mut model = Model::init(&cfg, seed)?;
    for (_, t) in model.named_tensors_mut() {
        let pert = rand_tensor(t.shape(), &mut rng).scale(0.3);
        t.add_assign(&pert)?;
    }
    let (h, w) = cfg.train_size;
    let x_t = rand_tensor(&[2, h, w, cfg.in_channels], &mut rng);
    let target = rand_tensor(x_t.shape(), &mut rng);
    let times = [0.3, 0.8];
    let labels = [Label::Class(1), Label::Null];
    let loss_of = |m: &Model| -> f64 {
        let pred = m.forward(&x_t, &times, &labels, ScaleAdjust::IDENTITY).unwrap();
        crate::flow::fm_loss(&pred, &target).unwrap()
    };
    let (pred, tape) = model.forward_train(&x_t, &times, &labels, ScaleAdjust::IDENTITY)?;
    let dpred = crate::flow::fm_loss_grad(&pred, &target)?;
    let mut grads = model.zeros_like();
    model.backward(&tape, &dpred, &mut grads)?;

    let analytic: Vec<(String, Vec<f64>)> = grads
        .named_tensors()
        .into_iter()
        .map(|(n, t)| (n, t.data().to_vec()))
        .collect();
    let sizes: Vec<usize> = analytic.iter().map(|(_, v)| v.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picked = 0;
    let mut guard = 0;
    while picked < samples && guard < samples * 50 {
        guard += 1;
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= sizes[ti] {
            flat -= sizes[ti];
            ti += 1;
        }
        let name = &analytic[ti].0;
        if name.ends_with("direction_prior") || name.starts_with("label_embed") && flat / cfg.hidden != 1 && flat / cfg.hidden != cfg.num_classes {
            // frozen, or an embedding row no sample in the batch uses
            continue;
        }
        let mut m = model.clone();
        let orig = m.named_tensors()[ti].1.data()[flat];
        m.named_tensors_mut()[ti].1.data_mut()[flat] = orig + STEP;
        let up = loss_of(&m);
        m.named_tensors_mut()[ti].1.data_mut()[flat] = orig - STEP;
        let down = loss_of(&m);
        let numeric = (up - down) / (2.0 * STEP);
        let group = name.split('.').take(3).collect::<Vec<_>>().join(".");
        report.record(group, &[analytic[ti].1[flat]], &[numeric]);
        picked += 1;
    }
    Ok(report)
}
