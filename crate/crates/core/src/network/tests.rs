use super::*;
use crate::gradcheck::{check_model, numeric_grad, rel_err};

fn random_like(t: &Tensor, seed: u64, amp: f64) -> Tensor {
    let mut rng = stream(seed, &[]);
    Tensor::uniform(t.shape(), -amp, amp, &mut rng)
}

fn tiny() -> Model {
    Model::init(&ModelConfig::tiny_for_tests(), 7).unwrap()
}

#[test]
fn named_sizes() {
    let s = ModelConfig::named("S", 4, 1000, (32, 32)).unwrap();
    assert_eq!((s.layers, s.hidden, s.groups, s.points, s.patch), (12, 384, 6, 9, 2));
    assert_eq!(s.s_max, vec![16.0; 12]);
    let t = ModelConfig::named("T", 2, 8, (1, 1)).unwrap();
    assert_eq!((t.layers, t.hidden, t.groups, t.patch), (2, 64, 4, 1));
    assert!(matches!(ModelConfig::named("M", 4, 10, (8, 8)), Err(Error::Config(_))));
    assert_eq!(swiglu_hidden(384), 1024);
    assert_eq!(swiglu_hidden(64), 176);
}

#[test]
fn small_config_parameter_count() {
    let cfg = ModelConfig::named("S", 4, 1000, (32, 32)).unwrap();
    let model = Model::init(&cfg, 0).unwrap();
    let n = model.num_params();
    assert_eq!(n, cfg.param_count());
    let rel = (n as f64 - 30.3e6).abs() / 30.3e6;
    assert!(rel < 0.10, "S has {n} parameters");
}

#[test]
fn larger_configs_parameter_count() {
    for (name, millions) in [("B", 120.0), ("L", 421.0), ("XL", 618.0)] {
        let cfg = ModelConfig::named(name, 4, 1000, (32, 32)).unwrap();
        let n = cfg.param_count() as f64;
        assert!((n - millions * 1e6).abs() / (millions * 1e6) < 0.10, "{name}: {n}");
    }
    let cfg = ModelConfig::tiny_for_tests();
    assert_eq!(tiny().num_params(), cfg.param_count());
}

#[test]
fn fresh_model_predicts_zero() {
    let m = tiny();
    let x = random_like(&Tensor::zeros(&[3, 4, 4, 2]), 1, 2.0);
    let y = m
        .forward(&x, &[0.0, 0.5, 0.99], &[Label::Class(0), Label::Null, Label::Class(2)], ScaleAdjust::IDENTITY)
        .unwrap();
    assert_eq!(y.shape(), x.shape());
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn fresh_block_is_identity() {
    let m = tiny();
    let x = random_like(&Tensor::zeros(&[2, 2, 2, 8]), 2, 1.0);
    let cond = random_like(&Tensor::zeros(&[2, 8]), 3, 1.0);
    let (y, _) = block_forward(&m.blocks[0], &x, &silu(&cond), ScaleAdjust::IDENTITY).unwrap();
    assert_eq!(y, x);
}

#[test]
fn zero_condition_with_zero_biases_is_identity() {
    let mut blk = tiny().blocks[0].clone();
    blk.ada.weight = random_like(&blk.ada.weight, 4, 1.0);
    let x = random_like(&Tensor::zeros(&[1, 2, 2, 8]), 5, 1.0);
    let (y, _) = block_forward(&blk, &x, &Tensor::zeros(&[1, 8]), ScaleAdjust::IDENTITY).unwrap();
    assert_eq!(y, x);
}

#[test]
fn runs_at_several_resolutions() {
    let mut m = tiny();
    m.final_proj.weight = random_like(&m.final_proj.weight, 6, 0.5);
    for b in &mut m.blocks {
        b.ada.weight = random_like(&b.ada.weight, 7, 0.5);
    }
    for (h, w) in [(4, 4), (8, 8), (16, 24)] {
        let x = random_like(&Tensor::zeros(&[1, h, w, 2]), 8, 1.0);
        let y = m.forward(&x, &[0.3], &[Label::Class(1)], ScaleAdjust::IDENTITY).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }
    let x3 = random_like(&Tensor::zeros(&[6, 4, 2]), 9, 1.0);
    let y3 = m.forward(&x3, &[0.3], &[Label::Null], ScaleAdjust::IDENTITY).unwrap();
    assert_eq!(y3.shape(), x3.shape());
}

#[test]
fn bad_inputs_are_rejected() {
    let m = tiny();
    let x = Tensor::zeros(&[1, 4, 4, 2]);
    assert!(matches!(
        m.forward(&x, &[0.1], &[Label::Class(3)], ScaleAdjust::IDENTITY),
        Err(Error::Argument(_))
    ));
    let err = m
        .forward(&Tensor::zeros(&[1, 5, 4, 2]), &[0.1], &[Label::Null], ScaleAdjust::IDENTITY)
        .unwrap_err();
    assert!(matches!(err, Error::Shape(_)));
    assert!(err.to_string().contains("patch size 2"));
    assert!(m.forward(&x, &[0.1, 0.2], &[Label::Null], ScaleAdjust::IDENTITY).is_err());
}

#[test]
fn gate_gradient_matches_finite_differences() {
    let mut blk = tiny().blocks[0].clone();
    blk.ada = LinearParams {
        weight: random_like(&blk.ada.weight, 10, 0.5),
        bias: random_like(&blk.ada.bias, 11, 0.5),
    };
    let x = random_like(&Tensor::zeros(&[2, 2, 2, 8]), 12, 1.0);
    let sc = silu(&random_like(&Tensor::zeros(&[2, 8]), 13, 1.0));
    let r = random_like(&x, 14, 1.0);
    let loss = |b: &BlockParams| -> f64 {
        let (y, _) = block_forward(b, &x, &sc, ScaleAdjust::IDENTITY).unwrap();
        y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let (_, cache) = block_forward(&blk, &x, &sc, ScaleAdjust::IDENTITY).unwrap();
    let mut g = blk.zeros_like();
    block_backward(&blk, &cache, &r, &mut g).unwrap();
    let num = numeric_grad(blk.ada.weight.data(), |w| {
        let mut b = blk.clone();
        b.ada.weight.data_mut().copy_from_slice(w);
        loss(&b)
    });
    let d = 8;
    for i in 0..d {
        for gate in [2, 5] {
            for j in gate * d..(gate + 1) * d {
                let idx = i * 6 * d + j;
                let e = rel_err(g.ada.weight.data()[idx], num[idx]);
                assert!(e < 1e-4, "gate weight ({i},{j}): {e}");
            }
        }
    }
}

#[test]
fn model_gradient_matches_finite_differences() {
    let report = check_model(3, 20).unwrap();
    assert!(report.passed(), "{}", report.render());
}

#[test]
fn backward_rejects_mismatched_upstream() {
    let m = tiny();
    let x = Tensor::zeros(&[1, 4, 4, 2]);
    let (_, tape) = m.forward_train(&x, &[0.5], &[Label::Null], ScaleAdjust::IDENTITY).unwrap();
    let mut g = m.zeros_like();
    assert!(matches!(
        m.backward(&tape, &Tensor::zeros(&[1, 8, 4, 2]), &mut g),
        Err(Error::State(_))
    ));
}

#[test]
fn adjusted_scales_are_ratio_times_unadjusted() {
    let mut m = tiny();
    for b in &mut m.blocks {
        b.dcn.proj_scale.weight = random_like(&b.dcn.proj_scale.weight, 15, 1.0);
    }
    let x = random_like(&Tensor::zeros(&[1, 4, 8, 2]), 16, 1.0);
    let adjust = smax_ratio();
    let (_, base) = m.forward_train(&x, &[0.4], &[Label::Class(0)], ScaleAdjust::IDENTITY).unwrap();
    let (_, adj) = m.forward_train(&x, &[0.4], &[Label::Class(0)], adjust).unwrap();
    // The first block sees identical inputs, hence identical logits.
    let (p0, p1) = (base.dcn_plans()[0], adj.dcn_plans()[0]);
    for (a, b) in p0.scales.iter().zip(&p1.scales) {
        assert_eq!(*b, [a[0] * adjust.h, a[1] * adjust.w]);
    }
}

fn smax_ratio() -> ScaleAdjust {
    crate::msdcn::smax_adjust((4, 4), (4, 8)).unwrap()
}
