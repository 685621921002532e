//! Timing checks live in their own binary so nothing else runs alongside them.

use flowdcn::bench::{run_bench, BenchCase, BenchOp};

#[test]
fn doubling_iters_keeps_median_stable() {
    let base = BenchCase::new(BenchOp::DcnBlocked, 32, 32, 4, 32);
    let short = run_bench(&base).unwrap();
    let long = run_bench(&BenchCase { iters: 20, ..base }).unwrap();
    let ratio = long.median / short.median;
    assert!((0.8..=1.2).contains(&ratio), "median ratio {ratio}");
    assert_eq!(long.samples.len(), 20);
}
