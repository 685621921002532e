//! Sample-quality statistics: kernel MMD with RBF kernels, moment
//! discrepancies and per-class quadrant accuracy for labelled image sets.

use std::fmt::Write as _;

use crate::data::brightest_quadrant;
use crate::error::{Error, Result};

/// Points used for the median-distance bandwidth.
const MEDIAN_POINTS: usize = 1000;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kernel(d2: f64, bandwidths: &[f64]) -> f64 {
    bandwidths
        .iter()
        .map(|s| (-d2 / (2.0 * s * s)).exp())
        .sum()
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>], bandwidths: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Argument(format!(
            "MMD needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|v| v.len() != d) {
        return Err(Error::Shape("sample sets differ in dimensionality".into()));
    }
    if bandwidths.is_empty() || bandwidths.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Argument(format!("invalid bandwidths {bandwidths:?}")));
    }
    Ok(())
}

/// `0.5 m, m, 2 m` where `m` is the median pairwise distance of the pooled sets
/// (the first points of each set, at most 1000 in total).
pub fn median_bandwidths(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<f64>> {
    let take = MEDIAN_POINTS / 2;
    let pool: Vec<&Vec<f64>> = a.iter().take(take).chain(b.iter().take(take)).collect();
    let mut dists = Vec::with_capacity(pool.len() * pool.len() / 2);
    for i in 0..pool.len() {
        for j in i + 1..pool.len() {
            dists.push(sq_dist(pool[i], pool[j]).sqrt());
        }
    }
    if dists.is_empty() {
        return Err(Error::Argument("need at least 2 points for a bandwidth".into()));
    }
    dists.sort_by(f64::total_cmp);
    let m = dists[dists.len() / 2];
    if !(m > 0.0) {
        return Err(Error::Argument("all points coincide; bandwidth undefined".into()));
    }
    Ok(vec![0.5 * m, m, 2.0 * m])
}

/// Sum of `k(x_i, y_j)` over all pairs, or over `i != j` when `skip_diag`.
fn kernel_sum(a: &[Vec<f64>], b: &[Vec<f64>], bw: &[f64], skip_diag: bool) -> f64 {
    let mut s = 0.0;
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            if !(skip_diag && i == j) {
                s += kernel(sq_dist(x, y), bw);
            }
        }
    }
    s
}

/// Unbiased MMD^2 estimate, not clipped. With equal set sizes the cross term
/// also skips `i == j`, so identical sets give exactly zero.
pub fn mmd2_unbiased(a: &[Vec<f64>], b: &[Vec<f64>], bandwidths: &[f64]) -> Result<f64> {
    check_sets(a, b, bandwidths)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let xx = kernel_sum(a, a, bandwidths, true) / (n * (n - 1.0));
    let yy = kernel_sum(b, b, bandwidths, true) / (m * (m - 1.0));
    let xy = if a.len() == b.len() {
        kernel_sum(a, b, bandwidths, true) / (n * (n - 1.0))
    } else {
        kernel_sum(a, b, bandwidths, false) / (n * m)
    };
    Ok(xx + yy - 2.0 * xy)
}

/// Unbiased MMD^2 clipped at zero.
pub fn mmd_rbf(a: &[Vec<f64>], b: &[Vec<f64>], bandwidths: &[f64]) -> Result<f64> {
    Ok(mmd2_unbiased(a, b, bandwidths)?.max(0.0))
}

/// Biased (V-statistic) MMD^2: all pairs including `i == j`. Always `>= 0` and
/// positive in expectation even for equal distributions, which makes it usable
/// as a ratio against a same-distribution baseline.
pub fn mmd2_biased(a: &[Vec<f64>], b: &[Vec<f64>], bandwidths: &[f64]) -> Result<f64> {
    check_sets(a, b, bandwidths)?;
    let (n, m) = (a.len() as f64, b.len() as f64);
    let xx = kernel_sum(a, a, bandwidths, false) / (n * n);
    let yy = kernel_sum(b, b, bandwidths, false) / (m * m);
    let xy = kernel_sum(a, b, bandwidths, false) / (n * m);
    Ok((xx + yy - 2.0 * xy).max(0.0))
}

fn mean(v: &[Vec<f64>]) -> Vec<f64> {
    let d = v[0].len();
    let mut m = vec![0.0; d];
    for x in v {
        for (a, b) in m.iter_mut().zip(x) {
            *a += b;
        }
    }
    m.iter_mut().for_each(|a| *a /= v.len() as f64);
    m
}

/// Population covariance, row-major `d x d`.
fn covariance(v: &[Vec<f64>], mu: &[f64]) -> Vec<f64> {
    let d = mu.len();
    let mut c = vec![0.0; d * d];
    for x in v {
        for i in 0..d {
            let di = x[i] - mu[i];
            for j in 0..d {
                c[i * d + j] += di * (x[j] - mu[j]);
            }
        }
    }
    c.iter_mut().for_each(|a| *a /= v.len() as f64);
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStat {
    pub class: usize,
    pub count: usize,
    /// Fraction of samples whose brightest quadrant is the class quadrant.
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub mmd_rbf: f64,
    /// Same statistic between two independent reference draws, when computed.
    pub baseline_mmd: Option<f64>,
    /// `|mean(samples) - mean(reference)|` per dimension.
    pub mean_err: Vec<f64>,
    /// Frobenius norm of the covariance difference.
    pub cov_err: f64,
    pub per_class: Vec<ClassStat>,
}

impl MetricReport {
    /// Line-delimited `key value` text.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "mmd_rbf {:.6e}", self.mmd_rbf);
        if let Some(b) = self.baseline_mmd {
            let _ = writeln!(s, "baseline_mmd {b:.6e}");
        }
        let worst = self.mean_err.iter().fold(0.0f64, |a, &b| a.max(b));
        let _ = writeln!(s, "mean_err_max {worst:.6e}");
        for (i, e) in self.mean_err.iter().enumerate().take(16) {
            let _ = writeln!(s, "mean_err.{i} {e:.6e}");
        }
        let _ = writeln!(s, "cov_err {:.6e}", self.cov_err);
        for c in &self.per_class {
            let _ = writeln!(s, "class.{}.count {}", c.class, c.count);
            let _ = writeln!(s, "class.{}.accuracy {:.4}", c.class, c.accuracy);
        }
        s
    }
}

/// Mean and covariance discrepancies plus the clipped unbiased MMD^2 under
/// median-heuristic bandwidths.
pub fn moment_report(samples: &[Vec<f64>], reference: &[Vec<f64>]) -> Result<MetricReport> {
    if samples.is_empty() || reference.is_empty() {
        return Err(Error::Argument("moment report needs non-empty sets".into()));
    }
    let d = reference[0].len();
    if samples.iter().chain(reference).any(|v| v.len() != d) {
        return Err(Error::Shape("sample sets differ in dimensionality".into()));
    }
    let (ms, mr) = (mean(samples), mean(reference));
    let mean_err = ms.iter().zip(&mr).map(|(a, b)| (a - b).abs()).collect();
    let (cs, cr) = (covariance(samples, &ms), covariance(reference, &mr));
    let cov_err = cs
        .iter()
        .zip(&cr)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let mmd = if samples.len() >= 2 && reference.len() >= 2 {
        match median_bandwidths(samples, reference) {
            Ok(bw) => mmd_rbf(samples, reference, &bw)?,
            Err(_) => 0.0,
        }
    } else {
        0.0
    };
    Ok(MetricReport {
        mmd_rbf: mmd,
        baseline_mmd: None,
        mean_err,
        cov_err,
        per_class: Vec::new(),
    })
}

/// Quadrant accuracy of `(image, intended class)` pairs, grouped by class.
pub fn quadrant_accuracy(
    images: &[Vec<f64>],
    classes: &[usize],
    h: usize,
    w: usize,
) -> Vec<ClassStat> {
    let mut hits = [0usize; 4];
    let mut counts = [0usize; 4];
    for (img, &c) in images.iter().zip(classes) {
        if c < 4 {
            counts[c] += 1;
            if brightest_quadrant(img, h, w) == c {
                hits[c] += 1;
            }
        }
    }
    (0..4)
        .filter(|&c| counts[c] > 0)
        .map(|c| ClassStat {
            class: c,
            count: counts[c],
            accuracy: hits[c] as f64 / counts[c] as f64,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand_distr::{Distribution, StandardNormal};

    fn normal_set(n: usize, d: usize, shift: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, &[]);
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z + shift
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = normal_set(50, 3, 0.0, 1);
        let bw = median_bandwidths(&a, &a).unwrap();
        assert_eq!(mmd2_unbiased(&a, &a, &bw).unwrap(), 0.0);
        let r = moment_report(&a, &a).unwrap();
        assert_eq!(r.mmd_rbf, 0.0);
        assert!(r.mean_err.iter().all(|&e| e == 0.0));
        assert_eq!(r.cov_err, 0.0);
    }

    #[test]
    fn separated_gaussians() {
        let a = normal_set(500, 1, 0.0, 2);
        let b = normal_set(500, 1, 5.0, 3);
        let bw = median_bandwidths(&a, &b).unwrap();
        assert!(mmd_rbf(&a, &b, &bw).unwrap() > 0.5);
    }

    #[test]
    fn unbiased_matches_naive_loops() {
        for (n, m) in [(20, 20), (15, 25)] {
            let a = normal_set(n, 2, 0.0, 4);
            let b = normal_set(m, 2, 0.3, 5);
            let bw = [0.5, 1.0, 2.0];
            let k = |x: &[f64], y: &[f64]| {
                let d2: f64 = x.iter().zip(y).map(|(p, q)| (p - q).powi(2)).sum();
                bw.iter().map(|s| (-d2 / (2.0 * s * s)).exp()).sum::<f64>()
            };
            let (mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        xx += k(&a[i], &a[j]);
                    }
                }
            }
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        yy += k(&b[i], &b[j]);
                    }
                }
            }
            let mut pairs = 0.0;
            for i in 0..n {
                for j in 0..m {
                    if n != m || i != j {
                        xy += k(&a[i], &b[j]);
                        pairs += 1.0;
                    }
                }
            }
            let (nf, mf) = (n as f64, m as f64);
            let naive = xx / (nf * (nf - 1.0)) + yy / (mf * (mf - 1.0)) - 2.0 * xy / pairs;
            assert!((mmd2_unbiased(&a, &b, &bw).unwrap() - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn too_few_samples() {
        let a = normal_set(1, 2, 0.0, 6);
        let b = normal_set(5, 2, 0.0, 7);
        assert!(matches!(mmd_rbf(&a, &b, &[1.0]), Err(Error::Argument(_))));
    }

    #[test]
    fn mean_shift_shows_in_one_component() {
        let a = normal_set(40, 3, 0.0, 8);
        let b: Vec<Vec<f64>> = a
            .iter()
            .map(|v| vec![v[0], v[1] + 1.0, v[2]])
            .collect();
        let r = moment_report(&b, &a).unwrap();
        assert!((r.mean_err[1] - 1.0).abs() < 1e-12);
        assert!(r.mean_err[0] < 1e-12 && r.mean_err[2] < 1e-12);
        assert!(r.cov_err < 1e-12);
    }

    #[test]
    fn moments_match_loop_oracle() {
        let a = normal_set(30, 2, 0.0, 9);
        let b = normal_set(30, 2, 0.5, 10);
        let r = moment_report(&a, &b).unwrap();
        let mut mean_a = [0.0; 2];
        let mut mean_b = [0.0; 2];
        for i in 0..30 {
            for j in 0..2 {
                mean_a[j] += a[i][j] / 30.0;
                mean_b[j] += b[i][j] / 30.0;
            }
        }
        let mut diff = 0.0;
        for p in 0..2 {
            for q in 0..2 {
                let mut ca = 0.0;
                let mut cb = 0.0;
                for i in 0..30 {
                    ca += (a[i][p] - mean_a[p]) * (a[i][q] - mean_a[q]) / 30.0;
                    cb += (b[i][p] - mean_b[p]) * (b[i][q] - mean_b[q]) / 30.0;
                }
                diff += (ca - cb).powi(2);
            }
        }
        for j in 0..2 {
            assert!((r.mean_err[j] - (mean_a[j] - mean_b[j]).abs()).abs() < 1e-12);
        }
        assert!((r.cov_err - diff.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn biased_is_positive_for_same_distribution() {
        let a = normal_set(200, 2, 0.0, 11);
        let b = normal_set(200, 2, 0.0, 12);
        let bw = median_bandwidths(&a, &b).unwrap();
        assert!(mmd2_biased(&a, &b, &bw).unwrap() > 0.0);
        let c = normal_set(200, 2, 2.0, 13);
        assert!(mmd2_biased(&a, &c, &bw).unwrap() > 10.0 * mmd2_biased(&a, &b, &bw).unwrap());
    }

    #[test]
    fn report_lines_are_key_value() {
        let a = normal_set(10, 2, 0.0, 14);
        let mut r = moment_report(&a, &a).unwrap();
        r.per_class = vec![ClassStat { class: 2, count: 5, accuracy: 0.8 }];
        for line in r.render().lines() {
            assert_eq!(line.split(' ').count(), 2, "{line}");
        }
    }
}
