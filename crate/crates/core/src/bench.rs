//! Forward-only operator timing: deformable gather (linear in tokens) against
//! dense multi-head attention (quadratic in tokens).

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::error::{shape_err, Error, Result};
use crate::msdcn::{
    flops_count, msdcn_forward, msdcn_oracle, MsDcnOptions, MsDcnParams, ScaleAdjust,
};
use crate::rng::stream;
use crate::tensor::{matmul_affine, softmax_in_place, LinearParams, Tensor};

pub const MIN_ITERS: usize = 10;
pub const MIN_WARMUP: usize = 3;
pub const DEFAULT_POINTS: usize = 9;
/// Shortest interval a single timed sample may cover before calls get batched.
pub const MIN_SAMPLE: Duration = Duration::from_micros(200);
pub const MAX_REPEATS: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchOp {
    DcnNaive,
    DcnBlocked,
    Attention,
}

impl std::str::FromStr for BenchOp {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dcn_naive" => Ok(Self::DcnNaive),
            "dcn_blocked" | "dcn" => Ok(Self::DcnBlocked),
            "attention" => Ok(Self::Attention),
            _ => Err(Error::Argument(format!(
                "unknown op '{s}' (expected dcn_naive, dcn_blocked or attention)"
            ))),
        }
    }
}

impl std::fmt::Display for BenchOp {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::DcnNaive => "dcn_naive",
            Self::DcnBlocked => "dcn_blocked",
            Self::Attention => "attention",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchCase {
    pub op: BenchOp,
    pub height: usize,
    pub width: usize,
    /// Groups for the deformable ops, heads for attention.
    pub groups: usize,
    pub channels: usize,
    pub points: usize,
    pub batch: usize,
    pub iters: usize,
    pub warmup: usize,
    /// Worker threads; 1 times the single-threaded kernels.
    pub threads: usize,
    pub seed: u64,
}

impl BenchCase {
    pub fn new(op: BenchOp, height: usize, width: usize, groups: usize, channels: usize) -> Self {
        Self {
            op,
            height,
            width,
            groups,
            channels,
            points: DEFAULT_POINTS,
            batch: 1,
            iters: MIN_ITERS,
            warmup: MIN_WARMUP,
            threads: 1,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if self.iters < MIN_ITERS {
            bad.push(format!("iters must be at least {MIN_ITERS}, got {}", self.iters));
        }
        if self.warmup < MIN_WARMUP {
            bad.push(format!("warmup must be at least {MIN_WARMUP}, got {}", self.warmup));
        }
        if self.height == 0 || self.width == 0 || self.batch == 0 || self.points == 0 {
            bad.push("extents, batch and points must be positive".into());
        }
        if self.groups == 0 || self.channels % self.groups != 0 {
            bad.push(format!(
                "channels {} not divisible into {} groups",
                self.channels, self.groups
            ));
        }
        if self.threads == 0 {
            bad.push("threads must be positive".into());
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Argument(bad.join("; ")))
        }
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    /// Model FLOPs of one image: `4KHWC/G` for the deformable ops,
    /// `4 (HW)^2 D + 6 HW D^2` for attention.
    pub fn flops(&self) -> Result<f64> {
        match self.op {
            BenchOp::DcnNaive | BenchOp::DcnBlocked => flops_count(
                self.height,
                self.width,
                self.channels,
                self.points,
                self.groups,
            ),
            BenchOp::Attention => {
                let (t, d) = (self.tokens() as f64, self.channels as f64);
                Ok(4.0 * t * t * d + 6.0 * t * d * d)
            }
        }
    }
}

/// Query, key and value projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
}

impl AttentionParams {
    pub fn init(dim: usize, rng: &mut impl rand::Rng) -> Self {
        Self {
            q: LinearParams::xavier(dim, dim, rng),
            k: LinearParams::xavier(dim, dim, rng),
            v: LinearParams::xavier(dim, dim, rng),
        }
    }
}

/// Splits `[T, D]` into per-head contiguous `[heads][T * dh]` blocks.
fn split_heads(x: &Tensor, heads: usize) -> Vec<Vec<f64>> {
    let (t, d) = (x.rows(), x.last_dim());
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut out = Vec::with_capacity(t * dh);
            for r in 0..t {
                out.extend_from_slice(&x.row(r)[h * dh..(h + 1) * dh]);
            }
            out
        })
        .collect()
}

/// Per-head `[heads][dh * T]` blocks, channel-major, so a query scores every
/// key with unit-stride loops.
fn split_heads_transposed(x: &Tensor, heads: usize) -> Vec<Vec<f64>> {
    let (t, d) = (x.rows(), x.last_dim());
    let dh = d / heads;
    (0..heads)
        .map(|h| {
            let mut out = vec![0.0; t * dh];
            for r in 0..t {
                for c in 0..dh {
                    out[c * t + r] = x.row(r)[h * dh + c];
                }
            }
            out
        })
        .collect()
}

/// `softmax(Q K^T / sqrt(dh)) V` per head over the `T` tokens of `x: [T, D]`,
/// heads concatenated back to `[T, D]`. No output projection.
pub fn attention_reference(x: &Tensor, heads: usize, p: &AttentionParams) -> Result<Tensor> {
    let &[t, d] = x.shape() else {
        return Err(shape_err!("attention expects [T, D], got {:?}", x.shape()));
    };
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("dimension {d} not divisible into {heads} heads"));
    }
    for lin in [&p.q, &p.k, &p.v] {
        if lin.in_dim() != d || lin.out_dim() != d {
            return Err(shape_err!(
                "projection {}x{} does not match dimension {d}",
                lin.in_dim(),
                lin.out_dim()
            ));
        }
    }
    let dh = d / heads;
    let q = split_heads(&matmul_affine(x, &p.q)?, heads);
    let kt = split_heads_transposed(&matmul_affine(x, &p.k)?, heads);
    let v = split_heads(&matmul_affine(x, &p.v)?, heads);
    let scale = 1.0 / (dh as f64).sqrt();

    let mut out = vec![0.0; t * d];
    out.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let mut scores = vec![0.0; t];
        for h in 0..heads {
            let qi = &q[h][i * dh..(i + 1) * dh];
            scores.fill(0.0);
            for (&qc, kc) in qi.iter().zip(kt[h].chunks_exact(t)) {
                for (s, &kv) in scores.iter_mut().zip(kc) {
                    *s += qc * kv;
                }
            }
            for s in scores.iter_mut() {
                *s *= scale;
            }
            softmax_in_place(&mut scores);
            let o = &mut row[h * dh..(h + 1) * dh];
            for (&pj, vj) in scores.iter().zip(v[h].chunks_exact(dh)) {
                for (oc, &vc) in o.iter_mut().zip(vj) {
                    *oc += pj * vc;
                }
            }
        }
    });
    Tensor::new(vec![t, d], out)
}

/// Deformable layer with non-zero offsets and scale logits, so the gather reads
/// fractional positions.
pub fn bench_dcn_params(case: &BenchCase) -> Result<MsDcnParams> {
    let mut rng = stream(case.seed, &[1]);
    let (d, g, k) = (case.channels, case.groups, case.points);
    let mut p = MsDcnParams::init(d, g, k, 4.0, MsDcnOptions::default(), &mut rng)?;
    p.proj_offset = LinearParams::normal(d, g * k * 2, 0.3, &mut rng);
    p.proj_scale = LinearParams::normal(d, g, 0.3, &mut rng);
    Ok(p)
}

pub fn bench_input(case: &BenchCase) -> Tensor {
    let mut rng = stream(case.seed, &[2]);
    Tensor::uniform(
        &[case.batch, case.height, case.width, case.channels],
        -1.0,
        1.0,
        &mut rng,
    )
}

/// Prepared operands plus a closure-free call so timing covers only the op.
enum Prepared {
    Dcn { x: Tensor, p: MsDcnParams, naive: bool },
    Attention { x: Vec<Tensor>, heads: usize, p: AttentionParams },
}

impl Prepared {
    fn new(case: &BenchCase) -> Result<Self> {
        let x = bench_input(case);
        Ok(match case.op {
            BenchOp::DcnNaive | BenchOp::DcnBlocked => Prepared::Dcn {
                x,
                p: bench_dcn_params(case)?,
                naive: case.op == BenchOp::DcnNaive,
            },
            BenchOp::Attention => {
                let tokens = case.tokens();
                let images = x
                    .data()
                    .chunks_exact(tokens * case.channels)
                    .map(|c| Tensor::new(vec![tokens, case.channels], c.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                let mut rng = stream(case.seed, &[3]);
                Prepared::Attention {
                    x: images,
                    heads: case.groups,
                    p: AttentionParams::init(case.channels, &mut rng),
                }
            }
        })
    }

    fn call(&self) -> Result<f64> {
        let y = match self {
            Prepared::Dcn { x, p, naive: true } => msdcn_oracle(x, p, ScaleAdjust::IDENTITY)?,
            Prepared::Dcn { x, p, naive: false } => msdcn_forward(x, p, ScaleAdjust::IDENTITY)?.0,
            Prepared::Attention { x, heads, p } => {
                let mut last = Tensor::zeros(&[0]);
                for img in x {
                    last = attention_reference(img, *heads, p)?;
                }
                last
            }
        };
        // Keeps the result observable so the call cannot be elided.
        Ok(std::hint::black_box(y.data().first().copied().unwrap_or(0.0)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub case: BenchCase,
    /// Seconds per call, one entry per timed sample.
    pub samples: Vec<f64>,
    /// Calls folded into each timed sample.
    pub repeats: usize,
    pub median: f64,
    pub mean: f64,
    pub stddev: f64,
    /// Model FLOPs of one image.
    pub flops: f64,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn measure(prep: &Prepared, case: &BenchCase) -> Result<BenchReport> {
    let mut longest = Duration::ZERO;
    for _ in 0..case.warmup {
        let t0 = Instant::now();
        prep.call()?;
        longest = longest.max(t0.elapsed());
    }
    let mut repeats = 1usize;
    if longest < MIN_SAMPLE {
        let per = longest.as_secs_f64();
        repeats = if per > 0.0 {
            ((MIN_SAMPLE.as_secs_f64() / per).ceil() as usize).min(MAX_REPEATS)
        } else {
            MAX_REPEATS
        };
    }
    let mut samples = Vec::with_capacity(case.iters);
    for _ in 0..case.iters {
        let t0 = Instant::now();
        for _ in 0..repeats {
            prep.call()?;
        }
        samples.push(t0.elapsed().as_secs_f64() / repeats as f64);
    }
    if samples.iter().any(|&s| s <= 0.0) {
        return Err(Error::Numeric(format!(
            "timer resolution insufficient even at {repeats} calls per sample"
        )));
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(BenchReport {
        median: median(&samples),
        mean,
        stddev: var.sqrt(),
        flops: case.flops()?,
        samples,
        repeats,
        case: case.clone(),
    })
}

/// Times `case` after discarding the warmup calls. Calls shorter than
/// [`MIN_SAMPLE`] are grouped so each timed sample spans a measurable interval.
pub fn run_bench(case: &BenchCase) -> Result<BenchReport> {
    case.validate()?;
    let prep = Prepared::new(case)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(case.threads)
        .build()
        .map_err(|e| Error::State(format!("cannot build thread pool: {e}")))?;
    pool.install(|| measure(&prep, case))
}

/// `dcn_blocked` and `dcn_naive` outputs for the case, compared bit for bit.
pub fn blocked_matches_naive(case: &BenchCase) -> Result<bool> {
    let x = bench_input(case);
    let p = bench_dcn_params(case)?;
    let blocked = msdcn_forward(&x, &p, ScaleAdjust::IDENTITY)?.0;
    let naive = msdcn_oracle(&x, &p, ScaleAdjust::IDENTITY)?;
    Ok(blocked
        .data()
        .iter()
        .zip(naive.data())
        .all(|(a, b)| a.to_bits() == b.to_bits()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExponentFit {
    /// Least-squares slope of `log(time)` against `log(tokens)`.
    pub exponent: f64,
    pub intercept: f64,
    /// False when time fails to increase with token count somewhere.
    pub monotone: bool,
}

pub fn fit_exponent(tokens: &[f64], times: &[f64]) -> Result<ExponentFit> {
    if tokens.len() != times.len() {
        return Err(Error::Argument(format!(
            "{} sizes but {} timings",
            tokens.len(),
            times.len()
        )));
    }
    if tokens.len() < 3 {
        return Err(Error::Argument(format!(
            "exponent fit needs at least 3 sizes, got {}",
            tokens.len()
        )));
    }
    if tokens.iter().chain(times).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Argument("sizes and timings must be positive".into()));
    }
    let lo = tokens.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = tokens.iter().copied().fold(0.0, f64::max);
    if hi < 8.0 * lo {
        return Err(Error::Argument(format!(
            "token counts must span at least 8x, got {lo}..{hi}"
        )));
    }
    let xs: Vec<f64> = tokens.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = times.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let exponent = sxy / sxx;

    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&a, &b| tokens[a].total_cmp(&tokens[b]));
    let monotone = order.windows(2).all(|w| times[w[1]] > times[w[0]]);
    Ok(ExponentFit {
        exponent,
        intercept: my - exponent * mx,
        monotone,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingStudy {
    pub reports: Vec<BenchReport>,
    pub fit: ExponentFit,
}

/// Runs `template` at every `(H, W)` and fits the median times.
pub fn scaling_study(template: &BenchCase, sizes: &[(usize, usize)]) -> Result<ScalingStudy> {
    let reports = sizes
        .iter()
        .map(|&(h, w)| {
            run_bench(&BenchCase {
                height: h,
                width: w,
                ..template.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens: Vec<f64> = reports.iter().map(|r| r.case.tokens() as f64).collect();
    let times: Vec<f64> = reports.iter().map(|r| r.median).collect();
    let fit = fit_exponent(&tokens, &times)?;
    Ok(ScalingStudy { reports, fit })
}

impl ScalingStudy {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>5} {:>5} {:>4} {:>5} {:>6} {:>12} {:>12} {:>10} {:>14}\n",
            "op", "H", "W", "G", "D", "batch", "median_us", "mean_us", "stddev_us", "flops"
        );
        for r in &self.reports {
            let c = &r.case;
            let _ = writeln!(
                s,
                "{:<12} {:>5} {:>5} {:>4} {:>5} {:>6} {:>12.1} {:>12.1} {:>10.1} {:>14.0}",
                c.op.to_string(),
                c.height,
                c.width,
                c.groups,
                c.channels,
                c.batch,
                r.median * 1e6,
                r.mean * 1e6,
                r.stddev * 1e6,
                r.flops
            );
        }
        let _ = write!(s, "exponent {:.3}", self.fit.exponent);
        if !self.fit.monotone {
            s.push_str("  WARNING: timings are not monotone in token count");
        }
        s.push('\n');
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("op,H,W,G,D,median_us,flops,exponent\n");
        for r in &self.reports {
            let c = &r.case;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{:.3},{},{}",
                c.op,
                c.height,
                c.width,
                c.groups,
                c.channels,
                r.median * 1e6,
                r.flops,
                self.fit.exponent
            );
        }
        s
    }
}
