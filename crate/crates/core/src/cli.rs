//! Command-line front end. Each subcommand is also callable as a function so
//! scripts and tests can drive it without spawning a process.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::bench::{blocked_matches_naive, scaling_study, BenchCase, BenchOp, ScalingStudy};
use crate::checkpoint::{self, Checkpoint, Dtype};
use crate::config::{describe_keys, RunConfig};
use crate::data::{Dataset, DatasetKind};
use crate::error::{Error, Result};
use crate::flow::Trainer;
use crate::gradcheck::{check_model, check_msdcn, check_primitives, GradReport};
use crate::image::write_image;
use crate::metrics::{moment_report, quadrant_accuracy, MetricReport};
use crate::network::{Label, Model};
use crate::rng::{derive, tag};
use crate::sampler::{sample, SampleSpec, Solver};
use crate::tensor::Tensor;

pub const THREADS_ENV: &str = "FLOWDCN_THREADS";

#[derive(Debug, Parser)]
#[command(name = "flowdcn", version, about = "Deformable-convolution flow models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Draw images from a checkpoint.
    Sample(SampleArgs),
    /// Compare analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Time an operator across a size ladder and fit its scaling exponent.
    Bench(BenchArgs),
    /// Sample from a checkpoint and score against fresh reference data.
    Eval(EvalArgs),
    /// List every config key with its default.
    Keys,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Log file (default: the checkpoint path with `.log` appended).
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Class index, or `null` for unconditional samples.
    #[arg(long, default_value = "null")]
    pub class: String,
    #[arg(long, default_value = "euler_maruyama")]
    pub solver: Solver,
    /// Default: 50 for euler_ode, 250 for euler_maruyama.
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1.375)]
    pub cfg: f64,
    /// Default: the training height.
    #[arg(long)]
    pub height: Option<usize>,
    /// Default: the training width.
    #[arg(long)]
    pub width: Option<usize>,
    /// Stretch the deformable scales by the test/train resolution ratio.
    #[arg(long)]
    pub smax_adjust: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "primitives")]
    pub scope: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Parameter entries probed by the model scope.
    #[arg(long, default_value_t = 40)]
    pub samples: usize,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    /// Comma-separated list of dcn_naive, dcn_blocked, attention.
    #[arg(long, default_value = "dcn_blocked,attention")]
    pub op: String,
    /// Comma-separated sizes, `N` for NxN or `HxW`.
    #[arg(long, default_value = "16,32,64,128")]
    pub sizes: String,
    #[arg(long, default_value_t = 10)]
    pub iters: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    /// Groups for the deformable ops, heads for attention.
    #[arg(long, default_value_t = 4)]
    pub groups: usize,
    #[arg(long, default_value_t = 32)]
    pub channels: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    /// Worker threads for the timed kernels; results are reported per setting.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Also write the CSV report here.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub dataset: DatasetKind,
    #[arg(long, default_value_t = 1000)]
    pub n_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "euler_maruyama")]
    pub solver: Solver,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long, default_value_t = 1.375)]
    pub cfg: f64,
}

/// Builds the global rayon pool from `FLOWDCN_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::State(format!("cannot configure thread pool: {e}")))
}

/// Dispatches a parsed command; returns the process exit code.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    match cli.command {
        Command::Train(a) => {
            let summary = cmd_train(&a.config, &a.out, a.log.as_deref())?;
            writeln!(out, "{summary}")?;
            Ok(0)
        }
        Command::Sample(a) => {
            let files = cmd_sample(&a)?;
            writeln!(out, "wrote {} files to {}", files.len(), a.out_dir.display())?;
            Ok(0)
        }
        Command::Gradcheck(a) => {
            let report = cmd_gradcheck(&a.scope, a.seed, a.samples)?;
            write!(out, "{}", report.render())?;
            Ok(if report.passed() { 0 } else { 1 })
        }
        Command::Bench(a) => {
            write!(out, "{}", cmd_bench(&a)?)?;
            Ok(0)
        }
        Command::Eval(a) => {
            write!(out, "{}", cmd_eval(&a)?.render())?;
            Ok(0)
        }
        Command::Keys => {
            write!(out, "{}", describe_keys())?;
            Ok(0)
        }
    }
}

/// Trains the configured model on freshly generated data.
pub fn train_model(cfg: &RunConfig, log: Option<&mut dyn std::io::Write>) -> Result<(Model, Vec<f64>)> {
    let data = Dataset::generate(cfg.dataset, cfg.data_samples, cfg.data_seed)?;
    let model = Model::init(&cfg.model_config()?, cfg.train.seed)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let losses = trainer.run(&data, log)?;
    Ok((trainer.model, losses))
}

pub fn model_checkpoint(model: &Model, cfg: &RunConfig, steps: usize) -> Checkpoint {
    checkpoint::from_model(
        model,
        &[
            ("data.kind", cfg.dataset.to_string()),
            ("data.samples", cfg.data_samples.to_string()),
            ("data.seed", cfg.data_seed.to_string()),
            ("train.step", steps.to_string()),
            ("train.seed", cfg.train.seed.to_string()),
            ("train.lr", cfg.train.lr.to_string()),
            ("train.batch_size", cfg.train.batch_size.to_string()),
        ],
        Dtype::F64,
    )
}

pub fn cmd_train(config: &Path, out: &Path, log: Option<&Path>) -> Result<String> {
    let cfg = RunConfig::load(config)?;
    let log_path = log
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from(format!("{}.log", out.display())));
    let mut log_file = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let (model, losses) = train_model(&cfg, Some(&mut log_file))?;
    log_file.flush()?;
    model_checkpoint(&model, &cfg, losses.len()).save(out)?;
    let last = losses.last().copied().unwrap_or(f64::NAN);
    Ok(format!(
        "trained {} steps, final loss {last:.6e}; checkpoint {} log {}",
        losses.len(),
        out.display(),
        log_path.display()
    ))
}

pub fn load_model(path: &Path) -> Result<Model> {
    checkpoint::to_model(&Checkpoint::load(path)?)
}

pub fn parse_label(s: &str, num_classes: usize) -> Result<Label> {
    if s.eq_ignore_ascii_case("null") {
        return Ok(Label::Null);
    }
    let c: usize = s
        .parse()
        .map_err(|_| Error::Argument(format!("class must be an index or 'null', got '{s}'")))?;
    if c >= num_classes {
        return Err(Error::Argument(format!(
            "class {c} out of range for {num_classes} classes"
        )));
    }
    Ok(Label::Class(c))
}

pub fn sample_spec(model: &Model, a: &SampleArgs) -> Result<SampleSpec> {
    let (th, tw) = model.config.train_size;
    Ok(SampleSpec {
        solver: a.solver,
        steps: a.steps.unwrap_or_else(|| a.solver.default_steps()),
        cfg_scale: a.cfg,
        height: a.height.unwrap_or(th),
        width: a.width.unwrap_or(tw),
        smax_adjust: a.smax_adjust,
        seed: a.seed,
        label: parse_label(&a.class, model.config.num_classes)?,
        count: a.count,
    })
}

/// Writes one PPM per sample (or `samples.tsv` when the channel count is not
/// 1 or 3) plus `manifest.txt`; returns the written paths.
pub fn cmd_sample(a: &SampleArgs) -> Result<Vec<PathBuf>> {
    let model = load_model(&a.ckpt)?;
    let spec = sample_spec(&model, a)?;
    let images = sample(&model, &spec)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let c = model.config.in_channels;
    let mut files = Vec::new();
    if c == 1 || c == 3 {
        for (i, img) in images.unstack().iter().enumerate() {
            let path = a.out_dir.join(format!("sample_{i:04}.ppm"));
            write_image(img, &path)?;
            files.push(path);
        }
    } else {
        let mut s = String::new();
        for i in 0..spec.count {
            let row: Vec<String> = images.slab(i).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", row.join("\t"));
        }
        let path = a.out_dir.join("samples.tsv");
        std::fs::write(&path, s)?;
        files.push(path);
    }
    let mut manifest = String::new();
    let label = match spec.label {
        Label::Class(c) => c.to_string(),
        Label::Null => "null".into(),
    };
    let _ = writeln!(manifest, "checkpoint {}", a.ckpt.display());
    let _ = writeln!(manifest, "class {label}");
    let _ = writeln!(manifest, "solver {}", spec.solver);
    let _ = writeln!(manifest, "steps {}", spec.steps);
    let _ = writeln!(manifest, "cfg {}", spec.cfg_scale);
    let _ = writeln!(manifest, "height {}", spec.height);
    let _ = writeln!(manifest, "width {}", spec.width);
    let _ = writeln!(manifest, "smax_adjust {}", spec.smax_adjust);
    let _ = writeln!(manifest, "seed {}", spec.seed);
    for f in &files {
        let name = f.file_name().unwrap_or_default().to_string_lossy();
        let _ = writeln!(manifest, "file {name}");
    }
    let path = a.out_dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    files.push(path);
    Ok(files)
}

pub fn cmd_gradcheck(scope: &str, seed: u64, samples: usize) -> Result<GradReport> {
    match scope {
        "primitives" => check_primitives(seed),
        "msdcn" => check_msdcn(seed),
        "model" => check_model(seed, samples),
        _ => Err(Error::Argument(format!(
            "unknown scope '{scope}' (expected primitives, msdcn or model)"
        ))),
    }
}

pub fn parse_sizes(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|tok| {
            let tok = tok.trim();
            let bad = || Error::Argument(format!("bad size '{tok}' (expected N or HxW)"));
            match tok.split_once('x') {
                Some((h, w)) => Ok((h.parse().map_err(|_| bad())?, w.parse().map_err(|_| bad())?)),
                None => {
                    let n = tok.parse().map_err(|_| bad())?;
                    Ok((n, n))
                }
            }
        })
        .collect()
}

pub fn bench_studies(a: &BenchArgs) -> Result<Vec<ScalingStudy>> {
    let sizes = parse_sizes(&a.sizes)?;
    a.op
        .split(',')
        .map(|op| {
            let op: BenchOp = op.trim().parse()?;
            let template = BenchCase {
                batch: a.batch,
                iters: a.iters,
                warmup: a.warmup,
                threads: a.threads,
                ..BenchCase::new(op, sizes[0].0, sizes[0].1, a.groups, a.channels)
            };
            template.validate()?;
            scaling_study(&template, &sizes)
        })
        .collect()
}

/// Aligned tables, an equality check of the two deformable kernels, then CSV.
pub fn cmd_bench(a: &BenchArgs) -> Result<String> {
    let studies = bench_studies(a)?;
    let mut s = String::new();
    for st in &studies {
        s.push_str(&st.table());
        s.push('\n');
    }
    if let Some((h, w)) = parse_sizes(&a.sizes)?.first().copied() {
        let case = BenchCase::new(BenchOp::DcnBlocked, h, w, a.groups, a.channels);
        let same = blocked_matches_naive(&case)?;
        let _ = writeln!(s, "dcn_blocked == dcn_naive at {h}x{w}: {same}\n");
    }
    let mut csv = String::new();
    for (i, st) in studies.iter().enumerate() {
        let body = st.csv();
        csv.push_str(if i == 0 { &body } else { body.split_once('\n').map_or("", |x| x.1) });
    }
    if let Some(path) = &a.csv {
        std::fs::write(path, &csv)?;
    }
    s.push_str(&csv);
    Ok(s)
}

/// Vectors of every sample in `[N, ...]`.
fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.shape()[0]).map(|i| t.slab(i).to_vec()).collect()
}

pub fn cmd_eval(a: &EvalArgs) -> Result<MetricReport> {
    let model = load_model(&a.ckpt)?;
    evaluate(&model, a)
}

/// Labelled datasets are sampled class by class (classes in turn) and scored
/// with quadrant accuracy; every dataset also gets moment and MMD statistics
/// against a fresh reference draw, with a second draw as the baseline.
pub fn evaluate(model: &Model, a: &EvalArgs) -> Result<MetricReport> {
    let (h, w, c) = a.dataset.sample_shape();
    if (h, w) != model.config.train_size || c != model.config.in_channels {
        return Err(Error::Argument(format!(
            "checkpoint was trained on {:?}x{} data, dataset {} has {h}x{w}x{c}",
            model.config.train_size, model.config.in_channels, a.dataset
        )));
    }
    let n = a.n_samples;
    let classes = a.dataset.num_classes().min(model.config.num_classes);
    let spec = |label, count, seed| SampleSpec {
        solver: a.solver,
        steps: a.steps.unwrap_or_else(|| a.solver.default_steps()),
        cfg_scale: a.cfg,
        height: h,
        width: w,
        smax_adjust: false,
        seed,
        label,
        count,
    };
    let mut samples = Vec::with_capacity(n);
    let mut intended = Vec::with_capacity(n);
    if classes == 0 {
        samples = rows(&sample(model, &spec(Label::Null, n, a.seed))?);
    } else {
        for class in 0..classes {
            let count = n / classes + usize::from(class < n % classes);
            if count == 0 {
                continue;
            }
            let seed = derive(a.seed, &[tag::SAMPLE, class as u64]);
            samples.extend(rows(&sample(model, &spec(Label::Class(class), count, seed))?));
            intended.extend(std::iter::repeat(class).take(count));
        }
    }
    let reference = Dataset::generate(a.dataset, n, derive(a.seed, &[tag::DATA, 1]))?.vectors();
    let baseline = Dataset::generate(a.dataset, n, derive(a.seed, &[tag::DATA, 2]))?.vectors();
    let mut report = moment_report(&samples, &reference)?;
    report.baseline_mmd = Some(moment_report(&baseline, &reference)?.mmd_rbf);
    if classes > 0 {
        report.per_class = quadrant_accuracy(&samples, &intended, h, w);
    }
    Ok(report)
}
