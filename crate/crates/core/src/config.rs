//! `key = value` run configuration. Blank lines and `#` comments are ignored;
//! unknown keys, repeated keys and unparsable values are all reported together.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::DatasetKind;
use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::network::ModelConfig;
use crate::sampler::Solver;

/// Every accepted key with its default and meaning.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("model.size", "T", "named configuration: T, S, B, L or XL"),
    ("model.layers", "", "override the number of blocks"),
    ("model.hidden", "", "override the hidden width"),
    ("model.groups", "", "override the number of deformable groups"),
    ("model.points", "9", "sampling points per group"),
    ("model.patch", "", "override the patch size"),
    ("model.s_max", "", "maximum scale; one value for all layers or a comma list (default: larger side of the training grid)"),
    ("model.freq_dim", "256", "width of the sinusoidal timestep embedding"),
    ("model.softmax_weights", "false", "softmax-normalise the dynamic weights"),
    ("model.learn_direction_prior", "false", "train the direction prior grid"),
    ("model.learn_relative_scale", "true", "predict a per-pixel scale logit"),
    ("model.multiscale", "true", "spread the initial group scale priors"),
    ("data.kind", "gauss8", "dataset: gauss8, checkerboard or shapes16"),
    ("data.samples", "10000", "training set size"),
    ("data.seed", "0", "dataset generation seed"),
    ("train.lr", "0.0001", "Adam learning rate (constant)"),
    ("train.beta1", "0.9", "Adam first-moment decay"),
    ("train.beta2", "0.999", "Adam second-moment decay"),
    ("train.adam_eps", "1e-8", "Adam denominator epsilon"),
    ("train.batch_size", "32", "samples per step"),
    ("train.steps", "1000", "optimizer steps"),
    ("train.seed", "0", "initialisation and batch seed"),
    ("train.label_dropout", "0.1", "probability of training a sample unconditionally"),
    ("train.log_every", "100", "log interval in steps (0 disables)"),
    ("sample.solver", "euler_maruyama", "euler_ode or euler_maruyama"),
    ("sample.steps", "", "solver steps (default: 50 for euler_ode, 250 for euler_maruyama)"),
    ("sample.cfg", "1.375", "classifier-free guidance scale"),
    ("sample.seed", "0", "sampling seed"),
    ("sample.count", "16", "images per sampling call"),
];

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOverrides {
    pub size: String,
    pub layers: Option<usize>,
    pub hidden: Option<usize>,
    pub groups: Option<usize>,
    pub points: usize,
    pub patch: Option<usize>,
    pub s_max: Option<Vec<f64>>,
    pub freq_dim: usize,
    pub softmax_weights: bool,
    pub learn_direction_prior: bool,
    pub learn_relative_scale: bool,
    pub multiscale: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelOverrides,
    pub dataset: DatasetKind,
    pub data_samples: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
    pub solver: Solver,
    pub sample_steps: Option<usize>,
    pub cfg_scale: f64,
    pub sample_seed: u64,
    pub sample_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::parse("").expect("defaults parse")
    }
}

fn parse_list(v: &str) -> std::result::Result<Vec<f64>, String> {
    v.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|e| e.to_string()))
        .collect()
}

fn opt<T: FromStr>(v: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() {
        Ok(None)
    } else {
        v.parse().map(Some).map_err(|e: T::Err| e.to_string())
    }
}

fn req<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| e.to_string())
}

impl RunConfig {
    /// Parses `text` on top of the documented defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: Vec<(String, String)> = KEYS
            .iter()
            .map(|(k, d, _)| (k.to_string(), d.to_string()))
            .collect();
        let mut seen = Vec::new();
        let mut bad = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                bad.push(format!("line {}: expected key = value, got '{line}'", n + 1));
                continue;
            };
            let (k, v) = (k.trim(), v.trim());
            match values.iter_mut().find(|(key, _)| key == k) {
                None => bad.push(format!("line {}: unknown key '{k}'", n + 1)),
                Some(_) if seen.contains(&k.to_string()) => {
                    bad.push(format!("line {}: key '{k}' given twice", n + 1))
                }
                Some(slot) => {
                    slot.1 = v.to_string();
                    seen.push(k.to_string());
                }
            }
        }

        let mut cfg = Self::blank();
        for (k, v) in &values {
            if let Err(e) = cfg.apply(k, v) {
                bad.push(format!("{k} = '{v}': {e}"));
            }
        }
        if let Err(e) = cfg.train.validate() {
            bad.push(e.to_string());
        }
        if bad.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(format!(
                "{} bad entr{}:\n  {}",
                bad.len(),
                if bad.len() == 1 { "y" } else { "ies" },
                bad.join("\n  ")
            )))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn blank() -> Self {
        Self {
            model: ModelOverrides {
                size: String::new(),
                layers: None,
                hidden: None,
                groups: None,
                points: 0,
                patch: None,
                s_max: None,
                freq_dim: 0,
                softmax_weights: false,
                learn_direction_prior: false,
                learn_relative_scale: false,
                multiscale: false,
            },
            dataset: DatasetKind::Gauss8,
            data_samples: 0,
            data_seed: 0,
            train: TrainConfig::default(),
            solver: Solver::EulerMaruyama,
            sample_steps: None,
            cfg_scale: 0.0,
            sample_seed: 0,
            sample_count: 0,
        }
    }

    fn apply(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.size" => m.size = req(v)?,
            "model.layers" => m.layers = opt(v)?,
            "model.hidden" => m.hidden = opt(v)?,
            "model.groups" => m.groups = opt(v)?,
            "model.points" => m.points = req(v)?,
            "model.patch" => m.patch = opt(v)?,
            "model.s_max" => m.s_max = if v.is_empty() { None } else { Some(parse_list(v)?) },
            "model.freq_dim" => m.freq_dim = req(v)?,
            "model.softmax_weights" => m.softmax_weights = req(v)?,
            "model.learn_direction_prior" => m.learn_direction_prior = req(v)?,
            "model.learn_relative_scale" => m.learn_relative_scale = req(v)?,
            "model.multiscale" => m.multiscale = req(v)?,
            "data.kind" => {
                self.dataset = req(v)?;
                if self.dataset == DatasetKind::Custom {
                    return Err("custom datasets cannot be configured from a file".into());
                }
            }
            "data.samples" => self.data_samples = req(v)?,
            "data.seed" => self.data_seed = req(v)?,
            "train.lr" => t.lr = req(v)?,
            "train.beta1" => t.beta1 = req(v)?,
            "train.beta2" => t.beta2 = req(v)?,
            "train.adam_eps" => t.adam_eps = req(v)?,
            "train.batch_size" => t.batch_size = req(v)?,
            "train.steps" => t.steps = req(v)?,
            "train.seed" => t.seed = req(v)?,
            "train.label_dropout" => t.label_dropout = req(v)?,
            "train.log_every" => t.log_every = req(v)?,
            "sample.solver" => self.solver = req(v)?,
            "sample.steps" => self.sample_steps = opt(v)?,
            "sample.cfg" => self.cfg_scale = req(v)?,
            "sample.seed" => self.sample_seed = req(v)?,
            "sample.count" => self.sample_count = req(v)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Model configuration for the configured dataset.
    pub fn model_config(&self) -> Result<ModelConfig> {
        let (h, w, c) = self.dataset.sample_shape();
        let m = &self.model;
        let mut cfg = ModelConfig::named(&m.size, c, self.dataset.num_classes(), (h, w))?;
        cfg.layers = m.layers.unwrap_or(cfg.layers);
        cfg.hidden = m.hidden.unwrap_or(cfg.hidden);
        cfg.groups = m.groups.unwrap_or(cfg.groups);
        cfg.patch = m.patch.unwrap_or(cfg.patch);
        cfg.points = m.points;
        cfg.freq_dim = m.freq_dim;
        cfg.options.softmax_weights = m.softmax_weights;
        cfg.options.learn_direction_prior = m.learn_direction_prior;
        cfg.options.learn_relative_scale = m.learn_relative_scale;
        cfg.options.multiscale = m.multiscale;
        cfg.reset_s_max();
        match &m.s_max {
            Some(v) if v.len() == 1 => cfg.s_max = vec![v[0]; cfg.layers],
            Some(v) => cfg.s_max = v.clone(),
            None => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sample_steps(&self) -> usize {
        self.sample_steps.unwrap_or_else(|| self.solver.default_steps())
    }

    /// Every key with its current value, in a form [`RunConfig::parse`] reads back.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let o = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
        let s_max = m
            .s_max
            .as_ref()
            .map(|v| v.iter().map(f64::to_string).collect::<Vec<_>>().join(","))
            .unwrap_or_default();
        let values = [
            m.size.clone(),
            o(m.layers),
            o(m.hidden),
            o(m.groups),
            m.points.to_string(),
            o(m.patch),
            s_max,
            m.freq_dim.to_string(),
            m.softmax_weights.to_string(),
            m.learn_direction_prior.to_string(),
            m.learn_relative_scale.to_string(),
            m.multiscale.to_string(),
            self.dataset.to_string(),
            self.data_samples.to_string(),
            self.data_seed.to_string(),
            t.lr.to_string(),
            t.beta1.to_string(),
            t.beta2.to_string(),
            t.adam_eps.to_string(),
            t.batch_size.to_string(),
            t.steps.to_string(),
            t.seed.to_string(),
            t.label_dropout.to_string(),
            t.log_every.to_string(),
            self.solver.to_string(),
            o(self.sample_steps),
            self.cfg_scale.to_string(),
            self.sample_seed.to_string(),
            self.sample_count.to_string(),
        ];
        let mut s = String::new();
        for ((k, _, doc), v) in KEYS.iter().zip(values) {
            let _ = writeln!(s, "# {doc}\n{k} = {v}");
        }
        s
    }
}

/// Documentation of every key, one per line.
pub fn describe_keys() -> String {
    let mut s = String::new();
    for (k, d, doc) in KEYS {
        let d = if d.is_empty() { "(derived)" } else { d };
        let _ = writeln!(s, "{k:<30} {d:<16} {doc}");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.model.points, 9);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.cfg_scale, 1.375);
        assert_eq!(c.solver, Solver::EulerMaruyama);
        assert_eq!(c.sample_steps(), 250);
        let ode = RunConfig::parse("sample.solver = euler_ode").unwrap();
        assert_eq!(ode.sample_steps(), 50);
        assert_eq!(c.model_config().unwrap().name, "T");
    }

    #[test]
    fn every_key_documented_and_applicable() {
        let mut c = RunConfig::blank();
        for (k, d, doc) in KEYS {
            assert!(!doc.is_empty());
            c.apply(k, d).unwrap();
        }
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# toy\nmodel.patch = 2   # coarser\ndata.kind=shapes16\ntrain.steps = 5\nmodel.s_max = 3\n";
        let c = RunConfig::parse(text).unwrap();
        let m = c.model_config().unwrap();
        assert_eq!((m.patch, m.in_channels, m.num_classes), (2, 1, 4));
        assert_eq!(m.s_max, vec![3.0, 3.0]);
        assert_eq!(c.train.steps, 5);
    }

    #[test]
    fn reports_every_bad_key() {
        let text = "model.sise = T\ntrain.lr = fast\nnonsense\ntrain.steps = 3\ntrain.steps = 4\n";
        let msg = RunConfig::parse(text).unwrap_err().to_string();
        assert!(msg.contains("model.sise"), "{msg}");
        assert!(msg.contains("train.lr"), "{msg}");
        assert!(msg.contains("line 3"), "{msg}");
        assert!(msg.contains("given twice"), "{msg}");
        assert!(msg.contains("4 bad entries"), "{msg}");
    }

    #[test]
    fn text_roundtrip() {
        let c = RunConfig::parse("model.s_max = 1.5,2.5\nsample.steps = 7\ndata.kind = checkerboard")
            .unwrap();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::parse(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
        assert!(describe_keys().lines().count() == KEYS.len());
    }
}
