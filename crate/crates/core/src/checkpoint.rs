//! On-disk parameter container.
//!
//! ```text
//! "FDCN" | version: u32 LE | header_len: u64 LE | header (UTF-8) | payload | fnv1a(payload): u64 LE
//! ```
//!
//! The header is line-oriented text: a `flowdcn-checkpoint` title line, then
//! `meta <key> <value>` lines, then one
//! `tensor <name> dtype=<f32|f64> shape=<AxBx..> offset=<bytes>` line per array
//! in payload order. Arrays are little-endian and packed back to back.

use std::path::Path;

use crate::error::{Error, Result};
use crate::msdcn::MsDcnOptions;
use crate::network::{Model, ModelConfig};
use crate::tensor::{ParamSet, Tensor};

pub const MAGIC: &[u8; 4] = b"FDCN";
pub const VERSION: u32 = 1;
const TITLE: &str = "flowdcn-checkpoint";

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

impl Checkpoint {
    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(e) => e.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!("{TITLE}\n");
        for (k, v) in &self.meta {
            if k.is_empty() || k.contains(char::is_whitespace) || v.contains('\n') {
                return Err(Error::Format(format!("meta entry '{k}' cannot be stored")));
            }
            header.push_str(&format!("meta {k} {v}\n"));
        }
        let mut payload = Vec::new();
        for e in &self.entries {
            if e.name.is_empty() || e.name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("tensor name '{}' cannot be stored", e.name)));
            }
            let shape = e
                .tensor
                .shape()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            header.push_str(&format!(
                "tensor {} dtype={} shape={} offset={}\n",
                e.name,
                e.dtype.name(),
                shape,
                payload.len()
            ));
            for &v in e.tensor.data() {
                match e.dtype {
                    Dtype::F64 => payload.extend_from_slice(&v.to_le_bytes()),
                    Dtype::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                }
            }
        }
        let mut out = Vec::with_capacity(16 + header.len() + payload.len() + 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv1a(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fmt = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 24 || &bytes[..4] != MAGIC {
            return Err(fmt("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + hlen + 8 {
            return Err(fmt("checkpoint truncated"));
        }
        let header = std::str::from_utf8(&bytes[16..16 + hlen])
            .map_err(|_| fmt("checkpoint header is not UTF-8"))?;
        let payload = &bytes[16 + hlen..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv1a(payload) != stored {
            return Err(fmt("checksum mismatch; refusing to load"));
        }

        let mut lines = header.lines();
        if lines.next() != Some(TITLE) {
            return Err(fmt("checkpoint header has no title line"));
        }
        let mut ck = Checkpoint::default();
        let mut expected_offset = 0usize;
        for line in lines {
            if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once(' ').unwrap_or((rest, ""));
                ck.meta.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("tensor ") {
                let mut parts = rest.split(' ');
                let name = parts.next().ok_or_else(|| fmt("tensor line without name"))?;
                let mut dtype = None;
                let mut shape = None;
                let mut offset = None;
                for p in parts {
                    let (k, v) = p
                        .split_once('=')
                        .ok_or_else(|| Error::Format(format!("bad field '{p}'")))?;
                    match k {
                        "dtype" => {
                            dtype = Some(match v {
                                "f32" => Dtype::F32,
                                "f64" => Dtype::F64,
                                _ => return Err(Error::Format(format!("unknown dtype '{v}'"))),
                            })
                        }
                        "shape" => {
                            shape = Some(
                                v.split('x')
                                    .map(|d| d.parse::<usize>())
                                    .collect::<std::result::Result<Vec<_>, _>>()
                                    .map_err(|_| Error::Format(format!("bad shape '{v}'")))?,
                            )
                        }
                        "offset" => {
                            offset = Some(
                                v.parse::<usize>()
                                    .map_err(|_| Error::Format(format!("bad offset '{v}'")))?,
                            )
                        }
                        _ => return Err(Error::Format(format!("unknown field '{k}'"))),
                    }
                }
                let (dtype, shape, offset) = match (dtype, shape, offset) {
                    (Some(d), Some(s), Some(o)) => (d, s, o),
                    _ => return Err(Error::Format(format!("incomplete entry for '{name}'"))),
                };
                if offset != expected_offset {
                    return Err(Error::Format(format!(
                        "tensor '{name}' at offset {offset}, expected {expected_offset}"
                    )));
                }
                let n: usize = shape.iter().product();
                let end = offset + n * dtype.size();
                if end > payload.len() {
                    return Err(Error::Format(format!("tensor '{name}' runs past the payload")));
                }
                let raw = &payload[offset..end];
                let data = match dtype {
                    Dtype::F64 => raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    Dtype::F32 => raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                        .collect(),
                };
                ck.entries.push(Entry {
                    name: name.to_string(),
                    dtype,
                    tensor: Tensor::new(shape, data)?,
                });
                expected_offset = end;
            } else if !line.is_empty() {
                return Err(Error::Format(format!("unrecognised header line '{line}'")));
            }
        }
        if expected_offset != payload.len() {
            return Err(fmt("payload has trailing bytes"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn config_meta(cfg: &ModelConfig) -> Vec<(String, String)> {
    let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let o = cfg.options;
    [
        ("model.name", cfg.name.clone()),
        ("model.layers", cfg.layers.to_string()),
        ("model.hidden", cfg.hidden.to_string()),
        ("model.groups", cfg.groups.to_string()),
        ("model.points", cfg.points.to_string()),
        ("model.patch", cfg.patch.to_string()),
        ("model.num_classes", cfg.num_classes.to_string()),
        ("model.in_channels", cfg.in_channels.to_string()),
        ("model.train_size", format!("{}x{}", cfg.train_size.0, cfg.train_size.1)),
        ("model.s_max", join(&cfg.s_max)),
        ("model.freq_dim", cfg.freq_dim.to_string()),
        ("model.softmax_weights", o.softmax_weights.to_string()),
        ("model.learn_direction_prior", o.learn_direction_prior.to_string()),
        ("model.learn_relative_scale", o.learn_relative_scale.to_string()),
        ("model.multiscale", o.multiscale.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn parse_meta<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T> {
    let raw = ck
        .meta(key)
        .ok_or_else(|| Error::Format(format!("checkpoint lacks '{key}'")))?;
    raw.parse()
        .map_err(|_| Error::Format(format!("bad value '{raw}' for '{key}'")))
}

fn config_from_meta(ck: &Checkpoint) -> Result<ModelConfig> {
    let size: String = parse_meta(ck, "model.train_size")?;
    let (h, w) = size
        .split_once('x')
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| Error::Format(format!("bad training size '{size}'")))?;
    let s_max: String = parse_meta(ck, "model.s_max")?;
    let s_max = s_max
        .split(',')
        .map(|v| v.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Format(format!("bad s_max list '{s_max}'")))?;
    let cfg = ModelConfig {
        name: parse_meta(ck, "model.name")?,
        layers: parse_meta(ck, "model.layers")?,
        hidden: parse_meta(ck, "model.hidden")?,
        groups: parse_meta(ck, "model.groups")?,
        points: parse_meta(ck, "model.points")?,
        patch: parse_meta(ck, "model.patch")?,
        num_classes: parse_meta(ck, "model.num_classes")?,
        in_channels: parse_meta(ck, "model.in_channels")?,
        train_size: (h, w),
        s_max,
        options: MsDcnOptions {
            softmax_weights: parse_meta(ck, "model.softmax_weights")?,
            learn_direction_prior: parse_meta(ck, "model.learn_direction_prior")?,
            learn_relative_scale: parse_meta(ck, "model.learn_relative_scale")?,
            multiscale: parse_meta(ck, "model.multiscale")?,
        },
        freq_dim: parse_meta(ck, "model.freq_dim")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Model parameters plus the configuration needed to rebuild them, followed
/// by `extra` meta entries.
pub fn from_model(model: &Model, extra: &[(&str, String)], dtype: Dtype) -> Checkpoint {
    let mut meta = config_meta(&model.config);
    meta.extend(extra.iter().map(|(k, v)| (k.to_string(), v.clone())));
    let entries = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| Entry {
            name,
            dtype,
            tensor: t.clone(),
        })
        .collect();
    Checkpoint { meta, entries }
}

pub fn to_model(ck: &Checkpoint) -> Result<Model> {
    let cfg = config_from_meta(ck)?;
    let mut model = Model::init(&cfg, 0)?;
    {
        let mut slots = model.named_tensors_mut();
        if slots.len() != ck.entries.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                ck.entries.len(),
                slots.len()
            )));
        }
        for ((name, slot), e) in slots.iter_mut().zip(&ck.entries) {
            if *name != e.name || slot.shape() != e.tensor.shape() {
                return Err(Error::Format(format!(
                    "tensor '{}' {:?} does not match model slot '{}' {:?}",
                    e.name,
                    e.tensor.shape(),
                    name,
                    slot.shape()
                )));
            }
            slot.data_mut().copy_from_slice(e.tensor.data());
        }
    }
    for b in &model.blocks {
        b.dcn.validate()?;
    }
    Ok(model)
}

/// FNV-1a over the little-endian `f64` bytes of every parameter, in order.
pub fn param_hash(params: &impl ParamSet) -> u64 {
    let mut bytes = Vec::new();
    for (_, t) in params.named_tensors() {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fnv1a(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        let mut m = Model::init(&ModelConfig::tiny_for_tests(), 3).unwrap();
        m.final_proj.weight.fill(0.25);
        m
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let m = model();
        let ck = from_model(&m, &[("train.step", "12".into())], Dtype::F64);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m2 = to_model(&back).unwrap();
        assert_eq!(m2, m);
        assert_eq!(back.meta("train.step"), Some("12"));
    }

    #[test]
    fn header_is_readable() {
        let bytes = from_model(&model(), &[], Dtype::F64).to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"FDCN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + hlen]).unwrap();
        assert!(header.contains("tensor patch_embed.weight dtype=f64 shape=8x8 offset=0\n"));
        assert!(header.contains("meta model.s_max 2,2\n"));
    }

    #[test]
    fn corruption_is_refused() {
        let mut bytes = from_model(&model(), &[], Dtype::F64).to_bytes().unwrap();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        let err = Checkpoint::from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"));
        assert!(Checkpoint::from_bytes(b"XXXX0000000000000000000000").is_err());
    }

    #[test]
    fn f32_entries_roundtrip() {
        let ck = from_model(&model(), &[], Dtype::F32);
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let m = to_model(&back).unwrap();
        assert_eq!(m.final_proj.weight.data()[0], 0.25);
    }

    #[test]
    fn param_hash_tracks_values() {
        let a = model();
        let mut b = a.clone();
        assert_eq!(param_hash(&a), param_hash(&b));
        b.final_norm.data_mut()[0] = 2.0;
        assert_ne!(param_hash(&a), param_hash(&b));
    }
}
