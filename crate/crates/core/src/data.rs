//! Small synthetic datasets, every sample drawn from its own seeded stream.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, tag};
use crate::tensor::Tensor;

pub const GAUSS8_STD: f64 = 0.1;
pub const SHAPES_SIZE: usize = 16;
pub const SQUARE: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Eight Gaussians (std 0.1) centred on the unit circle, as `1x1x2` maps.
    Gauss8,
    /// Uniform over the dark cells of a 4x4 checkerboard on `[-1, 1]^2`, as `1x1x2` maps.
    Checkerboard,
    /// `16x16x1` images; class `c` puts a bright 6x6 square in quadrant `c`
    /// (0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right).
    Shapes16,
    /// Caller-supplied tensors.
    Custom,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss8" => Ok(Self::Gauss8),
            "checkerboard" | "checkerboard-2d" => Ok(Self::Checkerboard),
            "shapes16" => Ok(Self::Shapes16),
            _ => Err(Error::Argument(format!(
                "unknown dataset '{s}' (expected gauss8, checkerboard or shapes16)"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gauss8 => "gauss8",
            Self::Checkerboard => "checkerboard",
            Self::Shapes16 => "shapes16",
            Self::Custom => "custom",
        })
    }
}

impl DatasetKind {
    /// `(H, W, C)` of one sample.
    pub fn sample_shape(self) -> (usize, usize, usize) {
        match self {
            Self::Gauss8 | Self::Checkerboard | Self::Custom => (1, 1, 2),
            Self::Shapes16 => (SHAPES_SIZE, SHAPES_SIZE, 1),
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            Self::Shapes16 => 4,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub kind: DatasetKind,
    /// `[N, H, W, C]`
    pub images: Tensor,
    pub labels: Vec<Option<usize>>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        images: Tensor,
        labels: Vec<Option<usize>>,
        num_classes: usize,
    ) -> Result<Self> {
        if images.shape().len() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "images {:?} do not match {} labels",
                images.shape(),
                labels.len()
            )));
        }
        if let Some(c) = labels.iter().flatten().find(|&&c| c >= num_classes) {
            return Err(Error::Argument(format!(
                "label {c} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            kind,
            images,
            labels,
            num_classes,
        })
    }

    /// `n` samples of `kind`; sample `i` depends only on `(seed, i)`.
    pub fn generate(kind: DatasetKind, n: usize, seed: u64) -> Result<Self> {
        let (h, w, c) = kind.sample_shape();
        let mut data = Vec::with_capacity(n * h * w * c);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let mut rng = stream(seed, &[tag::DATA, i as u64]);
            match kind {
                DatasetKind::Gauss8 => {
                    data.extend(gauss8_point(&mut rng));
                    labels.push(None);
                }
                DatasetKind::Checkerboard => {
                    data.extend(checkerboard_point(&mut rng));
                    labels.push(None);
                }
                DatasetKind::Shapes16 => {
                    let class = rng.gen_range(0..4);
                    data.extend(shapes_image(class, &mut rng));
                    labels.push(Some(class));
                }
                DatasetKind::Custom => {
                    return Err(Error::Argument("custom datasets cannot be generated".into()))
                }
            }
        }
        Self::new(
            kind,
            Tensor::new(vec![n, h, w, c], data)?,
            labels,
            kind.num_classes(),
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels[i]
    }

    /// Stacks the listed samples into `[idx.len(), H, W, C]`.
    pub fn gather(&self, idx: &[usize]) -> Result<Tensor> {
        let per = self.images.len() / self.len().max(1);
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Argument(format!("sample {i} out of range")));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = idx.len();
        Tensor::new(shape, data)
    }

    /// Rows of `[N, H*W*C]` flattened sample vectors.
    pub fn vectors(&self) -> Vec<Vec<f64>> {
        let per = self.images.len() / self.len().max(1);
        self.images.data().chunks(per.max(1)).map(<[f64]>::to_vec).collect()
    }
}

fn gauss8_point(rng: &mut impl Rng) -> [f64; 2] {
    let k = rng.gen_range(0..8);
    let theta = std::f64::consts::TAU * k as f64 / 8.0;
    let n = Normal::new(0.0, GAUSS8_STD).expect("valid std");
    [theta.cos() + n.sample(rng), theta.sin() + n.sample(rng)]
}

fn checkerboard_point(rng: &mut impl Rng) -> [f64; 2] {
    // 8 of the 16 cells, those with an even index sum.
    let cell = rng.gen_range(0..8);
    let row = cell / 2;
    let col = 2 * (cell % 2) + row % 2;
    let u: f64 = rng.gen();
    let v: f64 = rng.gen();
    [-1.0 + 0.5 * (col as f64 + u), -1.0 + 0.5 * (row as f64 + v)]
}

/// Background uniform in `[-1, -0.4)`, square uniform in `[0.6, 1)`, placed at a
/// random offset inside its quadrant.
fn shapes_image(class: usize, rng: &mut impl Rng) -> Vec<f64> {
    let n = SHAPES_SIZE;
    let half = n / 2;
    let mut img: Vec<f64> = (0..n * n).map(|_| rng.gen_range(-1.0..-0.4)).collect();
    let oi = (class / 2) * half + rng.gen_range(0..=half - SQUARE);
    let oj = (class % 2) * half + rng.gen_range(0..=half - SQUARE);
    for i in oi..oi + SQUARE {
        for j in oj..oj + SQUARE {
            img[i * n + j] = rng.gen_range(0.6..1.0);
        }
    }
    img
}

/// Quadrant with the largest mean value, using the same numbering as the classes.
pub fn brightest_quadrant(img: &[f64], h: usize, w: usize) -> usize {
    let mut sums = [0.0; 4];
    for i in 0..h {
        for j in 0..w {
            let q = (2 * i / h.max(1)) * 2 + 2 * j / w.max(1);
            sums[q.min(3)] += img[i * w + j];
        }
    }
    (0..4)
        .max_by(|&a, &b| sums[a].total_cmp(&sums[b]))
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_reproducible() {
        for kind in [DatasetKind::Gauss8, DatasetKind::Checkerboard, DatasetKind::Shapes16] {
            let a = Dataset::generate(kind, 50, 3).unwrap();
            let b = Dataset::generate(kind, 50, 3).unwrap();
            assert_eq!(a, b);
            let c = Dataset::generate(kind, 50, 4).unwrap();
            assert_ne!(a.images, c.images);
        }
    }

    #[test]
    fn prefix_is_stable() {
        let a = Dataset::generate(DatasetKind::Shapes16, 10, 1).unwrap();
        let b = Dataset::generate(DatasetKind::Shapes16, 20, 1).unwrap();
        assert_eq!(a.images.data(), &b.images.data()[..a.images.len()]);
    }

    #[test]
    fn shapes_in_range_and_classified() {
        let d = Dataset::generate(DatasetKind::Shapes16, 200, 2).unwrap();
        assert!(d.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for (v, l) in d.vectors().iter().zip(&d.labels) {
            assert_eq!(Some(brightest_quadrant(v, 16, 16)), *l);
        }
        let mut counts = [0; 4];
        for l in d.labels.iter().flatten() {
            counts[*l] += 1;
        }
        assert!(counts.iter().all(|&c| c > 30));
    }

    #[test]
    fn gauss8_near_unit_circle() {
        let d = Dataset::generate(DatasetKind::Gauss8, 500, 5).unwrap();
        for p in d.images.data().chunks(2) {
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            assert!((r - 1.0).abs() < 0.6);
        }
    }

    #[test]
    fn checkerboard_cells() {
        let d = Dataset::generate(DatasetKind::Checkerboard, 500, 6).unwrap();
        for p in d.images.data().chunks(2) {
            assert!(p.iter().all(|v| (-1.0..1.0).contains(v)));
            let col = ((p[0] + 1.0) / 0.5).floor() as usize;
            let row = ((p[1] + 1.0) / 0.5).floor() as usize;
            assert_eq!((row + col) % 2, 0);
        }
    }
}
