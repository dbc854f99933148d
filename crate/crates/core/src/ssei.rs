//! Semantic-selective embedding initialization.
//!
//! Each new target condition is matched to the source class whose mean
//! feature vector has the highest cosine similarity, and its embedding row
//! starts as a copy of that class's row.
//!
//! Features are a fixed handcrafted descriptor (no learned encoder): per-cell
//! RGB means over a 3×3 grid followed by per-channel global mean, standard
//! deviation, minimum and maximum.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{Error, Result};
use crate::model::DiT;
use crate::scalar::Scalar;
use crate::scene::{SceneSample, CHANNELS, IMAGE_SIZE};

pub const GRID: usize = 3;
pub const FEATURE_DIM: usize = GRID * GRID * CHANNELS + 4 * CHANNELS;

/// Descriptor of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        Float::sqrt(self.0.iter().map(|v| v * v).sum::<f64>())
    }
}

/// Grid cell of a pixel coordinate along one axis.
fn cell(i: usize) -> usize {
    i * GRID / IMAGE_SIZE
}

/// Features of a `[32 × 32 × 3]` image with values in `[0, 1]`.
pub fn extract_features(image: &[f32]) -> Result<FeatureVector> {
    if image.len() != IMAGE_SIZE * IMAGE_SIZE * CHANNELS {
        return Err(Error::Input(format!(
            "expected {} pixel values, got {}",
            IMAGE_SIZE * IMAGE_SIZE * CHANNELS,
            image.len()
        )));
    }
    if let Some(v) = image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!("pixel value {v} outside [0, 1]")));
    }
    let mut grid_sum = [0.0f64; GRID * GRID * CHANNELS];
    let mut grid_n = [0usize; GRID * GRID];
    let mut sum = [0.0f64; CHANNELS];
    let mut sq = [0.0f64; CHANNELS];
    let mut min = [f64::INFINITY; CHANNELS];
    let mut max = [f64::NEG_INFINITY; CHANNELS];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let g = cell(y) * GRID + cell(x);
            grid_n[g] += 1;
            for c in 0..CHANNELS {
                let v = image[(y * IMAGE_SIZE + x) * CHANNELS + c] as f64;
                grid_sum[g * CHANNELS + c] += v;
                sum[c] += v;
                sq[c] += v * v;
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
    }
    let n = (IMAGE_SIZE * IMAGE_SIZE) as f64;
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for g in 0..GRID * GRID {
        for c in 0..CHANNELS {
            out.push(grid_sum[g * CHANNELS + c] / grid_n[g] as f64);
        }
    }
    for c in 0..CHANNELS {
        let mean = sum[c] / n;
        let var = (sq[c] / n - mean * mean).max(0.0);
        out.extend([mean, Float::sqrt(var), min[c], max[c]]);
    }
    Ok(FeatureVector(out))
}

/// Mean feature vector per label, for labels `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticIndex {
    pub means: Vec<FeatureVector>,
}

impl SemanticIndex {
    pub fn build(samples: &[SceneSample], classes: usize) -> Result<Self> {
        let mut sums = vec![vec![0.0; FEATURE_DIM]; classes];
        let mut counts = vec![0usize; classes];
        for s in samples {
            let label = s.label as usize;
            if label >= classes {
                return Err(Error::Index {
                    index: label,
                    len: classes,
                });
            }
            let f = extract_features(&s.image)?;
            sums[label].iter_mut().zip(&f.0).for_each(|(a, b)| *a += b);
            counts[label] += 1;
        }
        let means = sums
            .into_iter()
            .zip(&counts)
            .enumerate()
            .map(|(label, (sum, &n))| {
                if n == 0 {
                    return Err(Error::Input(format!("label {label} has no samples")));
                }
                let mean = FeatureVector(sum.into_iter().map(|v| v / n as f64).collect());
                if mean.norm() == 0.0 {
                    return Err(Error::Input(format!("label {label} has an all-zero mean feature")));
                }
                Ok(mean)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { means })
    }
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: vec![a.len()],
            right: vec![b.len()],
        });
    }
    let na = Float::sqrt(a.iter().map(|v| v * v).sum::<f64>());
    let nb = Float::sqrt(b.iter().map(|v| v * v).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Input("cosine similarity of a zero vector is undefined".into()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Index of the source mean most cosine-similar to `target`, ties to the lowest index.
pub fn nearest_source_class(target: &[f64], source_means: &[FeatureVector]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in source_means.iter().enumerate() {
        let c = cosine_similarity(target, &s.0)?;
        if best.is_none_or(|(_, b)| c > b) {
            best = Some((i, c));
        }
    }
    best.ok_or_else(|| Error::Input("no source classes to compare against".into()))
}

/// One row of the assignment table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub condition: usize,
    pub source_class: usize,
    pub similarity: f64,
}

pub fn assign_conditions(source: &SemanticIndex, target: &SemanticIndex) -> Result<Vec<Assignment>> {
    target
        .means
        .iter()
        .enumerate()
        .map(|(condition, m)| {
            let (source_class, similarity) = nearest_source_class(&m.0, &source.means)?;
            Ok(Assignment {
                condition,
                source_class,
                similarity,
            })
        })
        .collect()
}

/// Copies each assigned source row into the model's expanded condition rows.
/// `assignments[j]` is the source row for new condition `j`.
pub fn init_condition_embeddings<F: Scalar>(model: &mut DiT<F>, assignments: &[usize]) -> Result<()> {
    model.copy_embedding_rows(assignments)
}
