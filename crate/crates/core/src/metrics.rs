//! Evaluation: Fréchet feature distance, k-NN precision/recall, denoising
//! error inside object boxes, and survival statistics per box size.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{param_err, Error, Result};
use crate::sample::EpsPredictor;
use crate::scalar::Scalar;
use crate::scene::{SceneSample, CHANNELS, IMAGE_SIZE};
use crate::schedule::{region_survival_time, NoiseSchedule};
use crate::ssei::FeatureVector;
use crate::tensor::Tensor;

/// Mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    /// Only the diagonal of `cov` is meaningful.
    pub diagonal: bool,
}

impl GaussianStats {
    /// Sample statistics with the unbiased covariance. Fewer than `dim + 1`
    /// samples give a rank-deficient covariance; with `allow_diagonal` the
    /// per-dimension variances are used instead, otherwise it is an error.
    pub fn from_features(features: &[FeatureVector], allow_diagonal: bool) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Input(format!("need at least 2 feature vectors, got {n}")));
        }
        let dim = features[0].0.len();
        if let Some(f) = features.iter().find(|f| f.0.len() != dim) {
            return Err(Error::ShapeMismatch {
                op: "feature_stats",
                left: vec![dim],
                right: vec![f.0.len()],
            });
        }
        let diagonal = n < dim + 1;
        if diagonal && !allow_diagonal {
            return Err(Error::Input(format!(
                "{n} samples cannot support a full {dim}-dim covariance; enable the diagonal fallback"
            )));
        }
        let mut mean = DVector::zeros(dim);
        for f in features {
            mean += DVector::from_column_slice(&f.0);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(dim, dim);
        for f in features {
            let d = DVector::from_column_slice(&f.0) - &mean;
            if diagonal {
                for i in 0..dim {
                    cov[(i, i)] += d[i] * d[i];
                }
            } else {
                cov += &d * d.transpose();
            }
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, diagonal })
    }
}

/// Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let root = eig.eigenvalues.map(|v| Float::sqrt(v.max(0.0)));
    &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose()
}

/// `(Σ₁Σ₂)^{1/2}` for SPD inputs, as `S₁ (S₁Σ₂S₁)^{1/2} S₁⁻¹` with `S₁ = Σ₁^{1/2}`.
pub fn product_sqrt(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let r1 = sqrtm_psd(s1);
    let inner = sqrtm_psd(&(&r1 * s2 * &r1));
    let inv = r1
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Input("first covariance is singular".into()))?;
    Ok(&r1 * inner * inv)
}

/// `‖μ₁ − μ₂‖² + Tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^{1/2})`, clamped at 0.
pub fn frechet_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::ShapeMismatch {
            op: "frechet_distance",
            left: vec![a.mean.len()],
            right: vec![b.mean.len()],
        });
    }
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let trace = if a.diagonal || b.diagonal {
        (0..a.mean.len())
            .map(|i| {
                let (x, y) = (a.cov[(i, i)].max(0.0), b.cov[(i, i)].max(0.0));
                x + y - 2.0 * Float::sqrt(x * y)
            })
            .sum::<f64>()
    } else {
        // Tr((Σ₁Σ₂)^{1/2}) = Tr((S₁Σ₂S₁)^{1/2}); averaging both orderings keeps
        // the result exactly symmetric in its arguments.
        let half = |x: &DMatrix<f64>, y: &DMatrix<f64>| {
            let r = sqrtm_psd(x);
            sqrtm_psd(&(&r * y * &r)).trace()
        };
        let cross = 0.5 * (half(&a.cov, &b.cov) + half(&b.cov, &a.cov));
        a.cov.trace() + b.cov.trace() - 2.0 * cross
    };
    Ok((mean_term + trace).max(0.0))
}

pub fn frechet_feature_distance(a: &[FeatureVector], b: &[FeatureVector], allow_diagonal: bool) -> Result<f64> {
    let sa = GaussianStats::from_features(a, allow_diagonal)?;
    let sb = GaussianStats::from_features(b, allow_diagonal)?;
    if sa.diagonal != sb.diagonal {
        let (da, db) = (
            GaussianStats { diagonal: true, ..sa },
            GaussianStats { diagonal: true, ..sb },
        );
        return frechet_from_stats(&da, &db);
    }
    frechet_from_stats(&sa, &sb)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from each point to its k-th nearest neighbour in the same set.
fn knn_radii(set: &[FeatureVector], k: usize) -> Vec<f64> {
    set.iter()
        .enumerate()
        .map(|(i, p)| {
            let mut d: Vec<f64> = set
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, q)| sq_dist(&p.0, &q.0))
                .collect();
            d.sort_by(|a, b| a.total_cmp(b));
            d[k - 1]
        })
        .collect()
}

fn coverage(manifold: &[FeatureVector], radii: &[f64], probes: &[FeatureVector]) -> f64 {
    let inside = probes
        .iter()
        .filter(|p| manifold.iter().zip(radii).any(|(m, r)| sq_dist(&p.0, &m.0) <= *r))
        .count();
    inside as f64 / probes.len() as f64
}

/// Improved precision/recall with k-NN hyperspheres, brute force.
pub fn knn_precision_recall(real: &[FeatureVector], generated: &[FeatureVector], k: usize) -> Result<(f64, f64)> {
    if k == 0 || real.len() < k + 1 || generated.len() < k + 1 {
        return Err(param_err(format!(
            "k = {k} needs at least k + 1 points per set (got {} real, {} generated)",
            real.len(),
            generated.len()
        )));
    }
    let real_r = knn_radii(real, k);
    let gen_r = knn_radii(generated, k);
    Ok((coverage(real, &real_r, generated), coverage(generated, &gen_r, real)))
}

/// Pixel-wise membership in any box, over an `IMAGE_SIZE²` grid.
fn box_membership(sample: &SceneSample) -> Vec<bool> {
    let mut m = vec![false; IMAGE_SIZE * IMAGE_SIZE];
    for b in &sample.boxes {
        for y in b.y as usize..(b.y + b.h) as usize {
            for x in b.x as usize..(b.x + b.w) as usize {
                m[y * IMAGE_SIZE + x] = true;
            }
        }
    }
    m
}

/// Mean squared error of the one-shot x̂₀ estimate at `t_probe`, pooled over
/// all pixels inside boxes. Noise is drawn from a stream seeded by `seed`.
pub fn object_region_error<F: Scalar, P: EpsPredictor<F>>(
    model: &P,
    sched: &NoiseSchedule,
    samples: &[SceneSample],
    conditions: &[usize],
    t_probe: usize,
    seed: u64,
) -> Result<f64> {
    if samples.len() != conditions.len() {
        return Err(param_err("one condition row per sample required"));
    }
    if t_probe == 0 || t_probe > sched.steps() {
        return Err(Error::Index {
            index: t_probe,
            len: sched.steps(),
        });
    }
    if samples.iter().all(|s| s.boxes.is_empty()) {
        return Err(Error::Contract("object region error needs samples with boxes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [IMAGE_SIZE, IMAGE_SIZE, CHANNELS];
    let x0s: Vec<Tensor<F>> = samples.iter().map(|s| s.model_input()).collect();
    let eps: Vec<Tensor<F>> = samples
        .iter()
        .map(|_| Tensor::from_fn(&shape, |_| F::of(StandardNormal.sample(&mut rng))))
        .collect();
    let xts: Vec<Tensor<F>> = x0s
        .iter()
        .zip(&eps)
        .map(|(x, e)| sched.q_sample(x, t_probe, e))
        .collect::<Result<_>>()?;
    let (mut total, mut count) = (0.0, 0usize);
    for ((start, chunk), conds) in (0..)
        .step_by(crate::sample::SAMPLE_CHUNK)
        .zip(xts.chunks(crate::sample::SAMPLE_CHUNK))
        .zip(conditions.chunks(crate::sample::SAMPLE_CHUNK))
    {
        let preds = model.predict(chunk, t_probe, conds)?;
        for (k, (xt, e)) in chunk.iter().zip(&preds).enumerate() {
            let i = start + k;
            let x0_hat = sched.predict_x0(xt, t_probe, e)?;
            let inside = box_membership(&samples[i]);
            for (p, &m) in inside.iter().enumerate() {
                if m {
                    for c in 0..CHANNELS {
                        let d = x0_hat.data()[p * CHANNELS + c].as_f64() - x0s[i].data()[p * CHANNELS + c].as_f64();
                        total += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    Ok(total / count as f64)
}

/// Box-size buckets (by the longer side, in pixels).
pub const SURVIVAL_BUCKETS: [(usize, usize); 3] = [(3, 4), (5, 6), (7, 8)];

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalRow {
    pub schedule: String,
    pub bucket: (usize, usize),
    pub boxes: usize,
    /// `None` for an empty bucket.
    pub mean_survival: Option<f64>,
}

/// Mean region survival time per (schedule, bucket).
pub fn survival_report(
    dataset: &[SceneSample],
    schedules: &[NoiseSchedule],
    threshold: f64,
) -> Result<Vec<SurvivalRow>> {
    let mut rows = Vec::new();
    for sched in schedules {
        let mut sums = [0.0f64; SURVIVAL_BUCKETS.len()];
        let mut counts = [0usize; SURVIVAL_BUCKETS.len()];
        for s in dataset {
            for b in &s.boxes {
                let Some(k) = SURVIVAL_BUCKETS
                    .iter()
                    .position(|(lo, hi)| (*lo..=*hi).contains(&b.size()))
                else {
                    continue;
                };
                let t = region_survival_time(&s.image, IMAGE_SIZE, IMAGE_SIZE, CHANNELS, b, sched, threshold)?;
                sums[k] += t as f64;
                counts[k] += 1;
            }
        }
        for (k, bucket) in SURVIVAL_BUCKETS.iter().enumerate() {
            rows.push(SurvivalRow {
                schedule: sched.name(),
                bucket: *bucket,
                boxes: counts[k],
                mean_survival: (counts[k] > 0).then(|| sums[k] / counts[k] as f64),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub frechet_distance: f64,
    pub precision: f64,
    pub recall: f64,
    pub object_region_mse: f64,
    pub trainable_param_fraction: f64,
    pub runtime_seconds: f64,
}

impl MetricReport {
    pub const HEADER: [&'static str; 6] = [
        "frechet_distance",
        "precision",
        "recall",
        "object_region_mse",
        "trainable_param_fraction",
        "runtime_seconds",
    ];

    pub fn values(&self) -> [f64; 6] {
        [
            self.frechet_distance,
            self.precision,
            self.recall,
            self.object_region_mse,
            self.trainable_param_fraction,
            self.runtime_seconds,
        ]
    }
}
