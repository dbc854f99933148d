mod common;

use common::random_tensor;
use ditune_core::metrics::{
    frechet_feature_distance, frechet_from_stats, knn_precision_recall, object_region_error, product_sqrt,
    survival_report, GaussianStats,
};
use ditune_core::model::{DiT, DiTConfig};
use ditune_core::sample::{ddpm_sample, ddpm_sample_raw, EpsPredictor};
use ditune_core::scene::{target_dataset, SceneSample};
use ditune_core::schedule::{LinearBetas, NoiseSchedule, DEFAULT_OFFSET};
use ditune_core::ssei::FeatureVector;
use ditune_core::{Error, Result, Tensor};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Predicts the exact noise that separates `x_t` from a planted `x0`.
struct Oracle<'a> {
    sched: &'a NoiseSchedule,
    x0: Vec<Tensor<f64>>,
}

impl EpsPredictor<f64> for Oracle<'_> {
    fn horizon(&self) -> usize {
        self.sched.steps()
    }

    fn predict(&self, xs: &[Tensor<f64>], t: usize, conditions: &[usize]) -> Result<Vec<Tensor<f64>>> {
        let ab = self.sched.alpha_bar(t);
        xs.iter()
            .zip(conditions)
            .map(|(x, &c)| {
                let x0 = &self.x0[c];
                let data = x
                    .data()
                    .iter()
                    .zip(x0.data())
                    .map(|(&x, &o)| (x - ab.sqrt() * o) / (1.0 - ab).sqrt())
                    .collect();
                Tensor::new(x.shape(), data)
            })
            .collect()
    }
}

fn tiny_model() -> DiT<f32> {
    let cfg = DiTConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        steps: 20,
        ..DiTConfig::default()
    };
    DiT::new(cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn sampling_is_deterministic_and_bounded() {
    let m = tiny_model();
    let s = NoiseSchedule::linear(20, 1e-3, 0.2).unwrap();
    let a = ddpm_sample(&m, &s, 3, &[32, 32, 3], 3, 5).unwrap();
    let b = ddpm_sample(&m, &s, 3, &[32, 32, 3], 3, 5).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    assert!(a.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(a, ddpm_sample(&m, &s, 3, &[32, 32, 3], 3, 6).unwrap());
    assert!(ddpm_sample(&m, &s, 3, &[32, 32, 3], 0, 5).unwrap().is_empty());
    let other = NoiseSchedule::linear(30, 1e-3, 0.2).unwrap();
    assert!(matches!(
        ddpm_sample(&m, &other, 0, &[32, 32, 3], 1, 0),
        Err(Error::Contract(_))
    ));
}

#[test]
fn oracle_chain_collapses_onto_planted_image() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let x0 = random_tensor(&[8, 8, 3], 1, -1.0, 1.0);
    let oracle = Oracle {
        sched: &s,
        x0: vec![x0.clone()],
    };
    let out = ddpm_sample_raw(&oracle, &s, 0, &[8, 8, 3], 2, 3).unwrap();
    for x in &out {
        let mse = x
            .data()
            .iter()
            .zip(x0.data())
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / x.len() as f64;
        assert!(mse < 1e-2, "{mse}");
    }
}

fn features(n: usize, dim: usize, shift: f64, seed: u64) -> Vec<FeatureVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FeatureVector((0..dim).map(|_| shift + rng.random_range(-1.0..1.0)).collect()))
        .collect()
}

#[test]
fn frechet_examples() {
    let a = features(80, 5, 0.0, 1);
    let b = features(80, 5, 0.3, 2);
    assert!(frechet_feature_distance(&a, &a, false).unwrap() < 1e-8);
    let ab = frechet_feature_distance(&a, &b, false).unwrap();
    let ba = frechet_feature_distance(&b, &a, false).unwrap();
    assert!(ab > 0.0);
    assert!((ab - ba).abs() < 1e-10);

    let n0 = GaussianStats {
        mean: DVector::from_vec(vec![0.0]),
        cov: DMatrix::from_vec(1, 1, vec![1.0]),
        diagonal: true,
    };
    let n1 = GaussianStats {
        mean: DVector::from_vec(vec![1.0]),
        ..n0.clone()
    };
    assert_eq!(frechet_from_stats(&n0, &n1).unwrap(), 1.0);
    let f0 = GaussianStats {
        diagonal: false,
        ..n0.clone()
    };
    let f1 = GaussianStats { diagonal: false, ..n1 };
    assert!((frechet_from_stats(&f0, &f1).unwrap() - 1.0).abs() < 1e-12);

    let few = features(4, 5, 0.0, 3);
    assert!(matches!(
        frechet_feature_distance(&few, &a, false),
        Err(Error::Input(_))
    ));
    let d = frechet_feature_distance(&few, &a, true).unwrap();
    assert!(d >= 0.0);
    assert!(frechet_feature_distance(&features(10, 4, 0.0, 1), &a, true).is_err());
}

fn random_spd(dim: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(dim, dim) * 0.1
}

#[test]
fn product_square_root_squares_back() {
    for seed in 0..20 {
        let (s1, s2) = (random_spd(12, seed), random_spd(12, seed + 100));
        let prod = &s1 * &s2;
        let root = product_sqrt(&s1, &s2).unwrap();
        let err = (&root * &root - &prod).norm() / prod.norm();
        assert!(err < 1e-6, "seed {seed}: {err}");
    }
}

#[test]
fn precision_recall_examples() {
    let real = features(30, 4, 0.0, 1);
    assert_eq!(knn_precision_recall(&real, &real, 3).unwrap(), (1.0, 1.0));
    let far = features(30, 4, 1000.0, 2);
    assert_eq!(knn_precision_recall(&real, &far, 3).unwrap(), (0.0, 0.0));
    let gen = features(25, 4, 0.5, 3);
    let (p, r) = knn_precision_recall(&real, &gen, 3).unwrap();
    assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
    let mut shuffled = gen.clone();
    shuffled.reverse();
    let mut real_rev = real.clone();
    real_rev.rotate_left(7);
    assert_eq!(knn_precision_recall(&real_rev, &shuffled, 3).unwrap().0, p);
    assert!(knn_precision_recall(&real, &gen[..3], 3).is_err());
    assert!(knn_precision_recall(&real, &gen, 0).is_err());
}

/// Perfect predictor over real scene inputs (conditions index the sample).
struct SceneOracle<'a> {
    sched: &'a NoiseSchedule,
    samples: Vec<Tensor<f64>>,
}

impl EpsPredictor<f64> for SceneOracle<'_> {
    fn horizon(&self) -> usize {
        self.sched.steps()
    }

    fn predict(&self, xs: &[Tensor<f64>], t: usize, conditions: &[usize]) -> Result<Vec<Tensor<f64>>> {
        Oracle {
            sched: self.sched,
            x0: self.samples.clone(),
        }
        .predict(xs, t, conditions)
    }
}

#[test]
fn object_region_error_contract() {
    let s = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let data = target_dataset(6, 1);
    let ids: Vec<usize> = (0..6).collect();
    let oracle = SceneOracle {
        sched: &s,
        samples: data.iter().map(|d| d.model_input()).collect(),
    };
    let e = object_region_error(&oracle, &s, &data, &ids, 200, 0).unwrap();
    assert!(e < 1e-20, "{e}");

    // Background pixels never enter the error.
    let zero = ZeroPredictor(1000);
    let base = object_region_error(&zero, &s, &data, &ids, 200, 0).unwrap();
    assert!(base > 0.0);
    let mut perturbed = data.clone();
    for smp in &mut perturbed {
        let inside = |x: usize, y: usize| smp.boxes.iter().any(|b| b.contains(x, y));
        let mask: Vec<bool> = (0..1024).map(|p| inside(p % 32, p / 32)).collect();
        for (p, m) in mask.iter().enumerate() {
            if !m {
                for c in 0..3 {
                    smp.image[p * 3 + c] = 1.0 - smp.image[p * 3 + c];
                }
            }
        }
    }
    assert_eq!(object_region_error(&zero, &s, &perturbed, &ids, 200, 0).unwrap(), base);

    let boxless: Vec<SceneSample> = data
        .iter()
        .map(|d| SceneSample {
            boxes: vec![],
            ..d.clone()
        })
        .collect();
    assert!(matches!(
        object_region_error(&zero, &s, &boxless, &ids, 200, 0),
        Err(Error::Contract(_))
    ));
    assert!(object_region_error(&zero, &s, &data, &ids, 0, 0).is_err());
}

struct ZeroPredictor(usize);

impl EpsPredictor<f64> for ZeroPredictor {
    fn horizon(&self) -> usize {
        self.0
    }

    fn predict(&self, xs: &[Tensor<f64>], _t: usize, _c: &[usize]) -> Result<Vec<Tensor<f64>>> {
        Ok(xs.iter().map(|x| Tensor::zeros(x.shape())).collect())
    }
}

#[test]
fn survival_report_orders_buckets_and_schedules() {
    let data = target_dataset(500, 2);
    let lin = NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let scos = NoiseSchedule::scos(1000, 2.0, DEFAULT_OFFSET, LinearBetas::default()).unwrap();
    let rows = survival_report(&data, &[lin, scos], 0.1).unwrap();
    assert_eq!(rows.len(), 6);
    let means: Vec<f64> = rows.iter().map(|r| r.mean_survival.unwrap()).collect();
    assert!(means[0] <= means[1] && means[1] <= means[2], "{means:?}");
    for k in 0..3 {
        assert!(means[3 + k] > means[k]);
    }
    let empty = survival_report(&[], &[NoiseSchedule::linear(10, 0.01, 0.1).unwrap()], 0.1).unwrap();
    assert!(empty.iter().all(|r| r.mean_survival.is_none() && r.boxes == 0));
}
