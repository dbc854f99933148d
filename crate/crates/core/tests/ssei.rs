use ditune_core::model::{DiT, DiTConfig};
use ditune_core::scene::{source_dataset, target_dataset, IMAGE_LEN, SOURCE_CLASSES, TARGET_CONDITIONS};
use ditune_core::ssei::{
    assign_conditions, cosine_similarity, extract_features, init_condition_embeddings, nearest_source_class,
    FeatureVector, SemanticIndex, FEATURE_DIM,
};
use ditune_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn black_and_white_images() {
    let black = extract_features(&vec![0.0; IMAGE_LEN]).unwrap();
    assert_eq!(black.0, vec![0.0; FEATURE_DIM]);
    let white = extract_features(&vec![1.0; IMAGE_LEN]).unwrap();
    assert!(white.0[..27].iter().all(|v| *v == 1.0));
    // mean, std, min, max per channel
    for c in 0..3 {
        assert_eq!(&white.0[27 + 4 * c..31 + 4 * c], &[1.0, 0.0, 1.0, 1.0]);
    }
    assert!(extract_features(&vec![1.5; IMAGE_LEN]).is_err());
    assert!(extract_features(&[0.5; 10]).is_err());
}

#[test]
fn red_left_blue_right() {
    let mut img = vec![0.0f32; IMAGE_LEN];
    for y in 0..32 {
        for x in 0..32 {
            let c = if x < 16 { 0 } else { 2 };
            img[(y * 32 + x) * 3 + c] = 1.0;
        }
    }
    let f = extract_features(&img).unwrap();
    for gy in 0..3 {
        // Column 0 is fully left, column 2 fully right; column 1 straddles.
        assert_eq!(f.0[(gy * 3) * 3], 1.0);
        assert_eq!(f.0[(gy * 3) * 3 + 2], 0.0);
        assert_eq!(f.0[(gy * 3 + 2) * 3 + 2], 1.0);
        assert_eq!(f.0[(gy * 3 + 2) * 3], 0.0);
    }
    assert_eq!(f, extract_features(&img).unwrap());
}

#[test]
fn nearest_class_examples() {
    let e = vec![FeatureVector(vec![1.0, 0.0]), FeatureVector(vec![0.0, 1.0])];
    let (i, c) = nearest_source_class(&[0.9, 0.1], &e).unwrap();
    assert_eq!(i, 0);
    assert!((c - 0.993_883_7).abs() < 1e-6);
    assert_eq!(nearest_source_class(&[0.0, 3.0], &e).unwrap().0, 1);
    // ties go to the lowest index
    let dup = vec![FeatureVector(vec![1.0, 1.0]), FeatureVector(vec![2.0, 2.0])];
    assert_eq!(nearest_source_class(&[1.0, 1.0], &dup).unwrap().0, 0);
    assert!(matches!(nearest_source_class(&[0.0, 0.0], &e), Err(Error::Input(_))));
    assert!(cosine_similarity(&[1.0], &[1.0, 2.0]).is_err());
}

fn brute_force(target: &[f64], means: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_c = f64::NEG_INFINITY;
    for (i, m) in means.iter().enumerate() {
        let dot: f64 = target.iter().zip(m).map(|(a, b)| a * b).sum();
        let n = target.iter().map(|v| v * v).sum::<f64>().sqrt() * m.iter().map(|v| v * v).sum::<f64>().sqrt();
        if dot / n > best_c {
            best_c = dot / n;
            best = i;
        }
    }
    best
}

#[test]
fn argmax_matches_brute_force_and_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..1000 {
        let k = rng.random_range(1..12);
        let means: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let target: Vec<f64> = (0..FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fv: Vec<_> = means.iter().cloned().map(FeatureVector).collect();
        let (i, _) = nearest_source_class(&target, &fv).unwrap();
        assert_eq!(i, brute_force(&target, &means));
        let scale = rng.random_range(0.01..100.0);
        let scaled: Vec<f64> = target.iter().map(|v| v * scale).collect();
        assert_eq!(nearest_source_class(&scaled, &fv).unwrap().0, i);
    }
}

#[test]
fn assignments_are_deterministic() {
    let src = SemanticIndex::build(&source_dataset(100, 1), SOURCE_CLASSES).unwrap();
    let tgt = SemanticIndex::build(&target_dataset(50, 2), TARGET_CONDITIONS).unwrap();
    let a = assign_conditions(&src, &tgt).unwrap();
    let b = assign_conditions(&src, &tgt).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), TARGET_CONDITIONS);
    assert!(a
        .iter()
        .all(|x| x.source_class < SOURCE_CLASSES && x.similarity <= 1.0 + 1e-12));
    assert!(SemanticIndex::build(&source_dataset(5, 1), SOURCE_CLASSES).is_err());
}

#[test]
fn embedding_rows_are_copied_and_originals_untouched() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = DiTConfig {
        dim: 16,
        depth: 1,
        heads: 2,
        mlp_ratio: 2,
        steps: 10,
        ..DiTConfig::default()
    };
    let mut model = DiT::<f32>::new(cfg, &mut rng).unwrap();
    let before: Vec<_> = (0..10).map(|i| model.embedding_row(i).unwrap()).collect();
    assert!(init_condition_embeddings(&mut model, &[0, 1, 2, 3, 4]).is_err());
    model.expand_conditions(TARGET_CONDITIONS, &mut rng).unwrap();
    assert_eq!(model.embeddings().rows(), 15);
    let assign = [3, 3, 9, 0, 7];
    assert!(init_condition_embeddings(&mut model, &assign[..4]).is_err());
    assert!(init_condition_embeddings(&mut model, &[3, 3, 10, 0, 7]).is_err());
    init_condition_embeddings(&mut model, &assign).unwrap();
    for (j, &i) in assign.iter().enumerate() {
        assert_eq!(model.embedding_row(10 + j).unwrap(), before[i]);
    }
    for (i, row) in before.iter().enumerate() {
        assert_eq!(&model.embedding_row(i).unwrap(), row);
    }
    assert!(model.embedding_row(15).is_err());
}

proptest::proptest! {
    #[test]
    fn cosine_argmax_ignores_positive_scale(
        target in proptest::collection::vec(-1.0f64..1.0, 6),
        means in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 6), 1..8),
        scale in 1e-3f64..1e3,
    ) {
        proptest::prop_assume!(target.iter().any(|v| v.abs() > 1e-3));
        proptest::prop_assume!(means.iter().all(|m| m.iter().any(|v| v.abs() > 1e-3)));
        let fv: Vec<FeatureVector> = means.into_iter().map(FeatureVector).collect();
        let scaled: Vec<f64> = target.iter().map(|v| v * scale).collect();
        let (i, c) = nearest_source_class(&target, &fv).unwrap();
        let (j, d) = nearest_source_class(&scaled, &fv).unwrap();
        proptest::prop_assert_eq!(i, j);
        proptest::prop_assert!((c - d).abs() < 1e-12);
        proptest::prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
    }
}
