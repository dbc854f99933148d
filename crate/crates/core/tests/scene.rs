use ditune_core::scene::{
    gen_source_sample, gen_target_sample, mean_luminance, source_dataset, source_mask, target_dataset, Condition,
    IMAGE_SIZE, MAX_VEHICLES, SOURCE_CLASSES, TARGET_CONDITIONS,
};
use ditune_core::schedule::{contrast_power, SURVIVAL_RING};
use ditune_core::ssei::{cosine_similarity, extract_features, SemanticIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn fixed_seed_is_bitwise_deterministic() {
    for class in 0..SOURCE_CLASSES as u8 {
        let a = gen_source_sample(class, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gen_source_sample(class, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }
    for cond in 0..TARGET_CONDITIONS as u8 {
        let a = gen_target_sample(cond, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = gen_target_sample(cond, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }
    assert_eq!(target_dataset(20, 1), target_dataset(20, 1));
    assert_ne!(target_dataset(20, 1), target_dataset(20, 2));
}

#[test]
fn invalid_ids_are_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(gen_source_sample(10, &mut rng).is_err());
    assert!(gen_target_sample(5, &mut rng).is_err());
    assert!(Condition::from_id(5).is_err());
}

#[test]
fn source_objects_cover_a_quarter_of_the_image() {
    for class in 0..SOURCE_CLASSES as u8 {
        for (cx, cy) in [(16, 16), (14, 18), (18, 14)] {
            let mask = source_mask(class, cx, cy).unwrap();
            let frac = mask.iter().filter(|m| **m).count() as f64 / mask.len() as f64;
            assert!(frac >= 0.25, "class {class}: {frac}");
        }
    }
}

#[test]
fn target_scenes_respect_box_contract() {
    for s in target_dataset(500, 11) {
        s.validate().unwrap();
        assert!(!s.boxes.is_empty() && s.boxes.len() <= MAX_VEHICLES);
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        for b in &s.boxes {
            assert!(b.w >= 3 && b.w <= 8 && b.h >= 3 && b.h <= 8, "{b:?}");
            assert!(b.fits(IMAGE_SIZE, IMAGE_SIZE));
            let p = contrast_power(&s.image, IMAGE_SIZE, IMAGE_SIZE, 3, b, SURVIVAL_RING).unwrap();
            assert!(p > 0.0, "{b:?} has no contrast");
        }
    }
}

#[test]
fn condition_palettes_are_distinct() {
    let data = target_dataset(1000, 5);
    let night: Vec<_> = data.iter().filter(|s| s.label == Condition::Night as u8).collect();
    let snowy: Vec<_> = data.iter().filter(|s| s.label == Condition::Snowy as u8).collect();
    let night_lum = night.iter().map(|s| mean_luminance(&s.image, 0, 32)).sum::<f64>() / night.len() as f64;
    let snow_lum = snowy.iter().map(|s| mean_luminance(&s.image, 16, 32)).sum::<f64>() / snowy.len() as f64;
    assert!(night_lum < 0.25, "{night_lum}");
    assert!(snow_lum > 0.7, "{snow_lum}");
    let index = SemanticIndex::build(&data, TARGET_CONDITIONS).unwrap();
    for i in 0..TARGET_CONDITIONS {
        for j in i + 1..TARGET_CONDITIONS {
            let c = cosine_similarity(&index.means[i].0, &index.means[j].0).unwrap();
            assert!(c < 0.999, "conditions {i}, {j}: {c}");
        }
    }
}

#[test]
fn source_classes_have_distinct_features() {
    let data = source_dataset(200, 4);
    let index = SemanticIndex::build(&data, SOURCE_CLASSES).unwrap();
    for i in 0..SOURCE_CLASSES {
        for j in i + 1..SOURCE_CLASSES {
            let d: f64 = index.means[i]
                .0
                .iter()
                .zip(&index.means[j].0)
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            assert!(d > 1e-4, "classes {i}, {j}");
        }
    }
    let f = extract_features(&data[0].image).unwrap();
    assert!(f.0.iter().all(|v| v.is_finite()));
}

#[test]
fn source_objects_dwarf_vehicles() {
    let mut src = 0.0;
    for class in 0..SOURCE_CLASSES as u8 {
        src += source_mask(class, 16, 16).unwrap().iter().filter(|m| **m).count() as f64;
    }
    src /= SOURCE_CLASSES as f64;
    let boxes: Vec<_> = target_dataset(500, 8).into_iter().flat_map(|s| s.boxes).collect();
    let tgt = boxes.iter().map(|b| b.area() as f64).sum::<f64>() / boxes.len() as f64;
    assert!(src >= 5.0 * tgt, "source {src} vs vehicle {tgt}");
}
