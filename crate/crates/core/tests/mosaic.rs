use countforge::mosaic::*;
use countforge::{AnnotatedImage, Manifest};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn manifest() -> Manifest {
    synthetic_manifest(40, 6, 400, 17).unwrap()
}

#[test]
fn one_query_gives_four_pairs_on_one_collage() {
    let m = manifest();
    let out = generate_fsc_mosaic(&m, 1, &MosaicConfig::evaluation(), 3).unwrap();
    assert_eq!(out.pairs.len(), 4);
    assert!(out.pairs.iter().all(|p| p.mosaic_id == 0 && p.tiles == out.pairs[0].tiles));
    let mut classes: Vec<&str> = out.pairs.iter().map(|p| p.target_class.as_str()).collect();
    classes.sort_unstable();
    classes.dedup();
    assert_eq!(classes.len(), 4);
}

#[test]
fn pairs_are_geometrically_sound() {
    let m = manifest();
    let config = MosaicConfig::evaluation();
    let out = generate_fsc_mosaic(&m, 25, &config, 8).unwrap();
    let side = f64::from(2 * config.tile_size);
    for pair in &out.pairs {
        assert!(!pair.boxes.is_empty(), "pair {} has no exemplar", pair.pair_id);
        assert_eq!(pair.gt_count as usize, pair.points.len());
        assert_eq!(recount_pair(&m, pair).unwrap(), pair.gt_count);
        assert!(pair.points.iter().all(|p| p.x >= 0.0 && p.x < side && p.y >= 0.0 && p.y < side));
        // Each box lies inside the tile region of its class.
        let k: usize = pair.pair_id.rsplit('-').next().unwrap().parse().unwrap();
        let (ox, oy) = config.offset(k);
        let t = f64::from(config.tile_size);
        for b in &pair.boxes {
            assert!(b.x1 >= f64::from(ox) && b.x2 <= f64::from(ox) + t);
            assert!(b.y1 >= f64::from(oy) && b.y2 <= f64::from(oy) + t);
        }
    }
}

#[test]
fn too_few_classes_is_an_error() {
    let m = synthetic_manifest(12, 3, 400, 1).unwrap();
    assert!(generate_fsc_mosaic(&m, 2, &MosaicConfig::evaluation(), 0).is_err());
    // Images too small for the tile do not count towards the classes.
    let small = synthetic_manifest(12, 4, 100, 1).unwrap();
    assert!(generate_fsc_mosaic(&small, 2, &MosaicConfig::evaluation(), 0).is_err());
}

#[test]
fn images_without_boxes_exhaust_retries() {
    let mut m = manifest();
    m.images.iter_mut().for_each(|img| img.boxes.clear());
    assert!(generate_fsc_mosaic(&m, 1, &MosaicConfig::evaluation(), 0).is_err());
}

#[test]
fn output_is_reproducible_and_seed_dependent() {
    let m = manifest();
    let run = |seed| generate_fsc_mosaic(&m, 10, &MosaicConfig::evaluation(), seed).unwrap().to_json().unwrap();
    assert_eq!(run(4), run(4));
    assert_ne!(run(4), run(5));
    let parsed: EvalManifest = serde_json::from_str(&run(4)).unwrap();
    assert_eq!(parsed.to_json().unwrap(), run(4));
}

#[test]
fn training_mosaic_conserves_points() {
    let m = manifest();
    let imgs: Vec<&AnnotatedImage> = m.images.iter().take(4).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = build_mosaic(&imgs, &MosaicConfig::training(), &mut rng).unwrap();
    assert_eq!(s.total_points(), s.tile_point_counts.iter().sum::<usize>());
    let s = select_target(s, &mut rng);
    assert_eq!(s.target_count, s.target_points().len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn mass_is_conserved(seed in any::<u64>(), tile in 64u32..200) {
        let m = synthetic_manifest(8, 8, 200, seed).unwrap();
        let imgs: Vec<&AnnotatedImage> = m.images.iter().take(4).collect();
        let config = MosaicConfig { tile_size: tile, ..MosaicConfig::evaluation() };
        let s = build_mosaic(&imgs, &config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s.total_points(), s.tile_point_counts.iter().sum::<usize>());
        let side = f64::from(2 * tile);
        for set in s.per_class_points.values() {
            prop_assert!(set.iter().all(|p| p.x > 0.0 && p.x < side && p.y > 0.0 && p.y < side));
        }
        for (k, rect) in s.tiles.iter().enumerate() {
            let img = m.get(&rect.source_id).unwrap();
            let inside = img.points.iter().filter(|p| rect.contains_point(p)).count();
            prop_assert_eq!(inside, s.tile_point_counts[k]);
        }
    }
}

#[test]
fn training_set_flags_samples_without_exemplars() {
    let m = manifest();
    let config = MosaicConfig::training();
    let set = generate_training_mosaics(&m, 50, &config, 1).unwrap();
    assert_eq!(set.samples.len(), 50);
    for s in &set.samples {
        assert_eq!(s.valid, !s.boxes.is_empty());
        assert_eq!(s.gt_count as usize, s.points.len());
        assert!(s.tiles.iter().all(|t| t.w == 192 && t.h == 192));
    }
    assert_eq!(set, generate_training_mosaics(&m, 50, &config, 1).unwrap());

    let mut bare = m.clone();
    bare.images.iter_mut().for_each(|img| img.boxes.clear());
    let set = generate_training_mosaics(&bare, 5, &config, 1).unwrap();
    assert!(set.samples.iter().all(|s| !s.valid));
}
