use std::collections::BTreeSet;

use dilated_seg::data::*;
use dilated_seg::training::{augment, AugmentConfig};
use dilated_seg::{Rng, Shape, Tensor};
use proptest::prelude::*;

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("s{i:04}")).collect()
}

proptest! {
    #[test]
    fn split_is_a_seeded_partition(n in 3usize..400, a in 1u32..90, b in 1u32..90, seed in any::<u64>()) {
        prop_assume!(a + b < 100);
        let spec = SplitSpec::ratios(a as f64 / 100.0, b as f64 / 100.0, (100 - a - b) as f64 / 100.0);
        let all = ids(n);
        let s = split(&all, &spec, seed).unwrap();
        prop_assert_eq!(s.train.len(), n * a as usize / 100);
        prop_assert_eq!(s.val.len(), n * b as usize / 100);
        let mut seen: Vec<_> = s.train.iter().chain(&s.val).chain(&s.test).cloned().collect();
        seen.sort();
        prop_assert_eq!(&seen, &all);
        prop_assert_eq!(split(&all, &spec, seed).unwrap(), s);
    }

    #[test]
    fn pnm_bytes_round_trip(w in 1usize..20, h in 1usize..20, rgb in any::<bool>(), seed in any::<u64>()) {
        let c = if rgb { 3 } else { 1 };
        let mut rng = Rng::new(seed);
        let data = (0..w * h * c).map(|_| rng.int_in(0, 255) as u8).collect();
        let img = Pnm::new(w, h, c, data);
        let bytes = img.encode();
        let back = Pnm::decode(&bytes, c).unwrap();
        prop_assert_eq!(&back, &img);
        prop_assert_eq!(Pnm::from_tensor(&img.to_tensor()).encode(), bytes);
    }

    #[test]
    fn nearest_resize_keeps_masks_binary(h in 4usize..40, w in 4usize..40, ho in 4usize..40, wo in 4usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let m = Tensor::from_fn(Shape::new(1, 1, h, w), |_, _, _, _| if rng.coin(0.3) { 1.0 } else { 0.0 });
        let r = resize(&m, ho, wo, ResizeMode::Nearest).unwrap();
        prop_assert_eq!(r.shape(), Shape::new(1, 1, ho, wo));
        prop_assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }
}

#[test]
fn pnm_files_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { count: 3, ..SynthConfig::default() };
    let written = synth_generate(&cfg, dir.path()).unwrap();
    for id in &written {
        for (sub, ext, c) in [("images", "ppm", 3), ("masks", "pgm", 1)] {
            let path = dir.path().join(sub).join(format!("{id}.{ext}"));
            let bytes = std::fs::read(&path).unwrap();
            let copy = dir.path().join(format!("copy.{ext}"));
            Pnm::read(&path, c).unwrap().write(&copy).unwrap();
            assert_eq!(std::fs::read(&copy).unwrap(), bytes);
        }
    }
}

#[test]
fn synthetic_dataset_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { count: 5, ..SynthConfig::default() };
    assert_eq!(synth_generate(&cfg, a.path()).unwrap(), synth_generate(&cfg, b.path()).unwrap());
    for id in read_manifest(a.path().join("manifest.txt")).unwrap() {
        for f in [format!("images/{id}.ppm"), format!("masks/{id}.pgm")] {
            assert_eq!(std::fs::read(a.path().join(&f)).unwrap(), std::fs::read(b.path().join(&f)).unwrap());
        }
    }
    let pairs = load_dataset(a.path(), None, (64, 64)).unwrap();
    assert_eq!(pairs.len(), 5);
    assert!(pairs.iter().all(|p| p.mask.data().contains(&1.0)));
}

#[test]
fn augmented_masks_stay_binary_over_many_seeds() {
    let sample = SynthConfig::default().sample(0);
    let cfg = AugmentConfig { prob: 0.9, ..AugmentConfig::default() };
    let mut outcomes = BTreeSet::new();
    for seed in 0..1000 {
        let (img, mask) = augment(&sample.image, &sample.mask, &mut Rng::new(seed), &cfg);
        assert_eq!(img.shape(), sample.image.shape());
        assert_eq!(mask.shape(), sample.mask.shape());
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0), "seed {seed}");
        outcomes.insert(mask.data().iter().filter(|&&v| v == 1.0).count());
    }
    assert!(outcomes.len() > 10);
}
