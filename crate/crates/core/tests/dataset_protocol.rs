use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use landmark_reid::dataio::{build_real_splits, load_annotations, DatasetManifest, PkSampler, Split};
use landmark_reid::raster::Raster;
use landmark_reid::seed;
use landmark_reid::synthgen::{build_dataset, generate_seed_pattern, SynthConfig};
use landmark_reid::Error;
use proptest::prelude::*;

fn small(n: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        n_identities: n,
        image_size: 64,
        master_seed: seed,
        ..SynthConfig::default()
    }
}

#[test]
fn regeneration_is_digest_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = small(3, 11);
    let ma = build_dataset(&cfg, a.path()).unwrap();
    let mb = build_dataset(&cfg, b.path()).unwrap();
    assert_eq!(ma.digest(a.path()).unwrap(), mb.digest(b.path()).unwrap());
    let c = tempfile::tempdir().unwrap();
    let mc = build_dataset(&small(3, 12), c.path()).unwrap();
    assert_ne!(ma.digest(a.path()).unwrap(), mc.digest(c.path()).unwrap());
}

#[test]
fn synthetic_split_hygiene_and_counts() {
    let dir = tempfile::tempdir().unwrap();
    let m = build_dataset(&small(5, 3), dir.path()).unwrap();
    let train = m.identities(Split::Train);
    let gallery = m.identities(Split::Gallery);
    let query = m.identities(Split::Query);
    assert_eq!(train.len(), 5);
    assert_eq!(gallery, query);
    assert!(train.is_disjoint(&gallery));
    let per_id = |s: Split| {
        let mut c: BTreeMap<&str, usize> = BTreeMap::new();
        m.split(s).for_each(|x| *c.entry(x.identity.as_str()).or_default() += 1);
        c.into_values().collect::<HashSet<_>>()
    };
    assert_eq!(per_id(Split::Train), HashSet::from([3]));
    assert_eq!(per_id(Split::Gallery), HashSet::from([3]));
    assert_eq!(per_id(Split::Query), HashSet::from([5]));
    assert_eq!(m.n_train_classes(), 5);
    assert!(m.split(Split::Train).all(|s| s.label < 5));
    for s in &m.samples {
        assert!(dir.path().join(&s.image_path).is_file());
        assert_eq!(s.landmarks.k(), 3);
    }
}

#[test]
fn seed_patterns_are_distinct() {
    let cfg = small(40, 0);
    let mut seen = HashSet::new();
    for id in 0..80 {
        let p = generate_seed_pattern(id, &cfg).unwrap();
        assert!(seen.insert(p.canvas.into_raw()), "identity {id} repeats an earlier pattern");
    }
}

#[test]
fn landmarks_follow_the_warp() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        corner_jitter_frac: 0.0,
        noise_sigma: 0.0,
        ..small(2, 5)
    };
    let m = build_dataset(&cfg, dir.path()).unwrap();
    let tri = cfg.triangle();
    for s in &m.samples {
        for (p, t) in s.landmarks.coords.iter().zip(tri) {
            assert!(p.dist(t) < 1e-9);
        }
    }
}

#[test]
fn annotations_round_trip_through_csv() {
    let dir = tempfile::tempdir().unwrap();
    let written = build_dataset(&small(3, 9), dir.path()).unwrap();
    let loaded = load_annotations(dir.path()).unwrap();
    assert_eq!(written.landmark_names, loaded.landmark_names);
    assert_eq!(written.samples, loaded.samples);
    assert_eq!(written.provenance, loaded.provenance);
    let reread = DatasetManifest::from_json(&written.to_json().unwrap()).unwrap();
    assert_eq!(reread, written);
}

fn write_png(root: &Path, rel: &str) {
    let p = root.join(rel);
    fs::create_dir_all(p.parent().unwrap()).unwrap();
    Raster::new(4, 4, 1).save_gray(&p).unwrap();
}

/// A real-style corpus: `train_ids` identities with 4 images each and test identities
/// with the given image counts, five landmarks per image, every second tail hidden.
fn real_corpus(root: &Path, train_ids: usize, test_counts: &[usize]) {
    let names = ["right_eye", "left_eye", "right_gill", "left_gill", "tail"];
    let mut csv = String::from("image_path,landmark_name,x,y,visible\n");
    let mut add = |rel: String, i: usize| {
        write_png(root, &rel);
        for (j, n) in names.iter().enumerate() {
            if j == 4 && i % 2 == 1 {
                csv.push_str(&format!("{rel},{n},,,0\n"));
            } else {
                csv.push_str(&format!("{rel},{n},{}.5,{}.25,1\n", j + i, 2 * j));
            }
        }
    };
    for id in 0..train_ids {
        for i in 0..4 {
            add(format!("train/m{id:03}/{i}.png"), i);
        }
    }
    for (id, &c) in test_counts.iter().enumerate() {
        for i in 0..c {
            add(format!("test/t{id:03}/{i}.png"), i);
        }
    }
    fs::write(root.join("landmarks.csv"), csv).unwrap();
}

#[test]
fn real_protocol_split_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let mut counts = vec![18; 17];
    counts.push(15);
    assert_eq!(counts.iter().sum::<usize>(), 321);
    real_corpus(dir.path(), 6, &counts);
    let m = load_annotations(dir.path()).unwrap();
    assert_eq!(m.k(), 5);
    assert_eq!(m.split(Split::Test).count(), 321);
    let hidden = m.samples.iter().find(|s| !s.landmarks.visible[4]).unwrap();
    assert!(hidden.landmarks.visible[..4].iter().all(|&v| v));
    let mut rng = seed::stream(1, &[]);
    let s = build_real_splits(&m, 2, &mut rng).unwrap();
    let n_train = m.split(Split::Train).count();
    assert_eq!(s.split(Split::Gallery).count(), n_train + 36);
    assert_eq!(s.split(Split::Query).count(), 285);
    let test_ids: HashSet<&str> = m.identities(Split::Test);
    assert_eq!(s.identities(Split::Query), test_ids);
    for id in &test_ids {
        let g = s.split(Split::Gallery).filter(|x| x.identity == *id).count();
        assert_eq!(g, 2);
    }
    let gal: HashSet<&str> = s.split(Split::Gallery).map(|x| x.image_path.as_str()).collect();
    assert!(s.split(Split::Query).all(|q| !gal.contains(q.image_path.as_str())));

    let again = build_real_splits(&m, 2, &mut seed::stream(1, &[])).unwrap();
    assert_eq!(again, s);
    assert_eq!(DatasetManifest::from_json(&s.to_json().unwrap()).unwrap(), s);
    let none = build_real_splits(&m, 0, &mut seed::stream(1, &[])).unwrap();
    assert_eq!(none.split(Split::Gallery).count(), n_train);
}

#[test]
fn manta_sized_training_corpus_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["right_eye", "left_eye", "right_gill", "left_gill", "tail"];
    let mut csv = String::from("image_path,landmark_name,x,y,visible\n");
    for i in 0..1422 {
        let rel = format!("train/m{:03}/{i}.png", i % 110);
        write_png(dir.path(), &rel);
        for n in names {
            csv.push_str(&format!("{rel},{n},1,1,1\n"));
        }
    }
    fs::write(dir.path().join("landmarks.csv"), csv).unwrap();
    let m = load_annotations(dir.path()).unwrap();
    assert_eq!(m.identities(Split::Train).len(), 110);
    assert_eq!(m.samples.len(), 1422);
}

#[test]
fn malformed_annotations_are_all_reported() {
    let dir = tempfile::tempdir().unwrap();
    write_png(dir.path(), "train/a/0.png");
    let csv = "image_path,landmark_name,x,y,visible\n\
               train/a/0.png,eye,1,2,1\n\
               train/a/0.png,eye,3,4,1\n\
               train/a/0.png,tail,abc,4,1\n\
               train/a/1.png,eye,1,1,1\n";
    fs::write(dir.path().join("landmarks.csv"), csv).unwrap();
    match load_annotations(dir.path()) {
        Err(Error::Annotations(problems)) => {
            let all = problems.join("\n");
            assert!(all.contains("duplicate landmark"), "{all}");
            assert!(all.contains("non-numeric"), "{all}");
            assert!(all.contains("image file missing"), "{all}");
        }
        other => panic!("expected annotation errors, got {other:?}"),
    }
}

#[test]
fn split_rejects_small_test_identity() {
    let dir = tempfile::tempdir().unwrap();
    real_corpus(dir.path(), 2, &[5, 2]);
    let m = load_annotations(dir.path()).unwrap();
    assert!(matches!(build_real_splits(&m, 2, &mut seed::stream(0, &[])), Err(Error::Split(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pk_epoch_covers_every_identity_and_admits_triplets(
        sizes in prop::collection::vec(1usize..7, 4..20),
        p in 2usize..5,
        k in 2usize..5,
        s in any::<u64>(),
    ) {
        prop_assume!(p <= sizes.len());
        let labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(l, &n)| std::iter::repeat_n(l, n)).collect();
        prop_assume!(p * k <= labels.len());
        let sampler = PkSampler::new(&labels, p, k).unwrap();
        let mut rng = seed::stream(s, &[]);
        let batches = sampler.epoch(&mut rng);
        let mut hist = vec![0usize; sizes.len()];
        for b in &batches {
            prop_assert_eq!(b.len(), p * k);
            let mut per: BTreeMap<usize, usize> = BTreeMap::new();
            b.iter().for_each(|&i| *per.entry(labels[i]).or_default() += 1);
            prop_assert_eq!(per.len(), p);
            prop_assert!(per.values().all(|&c| c == k));
            per.keys().for_each(|&l| hist[l] += k);
        }
        prop_assert!(hist.iter().all(|&c| c >= k));
    }
}
