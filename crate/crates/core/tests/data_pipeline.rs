use dgamil_core::bagging::{make_bag, read_bag, write_bag, BagConfig, Normalization};
use dgamil_core::volume::{read_volume, synth_dataset, synth_subject, write_volume, DatasetManifest, GeneratorConfig, Split, SplitFractions};
use dgamil_core::Error;

fn small() -> GeneratorConfig {
    GeneratorConfig { shape: [12, 24, 12], ..Default::default() }
}

#[test]
fn subjects_are_deterministic_and_age_dependent() {
    let cfg = small();
    let a = synth_subject(5, 50.0, &cfg).unwrap();
    assert_eq!(a, synth_subject(5, 50.0, &cfg).unwrap());
    let older = synth_subject(5, 80.0, &cfg).unwrap();
    assert_ne!(a.voxels, older.voxels);
    // contrast < 1 darkens the slab, and the region grows with age
    assert!(older.slab_mean() < a.slab_mean());
}

#[test]
fn out_of_range_age_and_bad_shape_are_rejected() {
    let cfg = small();
    assert!(matches!(synth_subject(1, 90.0, &cfg), Err(Error::Config(_))));
    let bad = GeneratorConfig { shape: [2, 24, 12], ..small() };
    assert!(matches!(synth_subject(1, 60.0, &bad), Err(Error::Config(_))));
}

#[test]
fn volume_file_round_trip_and_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth_subject(9, 61.5, &small()).unwrap();
    let p = dir.path().join("s.vol");
    write_volume(&v, &p).unwrap();
    assert_eq!(read_volume(&p).unwrap(), v);
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(read_volume(&p), Err(Error::Truncated { .. })));
}

#[test]
fn dataset_manifest_round_trips_and_hash_tracks_content() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_dataset(&small(), 20, SplitFractions::new(0.7, 0.1, 0.2), 11, dir.path()).unwrap();
    assert_eq!((m.split_len(Split::Train), m.split_len(Split::Val), m.split_len(Split::Test)), (14, 2, 4));
    let back = DatasetManifest::read(&dir.path().join("manifest.txt")).unwrap();
    assert_eq!(back.entries, m.entries);
    assert_eq!(back.content_hash(), m.content_hash());
    let other = synth_dataset(&small(), 20, SplitFractions::new(0.7, 0.1, 0.2), 12, &dir.path().join("b")).unwrap();
    assert_ne!(other.content_hash(), m.content_hash());
    for e in &m.entries {
        let v = m.load(e).unwrap();
        assert_eq!(v.age, e.age);
        assert!(v.age >= 44.0 && v.age <= 82.0);
    }
}

#[test]
fn bags_cover_the_axis_and_mark_the_slab() {
    let cfg = small();
    let v = synth_subject(3, 70.0, &cfg).unwrap();
    let bag = make_bag(&v, &BagConfig::default()).unwrap();
    assert_eq!(bag.shape(), [8, 3, 12, 12]);
    let (a, b) = bag.signal_instances.unwrap();
    // a quarter of the instances
    assert_eq!(b - a + 1, 2);
    for j in a..=b {
        let (lo, hi) = bag.instance_ranges[j];
        assert!(lo >= v.signal_slab.0 && hi - 1 <= v.signal_slab.1);
    }
    // z-scored over the nonzero voxels
    let nz: Vec<f64> = bag.data.iter().filter(|&&x| x != 0.0).map(|&x| x as f64).collect();
    let mean = nz.iter().sum::<f64>() / nz.len() as f64;
    assert!(mean.abs() < 1e-3);
}

#[test]
fn bag_size_and_axis_options() {
    let v = synth_subject(3, 70.0, &small()).unwrap();
    let bag = make_bag(&v, &BagConfig { k: Some(6), norm: Normalization::MinMax, ..Default::default() }).unwrap();
    assert_eq!(bag.k, 6);
    assert!(bag.data.iter().all(|&x| (0.0..=1.0).contains(&x)));
    let across = make_bag(&v, &BagConfig { axis: 0, ..Default::default() }).unwrap();
    assert_eq!(across.shape(), [4, 3, 24, 12]);
    assert_eq!(across.signal_instances, None);
    assert!(matches!(make_bag(&v, &BagConfig { k: Some(9), ..Default::default() }), Err(Error::Config(_))));
}

#[test]
fn bag_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let v = synth_subject(4, 55.0, &small()).unwrap();
    let bag = make_bag(&v, &BagConfig::default()).unwrap();
    let p = dir.path().join("x.bag");
    write_bag(&bag, &p).unwrap();
    assert_eq!(read_bag(&p).unwrap(), bag);
}
