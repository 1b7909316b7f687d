use std::path::Path;

use freespace_uda::dataio::png::{read_rgb, write_gray8, write_rgb};
use freespace_uda::dataio::{DataRoot, DatasetLayout, LoadOptions, SampleSource, SplitRole};
use freespace_uda::geometry;
use freespace_uda::experiment::ToySetup;
use freespace_uda::scenegen::{generate_dataset, generate_domain, DomainConfig, GenConfig};
use freespace_uda::Error;
use ndarray::Array2;

const ALL: LoadOptions = LoadOptions {
    need_normals: true,
    with_label: true,
};

fn source(dir: &Path, write_normals: bool) -> DatasetLayout {
    let mut cfg = DomainConfig::source(21, 40, 48, 3);
    cfg.write_normals = write_normals;
    generate_domain(&cfg, dir).unwrap();
    DatasetLayout::open(dir).unwrap()
}

#[test]
fn rgb_load_then_save_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let layout = source(dir.path(), false);
    for e in layout.manifest().samples.clone() {
        let original = std::fs::read(dir.path().join(&e.rgb)).unwrap();
        let rgb = read_rgb(&dir.path().join(&e.rgb)).unwrap();
        let copy = dir.path().join("copy.png");
        write_rgb(&copy, &rgb).unwrap();
        assert_eq!(std::fs::read(&copy).unwrap(), original, "{}", e.id);
    }
}

#[test]
fn cached_normals_equal_freshly_computed_ones() {
    let dir = tempfile::tempdir().unwrap();
    let layout = source(dir.path(), true);
    for e in &layout.manifest().samples {
        assert!(e.normals.is_some());
        let s = layout.load_sample(&e.id, ALL).unwrap();
        let cached = s.normals.as_ref().unwrap();
        let fresh = geometry::surface_normals(&s.depth, &s.intrinsics).unwrap();
        assert_eq!(cached.to_rgb8(), fresh.to_rgb8(), "{}", e.id);
        assert_eq!(cached.validity(), fresh.validity());
    }
}

#[test]
fn iteration_follows_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let layout = source(dir.path(), false);
    let root = DataRoot::open(dir.path()).unwrap();
    let split = root.split(SplitRole::SourceTrain);
    let ids: Vec<&str> = (0..split.len()).map(|i| split.id(i)).collect();
    let manifest: Vec<&str> = layout.manifest().samples.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, manifest);
}

#[test]
fn missing_file_error_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let layout = source(dir.path(), false);
    let e = layout.manifest().samples[1].clone();
    let depth = dir.path().join(&e.depth);
    std::fs::remove_file(&depth).unwrap();
    let err = layout.load_sample(&e.id, ALL).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(err.to_string().contains(&depth.display().to_string()), "{err}");
}

#[test]
fn label_values_outside_zero_and_255_are_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let layout = source(dir.path(), false);
    let e = layout.manifest().samples[0].clone();
    let label = dir.path().join(e.label.as_ref().unwrap());
    let mut bad = Array2::<u8>::zeros((40, 48));
    bad[[3, 4]] = 128;
    write_gray8(&label, &bad).unwrap();
    let err = layout.load_sample(&e.id, ALL).unwrap_err();
    match &err {
        Error::Format { path, .. } => assert_eq!(path, &label),
        other => panic!("expected a format error, got {other}"),
    }
    assert!(err.is_validation());
}

#[test]
fn target_train_labels_cannot_be_loaded_for_training() {
    let dir = tempfile::tempdir().unwrap();
    generate_domain(&DomainConfig::target(22, 32, 32, 2, 1), dir.path()).unwrap();
    let root = DataRoot::open(dir.path()).unwrap();
    let split = root.split(SplitRole::TargetTrain);
    assert!(matches!(split.load(0, ALL), Err(Error::Contract(_))));
    let opts = LoadOptions {
        need_normals: true,
        with_label: false,
    };
    assert!(split.load(0, opts).unwrap().label.is_none());
}

#[test]
fn data_root_spans_domain_subdirectories() {
    let dir = tempfile::tempdir().unwrap();
    generate_domain(&DomainConfig::source(23, 32, 32, 3), &dir.path().join("source")).unwrap();
    generate_domain(&DomainConfig::target(24, 32, 32, 2, 2), &dir.path().join("target")).unwrap();
    let root = DataRoot::open(dir.path()).unwrap();
    assert_eq!(root.layouts().len(), 2);
    assert_eq!(root.split(SplitRole::SourceTrain).len(), 3);
    assert_eq!(root.split(SplitRole::TargetTrain).len(), 2);
    assert_eq!(root.split(SplitRole::TargetEval).len(), 2);
    assert!(matches!(DataRoot::open(dir.path().join("source/rgb")), Err(Error::Input(_))));
}

#[test]
fn in_memory_toy_splits_match_generated_files() {
    let setup = ToySetup {
        seed: 8,
        size: 32,
        source: 3,
        target_train: 2,
        target_eval: 2,
    };
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&GenConfig::two_domain(8, 32, 3, 2, 2), dir.path()).unwrap();
    let root = DataRoot::open(dir.path()).unwrap();
    for memory in setup.splits().unwrap() {
        let disk = root.split(memory.role());
        assert_eq!(memory.len(), disk.len());
        let opts = LoadOptions {
            need_normals: true,
            with_label: memory.role() != SplitRole::TargetTrain,
        };
        for i in 0..memory.len() {
            let (m, d) = (memory.load(i, opts).unwrap(), disk.load(i, opts).unwrap());
            assert_eq!(m.id, d.id);
            assert_eq!(m.rgb, d.rgb, "{}", m.id);
            assert_eq!(m.depth, d.depth, "{}", m.id);
            assert_eq!(m.label, d.label, "{}", m.id);
            assert_eq!(m.normals_or_compute().unwrap(), d.normals_or_compute().unwrap());
        }
    }
}
