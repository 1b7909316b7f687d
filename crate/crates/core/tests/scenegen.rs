use std::collections::VecDeque;

use freespace_uda::dataio::{DatasetLayout, LoadOptions, SplitRole};
use freespace_uda::scenegen::{generate_domain, DomainConfig, Region};

fn no_obstacles(mut cfg: DomainConfig) -> DomainConfig {
    cfg.obstacle_probability = 0.0;
    cfg
}

#[test]
fn domain_writes_requested_count_with_manifest_and_intrinsics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DomainConfig::source(11, 48, 64, 4);
    let manifest = generate_domain(&cfg, dir.path()).unwrap();
    assert_eq!(manifest.samples.len(), 4);
    assert!(dir.path().join("manifest.json").is_file());
    assert!(dir.path().join("intrinsics.json").is_file());
    for e in &manifest.samples {
        assert_eq!(e.role, SplitRole::SourceTrain);
        assert!(e.seed.is_some());
        for rel in [Some(&e.rgb), Some(&e.depth), e.label.as_ref()] {
            assert!(dir.path().join(rel.unwrap()).is_file());
        }
    }
    let layout = DatasetLayout::open(dir.path()).unwrap();
    assert_eq!(layout.manifest(), &manifest);
}

#[test]
fn target_train_labels_go_to_the_heldout_folder_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DomainConfig::target(12, 32, 32, 3, 2);
    let manifest = generate_domain(&cfg, dir.path()).unwrap();
    let layout = DatasetLayout::open(dir.path()).unwrap();
    for e in &manifest.samples {
        match e.role {
            SplitRole::TargetTrain => {
                assert!(e.label.is_none());
                let held = e.heldout_label.as_ref().unwrap();
                assert!(held.starts_with("label_heldout/"));
                assert!(!dir.path().join("label").join(format!("{}.png", e.id)).exists());
                let opts = LoadOptions {
                    with_label: false,
                    need_normals: false,
                };
                assert!(layout.load_sample(&e.id, opts).unwrap().label.is_none());
                assert!(layout.load_heldout_label(&e.id).is_ok());
            }
            SplitRole::TargetEval => assert!(dir.path().join(e.label.as_ref().unwrap()).is_file()),
            SplitRole::SourceTrain => unreachable!(),
        }
    }
    assert_eq!(std::fs::read_dir(dir.path().join("label_heldout")).unwrap().count(), 3);
}

fn mean_histogram(cfg: &DomainConfig) -> Vec<f64> {
    const BINS: usize = 8;
    let scenes = cfg.render_all().unwrap();
    let mut hist = vec![0.0; 3 * BINS];
    let mut n = 0.0;
    for (_, _, s) in &scenes {
        for ((c, _, _), v) in s.sample.rgb.indexed_iter() {
            hist[c * BINS + ((*v * BINS as f32) as usize).min(BINS - 1)] += 1.0;
        }
        n += (s.sample.height() * s.sample.width()) as f64;
    }
    hist.iter().map(|h| h / n).collect()
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[test]
fn domains_with_disjoint_palettes_have_distinct_color_histograms() {
    let source_a = mean_histogram(&DomainConfig::source(1, 48, 48, 96));
    let source_b = mean_histogram(&DomainConfig::source(2, 48, 48, 96));
    let target = mean_histogram(&DomainConfig::target(3, 48, 48, 96, 0));
    let within = l1(&source_a, &source_b);
    let across = l1(&source_a, &target);
    assert!(across > 0.5, "across-domain distance {across}");
    assert!(across > 3.0 * within, "across {across} vs within {within}");
}

/// Pixels whose 3x3 neighbourhood lies entirely in one region.
fn interior(regions: &ndarray::Array2<Region>, r: usize, c: usize) -> bool {
    let (h, w) = regions.dim();
    if r == 0 || c == 0 || r + 1 >= h || c + 1 >= w {
        return false;
    }
    let region = regions[[r, c]];
    (r - 1..=r + 1).all(|i| (c - 1..=c + 1).all(|j| regions[[i, j]] == region))
}

#[test]
fn normals_are_constant_within_horizontal_regions() {
    for domain in [DomainConfig::source(4, 64, 64, 6), DomainConfig::target(5, 64, 64, 6, 0)] {
        for (_, _, scene) in no_obstacles(domain).render_all().unwrap() {
            let normals = scene.sample.normals_or_compute().unwrap();
            for region in [Region::Road, Region::Sidewalk] {
                let mut values = Vec::new();
                for ((r, c), reg) in scene.regions.indexed_iter() {
                    if *reg == region && interior(&scene.regions, r, c) {
                        if let Some(n) = normals.normal(r, c) {
                            values.push(n);
                        }
                    }
                }
                if values.len() < 2 {
                    continue;
                }
                for k in 0..3 {
                    let mean = values.iter().map(|v| v[k]).sum::<f64>() / values.len() as f64;
                    let var = values.iter().map(|v| (v[k] - mean).powi(2)).sum::<f64>() / values.len() as f64;
                    assert!(var.sqrt() < 1e-3, "{region:?} component {k}: std {}", var.sqrt());
                }
            }
        }
    }
}

#[test]
fn road_is_one_connected_strip_bounded_by_curb_or_sidewalk() {
    let cfg = no_obstacles(DomainConfig::source(6, 64, 64, 8));
    for (_, _, scene) in cfg.render_all().unwrap() {
        let regions = &scene.regions;
        let (h, w) = regions.dim();
        let road: Vec<(usize, usize)> = regions
            .indexed_iter()
            .filter(|(_, r)| **r == Region::Road)
            .map(|(p, _)| p)
            .collect();
        assert!(!road.is_empty());

        let mut seen = ndarray::Array2::from_elem((h, w), false);
        let mut queue = VecDeque::from([road[0]]);
        seen[road[0]] = true;
        let mut reached = 0;
        while let Some((r, c)) = queue.pop_front() {
            reached += 1;
            let next = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            for (nr, nc) in next {
                if nr < h && nc < w && !seen[[nr, nc]] && regions[[nr, nc]] == Region::Road {
                    seen[[nr, nc]] = true;
                    queue.push_back((nr, nc));
                }
            }
        }
        assert_eq!(reached, road.len(), "{}: road is not connected", scene.sample.id);

        for r in 0..h {
            let cols: Vec<usize> = (0..w).filter(|&c| regions[[r, c]] == Region::Road).collect();
            let (Some(&lo), Some(&hi)) = (cols.first(), cols.last()) else { continue };
            assert_eq!(cols.len(), hi - lo + 1, "row {r} has a gap");
            let side = |c: usize| matches!(regions[[r, c]], Region::Curb | Region::Sidewalk);
            if lo > 0 {
                assert!(side(lo - 1), "row {r}: left of road is {:?}", regions[[r, lo - 1]]);
            }
            if hi + 1 < w {
                assert!(side(hi + 1), "row {r}: right of road is {:?}", regions[[r, hi + 1]]);
            }
        }
    }
}

#[test]
fn label_marks_exactly_the_road_region() {
    for (_, _, scene) in DomainConfig::target(7, 48, 48, 4, 0).render_all().unwrap() {
        let label = scene.sample.label.as_ref().unwrap();
        for ((r, c), reg) in scene.regions.indexed_iter() {
            assert_eq!(label[[r, c]] == 1, *reg == Region::Road);
        }
    }
}
