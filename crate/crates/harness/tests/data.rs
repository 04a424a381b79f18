mod common;

use common::tiny_dataset_config;
use cvgl_harness::dataset::{gen_dataset, Dataset, DatasetConfig};
use cvgl_harness::manifest::{Manifest, Split, ViewKind};
use cvgl_harness::raster::RawImage;
use cvgl_harness::HarnessError;

fn files(dir: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

fn walk(dir: &std::path::Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn two_hundred_locations_give_1800_records_with_distinct_b_views() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig {
        train_locations: 150,
        heldout_locations: 50,
        ..DatasetConfig::standard(11)
    };
    let m = gen_dataset(&cfg, dir.path()).unwrap();
    assert_eq!(m.records.len(), 1800);
    assert_eq!(m.select(Split::Query, ViewKind::A).len(), 400);
    assert_eq!(m.select(Split::Gallery, ViewKind::B).len(), 50);

    let b: Vec<RawImage> = m
        .records
        .iter()
        .filter(|r| r.view == ViewKind::B)
        .map(|r| RawImage::load(&dir.path().join(&r.path)).unwrap())
        .collect();
    assert_eq!(b.len(), 200);
    let pixels = 64 * 64;
    let mut worst = 1.0f64;
    for i in 0..b.len() {
        for j in i + 1..b.len() {
            let differ = b[i]
                .data
                .chunks_exact(3)
                .zip(b[j].data.chunks_exact(3))
                .filter(|(p, q)| p != q)
                .count();
            worst = worst.min(differ as f64 / pixels as f64);
        }
    }
    assert!(worst >= 0.01, "closest pair of locations differs in {worst}");
}

#[test]
fn same_seed_gives_identical_files() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(&tiny_dataset_config(3), a.path()).unwrap();
    gen_dataset(&tiny_dataset_config(3), b.path()).unwrap();
    let fa = files(a.path());
    assert_eq!(fa.len(), 9 * 3 + 1);
    assert_eq!(fa, files(b.path()));

    let c = tempfile::tempdir().unwrap();
    gen_dataset(&tiny_dataset_config(4), c.path()).unwrap();
    assert_ne!(fa, files(c.path()));
}

#[test]
fn a_views_vary_and_b_view_is_canonical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_dataset_config(9);
    let m = gen_dataset(&cfg, dir.path()).unwrap();
    let load = |loc: usize, view: ViewKind| -> Vec<RawImage> {
        m.records
            .iter()
            .filter(|r| r.location == loc && r.view == view)
            .map(|r| RawImage::load(&dir.path().join(&r.path)).unwrap())
            .collect()
    };
    let a = load(0, ViewKind::A);
    assert_eq!(a.len(), 2);
    assert_ne!(a[0], a[1]);
    assert_eq!(load(0, ViewKind::B).len(), 1);
}

#[test]
fn manifest_on_disk_matches_and_loads() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&tiny_dataset_config(2), dir.path()).unwrap();
    let (back, root) = Manifest::load(dir.path()).unwrap();
    assert_eq!(back, m);
    assert_eq!(root, dir.path());
    let data = Dataset::load(&dir.path().join("manifest.tsv")).unwrap();
    assert_eq!(data.images.len(), m.records.len());
    assert_eq!(data.images[0].shape(), &[3, 16, 16]);
    assert_eq!(data.train_pairs().len(), 6);
}

#[test]
fn invalid_generator_configs_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let one = DatasetConfig {
        train_locations: 1,
        heldout_locations: 0,
        ..tiny_dataset_config(0)
    };
    assert!(matches!(gen_dataset(&one, dir.path()), Err(HarnessError::Config(_))));
    let no_b = DatasetConfig {
        b_views: 0,
        ..tiny_dataset_config(0)
    };
    assert!(matches!(gen_dataset(&no_b, dir.path()), Err(HarnessError::Config(_))));
}

#[test]
fn unwritable_output_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, b"x").unwrap();
    let err = gen_dataset(&tiny_dataset_config(0), &blocker.join("sub")).unwrap_err();
    assert!(matches!(err, HarnessError::Io { .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn missing_image_is_reported_with_its_path() {
    let dir = tempfile::tempdir().unwrap();
    let m = gen_dataset(&tiny_dataset_config(1), dir.path()).unwrap();
    let victim = dir.path().join(&m.records[3].path);
    std::fs::remove_file(&victim).unwrap();
    let err = Dataset::load(dir.path()).unwrap_err();
    assert!(err.to_string().contains(&victim.display().to_string()), "{err}");
}
