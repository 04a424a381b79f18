mod common;

use std::path::{Path, PathBuf};

use common::tiny_train_config;
use cvgl_harness::checkpoint::Checkpoint;
use cvgl_harness::descriptors::{self, DescriptorFile};
use cvgl_harness::manifest::{Manifest, Record, Split, ViewKind};
use cvgl_harness::raster::{self, RawImage};
use cvgl_harness::report::Report;
use cvgl_harness::train::init_checkpoint;
use cvgl_harness::HarnessError;

fn origin() -> &'static Path {
    Path::new("mem")
}

#[test]
fn raster_roundtrip_and_header_arithmetic() {
    let data: Vec<u8> = (0..5 * 3 * 3).map(|i| (i * 7) as u8).collect();
    let img = RawImage::new(5, 3, 3, data).unwrap();
    let bytes = img.to_bytes();
    assert_eq!(bytes.len(), raster::HEADER_LEN + 45);
    assert_eq!(&bytes[..4], raster::MAGIC);
    assert_eq!(RawImage::from_bytes(&bytes, origin()).unwrap(), img);
}

#[test]
fn raster_rejects_corruption() {
    let img = RawImage::new(2, 2, 3, vec![1; 12]).unwrap();
    let mut bytes = img.to_bytes();
    bytes.pop();
    assert!(matches!(RawImage::from_bytes(&bytes, origin()), Err(HarnessError::Format { .. })));
    let mut bytes = img.to_bytes();
    bytes[0] = b'X';
    assert!(matches!(RawImage::from_bytes(&bytes, origin()), Err(HarnessError::Format { .. })));
    assert!(RawImage::new(2, 2, 3, vec![0; 11]).is_err());
}

#[test]
fn raster_tensor_is_normalized_chw() {
    let img = RawImage::new(2, 1, 3, vec![0, 255, 128, 255, 0, 0]).unwrap();
    let t = img.to_tensor();
    assert_eq!(t.shape(), &[3, 1, 2]);
    // Channel 0 holds pixels (0, 255).
    assert_eq!(t.data()[0], -2.0);
    assert_eq!(t.data()[1], 2.0);
}

fn manifest() -> Manifest {
    let rec = |loc, view, split| Record {
        path: PathBuf::from(format!("images/L{loc}_{view}.raw")),
        location: loc,
        view,
        split,
    };
    Manifest {
        seed: 3,
        image_size: 16,
        locations: 3,
        records: vec![
            rec(0, ViewKind::A, Split::Train),
            rec(0, ViewKind::B, Split::Train),
            rec(1, ViewKind::A, Split::Train),
            rec(1, ViewKind::B, Split::Train),
            rec(2, ViewKind::A, Split::Query),
            rec(2, ViewKind::B, Split::Gallery),
        ],
    }
}

#[test]
fn manifest_roundtrip() {
    let m = manifest();
    let text = m.render();
    assert!(text.starts_with("#cvgl-manifest\tversion=1\tseed=3\timage_size=16\tlocations=3\n"));
    assert_eq!(Manifest::parse(&text, origin()).unwrap(), m);
}

#[test]
fn manifest_validation() {
    let mut m = manifest();
    m.records.pop();
    assert!(m.validate().unwrap_err().contains("held-out location 2"));

    let mut m = manifest();
    m.records[4].view = ViewKind::B;
    assert!(m.validate().is_err());

    let mut m = manifest();
    m.locations = 4;
    assert!(m.validate().unwrap_err().contains("location 3"));

    let text = manifest().render().replace("\t2\tB\tgallery", "\t7\tB\tgallery");
    assert!(matches!(Manifest::parse(&text, origin()), Err(HarnessError::Format { .. })));
}

#[test]
fn report_roundtrip() {
    let mut r = Report::new("eval");
    r.push("a2b.r@1", 0.875);
    r.push("a2b.queries", 400);
    r.push("a2b.direction", "A->B");
    r.push("a2b.map", 1.0 / 3.0);
    let text = r.to_string();
    let back = Report::parse(&text, origin()).unwrap();
    assert_eq!(back, r);
    assert_eq!(back.get_f64("a2b.map"), Some(1.0 / 3.0));
    let summary = text.lines().last().unwrap();
    assert!(summary.starts_with("summary={"));
}

#[test]
fn report_rejects_tampering() {
    let mut r = Report::new("eval");
    r.push("x", 1.5);
    let text = r.to_string().replace("x=1.5", "x=2.5");
    assert!(matches!(Report::parse(&text, origin()), Err(HarnessError::Format { .. })));
    let text = r.to_string().lines().take(3).collect::<Vec<_>>().join("\n");
    assert!(Report::parse(&text, origin()).is_err());
}

#[test]
fn descriptor_file_layout() {
    let rows = vec![vec![0.6, 0.8, 0.0], vec![0.0, 0.0, 1.0]];
    let f = DescriptorFile::from_rows(&rows, vec![10, 11]).unwrap();
    let bytes = f.to_bytes();
    assert_eq!(bytes.len(), DescriptorFile::byte_len(2, 3));
    assert_eq!(bytes.len(), descriptors::HEADER_LEN + 2 * 3 * 4 + 2 * 8);
    assert_eq!(&bytes[..4], descriptors::MAGIC);
    let back = DescriptorFile::from_bytes(&bytes, origin()).unwrap();
    assert_eq!(back, f);
    assert_eq!(back.row(0), &[0.6f32, 0.8, 0.0]);
    assert!(DescriptorFile::from_bytes(&bytes[..bytes.len() - 1], origin()).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = init_checkpoint(&tiny_train_config(5)).unwrap();
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ckpt.save(&a).unwrap();
    let loaded = Checkpoint::load(&a, Some(&ckpt.config)).unwrap();
    loaded.save(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    for ((na, pa), (nb, pb)) in ckpt.params.iter().zip(loaded.params.iter()) {
        assert_eq!(na, nb);
        let bits = |t: &cvgl_numerics::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&pa.value), bits(&pb.value));
    }
}

#[test]
fn checkpoint_refuses_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train_config(5);
    let path = dir.path().join("c.ckpt");
    init_checkpoint(&cfg).unwrap().save(&path).unwrap();
    let other = cvgl_harness::TrainConfig { experts: 5, ..cfg };
    let err = Checkpoint::load(&path, Some(&other)).unwrap_err();
    assert!(matches!(err, HarnessError::Config(_)), "{err}");
    assert_eq!(err.exit_code(), 1);
}

#[test]
fn checkpoint_rejects_truncation_and_bad_magic() {
    let bytes = init_checkpoint(&tiny_train_config(1)).unwrap().to_bytes();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], origin()).is_err());
    let mut bad = bytes.clone();
    bad[0] ^= 0xff;
    let err = Checkpoint::from_bytes(&bad, origin()).unwrap_err();
    assert_eq!(err.exit_code(), 3);
}
