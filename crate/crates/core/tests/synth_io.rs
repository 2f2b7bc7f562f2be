use std::fs;
use std::path::Path;

use muse_core::synth::{generate_corpus, load_manifest, load_roi, Corpus, MANIFEST_FILE};
use muse_core::synth::{generate_roi, roi_name, SynthConfig};
use muse_core::SeededRng;

fn cfg() -> SynthConfig {
    SynthConfig { roi_side: 64, nuclei_min: 4, nuclei_max: 8, ..SynthConfig::default() }
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn empty_corpus_has_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let entries = generate_corpus(&cfg(), 0, &SeededRng::new(1), dir.path()).unwrap();
    assert!(entries.is_empty());
    assert_eq!(fs::read(dir.path().join(MANIFEST_FILE)).unwrap(), b"");
    assert!(Corpus::load(dir.path()).unwrap().is_empty());
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_corpus(&cfg(), 8, &SeededRng::new(3), a.path()).unwrap();
    generate_corpus(&cfg(), 8, &SeededRng::new(3), b.path()).unwrap();
    let (fa, fb) = (dir_bytes(a.path()), dir_bytes(b.path()));
    assert_eq!(fa.len(), 9);
    assert_eq!(fa, fb);
}

#[test]
fn manifest_entries_reload() {
    let dir = tempfile::tempdir().unwrap();
    let c = cfg();
    let rng = SeededRng::new(5);
    let entries = generate_corpus(&c, 6, &rng, dir.path()).unwrap();
    assert_eq!(load_manifest(dir.path()).unwrap(), entries);
    for (k, e) in entries.iter().enumerate() {
        let roi = load_roi(dir.path(), e).unwrap();
        assert_eq!(roi.image.shape(), &[3, e.height, e.width]);
        assert_eq!(roi.nuclei, e.records());
        assert_eq!(e.roi_id, roi_name(k));
        let fresh = generate_roi(&c, &e.roi_id, &mut rng.child("roi", k as u64).child("attempt", 0)).unwrap();
        assert_eq!(fresh.nuclei, roi.nuclei);
        for (p, q) in fresh.image.data().iter().zip(roi.image.data()) {
            assert!((p - q).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn annotation_squares_fit_inside() {
    let dir = tempfile::tempdir().unwrap();
    let c = SynthConfig { ann_side: Some(32), ..cfg() };
    for e in generate_corpus(&c, 10, &SeededRng::new(8), dir.path()).unwrap() {
        let (x, y, s) = e.annotation().unwrap();
        assert_eq!(s, 32);
        assert!(x + s <= e.width && y + s <= e.height);
    }
}

#[test]
fn class_mixture_varies_between_rois() {
    let c = SynthConfig { roi_side: 128, nuclei_min: 20, nuclei_max: 24, ..SynthConfig::default() };
    let dominant: Vec<usize> = (0..12)
        .map(|k| {
            let roi = generate_roi(&c, "r", &mut SeededRng::new(k)).unwrap();
            let mut counts = [0usize; 3];
            for n in &roi.nuclei {
                counts[n.class_id] += 1;
            }
            (0..3).max_by_key(|&i| counts[i]).unwrap()
        })
        .collect();
    assert!((0..3).filter(|c| dominant.contains(c)).count() >= 2);
}
