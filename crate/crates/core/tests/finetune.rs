use muse_core::finetune::*;
use muse_core::gradsuite::probe_model;
use muse_core::model::init_params;
use muse_core::synth::{generate_roi, RoiPatch, SynthConfig};
use muse_core::SeededRng;

fn roi(seed: u64) -> RoiPatch {
    let syn = SynthConfig { roi_side: 96, nuclei_min: 10, nuclei_max: 16, ..SynthConfig::default() };
    generate_roi(&syn, "roi_0", &mut SeededRng::new(seed)).unwrap()
}

fn annotated(roi: &RoiPatch, x_a: usize, y_a: usize, r_a: usize) -> AnnotatedSample {
    let nuclei = roi
        .nuclei
        .iter()
        .filter(|n| n.x >= x_a as f64 && n.x < (x_a + r_a) as f64 && n.y >= y_a as f64 && n.y < (y_a + r_a) as f64)
        .cloned()
        .collect();
    AnnotatedSample { roi: 0, x_a, y_a, r_a, nuclei }
}

#[test]
fn no_expansion_is_identity() {
    let r = roi(1);
    let s = annotated(&r, 32, 16, 32);
    let lf = expand_lfov(&s, &r, 32, &mut SeededRng::new(0)).unwrap();
    assert_eq!((lf.x, lf.y), (32, 16));
    assert_eq!(lf.omega, (0, 0, 32));
    assert!(expand_lfov(&s, &r, 31, &mut SeededRng::new(0)).is_err());
}

#[test]
fn expansion_offsets_cover_both_ends() {
    let r = roi(2);
    let s = annotated(&r, 32, 32, 32);
    let mut rng = SeededRng::new(3);
    let (mut lo, mut hi) = (usize::MAX, 0);
    for _ in 0..1000 {
        let lf = expand_lfov(&s, &r, 64, &mut rng).unwrap();
        for d in [lf.omega.0, lf.omega.1] {
            lo = lo.min(d);
            hi = hi.max(d);
        }
        assert!(lf.omega.0 + lf.omega.2 <= lf.side && lf.omega.1 + lf.omega.2 <= lf.side);
    }
    assert_eq!((lo, hi), (0, 32));
}

#[test]
fn omega_annotations_are_translated() {
    let r = roi(4);
    let n = r.nuclei.iter().find(|n| (32.0..64.0).contains(&n.x) && (32.0..64.0).contains(&n.y)).unwrap();
    let s = annotated(&r, n.x as usize - 16, n.y as usize - 16, 32);
    assert!(!s.nuclei.is_empty());
    let lf = expand_lfov(&s, &r, 56, &mut SeededRng::new(5)).unwrap();
    for (a, b) in s.nuclei.iter().zip(&lf.nuclei) {
        assert_eq!(b.x, a.x - lf.x as f64);
        assert_eq!(b.y, a.y - lf.y as f64);
        assert!(lf.in_omega(b.x, b.y));
    }
    let c = expand_centered(&s, &r, 64).unwrap();
    assert_eq!(c.omega, (16, 16, 32));
}

#[test]
fn lambda_cons_midpoint() {
    assert_eq!(lambda_cons_schedule(0, 20, 0.1).unwrap(), 0.0);
    assert_eq!(lambda_cons_schedule(20, 20, 0.1).unwrap(), 0.1);
    assert!((lambda_cons_schedule(10, 20, 0.1).unwrap() - 0.05).abs() < 1e-15);
}

#[test]
fn zero_epochs_pass_through() {
    let m = probe_model(0.02);
    let init = init_params(&m, &mut SeededRng::new(1)).unwrap();
    let cfg = FtConfig { epochs: 0, ..FtConfig::default() };
    let out = finetune(init.clone(), &m, &[], &[], &cfg, 0, None).unwrap();
    assert_eq!(out.params, init);
    assert!(out.epochs.is_empty());
}

#[test]
fn finetune_is_deterministic_and_ramps_consistency() {
    let m = probe_model(0.02);
    let r = roi(6);
    let samples = vec![annotated(&r, 16, 16, 16), annotated(&r, 48, 40, 16)];
    let cfg = FtConfig { epochs: 3, batch_size: 2, ..FtConfig::default() };
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let init = init_params(&m, &mut SeededRng::new(1)).unwrap();
        let out = finetune(init, &m, &samples, std::slice::from_ref(&r), &cfg, 8, Some(dir.path())).unwrap();
        let bytes = std::fs::read(dir.path().join("checkpoint.bin")).unwrap();
        let metrics = std::fs::read(dir.path().join("ft_metrics.jsonl")).unwrap();
        (out.epochs, bytes, metrics)
    };
    let a = run();
    let b = run();
    assert_eq!(a.1, b.1);
    assert_eq!(a.2, b.2);
    let lc: Vec<f64> = a.0.iter().map(|e| e.lambda_cons).collect();
    assert_eq!(lc[0], 0.0);
    assert!((lc[1] - 0.05).abs() < 1e-15);
    assert_eq!(lc[2], 0.1);
}

#[test]
fn detections_stay_inside_omega() {
    let m = probe_model(0.3);
    let r = roi(7);
    let s = annotated(&r, 32, 32, 16);
    let p = init_params(&m, &mut SeededRng::new(2)).unwrap();
    let cfg = FtConfig { suppression_radius: 0.5, ..FtConfig::default() };
    for d in detect(&p, &m, &cfg, &s, &r).unwrap() {
        assert!(d.x >= 32.0 && d.x < 48.0 && d.y >= 32.0 && d.y < 48.0);
        assert!(d.class_id >= 1);
    }
}
