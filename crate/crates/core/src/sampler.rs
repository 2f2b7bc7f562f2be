//! MPP-based cropping with nucleus provenance, multi-crop view sets and
//! cross-view nucleus matching.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::numerics::{resize_bilinear, SeededRng, Tensor};
use crate::synth::{NucleusRecord, RoiPatch};

/// Geometry of one crop in the source ROI frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CropSpec {
    pub mpp_o: f64,
    pub r_o: usize,
    pub u: f64,
    pub v: f64,
    /// Realized source side in ROI pixels.
    pub side: usize,
}

impl CropSpec {
    /// View pixels per source pixel.
    pub fn scale(&self) -> f64 {
        self.r_o as f64 / self.side as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    /// `[3, r_o, r_o]`.
    pub image: Tensor,
    pub mpp: f64,
    pub coords: Vec<(f64, f64)>,
    pub indices: Vec<usize>,
    pub flip_h: bool,
    pub flip_v: bool,
    pub roi_id: String,
    pub crop: CropSpec,
}

impl View {
    /// Output side `r_o` in view pixels.
    #[allow(clippy::misnamed_getters)]
    pub fn side(&self) -> usize {
        self.crop.r_o
    }

    /// Map a view-pixel position back to the ROI frame.
    pub fn back_project(&self, x: f64, y: f64) -> (f64, f64) {
        let r = self.crop.r_o as f64;
        let x = if self.flip_h { r - x } else { x };
        let y = if self.flip_v { r - y } else { y };
        let s = self.crop.side as f64 / r;
        (self.crop.u + x * s, self.crop.v + y * s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            blur_prob: 0.2,
            blur_sigma: [0.1, 1.0],
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            blur_prob: 0.0,
            blur_sigma: [0.0, 0.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiCropConfig {
    pub n_global: usize,
    pub n_local: usize,
    pub global_side: usize,
    pub local_side: usize,
    pub global_mpp: [f64; 2],
    pub local_mpp: [f64; 2],
    /// Sides used by the large-FoV pretraining variant.
    pub lfov_global_side: usize,
    pub lfov_local_side: usize,
    pub augment: AugmentConfig,
}

impl Default for MultiCropConfig {
    fn default() -> Self {
        Self {
            n_global: 2,
            n_local: 4,
            global_side: 64,
            local_side: 32,
            global_mpp: [0.25, 0.5],
            local_mpp: [0.25, 0.5],
            lfov_global_side: 128,
            lfov_local_side: 56,
            augment: AugmentConfig::default(),
        }
    }
}

impl MultiCropConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_global != 2 {
            return Err(MuseError::config("sampler.n_global must be 2"));
        }
        if self.local_side >= self.global_side || self.local_side == 0 {
            return Err(MuseError::config("sampler.local_side must be in [1, global_side)"));
        }
        if self.lfov_local_side >= self.lfov_global_side {
            return Err(MuseError::config("sampler.lfov_local_side must be < lfov_global_side"));
        }
        for r in [self.global_mpp, self.local_mpp] {
            if !(r[0] > 0.0) || r[1] < r[0] {
                return Err(MuseError::config("sampler MPP ranges must be positive and ordered"));
            }
        }
        Ok(())
    }

    /// Same configuration with the large-FoV view sides.
    pub fn lfov(&self) -> MultiCropConfig {
        MultiCropConfig {
            global_side: self.lfov_global_side,
            local_side: self.lfov_local_side,
            ..self.clone()
        }
    }
}

/// Matched positions `(in view 1, in view 2)` for every shared nucleus index.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MatchSet {
    pub pairs: Vec<(usize, usize)>,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Two global views followed by the local views.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewSet {
    pub views: Vec<View>,
    pub n_global: usize,
}

/// Index of the i-th nucleus is `i`; stable for every crop of the ROI.
pub fn build_index(nuclei: &[NucleusRecord]) -> Vec<usize> {
    (0..nuclei.len()).collect()
}

pub fn source_side(mpp_e: f64, mpp_o: f64, r_o: usize) -> usize {
    (mpp_o / mpp_e * r_o as f64).round() as usize
}

/// Extract `[3, side, side]` starting at integer `(u, v)`.
fn extract(image: &Tensor, u: usize, v: usize, side: usize) -> Tensor {
    let w = image.shape()[2];
    let h = image.shape()[1];
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for i in 0..side {
            let base = (c * h + v + i) * w + u;
            out.extend_from_slice(&image.data()[base..base + side]);
        }
    }
    Tensor::new(vec![3, side, side], out).expect("crop shape")
}

/// Crop a region of `round(mpp_o / mpp_e * r_o)` source pixels and resize it
/// to `r_o`, carrying every surviving nucleus's coordinates and index.
pub fn crop_with_provenance(roi: &RoiPatch, mpp_o: f64, r_o: usize, rng: &mut SeededRng) -> Result<View> {
    if !(mpp_o > 0.0) || r_o == 0 {
        return Err(MuseError::arg(format!("crop needs mpp_o > 0 and r_o > 0, got {mpp_o}, {r_o}")));
    }
    let roi_side = roi.side();
    let side = source_side(roi.base_mpp, mpp_o, r_o).max(1);
    if side > roi_side || side > roi.image.shape()[2] {
        return Err(MuseError::CropInfeasible { mpp_o, r_o, side, roi_side });
    }
    let u = rng.int_inclusive(0, (roi.image.shape()[2] - side) as i64) as usize;
    let v = rng.int_inclusive(0, (roi_side - side) as i64) as usize;
    crop_at(roi, mpp_o, r_o, u, v)
}

/// Deterministic crop with a given top-left corner.
pub fn crop_at(roi: &RoiPatch, mpp_o: f64, r_o: usize, u: usize, v: usize) -> Result<View> {
    let roi_side = roi.side();
    let side = source_side(roi.base_mpp, mpp_o, r_o).max(1);
    if u + side > roi.image.shape()[2] || v + side > roi_side {
        return Err(MuseError::CropInfeasible { mpp_o, r_o, side, roi_side });
    }
    let image = resize_bilinear(&extract(&roi.image, u, v, side), r_o, r_o)?;
    let crop = CropSpec {
        mpp_o,
        r_o,
        u: u as f64,
        v: v as f64,
        side,
    };
    let scale = crop.scale();
    let r = r_o as f64;
    let mut coords = Vec::new();
    let mut indices = Vec::new();
    for (n, idx) in roi.nuclei.iter().zip(build_index(&roi.nuclei)) {
        let xo = (n.x - crop.u) * scale;
        let yo = (n.y - crop.v) * scale;
        if (0.0..r).contains(&xo) && (0.0..r).contains(&yo) {
            coords.push((xo, yo));
            indices.push(idx);
        }
    }
    Ok(View {
        image,
        mpp: mpp_o,
        coords,
        indices,
        flip_h: false,
        flip_v: false,
        roi_id: roi.roi_id.clone(),
        crop,
    })
}

pub fn flip_horizontal(view: &mut View) {
    let (h, w) = (view.image.shape()[1], view.image.shape()[2]);
    let d = view.image.data_mut();
    for c in 0..3 {
        for i in 0..h {
            d[(c * h + i) * w..(c * h + i + 1) * w].reverse();
        }
    }
    let r = view.crop.r_o as f64;
    for p in &mut view.coords {
        p.0 = r - p.0;
    }
    view.flip_h = !view.flip_h;
}

pub fn flip_vertical(view: &mut View) {
    let (h, w) = (view.image.shape()[1], view.image.shape()[2]);
    let d = view.image.data_mut();
    for c in 0..3 {
        for i in 0..h / 2 {
            let (a, b) = ((c * h + i) * w, (c * h + h - 1 - i) * w);
            for j in 0..w {
                d.swap(a + j, b + j);
            }
        }
    }
    let r = view.crop.r_o as f64;
    for p in &mut view.coords {
        p.1 = r - p.1;
    }
    view.flip_v = !view.flip_v;
}

fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    let radius = (2.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let src = image.data();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; src.len()];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                tmp[(c * h + i) * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[(c * h + i) * w + clampi(j as isize + k as isize - radius, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for c in 0..3 {
        for i in 0..h {
            for j in 0..w {
                out[(c * h + i) * w + j] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[(c * h + clampi(i as isize + k as isize - radius, h)) * w + j])
                    .sum();
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("blur shape")
}

/// Random flips plus photometric jitter. Photometric changes never touch
/// coordinates or indices.
pub fn augment(mut view: View, cfg: &AugmentConfig, rng: &mut SeededRng) -> View {
    if rng.bernoulli(cfg.flip_prob) {
        flip_horizontal(&mut view);
    }
    if rng.bernoulli(cfg.flip_prob) {
        flip_vertical(&mut view);
    }
    let b = rng.uniform_range(1.0 - cfg.brightness, 1.0 + cfg.brightness);
    let c = rng.uniform_range(1.0 - cfg.contrast, 1.0 + cfg.contrast);
    if b != 1.0 || c != 1.0 {
        let mean = view.image.sum() / view.image.len() as f64;
        for p in view.image.data_mut() {
            *p = (((*p - mean) * c + mean) * b).clamp(0.0, 1.0);
        }
    }
    if rng.bernoulli(cfg.blur_prob) {
        let sigma = rng.uniform_range(cfg.blur_sigma[0], cfg.blur_sigma[1]);
        if sigma > 0.0 {
            view.image = gaussian_blur(&view.image, sigma);
        }
    }
    view
}

/// Log-uniform draw from `[lo, hi]`.
pub fn sample_mpp(range: [f64; 2], rng: &mut SeededRng) -> f64 {
    let [lo, hi] = range;
    if hi <= lo {
        return lo;
    }
    (rng.uniform_range(lo.ln(), hi.ln())).exp().clamp(lo, hi)
}

pub fn multi_crop(roi: &RoiPatch, cfg: &MultiCropConfig, rng: &mut SeededRng) -> Result<ViewSet> {
    let mut views = Vec::with_capacity(cfg.n_global + cfg.n_local);
    for k in 0..cfg.n_global + cfg.n_local {
        let (range, side) = if k < cfg.n_global {
            (cfg.global_mpp, cfg.global_side)
        } else {
            (cfg.local_mpp, cfg.local_side)
        };
        let mpp = sample_mpp(range, rng);
        let view = crop_with_provenance(roi, mpp, side, rng)?;
        views.push(augment(view, &cfg.augment, rng));
    }
    Ok(ViewSet {
        views,
        n_global: cfg.n_global,
    })
}

/// Pairs of positions for exactly the nucleus indices present in both views.
pub fn match_views(v1: &View, v2: &View) -> Result<MatchSet> {
    if v1.roi_id != v2.roi_id {
        return Err(MuseError::arg(format!(
            "cannot match views from different ROIs ({} vs {})",
            v1.roi_id, v2.roi_id
        )));
    }
    let pos2: HashMap<usize, usize> = v2.indices.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let pairs = v1
        .indices
        .iter()
        .enumerate()
        .filter_map(|(p1, i)| pos2.get(i).map(|&p2| (p1, p2)))
        .collect();
    Ok(MatchSet { pairs })
}

/// JSON sidecar written by the `views` debug command.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewDump {
    pub roi_id: String,
    pub views: Vec<ViewDumpEntry>,
    pub matches: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ViewDumpEntry {
    pub mpp: f64,
    pub r_o: usize,
    pub coords: Vec<[f64; 2]>,
    pub indices: Vec<usize>,
}

impl ViewDump {
    pub fn new(v1: &View, v2: &View) -> Result<Self> {
        let m = match_views(v1, v2)?;
        let entry = |v: &View| ViewDumpEntry {
            mpp: v.mpp,
            r_o: v.crop.r_o,
            coords: v.coords.iter().map(|&(x, y)| [x, y]).collect(),
            indices: v.indices.clone(),
        };
        Ok(Self {
            roi_id: v1.roi_id.clone(),
            views: vec![entry(v1), entry(v2)],
            matches: m.pairs.iter().map(|&(a, b)| [a, b]).collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_roi, SynthConfig};

    fn roi(seed: u64) -> RoiPatch {
        let cfg = SynthConfig {
            roi_side: 160,
            nuclei_min: 20,
            nuclei_max: 30,
            ..Default::default()
        };
        generate_roi(&cfg, "r0", &mut SeededRng::new(seed)).unwrap()
    }

    #[test]
    fn index_is_positional() {
        let r = roi(1);
        assert_eq!(build_index(&r.nuclei[..3]), vec![0, 1, 2]);
        assert!(build_index(&[]).is_empty());
        assert_eq!(build_index(&r.nuclei), build_index(&r.nuclei));
    }

    #[test]
    fn source_side_follows_mpp_ratio() {
        assert_eq!(source_side(0.25, 0.5, 224), 448);
        assert_eq!(source_side(0.25, 0.25, 64), 64);
    }

    #[test]
    fn identity_crop() {
        let r = roi(2);
        let v = crop_with_provenance(&r, 0.25, 160, &mut SeededRng::new(0)).unwrap();
        assert_eq!(v.image, r.image);
        assert_eq!(v.indices.len(), r.nuclei.len());
        for (p, n) in v.coords.iter().zip(&r.nuclei) {
            assert_eq!(*p, (n.x, n.y));
        }
    }

    #[test]
    fn infeasible_crop_errors() {
        let r = roi(3);
        let e = crop_with_provenance(&r, 1.0, 64, &mut SeededRng::new(0)).unwrap_err();
        assert!(matches!(e, MuseError::CropInfeasible { r_o: 64, .. }));
    }

    #[test]
    fn survivors_match_rectangle_membership() {
        let r = roi(4);
        let mut rng = SeededRng::new(9);
        for _ in 0..100 {
            let mpp = sample_mpp([0.25, 0.5], &mut rng);
            let v = crop_with_provenance(&r, mpp, 48, &mut rng).unwrap();
            let s = v.crop.side as f64;
            let expected: Vec<usize> = r
                .nuclei
                .iter()
                .filter(|n| n.x >= v.crop.u && n.x < v.crop.u + s && n.y >= v.crop.v && n.y < v.crop.v + s)
                .map(|n| n.index)
                .collect();
            assert_eq!(v.indices, expected);
            for (&(x, y), &i) in v.coords.iter().zip(&v.indices) {
                let (bx, by) = v.back_project(x, y);
                assert!((bx - r.nuclei[i].x).abs() < 1e-6 && (by - r.nuclei[i].y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn double_flip_restores() {
        let r = roi(5);
        let v0 = crop_with_provenance(&r, 0.3, 64, &mut SeededRng::new(1)).unwrap();
        let mut v = v0.clone();
        flip_horizontal(&mut v);
        flip_horizontal(&mut v);
        for (a, b) in v.coords.iter().zip(&v0.coords) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
        assert_eq!(v.image, v0.image);
    }

    #[test]
    fn photometric_only_keeps_coords() {
        let r = roi(6);
        let v0 = crop_with_provenance(&r, 0.4, 64, &mut SeededRng::new(1)).unwrap();
        let cfg = AugmentConfig { flip_prob: 0.0, blur_prob: 1.0, ..Default::default() };
        let v = augment(v0.clone(), &cfg, &mut SeededRng::new(2));
        assert_eq!(v.coords, v0.coords);
        assert_eq!(v.indices, v0.indices);
        assert_ne!(v.image, v0.image);
    }

    #[test]
    fn flipped_centroid_tracks_nucleus() {
        let cfg = SynthConfig {
            roi_side: 96,
            nuclei_min: 6,
            nuclei_max: 8,
            background_amplitude: 0.0,
            ..Default::default()
        };
        let r = generate_roi(&cfg, "r", &mut SeededRng::new(3)).unwrap();
        let bg = cfg.background_color;
        let mut v = crop_at(&r, 0.25, 96, 0, 0).unwrap();
        flip_horizontal(&mut v);
        flip_vertical(&mut v);
        for (&(x, y), &idx) in v.coords.iter().zip(&v.indices) {
            let (ci, cj) = (y.floor() as isize, x.floor() as isize);
            let core: Vec<f64> = (0..3).map(|c| v.image.at3(c, ci as usize, cj as usize) - bg[c]).collect();
            let core_sq: f64 = core.iter().map(|q| q * q).sum();
            let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
            for i in (ci - 8).max(0)..(ci + 9).min(96) {
                for j in (cj - 8).max(0)..(cj + 9).min(96) {
                    let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                    if (px - x).powi(2) + (py - y).powi(2) > 56.25 {
                        continue;
                    }
                    let d: f64 = (0..3).map(|c| (v.image.at3(c, i as usize, j as usize) - bg[c]) * core[c]).sum();
                    let a = (d / core_sq).clamp(0.0, 1.0);
                    m += a;
                    mx += a * px;
                    my += a * py;
                }
            }
            let err = ((mx / m - x).powi(2) + (my / m - y).powi(2)).sqrt();
            assert!(err < 0.75, "nucleus {idx} off by {err}");
        }
    }

    #[test]
    fn multi_crop_counts_and_mpp() {
        let r = roi(7);
        let cfg = MultiCropConfig { n_local: 0, ..Default::default() };
        assert_eq!(multi_crop(&r, &cfg, &mut SeededRng::new(0)).unwrap().views.len(), 2);
        let cfg = MultiCropConfig {
            global_mpp: [0.5, 0.5],
            local_mpp: [0.5, 0.5],
            ..Default::default()
        };
        let vs = multi_crop(&r, &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(vs.views.len(), 6);
        assert!(vs.views.iter().all(|v| v.mpp == 0.5));
        let again = multi_crop(&r, &cfg, &mut SeededRng::new(0)).unwrap();
        assert_eq!(vs, again);
    }

    #[test]
    fn matching_cases() {
        let r = roi(8);
        let v = crop_with_provenance(&r, 0.25, 64, &mut SeededRng::new(0)).unwrap();
        assert_eq!(match_views(&v, &v).unwrap().len(), v.indices.len());
        let a = crop_at(&r, 0.25, 48, 0, 0).unwrap();
        let b = crop_at(&r, 0.25, 48, 100, 100).unwrap();
        assert!(match_views(&a, &b).unwrap().is_empty());
        let mut other = b.clone();
        other.roi_id = "elsewhere".into();
        assert!(match_views(&a, &other).is_err());
    }
}
