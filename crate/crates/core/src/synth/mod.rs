//! Deterministic synthetic histology-like ROI tiles with typed nuclei.

mod io;

pub use io::{
    generate_corpus, load_manifest, load_roi, read_png, write_manifest, write_png, Corpus,
    ManifestEntry, ManifestNucleus, MANIFEST_FILE,
};

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::numerics::{SeededRng, Tensor};

/// Supersampling factor per axis used for anti-aliased ellipse coverage.
const AA: usize = 4;
/// Placement retries per nucleus before giving up on the ROI.
pub const MAX_PLACEMENT_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusRecord {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiPatch {
    pub roi_id: String,
    /// `[3, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub base_mpp: f64,
    pub nuclei: Vec<NucleusRecord>,
}

impl RoiPatch {
    pub fn side(&self) -> usize {
        self.image.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassMorphology {
    /// Mean radius in ROI pixels.
    pub radius_mean: f64,
    /// Radius is uniform in `radius_mean ± radius_jitter`.
    pub radius_jitter: f64,
    pub color_mean: [f64; 3],
    /// Per-channel standard deviation of the nucleus colour.
    pub color_jitter: f64,
    /// Eccentricity range; minor axis is `r * sqrt(1 - e^2)`.
    pub eccentricity: [f64; 2],
}

impl ClassMorphology {
    fn max_semi_axis(&self) -> f64 {
        self.radius_mean + self.radius_jitter
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub roi_side: usize,
    pub base_mpp: f64,
    pub num_classes: usize,
    pub nuclei_min: usize,
    pub nuclei_max: usize,
    pub classes: Vec<ClassMorphology>,
    pub background_color: [f64; 3],
    pub background_amplitude: f64,
    /// Per-ROI background tint drawn from `[-s, s]` per channel.
    pub stain_jitter: f64,
    /// Concentration of the per-ROI class mixture; `0` draws classes uniformly.
    pub class_mix_alpha: f64,
    pub min_separation: f64,
    /// When set, every ROI carries an annotated square of this side.
    pub ann_side: Option<usize>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            roi_side: 256,
            base_mpp: 0.25,
            num_classes: 3,
            nuclei_min: 20,
            nuclei_max: 60,
            classes: vec![
                ClassMorphology {
                    radius_mean: 3.5,
                    radius_jitter: 0.5,
                    color_mean: [0.25, 0.12, 0.40],
                    color_jitter: 0.03,
                    eccentricity: [0.0, 0.4],
                },
                ClassMorphology {
                    radius_mean: 5.5,
                    radius_jitter: 0.8,
                    color_mean: [0.50, 0.30, 0.65],
                    color_jitter: 0.03,
                    eccentricity: [0.2, 0.6],
                },
                ClassMorphology {
                    radius_mean: 4.5,
                    radius_jitter: 0.6,
                    color_mean: [0.70, 0.25, 0.35],
                    color_jitter: 0.03,
                    eccentricity: [0.6, 0.85],
                },
            ],
            background_color: [0.92, 0.80, 0.87],
            background_amplitude: 0.05,
            stain_jitter: 0.12,
            class_mix_alpha: 1.0,
            min_separation: 16.0,
            ann_side: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(MuseError::config("synth.num_classes must be >= 2"));
        }
        if self.classes.len() != self.num_classes {
            return Err(MuseError::config(format!(
                "synth.classes has {} entries for {} classes",
                self.classes.len(),
                self.num_classes
            )));
        }
        if self.roi_side == 0 || !(self.base_mpp > 0.0) {
            return Err(MuseError::config("synth.roi_side and synth.base_mpp must be positive"));
        }
        if !(self.stain_jitter >= 0.0) || !(self.class_mix_alpha >= 0.0) {
            return Err(MuseError::config("synth.stain_jitter and synth.class_mix_alpha must be >= 0"));
        }
        if self.nuclei_min > self.nuclei_max {
            return Err(MuseError::config("synth nuclei range is empty"));
        }
        let mut max_axis: f64 = 0.0;
        for (k, c) in self.classes.iter().enumerate() {
            if !(c.radius_mean - c.radius_jitter > 0.0) || c.radius_jitter < 0.0 {
                return Err(MuseError::config(format!("class {k}: radii must stay positive")));
            }
            let [e0, e1] = c.eccentricity;
            if !(0.0..1.0).contains(&e0) || !(e0..1.0).contains(&e1) {
                return Err(MuseError::config(format!("class {k}: eccentricity range invalid")));
            }
            max_axis = max_axis.max(c.max_semi_axis());
        }
        for a in 0..self.num_classes {
            for b in a + 1..self.num_classes {
                let (ca, cb) = (&self.classes[a], &self.classes[b]);
                let d = ca
                    .color_mean
                    .iter()
                    .zip(&cb.color_mean)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                if d < 3.0 * (ca.color_jitter + cb.color_jitter) {
                    return Err(MuseError::config(format!(
                        "classes {a} and {b} colour means closer than 3 sigma"
                    )));
                }
            }
        }
        if self.min_separation < 2.0 * max_axis + 1.0 {
            return Err(MuseError::config(format!(
                "synth.min_separation {} must be >= {} so nuclei never touch",
                self.min_separation,
                2.0 * max_axis + 1.0
            )));
        }
        if let Some(s) = self.ann_side {
            if s == 0 || s > self.roi_side {
                return Err(MuseError::config("synth.ann_side must be in [1, roi_side]"));
            }
        }
        Ok(())
    }
}

struct Ellipse {
    x: f64,
    y: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    color: [f64; 3],
}

impl Ellipse {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.x, py - self.y);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

fn background(cfg: &SynthConfig, rng: &mut SeededRng) -> Vec<f64> {
    let side = cfg.roi_side;
    let mut base = cfg.background_color;
    for b in &mut base {
        *b += rng.uniform_range(-cfg.stain_jitter, cfg.stain_jitter);
    }
    let mut img = vec![0.0; 3 * side * side];
    for c in 0..3 {
        let waves: Vec<(f64, f64, f64, f64)> = (0..3)
            .map(|_| {
                let fx = rng.uniform_range(0.5, 3.0);
                let fy = rng.uniform_range(0.5, 3.0);
                let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
                let amp = rng.uniform_range(0.5, 1.0);
                (fx, fy, phase, amp)
            })
            .collect();
        for i in 0..side {
            for j in 0..side {
                let (x, y) = ((j as f64 + 0.5) / side as f64, (i as f64 + 0.5) / side as f64);
                let t: f64 = waves
                    .iter()
                    .map(|(fx, fy, ph, a)| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                    .sum::<f64>()
                    / 3.0;
                img[(c * side + i) * side + j] =
                    (base[c] + cfg.background_amplitude * t).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn render(img: &mut [f64], side: usize, e: &Ellipse) {
    let reach = e.a.max(e.b) + 1.0;
    let i_lo = (e.y - reach).floor().max(0.0) as usize;
    let i_hi = ((e.y + reach).ceil() as usize).min(side - 1);
    let j_lo = (e.x - reach).floor().max(0.0) as usize;
    let j_hi = ((e.x + reach).ceil() as usize).min(side - 1);
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            let mut hits = 0;
            for si in 0..AA {
                for sj in 0..AA {
                    let px = j as f64 + (sj as f64 + 0.5) / AA as f64;
                    let py = i as f64 + (si as f64 + 0.5) / AA as f64;
                    if e.contains(px, py) {
                        hits += 1;
                    }
                }
            }
            if hits == 0 {
                continue;
            }
            let alpha = hits as f64 / (AA * AA) as f64;
            for c in 0..3 {
                let p = &mut img[(c * side + i) * side + j];
                *p = (1.0 - alpha) * *p + alpha * e.color[c];
            }
        }
    }
}

/// Render one ROI. Nuclei are placed by rejection sampling with a minimum
/// centre separation and stored in placement order.
pub fn generate_roi(cfg: &SynthConfig, roi_id: &str, rng: &mut SeededRng) -> Result<RoiPatch> {
    cfg.validate()?;
    let side = cfg.roi_side;
    let mut img = background(cfg, rng);
    let count = rng.int_inclusive(cfg.nuclei_min as i64, cfg.nuclei_max as i64) as usize;
    let mix = if cfg.class_mix_alpha > 0.0 {
        rng.dirichlet(cfg.num_classes, cfg.class_mix_alpha)
    } else {
        vec![1.0; cfg.num_classes]
    };
    let margin = cfg
        .classes
        .iter()
        .map(ClassMorphology::max_semi_axis)
        .fold(0.0, f64::max)
        + 1.0;
    if 2.0 * margin >= side as f64 {
        return Err(MuseError::Generation {
            roi_id: roi_id.into(),
            msg: "ROI too small for nucleus size".into(),
        });
    }
    let mut nuclei: Vec<NucleusRecord> = Vec::with_capacity(count);
    for index in 0..count {
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            let x = rng.uniform_range(margin, side as f64 - margin);
            let y = rng.uniform_range(margin, side as f64 - margin);
            let ok = nuclei.iter().all(|n| {
                let (dx, dy) = (n.x - x, n.y - y);
                dx * dx + dy * dy >= cfg.min_separation * cfg.min_separation
            });
            if ok {
                placed = Some((x, y));
                break;
            }
        }
        let Some((x, y)) = placed else {
            return Err(MuseError::Generation {
                roi_id: roi_id.into(),
                msg: format!(
                    "could not place nucleus {index} of {count} after {MAX_PLACEMENT_RETRIES} retries"
                ),
            });
        };
        let class_id = rng.categorical(&mix);
        let morph = &cfg.classes[class_id];
        let r = rng.uniform_range(
            morph.radius_mean - morph.radius_jitter,
            morph.radius_mean + morph.radius_jitter,
        );
        let ecc = rng.uniform_range(morph.eccentricity[0], morph.eccentricity[1]);
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let mut color = [0.0; 3];
        for (c, v) in color.iter_mut().enumerate() {
            *v = (morph.color_mean[c] + morph.color_jitter * rng.normal()).clamp(0.0, 1.0);
        }
        let e = Ellipse {
            x,
            y,
            a: r,
            b: r * (1.0 - ecc * ecc).sqrt(),
            cos: theta.cos(),
            sin: theta.sin(),
            color,
        };
        render(&mut img, side, &e);
        nuclei.push(NucleusRecord { index, x, y, class_id });
    }
    Ok(RoiPatch {
        roi_id: roi_id.into(),
        image: Tensor::new(vec![3, side, side], img)?,
        base_mpp: cfg.base_mpp,
        nuclei,
    })
}

pub fn roi_name(ordinal: usize) -> String {
    format!("roi_{ordinal:05}")
}

/// Mean RGB inside a disc of radius `r` around `(x, y)`.
pub fn disc_mean_rgb(image: &Tensor, x: f64, y: f64, r: f64) -> [f64; 3] {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut acc = [0.0; 3];
    let mut n = 0.0_f64;
    let (i_lo, i_hi) = ((y - r).floor().max(0.0) as usize, ((y + r).ceil() as usize).min(h - 1));
    let (j_lo, j_hi) = ((x - r).floor().max(0.0) as usize, ((x + r).ceil() as usize).min(w - 1));
    for i in i_lo..=i_hi {
        for j in j_lo..=j_hi {
            let (dx, dy) = (j as f64 + 0.5 - x, i as f64 + 0.5 - y);
            if dx * dx + dy * dy <= r * r {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += image.at3(c, i, j);
                }
                n += 1.0;
            }
        }
    }
    acc.map(|v| v / n.max(1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            roi_side: 96,
            nuclei_min: 8,
            nuclei_max: 12,
            ..Default::default()
        }
    }

    #[test]
    fn count_range_and_bounds() {
        let cfg = SynthConfig::default();
        for s in 0..4 {
            let roi = generate_roi(&cfg, "r", &mut SeededRng::new(s)).unwrap();
            assert!((20..=60).contains(&roi.nuclei.len()));
            for (k, n) in roi.nuclei.iter().enumerate() {
                assert_eq!(n.index, k);
                assert!(n.x > 0.0 && n.x < 256.0 && n.y > 0.0 && n.y < 256.0);
                assert!(n.class_id < 3);
            }
            for a in &roi.nuclei {
                for b in &roi.nuclei {
                    if a.index != b.index {
                        assert!(((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt() >= cfg.min_separation);
                    }
                }
            }
            assert!(roi.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic() {
        let cfg = small_cfg();
        let a = generate_roi(&cfg, "r", &mut SeededRng::new(11)).unwrap();
        let b = generate_roi(&cfg, "r", &mut SeededRng::new(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rendered_centroid_matches_record() {
        // Flat background so the coverage of each nucleus can be recovered from colour alone.
        let cfg = SynthConfig { background_amplitude: 0.0, stain_jitter: 0.0, ..small_cfg() };
        let bg = cfg.background_color;
        for seed in 0..3 {
            let roi = generate_roi(&cfg, "r", &mut SeededRng::new(seed)).unwrap();
            for n in &roi.nuclei {
                let (ci, cj) = (n.y.floor() as usize, n.x.floor() as usize);
                let core: Vec<f64> = (0..3).map(|c| roi.image.at3(c, ci, cj) - bg[c]).collect();
                let core_sq: f64 = core.iter().map(|v| v * v).sum();
                let (mut m, mut mx, mut my) = (0.0, 0.0, 0.0);
                let reach = 8isize;
                for di in -reach..=reach {
                    for dj in -reach..=reach {
                        let (i, j) = (ci as isize + di, cj as isize + dj);
                        if i < 0 || j < 0 || i >= 96 || j >= 96 {
                            continue;
                        }
                        let (px, py) = (j as f64 + 0.5, i as f64 + 0.5);
                        if (px - n.x).powi(2) + (py - n.y).powi(2) > 7.5 * 7.5 {
                            continue;
                        }
                        let d: f64 = (0..3)
                            .map(|c| (roi.image.at3(c, i as usize, j as usize) - bg[c]) * core[c])
                            .sum();
                        let alpha = (d / core_sq).clamp(0.0, 1.0);
                        m += alpha;
                        mx += alpha * (j as f64 + 0.5);
                        my += alpha * (i as f64 + 0.5);
                    }
                }
                let (ox, oy) = (mx / m, my / m);
                let err = ((ox - n.x).powi(2) + (oy - n.y).powi(2)).sqrt();
                assert!(err < 0.75, "centroid off by {err} for nucleus {}", n.index);
            }
        }
    }

    #[test]
    fn classes_are_separable_by_disc_colour() {
        let cfg = small_cfg();
        let collect = |seed0: u64| {
            let mut rows = Vec::new();
            for s in 0..12 {
                let roi = generate_roi(&cfg, "r", &mut SeededRng::new(seed0 + s)).unwrap();
                for n in &roi.nuclei {
                    rows.push((disc_mean_rgb(&roi.image, n.x, n.y, 3.0), n.class_id));
                }
            }
            rows
        };
        let train = collect(100);
        let test = collect(500);
        let mut cent = [[0.0; 3]; 3];
        let mut cnt = [0.0; 3];
        for (f, c) in &train {
            for k in 0..3 {
                cent[*c][k] += f[k];
            }
            cnt[*c] += 1.0;
        }
        for (row, n) in cent.iter_mut().zip(&cnt) {
            row.iter_mut().for_each(|v| *v /= n);
        }
        let correct = test
            .iter()
            .filter(|(f, c)| {
                let pred = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..3).map(|k| (f[k] - cent[a][k]).powi(2)).sum();
                        let db: f64 = (0..3).map(|k| (f[k] - cent[b][k]).powi(2)).sum();
                        da.total_cmp(&db)
                    })
                    .unwrap();
                pred == *c
            })
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc >= 0.99, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn too_dense_is_generation_error() {
        let cfg = SynthConfig { roi_side: 48, nuclei_min: 60, nuclei_max: 60, ..Default::default() };
        let err = generate_roi(&cfg, "dense_roi", &mut SeededRng::new(0)).unwrap_err();
        match err {
            MuseError::Generation { roi_id, .. } => assert_eq!(roi_id, "dense_roi"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let c = SynthConfig { num_classes: 1, ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let c = SynthConfig { min_separation: 2.0, ..SynthConfig::default() };
        assert!(c.validate().is_err());
        let mut c = SynthConfig::default();
        c.classes[1].color_mean = c.classes[0].color_mean;
        assert!(c.validate().is_err());
    }
}
