use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{generate_roi, roi_name, NucleusRecord, RoiPatch, SynthConfig};
use crate::error::{MuseError, Result};
use crate::numerics::{SeededRng, Tensor};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestNucleus {
    pub index: usize,
    pub x: f64,
    pub y: f64,
    pub class: usize,
}

/// One line of `manifest.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub roi_id: String,
    pub file: String,
    pub mpp: f64,
    pub width: usize,
    pub height: usize,
    pub nuclei: Vec<ManifestNucleus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ann_x: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ann_y: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ann_side: Option<usize>,
}

impl ManifestEntry {
    pub fn records(&self) -> Vec<NucleusRecord> {
        self.nuclei
            .iter()
            .map(|n| NucleusRecord {
                index: n.index,
                x: n.x,
                y: n.y,
                class_id: n.class,
            })
            .collect()
    }

    pub fn annotation(&self) -> Option<(usize, usize, usize)> {
        Some((self.ann_x?, self.ann_y?, self.ann_side?))
    }
}

pub fn write_png(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut buf = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                buf.push((image.at3(c, i, j).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    image::save_buffer_with_format(
        path,
        &buf,
        w as u32,
        h as u32,
        image::ExtendedColorType::Rgb8,
        image::ImageFormat::Png,
    )
    .map_err(|e| MuseError::io(path, std::io::Error::other(e.to_string())))
}

pub fn read_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| MuseError::Decode {
            path: path.into(),
            msg: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (j, i, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + i as usize) * w + j as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn write_manifest(entries: &[ManifestEntry], dir: &Path) -> Result<PathBuf> {
    let path = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&path).map_err(|e| MuseError::io(&path, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(f, "{line}").map_err(|e| MuseError::io(&path, e))?;
    }
    Ok(path)
}

pub fn load_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| MuseError::io(&path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| {
            serde_json::from_str(l).map_err(|e| MuseError::Decode {
                path: path.clone(),
                msg: format!("line {}: {e}", k + 1),
            })
        })
        .collect()
}

pub fn load_roi(dir: &Path, entry: &ManifestEntry) -> Result<RoiPatch> {
    let image = read_png(&dir.join(&entry.file))?;
    if image.shape()[1] != entry.height || image.shape()[2] != entry.width {
        return Err(MuseError::Decode {
            path: dir.join(&entry.file),
            msg: format!(
                "image is {}x{}, manifest says {}x{}",
                image.shape()[2],
                image.shape()[1],
                entry.width,
                entry.height
            ),
        });
    }
    Ok(RoiPatch {
        roi_id: entry.roi_id.clone(),
        image,
        base_mpp: entry.mpp,
        nuclei: entry.records(),
    })
}

/// A loaded corpus: manifest entries and their decoded ROIs, in manifest order.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub entries: Vec<ManifestEntry>,
    pub rois: Vec<RoiPatch>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let entries = load_manifest(dir)?;
        let rois = entries
            .par_iter()
            .map(|e| load_roi(dir, e))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries, rois })
    }

    pub fn len(&self) -> usize {
        self.rois.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rois.is_empty()
    }

    pub fn find(&self, roi_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.roi_id == roi_id)
    }

    /// Split by ordinal: the first `n_first` ROIs and the rest.
    pub fn split(&self, n_first: usize) -> (Corpus, Corpus) {
        let k = n_first.min(self.len());
        (
            Corpus {
                entries: self.entries[..k].to_vec(),
                rois: self.rois[..k].to_vec(),
            },
            Corpus {
                entries: self.entries[k..].to_vec(),
                rois: self.rois[k..].to_vec(),
            },
        )
    }
}

fn generate_one(cfg: &SynthConfig, ordinal: usize, rng: &SeededRng) -> Result<(RoiPatch, Option<(usize, usize)>)> {
    let id = roi_name(ordinal);
    let stream = rng.child("roi", ordinal as u64);
    for attempt in 0.. {
        let mut r = stream.child("attempt", attempt);
        let roi = generate_roi(cfg, &id, &mut r)?;
        if roi.nuclei.len() < cfg.nuclei_min {
            continue;
        }
        let ann = cfg.ann_side.map(|s| {
            let mut a = rng.child("ann", ordinal as u64);
            let hi = (cfg.roi_side - s) as i64;
            (a.int_inclusive(0, hi) as usize, a.int_inclusive(0, hi) as usize)
        });
        return Ok((roi, ann));
    }
    unreachable!()
}

/// Write `n` ROIs as PNGs plus `manifest.jsonl` into `out_dir`.
pub fn generate_corpus(cfg: &SynthConfig, n: usize, rng: &SeededRng, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| MuseError::io(out_dir, e))?;
    let generated = (0..n)
        .into_par_iter()
        .map(|k| generate_one(cfg, k, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut entries = Vec::with_capacity(n);
    for (roi, ann) in generated {
        let file = format!("{}.png", roi.roi_id);
        write_png(&roi.image, &out_dir.join(&file))?;
        entries.push(ManifestEntry {
            roi_id: roi.roi_id.clone(),
            file,
            mpp: roi.base_mpp,
            width: roi.side(),
            height: roi.side(),
            nuclei: roi
                .nuclei
                .iter()
                .map(|r| ManifestNucleus {
                    index: r.index,
                    x: r.x,
                    y: r.y,
                    class: r.class_id,
                })
                .collect(),
            ann_x: ann.map(|a| a.0),
            ann_y: ann.map(|a| a.1),
            ann_side: ann.map(|_| cfg.ann_side.unwrap_or(0)),
        });
    }
    write_manifest(&entries, out_dir)?;
    Ok(entries)
}
