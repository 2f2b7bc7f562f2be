use std::fs;
use std::path::{Path, PathBuf};

use muse_core::checkpoint;
use muse_core::distill::pretrain;
use muse_core::evalsuite::{
    cls_items, detection_f1_pooled, features_at_mpp, finetune_cls_eval, knn_eval, linear_probe, MetricsReport,
    TilePredictions,
};
use muse_core::finetune::{detect, finetune, AnnotatedSample, Detection};
use muse_core::gradsuite::run_suite;
use muse_core::sampler::{match_views, multi_crop};
use muse_core::synth::{generate_corpus, generate_roi, roi_name, write_png, Corpus};
use muse_core::{NucleusRecord, Params, RoiPatch, SeededRng};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Task {
    Knn,
    Linear,
    Ft,
    Det,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Knn => "knn",
            Task::Linear => "linear",
            Task::Ft => "ft",
            Task::Det => "det",
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serializes");
    write_text(path, &(text + "\n"))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn load_corpus(data: &Path) -> Result<Corpus, CliError> {
    if !data.is_dir() {
        return Err(CliError::io(data, "data directory not found"));
    }
    Ok(Corpus::load(data)?)
}

fn load_params(cfg: &RunConfig, ckpt: &Path) -> Result<Params, CliError> {
    if !ckpt.is_file() {
        return Err(CliError::io(ckpt, "checkpoint not found"));
    }
    Ok(checkpoint::load_for(ckpt, &cfg.model)?.params)
}

/// Writes the resolved configuration next to a command's outputs.
fn echo_config(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    write_text(&out.join("run_config.toml"), &cfg.to_toml())
}

pub fn gen(cfg: &RunConfig, n: usize, out: &Path) -> Result<(), CliError> {
    let entries = generate_corpus(&cfg.synth, n, &SeededRng::new(cfg.seed), out)?;
    let nuclei: usize = entries.iter().map(|e| e.nuclei.len()).sum();
    println!("wrote {} ROIs ({} nuclei) to {}", entries.len(), nuclei, out.display());
    Ok(())
}

pub fn pretrain_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<(), CliError> {
    let corpus = load_corpus(data)?;
    echo_config(cfg, out)?;
    let run = pretrain(&corpus.rois, &cfg.model, &cfg.sampler, &cfg.distill, cfg.seed, None, Some(out))?;
    if let Some(last) = run.reports.last() {
        println!(
            "pretrained {} steps: l_image {:.4} l_nu {:.4}; checkpoint {}",
            last.metrics.step,
            last.metrics.l_image,
            last.metrics.l_nu,
            out.join("checkpoint.bin").display()
        );
    } else {
        println!("0 steps; checkpoint holds the initialisation");
    }
    Ok(())
}

fn annotated_samples(corpus: &Corpus) -> Result<Vec<AnnotatedSample>, CliError> {
    corpus
        .entries
        .iter()
        .enumerate()
        .filter(|(_, e)| e.annotation().is_some())
        .map(|(i, e)| AnnotatedSample::from_entry(i, e).map_err(CliError::from))
        .collect()
}

pub fn finetune_cmd(cfg: &RunConfig, ckpt: &Path, data: &Path, out: &Path) -> Result<(), CliError> {
    let params = load_params(cfg, ckpt)?;
    let corpus = load_corpus(data)?;
    let samples = annotated_samples(&corpus)?;
    if samples.is_empty() && cfg.finetune.epochs > 0 {
        return Err(CliError::Config(format!(
            "{} has no annotated ROIs; generate it with synth.ann_side set",
            data.display()
        )));
    }
    echo_config(cfg, out)?;
    let run = finetune(params, &cfg.model, &samples, &corpus.rois, &cfg.finetune, cfg.seed, Some(out))?;
    if run.epochs.is_empty() {
        checkpoint::save(&out.join("checkpoint.bin"), &run.params, &cfg.model, 0)?;
    }
    match run.epochs.last() {
        Some(m) => println!("fine-tuned {} epochs: l_ft {:.4}", m.epoch, m.l_ft),
        None => println!("0 epochs; checkpoint copied"),
    }
    Ok(())
}

/// Ground truth of a tile: the annotated square when present, else every nucleus.
fn tile_truth(corpus: &Corpus, i: usize) -> Result<Vec<NucleusRecord>, CliError> {
    let e = &corpus.entries[i];
    Ok(match e.annotation() {
        Some(_) => AnnotatedSample::from_entry(i, e)?.nuclei,
        None => e.records(),
    })
}

fn read_predictions(path: &Path) -> Result<Vec<TilePredictions>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(k, l)| serde_json::from_str(l).map_err(|e| CliError::io(path, format!("line {}: {e}", k + 1))))
        .collect()
}

fn is_predictions_file(p: &Path) -> bool {
    matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "jsonl"))
}

fn eval_det(cfg: &RunConfig, ckpt: &Path, corpus: &Corpus) -> Result<MetricsReport, CliError> {
    let n_classes = cfg.synth.num_classes;
    let preds: Vec<Vec<Detection>> = if is_predictions_file(ckpt) {
        let tiles = read_predictions(ckpt)?;
        corpus
            .entries
            .iter()
            .map(|e| {
                tiles
                    .iter()
                    .filter(|t| t.roi_id == e.roi_id)
                    .flat_map(|t| t.detections.iter().cloned())
                    .collect()
            })
            .collect()
    } else {
        let params = load_params(cfg, ckpt)?;
        let samples = annotated_samples(corpus)?;
        if samples.len() != corpus.len() {
            return Err(CliError::Config("detection evaluation needs an annotated square on every ROI".into()));
        }
        samples
            .iter()
            .map(|s| detect(&params, &cfg.model, &cfg.finetune, s, &corpus.rois[s.roi]).map_err(CliError::from))
            .collect::<Result<_, _>>()?
    };
    let mpp = corpus.rois.first().map_or(0.25, |r| r.base_mpp);
    let radius = cfg.eval.radius_at(mpp);
    let tiles = preds
        .into_iter()
        .enumerate()
        .map(|(i, p)| Ok((p, tile_truth(corpus, i)?)))
        .collect::<Result<Vec<_>, CliError>>()?;
    let (per, avg) = detection_f1_pooled(&tiles, radius, n_classes);
    let mut report = MetricsReport::new(
        "det",
        serde_json::json!({ "radius": radius, "num_classes": n_classes, "tiles": tiles.len() }),
        cfg.seed,
    );
    report.f1_per_class = Some(per);
    report.f1_avg = Some(avg);
    Ok(report)
}

fn split(cfg: &RunConfig, corpus: &Corpus) -> Result<(Vec<RoiPatch>, Vec<RoiPatch>), CliError> {
    let k = cfg.eval.train_count(corpus.len());
    if corpus.len() < 2 {
        return Err(CliError::Config(format!("evaluation needs at least 2 ROIs, got {}", corpus.len())));
    }
    Ok((corpus.rois[..k].to_vec(), corpus.rois[k..].to_vec()))
}

pub fn eval_cmd(cfg: &RunConfig, ckpt: &Path, data: &Path, task: Task, out: &Path) -> Result<PathBuf, CliError> {
    let corpus = load_corpus(data)?;
    let e = &cfg.eval;
    let report = match task {
        Task::Det => eval_det(cfg, ckpt, &corpus)?,
        Task::Knn | Task::Linear | Task::Ft => {
            let params = load_params(cfg, ckpt)?;
            let (train_r, test_r) = split(cfg, &corpus)?;
            let train = features_at_mpp(&params, &cfg.model, &train_r, e.mpp, e.view_side)?;
            let test = features_at_mpp(&params, &cfg.model, &test_r, e.mpp, e.view_side)?;
            match task {
                Task::Knn => knn_eval(&train, &test, &e.knn, cfg.seed)?,
                Task::Linear => linear_probe(&train, &test, &e.linear, cfg.seed)?.0,
                _ => {
                    let (_, probe) = linear_probe(&train, &test, &e.linear, cfg.seed)?;
                    let tr = cls_items(&train_r, e.mpp, e.view_side)?;
                    let te = cls_items(&test_r, e.mpp, e.view_side)?;
                    finetune_cls_eval(&params, &cfg.model, &probe, &tr, &te, &e.ft, cfg.seed)?
                }
            }
        }
    };
    let path = if is_predictions_file(out) { out.to_path_buf() } else { out.join(format!("metrics_{}.json", task.name())) };
    write_json(&path, &report)?;
    match (report.acc, report.f1_avg) {
        (Some(acc), _) => println!("{} acc {:.4}", task.name(), acc),
        (_, Some(f1)) => println!("{} f1_avg {:.4}", task.name(), f1),
        _ => {}
    }
    Ok(path)
}

pub fn gradcheck_cmd(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let report = run_suite(&cfg.gradcheck)?;
    for e in &report.entries {
        println!(
            "{:<32} max rel err {:.3e} {}",
            e.name,
            e.report.max_rel_error,
            if e.report.pass { "ok" } else { "FAIL" }
        );
    }
    println!("max rel err {:.3e} (tolerance {:.0e})", report.max_rel_error, report.tolerance);
    write_json(&out.join("gradcheck.json"), &report)?;
    if report.pass {
        Ok(())
    } else {
        let worst = report.worst().map_or("?", |w| w.name.as_str());
        Err(CliError::Threshold(format!(
            "gradient check failed: max relative error {:.3e} > {:.0e} ({worst})",
            report.max_rel_error, report.tolerance
        )))
    }
}

#[derive(Serialize)]
struct ViewDump {
    mpp: f64,
    r_o: usize,
    coords: Vec<[f64; 2]>,
    indices: Vec<usize>,
}

#[derive(Serialize)]
struct ViewsSidecar {
    roi_id: String,
    views: Vec<ViewDump>,
    matches: Vec<[usize; 2]>,
}

/// `roi_00003`, `r3` or `3`.
fn roi_ordinal(id: &str) -> Option<usize> {
    id.strip_prefix("roi_")
        .or_else(|| id.strip_prefix('r'))
        .unwrap_or(id)
        .parse()
        .ok()
}

fn pick_roi(cfg: &RunConfig, id: &str, data: Option<&Path>) -> Result<RoiPatch, CliError> {
    match data {
        Some(d) => {
            let corpus = load_corpus(d)?;
            let idx = corpus
                .find(id)
                .or_else(|| roi_ordinal(id).filter(|&k| k < corpus.len()))
                .ok_or_else(|| CliError::Config(format!("ROI {id} not found in {}", d.display())))?;
            Ok(corpus.rois[idx].clone())
        }
        None => {
            let k = roi_ordinal(id).ok_or_else(|| CliError::Config(format!("cannot parse ROI {id}")))?;
            let rng = SeededRng::new(cfg.seed).child("roi", k as u64);
            Ok(generate_roi(&cfg.synth, &roi_name(k), &mut rng.child("attempt", 0))?)
        }
    }
}

pub fn views_cmd(cfg: &RunConfig, roi: &str, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let patch = pick_roi(cfg, roi, data)?;
    let set = multi_crop(&patch, &cfg.sampler, &mut SeededRng::new(cfg.seed).child("views", 0))?;
    let pair = &set.views[..2];
    let matches = match_views(&pair[0], &pair[1])?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    for (k, v) in pair.iter().enumerate() {
        write_png(&v.image, &out.join(format!("view_{k}.png")))?;
    }
    let sidecar = ViewsSidecar {
        roi_id: patch.roi_id.clone(),
        views: pair
            .iter()
            .map(|v| ViewDump {
                mpp: v.mpp,
                r_o: v.image.shape()[1],
                coords: v.coords.iter().map(|&(x, y)| [x, y]).collect(),
                indices: v.indices.clone(),
            })
            .collect(),
        matches: matches.pairs.iter().map(|&(i, j)| [i, j]).collect(),
    };
    write_json(&out.join("views.json"), &sidecar)?;
    println!("{}: views at mpp {:.3} / {:.3}, |K_cap| = {}", patch.roi_id, pair[0].mpp, pair[1].mpp, matches.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roi_specs() {
        assert_eq!(roi_ordinal("r0"), Some(0));
        assert_eq!(roi_ordinal("roi_00012"), Some(12));
        assert_eq!(roi_ordinal("7"), Some(7));
        assert_eq!(roi_ordinal("x"), None);
    }
}
