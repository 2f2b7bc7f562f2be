//! Evaluation protocols: nucleus features at coordinates, KNN and linear
//! probe classification, backbone fine-tuning accuracy and detection F1.

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::finetune::Detection;
use crate::matching::match_points;
use crate::model::{forward_bundle, forward_graph, sample_points_graph, ModelConfig, ParamVars, Params};
use crate::numerics::{
    bilinear_sample, optimizer_step, softmax_t, AdamWConfig, AdamWState, CosineSchedule, Graph, ParamSet, SeededRng,
    Tensor,
};
use crate::sampler::{crop_at, source_side, View};
use crate::synth::{NucleusRecord, RoiPatch};

pub const DEFAULT_KS: [usize; 5] = [10, 20, 100, 200, 500];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureMatrix {
    pub rows: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// `(roi_id, nucleus index)` per row.
    pub provenance: Vec<(String, usize)>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn extend(&mut self, other: FeatureMatrix) {
        self.rows.extend(other.rows);
        self.labels.extend(other.labels);
        self.provenance.extend(other.provenance);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub acc: Option<f64>,
    pub acc_per_k: Option<IndexMap<String, f64>>,
    pub f1_per_class: Option<Vec<f64>>,
    pub f1_avg: Option<f64>,
    pub config: serde_json::Value,
    pub seed: u64,
}

impl MetricsReport {
    pub fn new(task: &str, config: serde_json::Value, seed: u64) -> Self {
        Self {
            task: task.into(),
            acc: None,
            acc_per_k: None,
            f1_per_class: None,
            f1_avg: None,
            config,
            seed,
        }
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// `f_map` features at view-pixel coordinates.
pub fn extract_nucleus_features(
    params: &Params,
    model: &ModelConfig,
    image: &Tensor,
    coords: &[(f64, f64)],
) -> Result<Vec<Vec<f64>>> {
    let b = forward_bundle(params, model, image)?;
    coords
        .iter()
        .map(|&(x, y)| Ok(bilinear_sample(&b.f_map, x, y, b.stride)?.into_data()))
        .collect()
}

/// Top-left source corner of a square of `side` source pixels centred on
/// `(x, y)` and clamped into a `roi_side` image.
pub fn centered_corner(x: f64, y: f64, side: usize, roi_side: usize) -> (usize, usize) {
    let clamp = |c: f64| {
        let hi = roi_side.saturating_sub(side) as f64;
        (c - side as f64 / 2.0).round().clamp(0.0, hi) as usize
    };
    (clamp(x), clamp(y))
}

/// One view per nucleus of `roi`, centred on it, at `mpp` and `side`
/// output pixels; returns the view and the nucleus position inside it.
pub fn nucleus_views(roi: &RoiPatch, mpp: f64, side: usize) -> Result<Vec<(View, usize, NucleusRecord)>> {
    let src = source_side(roi.base_mpp, mpp, side).max(1);
    roi.nuclei
        .iter()
        .map(|n| {
            let (u, v) = centered_corner(n.x, n.y, src, roi.side());
            let view = crop_at(roi, mpp, side, u, v)?;
            let pos = view
                .indices
                .iter()
                .position(|&i| i == n.index)
                .ok_or_else(|| MuseError::arg(format!("nucleus {} lost from its own view", n.index)))?;
            Ok((view, pos, n.clone()))
        })
        .collect()
}

/// Labelled nucleus features of every ROI at `mpp`, each nucleus seen in a
/// view of `side` pixels centred on it.
pub fn features_at_mpp(params: &Params, model: &ModelConfig, rois: &[RoiPatch], mpp: f64, side: usize) -> Result<FeatureMatrix> {
    let parts = rois
        .par_iter()
        .map(|roi| {
            let mut fm = FeatureMatrix::default();
            for (view, pos, n) in nucleus_views(roi, mpp, side)? {
                let f = extract_nucleus_features(params, model, &view.image, &[view.coords[pos]])?;
                fm.rows.extend(f);
                fm.labels.push(n.class_id);
                fm.provenance.push((roi.roi_id.clone(), n.index));
            }
            Ok(fm)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = FeatureMatrix::default();
    for p in parts {
        out.extend(p);
    }
    Ok(out)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    pub ks: Vec<usize>,
    /// Vote weight is `exp(sim / temperature)`.
    pub temperature: f64,
    /// Plain majority vote instead of similarity weighting.
    pub majority: bool,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            ks: DEFAULT_KS.to_vec(),
            temperature: 0.07,
            majority: false,
        }
    }
}

/// Predicted labels of `test` for each requested `k` (clipped to the train size).
pub fn knn_predict(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &KnnConfig) -> Result<Vec<(usize, Vec<usize>)>> {
    if train.is_empty() {
        return Err(MuseError::arg("knn needs a non-empty train set"));
    }
    if test.is_empty() {
        return Err(MuseError::arg("knn needs a non-empty test set"));
    }
    let n_classes = train.labels.iter().chain(&test.labels).max().map_or(1, |m| m + 1);
    let mut ks: Vec<usize> = Vec::new();
    for k in cfg.ks.iter().map(|&k| k.clamp(1, train.len())) {
        if !ks.contains(&k) {
            ks.push(k);
        }
    }
    let kmax = *ks.iter().max().ok_or_else(|| MuseError::arg("knn needs at least one k"))?;
    let neighbours: Vec<Vec<(usize, f64)>> = test
        .rows
        .par_iter()
        .map(|q| {
            let mut sims: Vec<(usize, f64)> = train.rows.iter().map(|r| cosine(q, r)).enumerate().collect();
            sims.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            sims.truncate(kmax);
            sims
        })
        .collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let preds = neighbours
                .iter()
                .map(|nb| {
                    let mut votes = vec![0.0; n_classes];
                    for &(i, s) in &nb[..k] {
                        votes[train.labels[i]] += if cfg.majority { 1.0 } else { (s / cfg.temperature).exp() };
                    }
                    argmax(&votes)
                })
                .collect();
            (k, preds)
        })
        .collect())
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |b, (i, &x)| if x > b.1 { (i, x) } else { b })
        .0
}

fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len().max(1) as f64
}

pub fn knn_eval(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &KnnConfig, seed: u64) -> Result<MetricsReport> {
    let per_k = knn_predict(train, test, cfg)?;
    let mut report = MetricsReport::new("knn", serde_json::to_value(cfg).expect("config"), seed);
    let mut accs = IndexMap::new();
    for (k, preds) in &per_k {
        accs.insert(k.to_string(), accuracy(preds, &test.labels));
    }
    report.acc = accs.values().cloned().reduce(f64::max);
    report.acc_per_k = Some(accs);
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub init_std: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.01,
            batch_size: 256,
            momentum: 0.9,
            init_std: 0.01,
        }
    }
}

/// Linear classifier `logits = x W + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    /// `[dim, classes]`.
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearProbe {
    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let c = self.w.cols();
        let mut out = self.b.data().to_vec();
        for (xi, row) in x.iter().zip(self.w.data().chunks(c)) {
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }
}

/// SGD-trained linear probe on frozen features with cosine-annealed learning rate.
pub fn train_probe(train: &FeatureMatrix, n_classes: usize, cfg: &ProbeConfig, seed: u64) -> Result<LinearProbe> {
    if train.is_empty() {
        return Err(MuseError::arg("linear probe needs training features"));
    }
    let dim = train.rows[0].len();
    let mut rng = SeededRng::new(seed);
    let w: Vec<f64> = (0..dim * n_classes).map(|_| cfg.init_std * rng.normal()).collect();
    let mut probe = LinearProbe {
        w: Tensor::new(vec![dim, n_classes], w)?,
        b: Tensor::zeros(&[n_classes]),
    };
    let per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let total = per_epoch * cfg.epochs;
    let mut vw = vec![0.0; dim * n_classes];
    let mut vb = vec![0.0; n_classes];
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.child("order", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let lr = 0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos());
            let mut gw = vec![0.0; dim * n_classes];
            let mut gb = vec![0.0; n_classes];
            for &i in chunk {
                let x = &train.rows[i];
                let mut p = softmax_t(&probe.logits(x), 1.0)?;
                p[train.labels[i]] -= 1.0;
                for (d, xi) in x.iter().enumerate() {
                    for (k, pk) in p.iter().enumerate() {
                        gw[d * n_classes + k] += xi * pk;
                    }
                }
                for (g, pk) in gb.iter_mut().zip(&p) {
                    *g += pk;
                }
            }
            let s = 1.0 / chunk.len() as f64;
            for ((w, v), g) in probe.w.data_mut().iter_mut().zip(vw.iter_mut()).zip(&gw) {
                *v = cfg.momentum * *v + g * s;
                *w -= lr * *v;
            }
            for ((b, v), g) in probe.b.data_mut().iter_mut().zip(vb.iter_mut()).zip(&gb) {
                *v = cfg.momentum * *v + g * s;
                *b -= lr * *v;
            }
            step += 1;
        }
    }
    Ok(probe)
}

fn n_classes_of(a: &FeatureMatrix, b: &FeatureMatrix) -> usize {
    a.labels.iter().chain(&b.labels).max().map_or(1, |m| m + 1)
}

pub fn linear_probe(train: &FeatureMatrix, test: &FeatureMatrix, cfg: &ProbeConfig, seed: u64) -> Result<(MetricsReport, LinearProbe)> {
    if test.is_empty() {
        return Err(MuseError::arg("linear probe needs test features"));
    }
    let probe = train_probe(train, n_classes_of(train, test), cfg, seed)?;
    let preds: Vec<usize> = test.rows.iter().map(|x| probe.predict(x)).collect();
    let mut report = MetricsReport::new("linear", serde_json::to_value(cfg).expect("config"), seed);
    report.acc = Some(accuracy(&preds, &test.labels));
    Ok((report, probe))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtClsConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
}

impl Default for FtClsConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-5,
            batch_size: 16,
            optimizer: AdamWConfig::default(),
        }
    }
}

/// A nucleus to classify: its view, the position inside the view, and its label.
#[derive(Clone, Debug)]
pub struct ClsItem {
    pub image: Tensor,
    pub point: (f64, f64),
    pub label: usize,
}

pub fn cls_items(rois: &[RoiPatch], mpp: f64, side: usize) -> Result<Vec<ClsItem>> {
    let mut out = Vec::new();
    for roi in rois {
        for (view, pos, n) in nucleus_views(roi, mpp, side)? {
            out.push(ClsItem {
                point: view.coords[pos],
                image: view.image,
                label: n.class_id,
            });
        }
    }
    Ok(out)
}

const PROBE_W: &str = "cls_probe.w";
const PROBE_B: &str = "cls_probe.b";

fn item_loss(params: &ParamSet, model: &ModelConfig, item: &ClsItem, scale: f64) -> Result<ParamSet> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, true);
    let b = forward_graph(&mut g, &pv, model, &item.image)?;
    let f = sample_points_graph(&mut g, &b, &[item.point])?;
    let z = g.matmul(f, pv.get(PROBE_W)?)?;
    let z = g.add_row(z, pv.get(PROBE_B)?)?;
    let k = g.value(z).cols();
    let mut t = vec![0.0; k];
    t[item.label] = 1.0;
    let l = g.soft_cross_entropy(z, Tensor::new(vec![1, k], t)?, 1.0, vec![scale])?;
    Ok(pv.gradients(&g.backward(l)?, params))
}

fn item_predict(params: &ParamSet, model: &ModelConfig, probe: &LinearProbe, item: &ClsItem) -> Result<usize> {
    let f = extract_nucleus_features(params, model, &item.image, &[item.point])?;
    Ok(probe.predict(&f[0]))
}

/// Unfreeze the backbone and train it together with a probe-initialised
/// linear classifier; returns test ACC.
pub fn finetune_cls_eval(
    params: &Params,
    model: &ModelConfig,
    probe: &LinearProbe,
    train: &[ClsItem],
    test: &[ClsItem],
    cfg: &FtClsConfig,
    seed: u64,
) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(MuseError::arg("fine-tune evaluation needs test items"));
    }
    let mut p = params.clone();
    p.insert(PROBE_W, probe.w.clone())?;
    p.insert(PROBE_B, probe.b.clone())?;
    let mut opt = AdamWState::new(&p);
    let per_epoch = train.len().div_ceil(cfg.batch_size.max(1));
    let sched = CosineSchedule {
        base: cfg.lr,
        final_value: 0.0,
        warmup_steps: 0,
        total_steps: per_epoch * cfg.epochs,
    };
    let rng = SeededRng::new(seed);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        rng.child("order", epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let scale = 1.0 / chunk.len() as f64;
            let grads = chunk
                .par_iter()
                .map(|&i| item_loss(&p, model, &train[i], scale))
                .collect::<Result<Vec<_>>>()?;
            let mut total = p.zeros_like();
            for gr in &grads {
                total.add_scaled(gr, 1.0)?;
            }
            optimizer_step(&mut p, &total, &mut opt, &cfg.optimizer, sched.at(step), step)?;
            step += 1;
        }
    }
    let tuned = LinearProbe {
        w: p.get(PROBE_W)?.clone(),
        b: p.get(PROBE_B)?.clone(),
    };
    let preds = test
        .par_iter()
        .map(|it| item_predict(&p, model, &tuned, it))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = test.iter().map(|t| t.label).collect();
    let mut report = MetricsReport::new("ft", serde_json::to_value(cfg).expect("config"), seed);
    report.acc = Some(accuracy(&preds, &truth));
    Ok(report)
}

/// Settings shared by every evaluation task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Resolution of the per-nucleus views used for classification.
    pub mpp: f64,
    /// Side of those views in pixels.
    pub view_side: usize,
    /// Leading share of the corpus (by ordinal) used for training.
    pub train_fraction: f64,
    /// Detection match radius in pixels at MPP 0.25.
    pub det_radius: f64,
    pub knn: KnnConfig,
    pub linear: ProbeConfig,
    pub ft: FtClsConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mpp: 0.25,
            view_side: 32,
            train_fraction: 0.8,
            det_radius: 6.0,
            knn: KnnConfig::default(),
            linear: ProbeConfig::default(),
            ft: FtClsConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mpp > 0.0) || self.view_side == 0 {
            return Err(MuseError::config("eval.mpp and eval.view_side must be positive"));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(MuseError::config("eval.train_fraction must lie in (0, 1)"));
        }
        if !(self.det_radius > 0.0) {
            return Err(MuseError::config("eval.det_radius must be > 0"));
        }
        Ok(())
    }

    /// Number of leading ROIs that form the training split of `n`.
    pub fn train_count(&self, n: usize) -> usize {
        let k = (n as f64 * self.train_fraction).round() as usize;
        k.clamp(1, n.max(2) - 1).min(n)
    }

    pub fn radius_at(&self, mpp: f64) -> f64 {
        self.det_radius * 0.25 / mpp
    }
}

/// Detections of one tile, as stored in a predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TilePredictions {
    pub roi_id: String,
    pub detections: Vec<Detection>,
}

/// `2TP / (2TP + FP + FN)`; 1 when both sides are empty.
pub fn f1_score(tp: usize, n_pred: usize, n_gt: usize) -> f64 {
    let denom = n_pred + n_gt;
    if denom == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / denom as f64
}

/// Per-class F1 under one-to-one matching within `radius`, plus the class mean.
pub fn detection_f1_scores(pred: &[Detection], gt: &[NucleusRecord], radius: f64, n_classes: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..n_classes)
        .map(|c| {
            let p: Vec<(f64, f64)> = pred.iter().filter(|d| d.class_id == c + 1).map(|d| (d.x, d.y)).collect();
            let g: Vec<(f64, f64)> = gt.iter().filter(|n| n.class_id == c).map(|n| (n.x, n.y)).collect();
            f1_score(match_points(&p, &g, radius).len(), p.len(), g.len())
        })
        .collect();
    let avg = per.iter().sum::<f64>() / n_classes.max(1) as f64;
    (per, avg)
}

/// Detection F1 pooled over several tiles: true positives, predictions and
/// ground truth are summed per class before the ratio is taken.
pub fn detection_f1_pooled(tiles: &[(Vec<Detection>, Vec<NucleusRecord>)], radius: f64, n_classes: usize) -> (Vec<f64>, f64) {
    let mut counts = vec![(0usize, 0usize, 0usize); n_classes];
    for (pred, gt) in tiles {
        for (c, cnt) in counts.iter_mut().enumerate() {
            let p: Vec<(f64, f64)> = pred.iter().filter(|d| d.class_id == c + 1).map(|d| (d.x, d.y)).collect();
            let g: Vec<(f64, f64)> = gt.iter().filter(|n| n.class_id == c).map(|n| (n.x, n.y)).collect();
            cnt.0 += match_points(&p, &g, radius).len();
            cnt.1 += p.len();
            cnt.2 += g.len();
        }
    }
    let per: Vec<f64> = counts.iter().map(|&(tp, np, ng)| f1_score(tp, np, ng)).collect();
    let avg = per.iter().sum::<f64>() / n_classes.max(1) as f64;
    (per, avg)
}

/// Detection classes are `1..=n_classes` (0 is background); ground truth uses `0..n_classes`.
pub fn detection_f1(pred: &[Detection], gt: &[NucleusRecord], radius: f64, n_classes: usize, seed: u64) -> Result<MetricsReport> {
    if !(radius > 0.0) {
        return Err(MuseError::arg(format!("detection radius must be > 0, got {radius}")));
    }
    let (per, avg) = detection_f1_scores(pred, gt, radius, n_classes);
    let mut report = MetricsReport::new("det", serde_json::json!({ "radius": radius, "num_classes": n_classes }), seed);
    report.f1_per_class = Some(per);
    report.f1_avg = Some(avg);
    Ok(report)
}
