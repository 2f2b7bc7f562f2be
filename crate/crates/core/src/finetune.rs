//! Large field-of-view semi-supervised fine-tuning for nucleus detection
//! and classification.
//!
//! Annotated squares are expanded into larger crops; proposals whose decoded
//! point falls inside the annotated region Ω are supervised (offset
//! regression on matched proposals, type classification on all of them),
//! proposals outside Ω receive a confidence-filtered pseudo-label loss.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{MuseError, Result};
use crate::matching::match_points;
use crate::model::{anchor, forward_graph, init_params, point_heads_graph, ModelConfig, ParamVars, Params};
use crate::numerics::autograd::SparseRows;
use crate::numerics::{optimizer_step, softmax_t, AdamWConfig, AdamWState, CosineSchedule, Graph, SeededRng, Tensor};
use crate::synth::ManifestEntry;
use crate::synth::{NucleusRecord, RoiPatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtConfig {
    pub lambda_reg: f64,
    pub lambda_type: f64,
    pub lambda_cons_max: f64,
    /// Pseudo-label confidence threshold.
    pub theta: f64,
    /// Training assignment radius in pixels at MPP 0.25.
    pub match_radius: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    /// Expanded side as a multiple of the annotated side (`r_a' = expand * r_a`).
    pub expand: usize,
    /// Disable the consistency term outside Ω.
    pub use_cons: bool,
    /// Minimum foreground score kept by decoding.
    pub score_floor: f64,
    /// Greedy suppression radius used by decoding, pixels.
    pub suppression_radius: f64,
    /// Weight of unmatched (background) Ω proposals in `L_type`; 1 is uniform.
    pub bg_weight: f64,
}

impl Default for FtConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 5e-3,
            lambda_type: 1.0,
            lambda_cons_max: 0.1,
            theta: 0.9,
            match_radius: 6.0,
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            final_lr: 1e-5,
            warmup_steps: 0,
            optimizer: AdamWConfig::default(),
            expand: 2,
            use_cons: true,
            score_floor: 0.0,
            suppression_radius: 8.0,
            bg_weight: 0.01,
        }
    }
}

impl FtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(MuseError::config(format!("finetune.theta must lie in (0, 1), got {}", self.theta)));
        }
        if !(self.bg_weight > 0.0) {
            return Err(MuseError::config(format!("finetune.bg_weight must be > 0, got {}", self.bg_weight)));
        }
        if self.lambda_reg < 0.0 || self.lambda_type < 0.0 || self.lambda_cons_max < 0.0 {
            return Err(MuseError::config("finetune lambdas must be >= 0"));
        }
        if self.expand == 0 || self.batch_size == 0 || !(self.match_radius > 0.0) {
            return Err(MuseError::config("finetune.expand, batch_size and match_radius must be positive"));
        }
        Ok(())
    }

    /// Assignment radius at `mpp`.
    pub fn radius_at(&self, mpp: f64) -> f64 {
        self.match_radius * 0.25 / mpp
    }
}

/// `lambda_max / 2 * (1 - cos(pi * i / n))`: 0 at `i = 0`, `lambda_max` at `i = n`.
pub fn lambda_cons_schedule(i: usize, n: usize, lambda_max: f64) -> Result<f64> {
    if i > n {
        return Err(MuseError::arg(format!("epoch {i} outside [0, {n}]")));
    }
    if n == 0 {
        return Ok(0.0);
    }
    Ok(0.5 * lambda_max * (1.0 - (PI * i as f64 / n as f64).cos()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedSample {
    /// Index of the source ROI in the corpus.
    pub roi: usize,
    pub x_a: usize,
    pub y_a: usize,
    pub r_a: usize,
    /// Source-pixel annotations inside the square.
    pub nuclei: Vec<NucleusRecord>,
}

impl AnnotatedSample {
    pub fn from_entry(roi: usize, entry: &ManifestEntry) -> Result<Self> {
        let (x_a, y_a, r_a) = entry
            .annotation()
            .ok_or_else(|| MuseError::arg(format!("{} has no annotated square", entry.roi_id)))?;
        if x_a + r_a > entry.width || y_a + r_a > entry.height {
            return Err(MuseError::arg(format!("annotated square of {} leaves the image", entry.roi_id)));
        }
        let inside = |n: &NucleusRecord| {
            n.x >= x_a as f64 && n.x < (x_a + r_a) as f64 && n.y >= y_a as f64 && n.y < (y_a + r_a) as f64
        };
        Ok(Self {
            roi,
            x_a,
            y_a,
            r_a,
            nuclei: entry.records().into_iter().filter(inside).collect(),
        })
    }
}

/// Expanded crop with the annotated region Ω in crop coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct LfovSample {
    pub x: usize,
    pub y: usize,
    pub side: usize,
    pub image: Tensor,
    /// `(x0, y0, side)` of Ω.
    pub omega: (usize, usize, usize),
    /// Annotations in crop coordinates (all inside Ω).
    pub nuclei: Vec<NucleusRecord>,
    pub mpp: f64,
}

impl LfovSample {
    pub fn in_omega(&self, x: f64, y: f64) -> bool {
        let (x0, y0, s) = self.omega;
        x >= x0 as f64 && x < (x0 + s) as f64 && y >= y0 as f64 && y < (y0 + s) as f64
    }
}

fn offset_range(a: usize, r_a: usize, r_e: usize, extent: usize) -> Result<(usize, usize)> {
    let lo = (a + r_e).saturating_sub(extent);
    let hi = (r_e - r_a).min(a);
    if lo > hi {
        return Err(MuseError::arg(format!(
            "expanded side {r_e} cannot hold the annotated square inside extent {extent}"
        )));
    }
    Ok((lo, hi))
}

fn crop_square(roi: &RoiPatch, x: usize, y: usize, side: usize) -> Tensor {
    let (h, w) = (roi.image.shape()[1], roi.image.shape()[2]);
    let mut out = Vec::with_capacity(3 * side * side);
    for c in 0..3 {
        for i in 0..side {
            let base = (c * h + y + i) * w + x;
            out.extend_from_slice(&roi.image.data()[base..base + side]);
        }
    }
    Tensor::new(vec![3, side, side], out).expect("crop shape")
}

fn build_lfov(sample: &AnnotatedSample, roi: &RoiPatch, r_e: usize, dx: usize, dy: usize) -> LfovSample {
    let (x, y) = (sample.x_a - dx, sample.y_a - dy);
    let nuclei = sample
        .nuclei
        .iter()
        .map(|n| NucleusRecord {
            x: n.x - x as f64,
            y: n.y - y as f64,
            ..n.clone()
        })
        .collect();
    LfovSample {
        x,
        y,
        side: r_e,
        image: crop_square(roi, x, y, r_e),
        omega: (dx, dy, sample.r_a),
        nuclei,
        mpp: roi.base_mpp,
    }
}

/// Random expansion: offsets uniform in `[0, r_e - r_a]`, clamped so the
/// expanded square stays inside the source image.
pub fn expand_lfov(sample: &AnnotatedSample, roi: &RoiPatch, r_e: usize, rng: &mut SeededRng) -> Result<LfovSample> {
    if r_e < sample.r_a {
        return Err(MuseError::arg(format!("expanded side {r_e} < annotated side {}", sample.r_a)));
    }
    let side = roi.side();
    let (xl, xh) = offset_range(sample.x_a, sample.r_a, r_e, side)?;
    let (yl, yh) = offset_range(sample.y_a, sample.r_a, r_e, side)?;
    let dx = rng.int_inclusive(xl as i64, xh as i64) as usize;
    let dy = rng.int_inclusive(yl as i64, yh as i64) as usize;
    Ok(build_lfov(sample, roi, r_e, dx, dy))
}

/// Deterministic expansion with Ω as close to the centre as the image allows.
pub fn expand_centered(sample: &AnnotatedSample, roi: &RoiPatch, r_e: usize) -> Result<LfovSample> {
    if r_e < sample.r_a {
        return Err(MuseError::arg(format!("expanded side {r_e} < annotated side {}", sample.r_a)));
    }
    let side = roi.side();
    let mid = (r_e - sample.r_a) / 2;
    let (xl, xh) = offset_range(sample.x_a, sample.r_a, r_e, side)?;
    let (yl, yh) = offset_range(sample.y_a, sample.r_a, r_e, side)?;
    Ok(build_lfov(sample, roi, r_e, mid.clamp(xl, xh), mid.clamp(yl, yh)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    pub class_id: usize,
    pub score: f64,
}

pub type DetectionSet = Vec<Detection>;

/// Greedy score-descending suppression (ties keep the earlier entry).
pub fn suppress(cands: Vec<Detection>, radius: f64) -> DetectionSet {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| cands[b].score.total_cmp(&cands[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let c = &cands[i];
        if kept.iter().all(|k| (k.x - c.x).hypot(k.y - c.y) > radius) {
            kept.push(c.clone());
        }
    }
    kept
}

/// Decode per-cell proposals. `offsets` is `[n, 2]` and `logits` `[n, K+1]`
/// (row-major over an `fside x fside` map).
pub fn decode_predictions(
    offsets: &Tensor,
    logits: &Tensor,
    fside: usize,
    stride: f64,
    score_floor: f64,
    suppression_radius: f64,
) -> Result<DetectionSet> {
    let n = fside * fside;
    if offsets.rows() != n || offsets.cols() != 2 || logits.rows() != n {
        return Err(MuseError::arg("decode_predictions: head outputs misaligned"));
    }
    let mut cands = Vec::new();
    for k in 0..n {
        let p = softmax_t(logits.row(k), 1.0)?;
        let (cls, _) = argmax(&p);
        if cls == 0 {
            continue;
        }
        let score = p[1..].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if score < score_floor {
            continue;
        }
        let (ax, ay) = anchor(k, fside, stride);
        let o = offsets.row(k);
        cands.push(Detection { x: ax + o[0], y: ay + o[1], class_id: cls, score });
    }
    Ok(suppress(cands, suppression_radius))
}

fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
}

/// `(l_reg, l_type, l_cons, l_ft)` of one sample plus counts.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FtLosses {
    pub l_reg: f64,
    pub l_type: f64,
    pub l_cons: f64,
    pub l_ft: f64,
    pub n_omega: usize,
    pub n_matched: usize,
    pub n_cons: usize,
}

fn rows_map(in_rows: usize, rows: &[usize]) -> Arc<SparseRows> {
    let mut m = SparseRows::new(in_rows);
    for &r in rows {
        m.push_row([(r, 1.0)]);
    }
    Arc::new(m)
}

fn one_hot(classes: &[usize], k: usize) -> Tensor {
    let mut t = vec![0.0; classes.len() * k];
    for (i, &c) in classes.iter().enumerate() {
        t[i * k + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), k], t).expect("one-hot shape")
}

/// Head outputs of one forward pass, channels-last.
pub struct HeadOutputs {
    pub offsets: Tensor,
    pub logits: Tensor,
    pub fside: usize,
    pub stride: f64,
}

/// Builds `L_ft` on `g` from the head vars of one sample.
#[allow(clippy::too_many_arguments)]
fn ft_graph(
    g: &mut Graph,
    reg: crate::numerics::Var,
    ty: crate::numerics::Var,
    fside: usize,
    stride: f64,
    sample: &LfovSample,
    cfg: &FtConfig,
    lambda_cons: f64,
) -> Result<(FtLosses, Option<crate::numerics::Var>)> {
    let n = fside * fside;
    let offsets = g.value(reg).clone();
    let logits = g.value(ty).clone();
    let k1 = logits.cols();
    let decoded: Vec<(f64, f64)> = (0..n)
        .map(|c| {
            let (ax, ay) = anchor(c, fside, stride);
            (ax + offsets.row(c)[0], ay + offsets.row(c)[1])
        })
        .collect();
    let (omega, outside): (Vec<usize>, Vec<usize>) = (0..n).partition(|&c| sample.in_omega(decoded[c].0, decoded[c].1));
    let gt: Vec<(f64, f64)> = sample.nuclei.iter().map(|r| (r.x, r.y)).collect();
    let props: Vec<(f64, f64)> = omega.iter().map(|&c| decoded[c]).collect();
    let matched = match_points(&props, &gt, cfg.radius_at(sample.mpp));

    let mut terms = Vec::new();
    let mut losses = FtLosses {
        l_reg: 0.0,
        l_type: 0.0,
        l_cons: 0.0,
        l_ft: 0.0,
        n_omega: omega.len(),
        n_matched: matched.len(),
        n_cons: 0,
    };
    if !matched.is_empty() {
        let rows: Vec<usize> = matched.iter().map(|&(p, _)| omega[p]).collect();
        let mut target = Vec::with_capacity(2 * rows.len());
        for (&(_, gi), &c) in matched.iter().zip(&rows) {
            let (ax, ay) = anchor(c, fside, stride);
            target.extend([gt[gi].0 - ax, gt[gi].1 - ay]);
        }
        let sel = g.gather(reg, rows_map(n, &rows))?;
        let w = vec![1.0 / rows.len() as f64; rows.len()];
        let l = g.squared_error(sel, Tensor::new(vec![rows.len(), 2], target)?, w)?;
        losses.l_reg = g.scalar(l);
        terms.push(g.scale(l, cfg.lambda_reg));
    }
    if !omega.is_empty() {
        let mut classes = vec![0usize; omega.len()];
        for &(p, gi) in &matched {
            classes[p] = sample.nuclei[gi].class_id + 1;
        }
        if let Some(&bad) = classes.iter().find(|&&c| c >= k1) {
            return Err(MuseError::arg(format!("class {} exceeds the type head ({k1} outputs)", bad - 1)));
        }
        let sel = g.gather(ty, rows_map(n, &omega))?;
        let mut w: Vec<f64> = classes.iter().map(|&c| if c == 0 { cfg.bg_weight } else { 1.0 }).collect();
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let l = g.soft_cross_entropy(sel, one_hot(&classes, k1), 1.0, w)?;
        losses.l_type = g.scalar(l);
        terms.push(g.scale(l, cfg.lambda_type));
    }
    if cfg.use_cons {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for &c in &outside {
            let p = softmax_t(logits.row(c), 1.0)?;
            let (cls, conf) = argmax(&p);
            if conf >= cfg.theta {
                rows.push(c);
                labels.push(cls);
            }
        }
        losses.n_cons = rows.len();
        if !rows.is_empty() {
            let sel = g.gather(ty, rows_map(n, &rows))?;
            let w = vec![1.0 / rows.len() as f64; rows.len()];
            let l = g.soft_cross_entropy(sel, one_hot(&labels, k1), 1.0, w)?;
            losses.l_cons = g.scalar(l);
            terms.push(g.scale(l, lambda_cons));
        }
    }
    losses.l_ft = cfg.lambda_reg * losses.l_reg + cfg.lambda_type * losses.l_type + lambda_cons * losses.l_cons;
    let total = if terms.is_empty() { None } else { Some(g.add_scalars(&terms)?) };
    Ok((losses, total))
}

/// Loss terms and parameter gradients for one expanded sample.
pub fn ft_losses(
    params: &Params,
    model: &ModelConfig,
    sample: &LfovSample,
    cfg: &FtConfig,
    lambda_cons: f64,
    scale: f64,
) -> Result<(FtLosses, Params)> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, true);
    let b = forward_graph(&mut g, &pv, model, &sample.image)?;
    let (reg, ty) = point_heads_graph(&mut g, &pv, b.fmap, b.fside)?;
    let (losses, total) = ft_graph(&mut g, reg, ty, b.fside, b.stride, sample, cfg, lambda_cons)?;
    let grads = match total {
        Some(t) => {
            let l = g.scale(t, scale);
            pv.gradients(&g.backward(l)?, params)
        }
        None => params.zeros_like(),
    };
    Ok((losses, grads))
}

/// Loss terms computed from precomputed head outputs (no gradients).
pub fn ft_losses_from_heads(heads: &HeadOutputs, sample: &LfovSample, cfg: &FtConfig, lambda_cons: f64) -> Result<FtLosses> {
    let mut g = Graph::new();
    let reg = g.constant(heads.offsets.clone());
    let ty = g.constant(heads.logits.clone());
    Ok(ft_graph(&mut g, reg, ty, heads.fside, heads.stride, sample, cfg, lambda_cons)?.0)
}

/// Point-head outputs for an image.
pub fn predict_heads(params: &Params, model: &ModelConfig, image: &Tensor) -> Result<HeadOutputs> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let b = forward_graph(&mut g, &pv, model, image)?;
    let (reg, ty) = point_heads_graph(&mut g, &pv, b.fmap, b.fside)?;
    Ok(HeadOutputs {
        offsets: g.value(reg).clone(),
        logits: g.value(ty).clone(),
        fside: b.fside,
        stride: b.stride,
    })
}

/// Detections inside Ω of a centred expansion, in source-image coordinates.
pub fn detect(
    params: &Params,
    model: &ModelConfig,
    cfg: &FtConfig,
    sample: &AnnotatedSample,
    roi: &RoiPatch,
) -> Result<DetectionSet> {
    let lf = expand_centered(sample, roi, cfg.expand * sample.r_a)?;
    let h = predict_heads(params, model, &lf.image)?;
    let dets = decode_predictions(&h.offsets, &h.logits, h.fside, h.stride, cfg.score_floor, cfg.suppression_radius)?;
    Ok(dets
        .into_iter()
        .filter(|d| lf.in_omega(d.x, d.y))
        .map(|d| Detection { x: d.x + lf.x as f64, y: d.y + lf.y as f64, ..d })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub l_reg: f64,
    pub l_type: f64,
    pub l_cons: f64,
    pub l_ft: f64,
    pub lambda_cons: f64,
    pub lr: f64,
}

pub struct FinetuneOutput {
    pub params: Params,
    pub epochs: Vec<EpochMetrics>,
}

/// Fresh point-head parameters on top of `backbone`.
pub fn with_fresh_point_heads(backbone: &Params, model: &ModelConfig, rng: &mut SeededRng) -> Result<Params> {
    let fresh = init_params(model, rng)?;
    let mut out = Params::new();
    for (name, t) in backbone.iter() {
        let t = if name.starts_with("point.") { fresh.get(name)?.clone() } else { t.clone() };
        out.insert(name.clone(), t)?;
    }
    Ok(out)
}

/// Train backbone and heads end-to-end on expanded annotated samples.
/// With `out`, writes `ft_metrics.jsonl` and `checkpoint.bin` there.
pub fn finetune(
    init: Params,
    model: &ModelConfig,
    samples: &[AnnotatedSample],
    rois: &[RoiPatch],
    cfg: &FtConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    model.validate()?;
    let root = SeededRng::new(seed);
    if cfg.epochs == 0 {
        return Ok(FinetuneOutput { params: init, epochs: Vec::new() });
    }
    if samples.is_empty() {
        return Err(MuseError::arg("no annotated samples to fine-tune on"));
    }
    let mut params = with_fresh_point_heads(&init, model, &mut root.child("heads", 0))?;
    let mut opt = AdamWState::new(&params);
    let per_epoch = samples.len().div_ceil(cfg.batch_size);
    let sched = CosineSchedule {
        base: cfg.lr,
        final_value: cfg.final_lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: per_epoch * cfg.epochs,
    };
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))?;
            let p = dir.join("ft_metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| MuseError::io(&p, e))?), p))
        }
        None => None,
    };
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lambda_cons = if cfg.use_cons { lambda_cons_schedule(epoch, cfg.epochs - 1, cfg.lambda_cons_max)? } else { 0.0 };
        let mut order: Vec<usize> = (0..samples.len()).collect();
        root.child("order", epoch as u64).shuffle(&mut order);
        let mut sums = [0.0; 4];
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            lr = sched.at(step);
            let scale = 1.0 / chunk.len() as f64;
            let results = chunk
                .par_iter()
                .map(|&i| {
                    let s = &samples[i];
                    let mut rng = root.child("expand", (epoch * samples.len() + i) as u64);
                    let lf = expand_lfov(s, &rois[s.roi], cfg.expand * s.r_a, &mut rng)?;
                    ft_losses(&params, model, &lf, cfg, lambda_cons, scale)
                })
                .collect::<Result<Vec<_>>>()?;
            let mut grads = params.zeros_like();
            for (l, gr) in &results {
                if !l.l_ft.is_finite() {
                    return Err(MuseError::Training { step, term: "l_ft".into(), value: l.l_ft });
                }
                sums[0] += l.l_reg;
                sums[1] += l.l_type;
                sums[2] += l.l_cons;
                sums[3] += l.l_ft;
                grads.add_scaled(gr, 1.0)?;
            }
            optimizer_step(&mut params, &grads, &mut opt, &cfg.optimizer, lr, step)?;
            step += 1;
        }
        let n = samples.len() as f64;
        let m = EpochMetrics {
            epoch: epoch + 1,
            l_reg: sums[0] / n,
            l_type: sums[1] / n,
            l_cons: sums[2] / n,
            l_ft: sums[3] / n,
            lambda_cons,
            lr,
        };
        log::info!("ft epoch {} l_type {:.4} l_reg {:.3} l_cons {:.4}", m.epoch, m.l_type, m.l_reg, m.l_cons);
        if let Some((w, p)) = writer.as_mut() {
            let line = serde_json::to_string(&m).expect("metrics serialize");
            writeln!(w, "{line}").map_err(|e| MuseError::io(p.as_path(), e))?;
        }
        history.push(m);
    }
    if let Some((mut w, p)) = writer {
        w.flush().map_err(|e| MuseError::io(p.as_path(), e))?;
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.join("checkpoint.bin"), &params, model, step as u64)?;
    }
    Ok(FinetuneOutput { params, epochs: history })
}
