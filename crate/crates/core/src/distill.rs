//! Teacher/student self-distillation with an image-level loss on CLS
//! prototypes and a nucleus-level loss (NuLo) on `f_map` features sampled at
//! nuclei shared by two views.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{MuseError, Result};
use crate::model::{
    encode_graph, forward_graph, head_nu, init_params, proj_head_graph, sample_points_graph, FeatureBundle, ModelConfig,
    ParamVars, Params,
};
use crate::numerics::autograd::SparseRows;
use crate::numerics::{
    bilinear_sample, cross_entropy, ema_update, optimizer_step, softmax_t, AdamWConfig, AdamWState, CosineSchedule,
    Graph, SeededRng, Tensor, Var,
};
use crate::sampler::{match_views, multi_crop, MatchSet, MultiCropConfig, View, ViewSet};
use crate::synth::RoiPatch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub lambda_image: f64,
    pub lambda_nu: f64,
    pub tau_s: f64,
    pub tau_t_start: f64,
    pub tau_t_end: f64,
    /// Steps over which the teacher temperature ramps linearly.
    pub tau_t_warmup_steps: usize,
    /// Initial EMA momentum; follows a cosine ramp to 1 over `steps`.
    pub momentum: f64,
    pub center_momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub optimizer: AdamWConfig,
    /// Metrics are written every `log_every` steps.
    pub log_every: usize,
    /// Use the large field-of-view view sides.
    pub lfov: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda_image: 1.0,
            lambda_nu: 1.0,
            tau_s: 0.1,
            tau_t_start: 0.04,
            tau_t_end: 0.05,
            tau_t_warmup_steps: 300,
            momentum: 0.996,
            center_momentum: 0.9,
            steps: 2000,
            batch_size: 16,
            lr: 5e-4,
            final_lr: 1e-5,
            warmup_steps: 100,
            optimizer: AdamWConfig::default(),
            log_every: 1,
            lfov: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_image < 0.0 || self.lambda_nu < 0.0 {
            return Err(MuseError::config("distill lambdas must be >= 0"));
        }
        if !(self.tau_s > 0.0 && self.tau_t_start > 0.0 && self.tau_t_end > 0.0) {
            return Err(MuseError::config("distill temperatures must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.momentum) || !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(MuseError::config("distill momenta must lie in [0, 1]"));
        }
        if self.batch_size == 0 || self.log_every == 0 {
            return Err(MuseError::config("distill.batch_size and distill.log_every must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base: self.lr,
            final_value: self.final_lr,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }

    pub fn tau_t(&self, step: usize) -> f64 {
        if self.tau_t_warmup_steps == 0 || step >= self.tau_t_warmup_steps {
            return self.tau_t_end;
        }
        let t = step as f64 / self.tau_t_warmup_steps as f64;
        self.tau_t_start + t * (self.tau_t_end - self.tau_t_start)
    }

    pub fn ema_momentum(&self, step: usize) -> f64 {
        if self.steps == 0 {
            return 1.0;
        }
        let t = (step as f64 / self.steps as f64).min(1.0);
        1.0 - (1.0 - self.momentum) * 0.5 * (1.0 + (PI * t).cos())
    }

    /// Learning rate, EMA momentum and teacher temperature at `step`.
    pub fn step_schedule(&self, step: usize) -> StepSchedule {
        StepSchedule {
            lr: self.schedule().at(step),
            m: self.ema_momentum(step),
            tau_t: self.tau_t(step),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub lr: f64,
    pub m: f64,
    pub tau_t: f64,
}

#[derive(Clone, Debug)]
pub struct TrainerState {
    pub student: Params,
    pub teacher: Params,
    pub center_cls: Tensor,
    pub center_nu: Tensor,
    pub opt: AdamWState,
    pub step: usize,
}

impl TrainerState {
    pub fn new(model: &ModelConfig, student: Params) -> Self {
        Self {
            teacher: student.clone(),
            center_cls: Tensor::zeros(&[model.proto_cls]),
            center_nu: Tensor::zeros(&[model.proto_nu]),
            opt: AdamWState::new(&student),
            student,
            step: 0,
        }
    }
}

/// One metrics record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_image: f64,
    pub l_nu: f64,
    pub l_total: f64,
    pub m: f64,
    pub tau_t: f64,
    pub lr: f64,
}

/// Per-step diagnostics beyond the logged record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub metrics: StepMetrics,
    /// Largest `|sum(p) - 1|` over every teacher and student distribution of the step.
    pub prob_sum_err: f64,
    /// Non-empty nucleus pairs contributing to `l_nu`.
    pub nu_pairs: usize,
}

pub fn teacher_probs(logits: &[f64], center: &[f64], tau_t: f64) -> Result<Vec<f64>> {
    if logits.len() != center.len() {
        return Err(MuseError::arg(format!(
            "logits length {} vs center length {}",
            logits.len(),
            center.len()
        )));
    }
    let shifted: Vec<f64> = logits.iter().zip(center).map(|(l, c)| l - c).collect();
    softmax_t(&shifted, tau_t)
}

pub fn student_probs(logits: &[f64], tau_s: f64) -> Result<Vec<f64>> {
    softmax_t(logits, tau_s)
}

/// Ordered (teacher global, student view) pairs with the view index differing.
pub fn view_pairs(n_global: usize, n_views: usize) -> Vec<(usize, usize)> {
    (0..n_global)
        .flat_map(|g| (0..n_views).filter(move |&v| v != g).map(move |v| (g, v)))
        .collect()
}

/// Mean over pairs `(g, v != g)` of `H(teacher_probs(g), student_probs(v))`.
/// `teacher_logits[g]` is the teacher output on global view `g`.
pub fn image_loss(
    teacher_logits: &[Vec<f64>],
    student_logits: &[Vec<f64>],
    center: &[f64],
    tau_t: f64,
    tau_s: f64,
) -> Result<f64> {
    if teacher_logits.len() < 2 {
        return Err(MuseError::arg(format!(
            "image loss needs 2 global views, got {}",
            teacher_logits.len()
        )));
    }
    let pairs = view_pairs(teacher_logits.len(), student_logits.len());
    let mut total = 0.0;
    for &(g, v) in &pairs {
        let t = teacher_probs(&teacher_logits[g], center, tau_t)?;
        let s = student_probs(&student_logits[v], tau_s)?;
        total += cross_entropy(&t, &s)?;
    }
    Ok(total / pairs.len() as f64)
}

/// NuLo for one view pair: features are sampled from each bundle's `f_map`
/// at the matched nucleus coordinates, projected by the respective
/// `head_nu`, and compared with cross-entropy averaged over the match set.
/// An empty match set contributes 0.
#[allow(clippy::too_many_arguments)]
pub fn nucleus_loss(
    teacher: (&Params, &FeatureBundle, &[(f64, f64)]),
    student: (&Params, &FeatureBundle, &[(f64, f64)]),
    matches: &MatchSet,
    center_nu: &[f64],
    tau_t: f64,
    tau_s: f64,
) -> Result<f64> {
    if matches.is_empty() {
        return Ok(0.0);
    }
    let (tp, tb, tc) = teacher;
    let (sp, sb, sc) = student;
    let mut total = 0.0;
    for &(p1, p2) in &matches.pairs {
        let (x1, y1) = *tc
            .get(p1)
            .ok_or_else(|| MuseError::arg(format!("match position {p1} outside teacher view")))?;
        let (x2, y2) = *sc
            .get(p2)
            .ok_or_else(|| MuseError::arg(format!("match position {p2} outside student view")))?;
        let f1 = bilinear_sample(&tb.f_map, x1, y1, tb.stride)?;
        let f2 = bilinear_sample(&sb.f_map, x2, y2, sb.stride)?;
        let t = teacher_probs(&head_nu(tp, f1.data())?, center_nu, tau_t)?;
        let s = student_probs(&head_nu(sp, f2.data())?, tau_s)?;
        total += cross_entropy(&t, &s)?;
    }
    Ok(total / matches.len() as f64)
}

pub fn muse_loss(l_image: f64, l_nu: f64, lambda_image: f64, lambda_nu: f64) -> f64 {
    lambda_image * l_image + lambda_nu * l_nu
}

/// Teacher outputs on one global view.
struct TeacherView {
    cls_logits: Vec<f64>,
    /// `[n_nuclei, K_nu]`, one row per nucleus of the view.
    nu_logits: Tensor,
}

fn teacher_forward(params: &Params, model: &ModelConfig, view: &View, with_nu: bool) -> Result<TeacherView> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let (cls, nu_logits) = if with_nu {
        let b = forward_graph(&mut g, &pv, model, &view.image)?;
        let nu = if view.coords.is_empty() {
            Tensor::zeros(&[0, model.proto_nu])
        } else {
            let f = sample_points_graph(&mut g, &b, &view.coords)?;
            let (_, l) = proj_head_graph(&mut g, &pv, "head_nu", f)?;
            g.value(l).clone()
        };
        (b.cls, nu)
    } else {
        let e = encode_graph(&mut g, &pv, model, &view.image)?;
        (e.cls, Tensor::zeros(&[0, model.proto_nu]))
    };
    let (_, cl) = proj_head_graph(&mut g, &pv, "head_cls", cls)?;
    Ok(TeacherView {
        cls_logits: g.value(cl).data().to_vec(),
        nu_logits,
    })
}

fn prob_sum_err(p: &[f64]) -> f64 {
    (p.iter().sum::<f64>() - 1.0).abs()
}

/// Loss values, gradients and bookkeeping of one view set.
struct SampleOutcome {
    l_image: f64,
    l_nu: f64,
    nu_pairs: usize,
    grads: Params,
    teacher_cls: Vec<Vec<f64>>,
    teacher_nu: Vec<Tensor>,
    prob_err: f64,
}

struct LossContext<'a> {
    model: &'a ModelConfig,
    cfg: &'a DistillConfig,
    center_cls: &'a [f64],
    center_nu: &'a [f64],
    tau_t: f64,
}

/// Builds `L_MUSE` for one view set on `g` with the student bound to `pv`.
/// Returns `(l_image, l_nu, total, nonempty pairs, teacher outputs, prob error)`.
#[allow(clippy::type_complexity)]
fn sample_graph(
    g: &mut Graph,
    pv: &ParamVars,
    teacher: &Params,
    ctx: &LossContext,
    vs: &ViewSet,
) -> Result<(Var, Option<Var>, Var, usize, Vec<TeacherView>, f64)> {
    let (model, cfg) = (ctx.model, ctx.cfg);
    if vs.n_global < 2 || vs.views.len() < vs.n_global {
        return Err(MuseError::arg(format!("view set needs 2 global views, got {}", vs.n_global)));
    }
    let with_nu = cfg.lambda_nu > 0.0;
    let teachers = vs.views[..vs.n_global]
        .iter()
        .map(|v| teacher_forward(teacher, model, v, with_nu))
        .collect::<Result<Vec<_>>>()?;
    let mut err: f64 = 0.0;
    let t_cls: Vec<Vec<f64>> = teachers
        .iter()
        .map(|t| teacher_probs(&t.cls_logits, ctx.center_cls, ctx.tau_t))
        .collect::<Result<_>>()?;
    for p in &t_cls {
        err = err.max(prob_sum_err(p));
    }

    let pairs = view_pairs(vs.n_global, vs.views.len());
    let mut match_sets = Vec::with_capacity(pairs.len());
    if with_nu {
        for &(gi, v) in &pairs {
            match_sets.push(match_views(&vs.views[gi], &vs.views[v])?);
        }
    }
    let nonempty = match_sets.iter().filter(|m| !m.is_empty()).count();

    let mut image_terms = Vec::new();
    let mut nu_terms = Vec::new();
    let w_img = 1.0 / pairs.len() as f64;
    for (v, view) in vs.views.iter().enumerate() {
        let needs_nu = with_nu && nonempty > 0 && pairs.iter().zip(&match_sets).any(|(p, m)| p.1 == v && !m.is_empty());
        let (cls, bundle) = if needs_nu {
            let b = forward_graph(g, pv, model, &view.image)?;
            (b.cls, Some(b))
        } else {
            (encode_graph(g, pv, model, &view.image)?.cls, None)
        };
        let (_, s_cls) = proj_head_graph(g, pv, "head_cls", cls)?;
        err = err.max(prob_sum_err(&student_probs(g.value(s_cls).data(), cfg.tau_s)?));
        for (gi, t) in t_cls.iter().enumerate() {
            if gi == v {
                continue;
            }
            let target = Tensor::new(vec![1, t.len()], t.clone())?;
            image_terms.push(g.soft_cross_entropy(s_cls, target, cfg.tau_s, vec![w_img])?);
        }
        let Some(b) = bundle else { continue };
        let s_nu = {
            let f = sample_points_graph(g, &b, &view.coords)?;
            proj_head_graph(g, pv, "head_nu", f)?.1
        };
        let k = model.proto_nu;
        for (&(gi, pv_idx), m) in pairs.iter().zip(&match_sets) {
            if pv_idx != v || m.is_empty() {
                continue;
            }
            let t_rows = &teachers[gi].nu_logits;
            let mut sel = SparseRows::new(view.coords.len());
            let mut tgt = Vec::with_capacity(m.len() * k);
            for &(p1, p2) in &m.pairs {
                sel.push_row([(p2, 1.0)]);
                let t = teacher_probs(t_rows.row(p1), ctx.center_nu, ctx.tau_t)?;
                err = err.max(prob_sum_err(&t));
                tgt.extend(t);
            }
            let rows = g.gather(s_nu, Arc::new(sel))?;
            for r in g.value(rows).data().chunks(k) {
                err = err.max(prob_sum_err(&student_probs(r, cfg.tau_s)?));
            }
            let w = 1.0 / (m.len() as f64 * nonempty as f64);
            let target = Tensor::new(vec![m.len(), k], tgt)?;
            nu_terms.push(g.soft_cross_entropy(rows, target, cfg.tau_s, vec![w; m.len()])?);
        }
    }
    let l_image = g.add_scalars(&image_terms)?;
    let l_nu = if nu_terms.is_empty() { None } else { Some(g.add_scalars(&nu_terms)?) };
    let a = g.scale(l_image, cfg.lambda_image);
    let total = match l_nu {
        Some(n) => {
            let b = g.scale(n, cfg.lambda_nu);
            g.add(a, b)?
        }
        None => a,
    };
    Ok((l_image, l_nu, total, nonempty, teachers, err))
}

fn sample_outcome(student: &Params, teacher: &Params, ctx: &LossContext, vs: &ViewSet, scale: f64) -> Result<SampleOutcome> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, student, true);
    let (l_image, l_nu, total, nu_pairs, teachers, prob_err) = sample_graph(&mut g, &pv, teacher, ctx, vs)?;
    let loss = g.scale(total, scale);
    let grads = pv.gradients(&g.backward(loss)?, student);
    let l_image_v = g.scalar(l_image);
    let l_nu_v = l_nu.map(|v| g.scalar(v)).unwrap_or(0.0);
    let (teacher_cls, teacher_nu) = teachers.into_iter().map(|t| (t.cls_logits, t.nu_logits)).unzip();
    Ok(SampleOutcome {
        l_image: l_image_v,
        l_nu: l_nu_v,
        nu_pairs,
        grads,
        teacher_cls,
        teacher_nu,
        prob_err,
    })
}

/// `L_MUSE` of a batch (mean over view sets) as a function of the student only.
/// Used for gradient checking; teacher and centres are held fixed.
pub fn batch_loss(
    student: &Params,
    teacher: &Params,
    model: &ModelConfig,
    cfg: &DistillConfig,
    centers: (&Tensor, &Tensor),
    tau_t: f64,
    batch: &[ViewSet],
) -> Result<(f64, Params)> {
    let ctx = LossContext {
        model,
        cfg,
        center_cls: centers.0.data(),
        center_nu: centers.1.data(),
        tau_t,
    };
    let scale = 1.0 / batch.len() as f64;
    let mut grads = student.zeros_like();
    let mut loss = 0.0;
    for vs in batch {
        let o = sample_outcome(student, teacher, &ctx, vs, scale)?;
        loss += scale * muse_loss(o.l_image, o.l_nu, cfg.lambda_image, cfg.lambda_nu);
        grads.add_scaled(&o.grads, 1.0)?;
    }
    Ok((loss, grads))
}

fn update_center(center: &mut Tensor, rows: &[&[f64]], momentum: f64) {
    if rows.is_empty() {
        return;
    }
    let k = center.len();
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    let n = rows.len() as f64;
    for (c, m) in center.data_mut().iter_mut().zip(mean) {
        *c = momentum * *c + (1.0 - momentum) * m / n;
    }
}

/// One optimisation step: student update, teacher EMA, centre EMA.
pub fn train_step(
    state: &mut TrainerState,
    batch: &[ViewSet],
    model: &ModelConfig,
    cfg: &DistillConfig,
    sched: StepSchedule,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(MuseError::arg("empty batch"));
    }
    let step = state.step;
    let ctx = LossContext {
        model,
        cfg,
        center_cls: state.center_cls.data(),
        center_nu: state.center_nu.data(),
        tau_t: sched.tau_t,
    };
    let scale = 1.0 / batch.len() as f64;
    let outcomes = batch
        .par_iter()
        .map(|vs| sample_outcome(&state.student, &state.teacher, &ctx, vs, scale))
        .collect::<Result<Vec<_>>>()?;

    let l_image = outcomes.iter().map(|o| o.l_image).sum::<f64>() * scale;
    let l_nu = outcomes.iter().map(|o| o.l_nu).sum::<f64>() * scale;
    for (term, value) in [("l_image", l_image), ("l_nu", l_nu)] {
        if !value.is_finite() {
            return Err(MuseError::Training { step, term: term.into(), value });
        }
    }
    let mut grads = state.student.zeros_like();
    for o in &outcomes {
        grads.add_scaled(&o.grads, 1.0)?;
    }
    optimizer_step(&mut state.student, &grads, &mut state.opt, &cfg.optimizer, sched.lr, step)?;

    let mut teacher = Params::new();
    for ((name, t), (_, s)) in state.teacher.iter().zip(state.student.iter()) {
        teacher.insert(name.clone(), ema_update(t, s, sched.m)?)?;
    }
    state.teacher = teacher;

    let cls_rows: Vec<&[f64]> = outcomes.iter().flat_map(|o| o.teacher_cls.iter().map(|r| r.as_slice())).collect();
    update_center(&mut state.center_cls, &cls_rows, cfg.center_momentum);
    let k = model.proto_nu;
    let nu_rows: Vec<&[f64]> = outcomes
        .iter()
        .flat_map(|o| o.teacher_nu.iter().flat_map(move |t| t.data().chunks(k)))
        .collect();
    update_center(&mut state.center_nu, &nu_rows, cfg.center_momentum);
    if !state.center_cls.is_finite() || !state.center_nu.is_finite() {
        return Err(MuseError::Training { step, term: "center".into(), value: f64::NAN });
    }
    state.step += 1;
    let prob_sum_err = outcomes.iter().map(|o| o.prob_err).fold(0.0, f64::max);
    Ok(StepReport {
        metrics: StepMetrics {
            step: step + 1,
            l_image,
            l_nu,
            l_total: muse_loss(l_image, l_nu, cfg.lambda_image, cfg.lambda_nu),
            m: sched.m,
            tau_t: sched.tau_t,
            lr: sched.lr,
        },
        prob_sum_err,
        nu_pairs: outcomes.iter().map(|o| o.nu_pairs).sum(),
    })
}

/// Deterministic ROI order: a fresh permutation per epoch.
pub struct BatchPlan {
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    rng: SeededRng,
}

impl BatchPlan {
    pub fn new(n: usize, rng: SeededRng) -> Self {
        let mut plan = Self { order: (0..n).collect(), pos: n, epoch: 0, rng };
        plan.reshuffle();
        plan
    }

    fn reshuffle(&mut self) {
        let mut r = self.rng.child("epoch", self.epoch);
        r.shuffle(&mut self.order);
        self.epoch += 1;
        self.pos = 0;
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

pub struct PretrainOutput {
    pub state: TrainerState,
    pub reports: Vec<StepReport>,
}

/// Full pretraining run. With `out`, writes `metrics.jsonl` and
/// `checkpoint.bin` (teacher weights) there.
pub fn pretrain(
    rois: &[RoiPatch],
    model: &ModelConfig,
    crops: &MultiCropConfig,
    cfg: &DistillConfig,
    seed: u64,
    init: Option<Params>,
    out: Option<&Path>,
) -> Result<PretrainOutput> {
    cfg.validate()?;
    model.validate()?;
    let crops = if cfg.lfov { crops.lfov() } else { crops.clone() };
    crops.validate()?;
    if rois.is_empty() {
        return Err(MuseError::arg("pretraining corpus is empty"));
    }
    let root = SeededRng::new(seed);
    let student = match init {
        Some(p) => p,
        None => init_params(model, &mut root.child("init", 0))?,
    };
    let mut state = TrainerState::new(model, student);
    let mut plan = BatchPlan::new(rois.len(), root.child("order", 0));
    let mut writer = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| MuseError::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((BufWriter::new(File::create(&p).map_err(|e| MuseError::io(&p, e))?), p))
        }
        None => None,
    };
    let mut reports = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ids = plan.next_batch(cfg.batch_size);
        let batch = ids
            .par_iter()
            .enumerate()
            .map(|(b, &i)| {
                let mut rng = root.child("views", (step * cfg.batch_size + b) as u64);
                multi_crop(&rois[i], &crops, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let report = train_step(&mut state, &batch, model, cfg, cfg.step_schedule(step))?;
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.steps {
            if let Some((w, p)) = writer.as_mut() {
                let line = serde_json::to_string(&report.metrics).expect("metrics serialize");
                writeln!(w, "{line}").map_err(|e| MuseError::io(p.as_path(), e))?;
            }
            log::info!(
                "step {} l_image {:.4} l_nu {:.4} lr {:.2e} m {:.5}",
                report.metrics.step,
                report.metrics.l_image,
                report.metrics.l_nu,
                report.metrics.lr,
                report.metrics.m
            );
        }
        reports.push(report);
    }
    if let Some((mut w, p)) = writer {
        w.flush().map_err(|e| MuseError::io(p.as_path(), e))?;
    }
    if let Some(dir) = out {
        checkpoint::save(&dir.join("checkpoint.bin"), &state.teacher, model, state.step as u64)?;
    }
    Ok(PretrainOutput { state, reports })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedules_hit_endpoints() {
        let c = DistillConfig { steps: 100, tau_t_warmup_steps: 10, ..Default::default() };
        assert_eq!(c.tau_t(0), 0.04);
        assert!((c.tau_t(5) - 0.045).abs() < 1e-15);
        assert_eq!(c.tau_t(10), 0.05);
        assert_eq!(c.tau_t(99), 0.05);
        assert!((c.ema_momentum(0) - 0.996).abs() < 1e-15);
        assert_eq!(c.ema_momentum(100), 1.0);
    }

    #[test]
    fn centering_cases() {
        let l = [0.3, -1.0, 2.0];
        let u = teacher_probs(&l, &l, 0.04).unwrap();
        assert!(u.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(teacher_probs(&l, &[0.0; 3], 0.1).unwrap(), softmax_t(&l, 0.1).unwrap());
        let mut c = Tensor::from_vec(vec![1.0, 2.0]);
        update_center(&mut c, &[&[3.0, 0.0], &[5.0, 2.0]], 0.9);
        assert!((c.data()[0] - (0.9 + 0.4)).abs() < 1e-12);
        assert!((c.data()[1] - (1.8 + 0.1)).abs() < 1e-12);
    }

    #[test]
    fn uniform_teacher_gives_log_k() {
        let t = vec![vec![0.5; 4], vec![0.5; 4]];
        let s = vec![vec![2.0; 4], vec![0.0; 4], vec![-3.0; 4]];
        let l = image_loss(&t, &s, &[0.0; 4], 0.04, 0.1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pair_counting() {
        assert_eq!(view_pairs(2, 2), vec![(0, 1), (1, 0)]);
        assert_eq!(view_pairs(2, 6).len(), 10);
        assert!(image_loss(&[vec![0.0; 3]], &[vec![0.0; 3]], &[0.0; 3], 0.04, 0.1).is_err());
    }

    #[test]
    fn batch_plan_covers_epoch() {
        let mut p = BatchPlan::new(10, SeededRng::new(2));
        let mut seen = p.next_batch(4);
        seen.extend(p.next_batch(6));
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
