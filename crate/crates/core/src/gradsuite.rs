//! Finite-difference audit of every differentiable primitive and of the
//! composite objectives, run on a small probe model.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::distill::{batch_loss, DistillConfig};
use crate::error::{MuseError, Result};
use crate::finetune::{expand_centered, ft_losses, AnnotatedSample, FtConfig, LfovSample};
use crate::model::{
    decode_graph, encode_graph, forward_graph, init_params, point_heads_graph, point_map, proj_head_graph,
    reassemble_graph, resize_map, ModelConfig, ParamVars,
};
use crate::numerics::{grad_check, GradCheckConfig, GradCheckReport, Graph, ParamSet, SeededRng, Tensor, Var};
use crate::sampler::{match_views, multi_crop, MultiCropConfig, ViewSet};
use crate::synth::{generate_roi, SynthConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradSuiteConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    /// Parameter scale of the probe model.
    pub init_std: f64,
    /// Coordinates sampled per tensor in composite checks; 0 checks all.
    pub coords_per_tensor: usize,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            step: 1e-5,
            tolerance: 1e-4,
            init_std: 0.3,
            coords_per_tensor: 12,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl SuiteReport {
    pub fn worst(&self) -> Option<&SuiteEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.report.max_rel_error.total_cmp(&b.report.max_rel_error))
    }
}

/// The probe architecture: every structural path of the full model at toy width.
pub fn probe_model(init_std: f64) -> ModelConfig {
    ModelConfig {
        patch: 4,
        dim: 8,
        depth: 4,
        heads: 2,
        mlp_ratio: 2,
        reassemble_channels: 4,
        fused_channels: 2,
        strides: vec![1, 2, 4, 8],
        pos_grid: 4,
        proto_cls: 5,
        proto_nu: 5,
        head_hidden: 6,
        head_bottleneck: 4,
        num_classes: 2,
        point_hidden: 4,
        init_std,
        ..ModelConfig::default()
    }
}

fn random(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

/// `sum(v * r)` for a fixed random `r` seeded by `seed`.
fn readout(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let r = g.constant(random(&shape, &mut SeededRng::new(seed)));
    let m = g.mul(v, r)?;
    Ok(g.sum(m))
}

fn check(
    name: &str,
    params: &ParamSet,
    cfg: &GradSuiteConfig,
    sampled: bool,
    build: impl Fn(&mut Graph, &ParamVars) -> Result<Var>,
) -> Result<SuiteEntry> {
    let loss = |ps: &ParamSet| {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, ps, true);
        let l = build(&mut g, &pv)?;
        Ok(g.scalar(l))
    };
    let grad = |ps: &ParamSet| {
        let mut g = Graph::new();
        let pv = ParamVars::bind(&mut g, ps, true);
        let l = build(&mut g, &pv)?;
        Ok(pv.gradients(&g.backward(l)?, ps))
    };
    let gc = GradCheckConfig {
        step: cfg.step,
        tolerance: cfg.tolerance,
        max_coords_per_tensor: (sampled && cfg.coords_per_tensor > 0).then_some(cfg.coords_per_tensor),
        seed: cfg.seed,
    };
    Ok(SuiteEntry {
        name: name.to_string(),
        report: grad_check(loss, grad, params, &gc)?,
    })
}

fn inputs(specs: &[(&str, &[usize])], rng: &mut SeededRng) -> Result<ParamSet> {
    let mut p = ParamSet::new();
    for (name, shape) in specs {
        p.insert(*name, random(shape, rng))?;
    }
    Ok(p)
}

/// Checks of the individual tape operations, every coordinate.
pub fn primitive_checks(cfg: &GradSuiteConfig) -> Result<Vec<SuiteEntry>> {
    let mut rng = SeededRng::new(cfg.seed).child("primitives", 0);
    let mut out = Vec::new();
    let ab = inputs(&[("a", &[3, 4]), ("b", &[3, 4])], &mut rng)?;
    let row = inputs(&[("a", &[3, 4]), ("r", &[4])], &mut rng)?;

    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[4, 3] } else { &[3, 4] };
        let sb: &[usize] = if tb { &[5, 4] } else { &[4, 5] };
        let p = inputs(&[("a", sa), ("b", sb)], &mut rng)?;
        out.push(check(&format!("matmul(ta={ta},tb={tb})"), &p, cfg, false, |g, pv| {
            let y = g.matmul_t(pv.get("a")?, pv.get("b")?, ta, tb)?;
            readout(g, y, 1)
        })?);
    }
    out.push(check("add", &ab, cfg, false, |g, pv| {
        let y = g.add(pv.get("a")?, pv.get("b")?)?;
        readout(g, y, 2)
    })?);
    out.push(check("sub", &ab, cfg, false, |g, pv| {
        let y = g.sub(pv.get("a")?, pv.get("b")?)?;
        readout(g, y, 3)
    })?);
    out.push(check("mul", &ab, cfg, false, |g, pv| {
        let y = g.mul(pv.get("a")?, pv.get("b")?)?;
        readout(g, y, 4)
    })?);
    out.push(check("add_row", &row, cfg, false, |g, pv| {
        let y = g.add_row(pv.get("a")?, pv.get("r")?)?;
        readout(g, y, 5)
    })?);
    out.push(check("mul_row", &row, cfg, false, |g, pv| {
        let y = g.mul_row(pv.get("a")?, pv.get("r")?)?;
        readout(g, y, 6)
    })?);
    out.push(check("scale", &ab, cfg, false, |g, pv| {
        let y = g.scale(pv.get("a")?, -1.7);
        readout(g, y, 7)
    })?);
    out.push(check("gelu", &ab, cfg, false, |g, pv| {
        let y = g.gelu(pv.get("a")?);
        readout(g, y, 8)
    })?);
    out.push(check("layer_norm", &ab, cfg, false, |g, pv| {
        let y = g.layer_norm(pv.get("a")?, 1e-6);
        readout(g, y, 9)
    })?);
    out.push(check("softmax_rows", &ab, cfg, false, |g, pv| {
        let y = g.softmax_rows(pv.get("a")?);
        readout(g, y, 10)
    })?);
    out.push(check("l2_normalize_rows", &ab, cfg, false, |g, pv| {
        let y = g.l2_normalize_rows(pv.get("a")?);
        readout(g, y, 11)
    })?);
    out.push(check("slice_rows/slice_cols", &ab, cfg, false, |g, pv| {
        let r = g.slice_rows(pv.get("a")?, 1, 2)?;
        let c = g.slice_cols(r, 1, 3)?;
        readout(g, c, 12)
    })?);
    out.push(check("concat_rows/concat_cols", &ab, cfg, false, |g, pv| {
        let (a, b) = (pv.get("a")?, pv.get("b")?);
        let r = g.concat_rows(&[a, b, a])?;
        let c = g.concat_cols(&[r, r])?;
        readout(g, c, 13)
    })?);

    let qkv = inputs(&[("q", &[5, 4]), ("k", &[5, 4]), ("v", &[5, 3])], &mut rng)?;
    out.push(check("softmax attention", &qkv, cfg, false, |g, pv| {
        let s = g.matmul_t(pv.get("q")?, pv.get("k")?, false, true)?;
        let s = g.scale(s, 0.5);
        let a = g.softmax_rows(s);
        let y = g.matmul(a, pv.get("v")?)?;
        readout(g, y, 14)
    })?);

    let conv = inputs(&[("x", &[12, 3]), ("w", &[27, 2])], &mut rng)?;
    out.push(check("convolution (im2col3 + matmul)", &conv, cfg, false, |g, pv| {
        let cols = g.im2col3(pv.get("x")?, 3, 4)?;
        let y = g.matmul(cols, pv.get("w")?)?;
        readout(g, y, 15)
    })?);

    let fmap = inputs(&[("m", &[20, 3])], &mut rng)?;
    let pts = Arc::new(point_map(4, 5, 2.0, &[(0.3, 0.2), (3.7, 2.9), (9.8, 7.9), (5.0, 4.0)])?);
    out.push(check("bilinear_sample", &fmap, cfg, false, |g, pv| {
        let y = g.gather(pv.get("m")?, pts.clone())?;
        readout(g, y, 16)
    })?);
    let up = Arc::new(resize_map(4, 5, 7, 3));
    out.push(check("resize_bilinear", &fmap, cfg, false, |g, pv| {
        let y = g.gather(pv.get("m")?, up.clone())?;
        readout(g, y, 17)
    })?);

    let targets = {
        let mut t = random(&[3, 4], &mut rng).map(f64::exp);
        for r in t.data_mut().chunks_mut(4) {
            let s: f64 = r.iter().sum();
            r.iter_mut().for_each(|v| *v /= s);
        }
        t
    };
    out.push(check("soft_cross_entropy", &ab, cfg, false, |g, pv| {
        g.soft_cross_entropy(pv.get("a")?, targets.clone(), 0.1, vec![0.2, 0.5, 0.3])
    })?);
    let target = random(&[3, 4], &mut rng);
    out.push(check("squared_error", &ab, cfg, false, |g, pv| {
        g.squared_error(pv.get("a")?, target.clone(), vec![1.0, 0.25, 2.0])
    })?);
    out.push(check("sum/add_scalars", &ab, cfg, false, |g, pv| {
        let a = g.sum(pv.get("a")?);
        let m = g.mul(pv.get("b")?, pv.get("b")?)?;
        let b = g.sum(m);
        g.add_scalars(&[a, b, a])
    })?);
    Ok(out)
}

/// A probe ROI with nuclei of the probe model's classes inside the LFoV square.
fn probe_roi(seed: u64, num_classes: usize) -> Result<crate::synth::RoiPatch> {
    let base = SynthConfig::default();
    let syn = SynthConfig {
        roi_side: 64,
        nuclei_min: 6,
        nuclei_max: 8,
        num_classes,
        classes: base.classes[..num_classes].to_vec(),
        ..base
    };
    for k in 0..64 {
        let Ok(roi) = generate_roi(&syn, "probe", &mut SeededRng::new(seed).child("roi", k)) else {
            continue;
        };
        if roi.nuclei.iter().any(|n| (16.0..32.0).contains(&n.x) && (16.0..32.0).contains(&n.y)) {
            return Ok(roi);
        }
    }
    Err(MuseError::arg("no probe ROI with annotated nuclei"))
}

/// A view set whose first global and first local view share nuclei.
fn probe_views(roi: &crate::synth::RoiPatch, seed: u64) -> Result<ViewSet> {
    let crops = MultiCropConfig {
        global_side: 16,
        local_side: 8,
        n_local: 2,
        ..MultiCropConfig::default()
    };
    for k in 0..256 {
        let vs = multi_crop(roi, &crops, &mut SeededRng::new(seed).child("views", k))?;
        let g = match_views(&vs.views[0], &vs.views[1])?;
        let l = match_views(&vs.views[0], &vs.views[2])?;
        if !g.is_empty() && !l.is_empty() {
            return Ok(vs);
        }
    }
    Err(MuseError::arg("no probe view set with shared nuclei"))
}

fn probe_lfov(roi: &crate::synth::RoiPatch) -> Result<LfovSample> {
    let (x_a, y_a, r_a) = (16, 16, 16);
    let nuclei = roi
        .nuclei
        .iter()
        .filter(|n| n.x >= x_a as f64 && n.x < (x_a + r_a) as f64 && n.y >= y_a as f64 && n.y < (y_a + r_a) as f64)
        .cloned()
        .collect();
    expand_centered(&AnnotatedSample { roi: 0, x_a, y_a, r_a, nuclei }, roi, 32)
}

/// Encoder, decoder, full bundle, heads, `L_MUSE` and `L_ft`.
pub fn composite_checks(cfg: &GradSuiteConfig) -> Result<Vec<SuiteEntry>> {
    let model = probe_model(cfg.init_std);
    let root = SeededRng::new(cfg.seed);
    let params = init_params(&model, &mut root.child("init", 0))?;
    let mut rng = root.child("inputs", 0);
    let side = 16;
    let image = Tensor::new(vec![3, side, side], (0..3 * side * side).map(|_| rng.uniform()).collect())?;
    let mut out = Vec::new();

    out.push(check("encode + readout", &params, cfg, true, |g, pv| {
        let e = encode_graph(g, pv, &model, &image)?;
        let mut parts = vec![readout(g, e.cls, 20)?];
        for (l, &t) in e.levels.iter().enumerate() {
            parts.push(readout(g, t, 21 + l as u64)?);
        }
        g.add_scalars(&parts)
    })?);

    let c = model.reassemble_channels;
    let sides = [8usize, 4, 2, 1];
    let maps: Vec<Tensor> = sides.iter().map(|&s| random(&[s * s, c], &mut rng)).collect();
    let decoder = params.filter_prefix(&["decoder."]);
    out.push(check("decode", &decoder, cfg, true, |g, pv| {
        let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.clone())).collect();
        let f = decode_graph(g, pv, &model, &vars, &sides)?;
        readout(g, f, 30)
    })?);

    let tokens = random(&[(side / model.patch).pow(2) + 1, model.dim], &mut rng);
    let reassembly = params.filter_prefix(&["reassemble."]);
    out.push(check("reassemble", &reassembly, cfg, true, |g, pv| {
        let t = g.constant(tokens.clone());
        let mut parts = Vec::new();
        for l in 0..model.levels {
            let r = reassemble_graph(g, pv, &model, t, l, side)?;
            parts.push(readout(g, r, 31 + l as u64)?);
        }
        g.add_scalars(&parts)
    })?);

    out.push(check("forward_bundle + readout", &params, cfg, true, |g, pv| {
        let b = forward_graph(g, pv, &model, &image)?;
        let a = readout(g, b.fmap, 40)?;
        let c = readout(g, b.cls, 41)?;
        g.add(a, c)
    })?);

    let heads = params.filter_prefix(&["head_cls.", "head_nu.", "point."]);
    let feat = random(&[3, model.dim], &mut rng);
    let pix = random(&[4, model.fmap_channels()], &mut rng);
    let fmap = random(&[16, model.fmap_channels()], &mut rng);
    out.push(check("projection and point heads", &heads, cfg, true, |g, pv| {
        let x = g.constant(feat.clone());
        let (zc, lc) = proj_head_graph(g, pv, "head_cls", x)?;
        let y = g.constant(pix.clone());
        let (zn, ln) = proj_head_graph(g, pv, "head_nu", y)?;
        let m = g.constant(fmap.clone());
        let (reg, ty) = point_heads_graph(g, pv, m, 4)?;
        let mut parts = Vec::new();
        for (k, v) in [zc, lc, zn, ln, reg, ty].into_iter().enumerate() {
            parts.push(readout(g, v, 50 + k as u64)?);
        }
        g.add_scalars(&parts)
    })?);

    let roi = probe_roi(cfg.seed, model.num_classes)?;
    let views = probe_views(&roi, cfg.seed)?;
    let teacher = init_params(&model, &mut root.child("teacher", 0))?;
    let center_cls = random(&[model.proto_cls], &mut rng).map(|v| 0.1 * v);
    let center_nu = random(&[model.proto_nu], &mut rng).map(|v| 0.1 * v);
    let dcfg = DistillConfig::default();
    let batch = [views];
    let l_muse = |ps: &ParamSet| -> Result<(f64, ParamSet)> {
        batch_loss(ps, &teacher, &model, &dcfg, (&center_cls, &center_nu), 0.045, &batch)
    };
    let gc = GradCheckConfig {
        step: cfg.step,
        tolerance: cfg.tolerance,
        max_coords_per_tensor: (cfg.coords_per_tensor > 0).then_some(cfg.coords_per_tensor),
        seed: cfg.seed,
    };
    out.push(SuiteEntry {
        name: "L_MUSE".into(),
        report: grad_check(|ps| Ok(l_muse(ps)?.0), |ps| Ok(l_muse(ps)?.1), &params, &gc)?,
    });

    let sample = probe_lfov(&roi)?;
    let fcfg = FtConfig {
        theta: 0.34,
        ..FtConfig::default()
    };
    let l_ft = |ps: &ParamSet| ft_losses(ps, &model, &sample, &fcfg, 0.05, 1.0);
    let (terms, _) = l_ft(&params)?;
    if terms.n_omega == 0 || terms.n_cons == 0 {
        return Err(MuseError::arg("probe LFoV sample does not exercise every L_ft term"));
    }
    out.push(SuiteEntry {
        name: "L_ft".into(),
        report: grad_check(|ps| Ok(l_ft(ps)?.0.l_ft), |ps| Ok(l_ft(ps)?.1), &params, &gc)?,
    });
    Ok(out)
}

pub fn run_suite(cfg: &GradSuiteConfig) -> Result<SuiteReport> {
    let mut entries = primitive_checks(cfg)?;
    entries.extend(composite_checks(cfg)?);
    let max_rel_error = entries.iter().map(|e| e.report.max_rel_error).fold(0.0, f64::max);
    Ok(SuiteReport {
        entries,
        max_rel_error,
        tolerance: cfg.tolerance,
        pass: max_rel_error <= cfg.tolerance,
    })
}
