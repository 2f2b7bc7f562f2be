//! Encoder-decoder backbone: ViT encoder with CLS token, reassembly layers,
//! a top-down residual fusion decoder producing `f_map`, prototype
//! projection heads and point-prediction heads.
//!
//! Feature maps on the tape are channels-last `[h*w, c]` matrices; the
//! value-level API converts to `[C, H, W]`.

use std::collections::HashMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MuseError, Result};
use crate::numerics::autograd::SparseRows;
use crate::numerics::ops::{bilinear_weights, cell_coords, resize_src};
use crate::numerics::{Graph, ParamSet, SeededRng, Tensor, Var};

pub type Params = ParamSet;

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Number of encoder taps (always 4).
    pub levels: usize,
    /// Channels after reassembly (`c_d`).
    pub reassemble_channels: usize,
    /// Channels per decoded level in `f_map` (`c_f`).
    pub fused_channels: usize,
    /// Target stride of each tap, finest first.
    pub strides: Vec<usize>,
    /// Side of the positional-embedding grid in patches.
    pub pos_grid: usize,
    pub proto_cls: usize,
    pub proto_nu: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    /// Downstream nucleus classes (background is extra).
    pub num_classes: usize,
    pub point_hidden: usize,
    pub init_std: f64,
    /// Per-channel input standardisation applied before patch embedding.
    pub pixel_mean: [f64; 3],
    pub pixel_std: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            patch: 8,
            dim: 64,
            depth: 8,
            heads: 4,
            mlp_ratio: 4,
            levels: 4,
            reassemble_channels: 32,
            fused_channels: 16,
            strides: vec![2, 4, 8, 16],
            pos_grid: 8,
            proto_cls: 128,
            proto_nu: 128,
            head_hidden: 128,
            head_bottleneck: 64,
            num_classes: 3,
            point_hidden: 32,
            init_std: 0.02,
            pixel_mean: [0.85, 0.7, 0.8],
            pixel_std: [0.15, 0.15, 0.15],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels != 4 {
            return Err(MuseError::config("model.levels must be 4"));
        }
        if self.depth == 0 || !self.depth.is_multiple_of(self.levels) {
            return Err(MuseError::config(format!(
                "model.depth {} must be a positive multiple of {}",
                self.depth, self.levels
            )));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(MuseError::config("model.dim must be divisible by model.heads"));
        }
        if self.pixel_std.iter().any(|&v| !(v > 0.0)) {
            return Err(MuseError::config("model.pixel_std entries must be > 0"));
        }
        if self.strides.len() != self.levels {
            return Err(MuseError::config("model.strides needs one entry per level"));
        }
        if self.strides.contains(&0) || self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MuseError::config(format!(
                "model.strides {:?} must be positive and strictly increasing (finest first)",
                self.strides
            )));
        }
        if self.patch == 0 || self.pos_grid == 0 {
            return Err(MuseError::config("model.patch and model.pos_grid must be positive"));
        }
        if self.num_classes == 0 || self.proto_cls == 0 || self.proto_nu == 0 {
            return Err(MuseError::config("model head sizes must be positive"));
        }
        Ok(())
    }

    /// Blocks (1-based) whose outputs are tapped.
    pub fn tap_blocks(&self) -> Vec<usize> {
        (1..=self.levels).map(|i| i * self.depth / self.levels).collect()
    }

    pub fn finest_stride(&self) -> usize {
        self.strides[0]
    }

    pub fn fmap_channels(&self) -> usize {
        self.levels * self.fused_channels
    }

    /// Checks an input side against patch size and every level stride.
    pub fn check_input(&self, side: usize) -> Result<()> {
        if side == 0 || !side.is_multiple_of(self.patch) {
            return Err(MuseError::arg(format!(
                "input side {side} is not divisible by patch size {}",
                self.patch
            )));
        }
        if let Some(s) = self.strides.iter().find(|&&s| !side.is_multiple_of(s)) {
            return Err(MuseError::arg(format!("input side {side} is not divisible by stride {s}")));
        }
        Ok(())
    }
}

fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("shape")
}

/// Fresh parameters for `cfg`.
pub fn init_params(cfg: &ModelConfig, rng: &mut SeededRng) -> Result<Params> {
    cfg.validate()?;
    let mut p = Params::new();
    let (d, std) = (cfg.dim, cfg.init_std);
    let pp = 3 * cfg.patch * cfg.patch;
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let lin = |p: &mut Params, name: &str, i: usize, o: usize, s: f64, rng: &mut SeededRng| -> Result<()> {
        p.insert(format!("{name}.w"), randn(&[i, o], s, rng))?;
        p.insert(format!("{name}.b"), Tensor::zeros(&[o]))
    };
    lin(&mut p, "patch_embed", pp, d, fan(pp), rng)?;
    p.insert("cls_token", randn(&[1, d], std, rng))?;
    p.insert("pos_embed", randn(&[cfg.pos_grid * cfg.pos_grid + 1, d], std, rng))?;
    let hidden = d * cfg.mlp_ratio;
    for b in 0..cfg.depth {
        let pre = format!("blocks.{b}");
        p.insert(format!("{pre}.ln1.g"), Tensor::full(&[d], 1.0))?;
        p.insert(format!("{pre}.ln1.b"), Tensor::zeros(&[d]))?;
        p.insert(format!("{pre}.attn.qkv.w"), randn(&[d, 3 * d], std, rng))?;
        // Keys carry no bias: softmax is invariant to it.
        p.insert(format!("{pre}.attn.q.b"), Tensor::zeros(&[d]))?;
        p.insert(format!("{pre}.attn.v.b"), Tensor::zeros(&[d]))?;
        lin(&mut p, &format!("{pre}.attn.proj"), d, d, std, rng)?;
        p.insert(format!("{pre}.ln2.g"), Tensor::full(&[d], 1.0))?;
        p.insert(format!("{pre}.ln2.b"), Tensor::zeros(&[d]))?;
        lin(&mut p, &format!("{pre}.mlp.fc1"), d, hidden, std, rng)?;
        lin(&mut p, &format!("{pre}.mlp.fc2"), hidden, d, std, rng)?;
    }
    p.insert("norm.g", Tensor::full(&[d], 1.0))?;
    p.insert("norm.b", Tensor::zeros(&[d]))?;
    let (cd, cf) = (cfg.reassemble_channels, cfg.fused_channels);
    for l in 0..cfg.levels {
        lin(&mut p, &format!("reassemble.{l}"), d, cd, fan(d), rng)?;
    }
    for l in 0..cfg.levels {
        lin(&mut p, &format!("decoder.{l}.conv1"), 9 * cd, cd, fan(9 * cd), rng)?;
        lin(&mut p, &format!("decoder.{l}.conv2"), 9 * cd, cd, 0.5 * fan(9 * cd), rng)?;
        lin(&mut p, &format!("decoder.{l}.out"), cd, cf, fan(cd), rng)?;
    }
    let fm = cfg.fmap_channels();
    for (name, input, k) in [("head_cls", d, cfg.proto_cls), ("head_nu", fm, cfg.proto_nu)] {
        let h = cfg.head_hidden;
        lin(&mut p, &format!("{name}.fc1"), input, h, fan(input), rng)?;
        lin(&mut p, &format!("{name}.fc2"), h, h, fan(h), rng)?;
        lin(&mut p, &format!("{name}.fc3"), h, cfg.head_bottleneck, fan(h), rng)?;
        p.insert(format!("{name}.proto.w"), randn(&[k, cfg.head_bottleneck], 1.0, rng))?;
    }
    let ph = cfg.point_hidden;
    lin(&mut p, "point.reg.conv", 9 * fm, ph, fan(9 * fm), rng)?;
    lin(&mut p, "point.reg.out", ph, 2, 0.1 * fan(ph), rng)?;
    lin(&mut p, "point.type.conv", 9 * fm, ph, fan(9 * fm), rng)?;
    lin(&mut p, "point.type.out", ph, cfg.num_classes + 1, fan(ph), rng)?;
    Ok(p)
}

/// Prefixes of the parameter groups.
pub const BACKBONE_PREFIXES: [&str; 7] = [
    "patch_embed", "cls_token", "pos_embed", "blocks.", "norm.", "reassemble.", "decoder.",
];

/// Parameter leaves bound to a graph.
pub struct ParamVars {
    vars: HashMap<String, Var>,
}

impl ParamVars {
    /// Bind every tensor of `params`; `trainable` selects param vs constant leaves.
    pub fn bind(g: &mut Graph, params: &Params, trainable: bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
                (k.clone(), v)
            })
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| MuseError::arg(format!("missing parameter {name}")))
    }

    /// Collect gradients by parameter name (zeros where no path exists).
    pub fn gradients(&self, grads: &crate::numerics::autograd::Gradients, params: &Params) -> Params {
        let mut out = Params::new();
        for (name, t) in params.iter() {
            let g = self
                .vars
                .get(name)
                .and_then(|&v| grads.get(v))
                .unwrap_or_else(|| Tensor::zeros(t.shape()));
            out.insert(name.clone(), g).expect("unique names");
        }
        out
    }
}

/// Resize map for a channels-last `hi x wi` grid to `ho x wo` (cell-centre convention).
pub fn resize_map(hi: usize, wi: usize, ho: usize, wo: usize) -> SparseRows {
    let mut m = SparseRows::new(hi * wi);
    for i in 0..ho {
        let (i0, i1, fy, _, _, _) = cell_coords(hi, 1, 0.5, resize_src(i, hi, ho), 1.0);
        for j in 0..wo {
            let (_, _, _, j0, j1, fx) = cell_coords(1, wi, resize_src(j, wi, wo), 0.5, 1.0);
            m.push_row([
                (i0 * wi + j0, (1.0 - fy) * (1.0 - fx)),
                (i0 * wi + j1, (1.0 - fy) * fx),
                (i1 * wi + j0, fy * (1.0 - fx)),
                (i1 * wi + j1, fy * fx),
            ]);
        }
    }
    m
}

/// Point-lookup map: one output row per `(x, y)` in view pixels.
pub fn point_map(h: usize, w: usize, stride: f64, points: &[(f64, f64)]) -> Result<SparseRows> {
    let mut m = SparseRows::new(h * w);
    for &(x, y) in points {
        m.push_row(bilinear_weights(h, w, x, y, stride)?);
    }
    Ok(m)
}

/// `[3, H, W]` image to `[N, 3*p*p]` patch rows, row-major over the patch grid.
pub fn standardize(image: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(MuseError::arg(format!("expected [3,H,W] image, got {s:?}")));
    }
    let plane = s[1] * s[2];
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let c = i / plane;
            (v - cfg.pixel_mean[c]) / cfg.pixel_std[c]
        })
        .collect();
    Tensor::new(s.to_vec(), data)
}

pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    if image.shape().len() != 3 || image.shape()[0] != 3 {
        return Err(MuseError::arg(format!("expected [3,H,W] image, got {:?}", image.shape())));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h != w {
        return Err(MuseError::arg(format!("input must be square, got {h}x{w}")));
    }
    if h % p != 0 {
        return Err(MuseError::arg(format!("input side {h} not divisible by patch {p}")));
    }
    let g = h / p;
    let mut out = Vec::with_capacity(g * g * 3 * p * p);
    for gi in 0..g {
        for gj in 0..g {
            for c in 0..3 {
                for di in 0..p {
                    let base = (c * h + gi * p + di) * w + gj * p;
                    out.extend_from_slice(&image.data()[base..base + p]);
                }
            }
        }
    }
    Tensor::new(vec![g * g, 3 * p * p], out)
}

/// Encoder outputs on the tape.
pub struct Encoded {
    /// Final-normed CLS token, `[1, dim]`.
    pub cls: Var,
    /// Raw token outputs (CLS first) after each tapped block.
    pub levels: Vec<Var>,
    /// Token-grid side.
    pub grid: usize,
}

/// Dense and image-level features on the tape.
pub struct BundleVars {
    pub cls: Var,
    /// `[fside * fside, 4 * c_f]`.
    pub fmap: Var,
    pub fside: usize,
    pub stride: f64,
}

fn linear(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let w = pv.get(&format!("{name}.w"))?;
    let b = pv.get(&format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn layer_norm(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let y = g.mul_row(n, pv.get(&format!("{name}.g"))?)?;
    g.add_row(y, pv.get(&format!("{name}.b"))?)
}

fn conv3(g: &mut Graph, pv: &ParamVars, name: &str, x: Var, side: usize) -> Result<Var> {
    let cols = g.im2col3(x, side, side)?;
    linear(g, pv, name, cols)
}

fn attention(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, pre: &str, x: Var) -> Result<Var> {
    let d = cfg.dim;
    let dh = d / cfg.heads;
    let qkv = g.matmul(x, pv.get(&format!("{pre}.attn.qkv.w"))?)?;
    let q_all = g.slice_cols(qkv, 0, d)?;
    let q_all = g.add_row(q_all, pv.get(&format!("{pre}.attn.q.b"))?)?;
    let v_all = g.slice_cols(qkv, 2 * d, d)?;
    let v_all = g.add_row(v_all, pv.get(&format!("{pre}.attn.v.b"))?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let q = g.slice_cols(q_all, h * dh, dh)?;
        let k = g.slice_cols(qkv, d + h * dh, dh)?;
        let v = g.slice_cols(v_all, h * dh, dh)?;
        let s = g.matmul_t(q, k, false, true)?;
        let s = g.scale(s, scale);
        let a = g.softmax_rows(s);
        outs.push(g.matmul(a, v)?);
    }
    let cat = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
    linear(g, pv, &format!("{pre}.attn.proj"), cat)
}

fn block(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, b: usize, x: Var) -> Result<Var> {
    let pre = format!("blocks.{b}");
    let h = layer_norm(g, pv, &format!("{pre}.ln1"), x)?;
    let a = attention(g, pv, cfg, &pre, h)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, pv, &format!("{pre}.ln2"), x)?;
    let h = linear(g, pv, &format!("{pre}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, pv, &format!("{pre}.mlp.fc2"), h)?;
    g.add(x, h)
}

pub fn encode_graph(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, image: &Tensor) -> Result<Encoded> {
    let patches = patchify(&standardize(image, cfg)?, cfg.patch)?;
    let grid = image.shape()[1] / cfg.patch;
    let px = g.constant(patches);
    let tokens = linear(g, pv, "patch_embed", px)?;
    let pos = pv.get("pos_embed")?;
    let pos_cls = g.slice_rows(pos, 0, 1)?;
    let mut pos_grid = g.slice_rows(pos, 1, cfg.pos_grid * cfg.pos_grid)?;
    if grid != cfg.pos_grid {
        let m = resize_map(cfg.pos_grid, cfg.pos_grid, grid, grid);
        pos_grid = g.gather(pos_grid, Arc::new(m))?;
    }
    let pos = g.concat_rows(&[pos_cls, pos_grid])?;
    let cls = pv.get("cls_token")?;
    let x = g.concat_rows(&[cls, tokens])?;
    let mut x = g.add(x, pos)?;
    let taps = cfg.tap_blocks();
    let mut levels = Vec::with_capacity(cfg.levels);
    for b in 0..cfg.depth {
        x = block(g, pv, cfg, b, x)?;
        if taps.contains(&(b + 1)) {
            levels.push(x);
        }
    }
    let normed = layer_norm(g, pv, "norm", x)?;
    let cls = g.slice_rows(normed, 0, 1)?;
    Ok(Encoded { cls, levels, grid })
}

/// Drop CLS, project channels, resample the token grid to `input_side / stride`.
pub fn reassemble_graph(
    g: &mut Graph,
    pv: &ParamVars,
    cfg: &ModelConfig,
    tokens: Var,
    level: usize,
    input_side: usize,
) -> Result<Var> {
    let grid = input_side / cfg.patch;
    let n = g.value(tokens).rows();
    if n != grid * grid + 1 {
        return Err(MuseError::arg(format!(
            "level {level} has {n} tokens, expected {} for side {input_side}",
            grid * grid + 1
        )));
    }
    let body = g.slice_rows(tokens, 1, grid * grid)?;
    let proj = linear(g, pv, &format!("reassemble.{level}"), body)?;
    let out = input_side / cfg.strides[level];
    if out == grid {
        return Ok(proj);
    }
    g.gather(proj, Arc::new(resize_map(grid, grid, out, out)))
}

fn residual_unit(g: &mut Graph, pv: &ParamVars, level: usize, x: Var, side: usize) -> Result<Var> {
    let y = g.gelu(x);
    let y = conv3(g, pv, &format!("decoder.{level}.conv1"), y, side)?;
    let y = g.gelu(y);
    let y = conv3(g, pv, &format!("decoder.{level}.conv2"), y, side)?;
    g.add(x, y)
}

/// Top-down fusion of reassembled maps (finest first, sides `sides`).
pub fn decode_graph(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, maps: &[Var], sides: &[usize]) -> Result<Var> {
    if maps.len() != cfg.levels || sides.len() != cfg.levels {
        return Err(MuseError::arg("decode needs one map per level"));
    }
    if sides.windows(2).any(|w| w[0] <= w[1]) {
        return Err(MuseError::config(format!(
            "decoder stride chain not monotone: map sides {sides:?}"
        )));
    }
    let mut fused: Vec<Option<Var>> = vec![None; cfg.levels];
    let mut carry: Option<(Var, usize)> = None;
    for l in (0..cfg.levels).rev() {
        let mut x = maps[l];
        if let Some((prev, ps)) = carry {
            let up = g.gather(prev, Arc::new(resize_map(ps, ps, sides[l], sides[l])))?;
            x = g.add(x, up)?;
        }
        let y = residual_unit(g, pv, l, x, sides[l])?;
        fused[l] = Some(y);
        carry = Some((y, sides[l]));
    }
    let fine = sides[0];
    let mut outs = Vec::with_capacity(cfg.levels);
    for (l, f) in fused.into_iter().enumerate() {
        let o = linear(g, pv, &format!("decoder.{l}.out"), f.expect("level decoded"))?;
        let o = if sides[l] == fine {
            o
        } else {
            g.gather(o, Arc::new(resize_map(sides[l], sides[l], fine, fine)))?
        };
        outs.push(o);
    }
    g.concat_cols(&outs)
}

pub fn forward_graph(g: &mut Graph, pv: &ParamVars, cfg: &ModelConfig, image: &Tensor) -> Result<BundleVars> {
    cfg.check_input(image.shape().get(1).copied().unwrap_or(0))?;
    let side = image.shape()[1];
    let enc = encode_graph(g, pv, cfg, image)?;
    let mut maps = Vec::with_capacity(cfg.levels);
    let mut sides = Vec::with_capacity(cfg.levels);
    for (l, &t) in enc.levels.iter().enumerate() {
        maps.push(reassemble_graph(g, pv, cfg, t, l, side)?);
        sides.push(side / cfg.strides[l]);
    }
    let fmap = decode_graph(g, pv, cfg, &maps, &sides)?;
    Ok(BundleVars {
        cls: enc.cls,
        fmap,
        fside: sides[0],
        stride: cfg.finest_stride() as f64,
    })
}

/// Projection head; returns `(bottleneck, logits)`.
pub fn proj_head_graph(g: &mut Graph, pv: &ParamVars, name: &str, x: Var) -> Result<(Var, Var)> {
    let h = linear(g, pv, &format!("{name}.fc1"), x)?;
    let h = g.gelu(h);
    let h = linear(g, pv, &format!("{name}.fc2"), h)?;
    let h = g.gelu(h);
    let z = linear(g, pv, &format!("{name}.fc3"), h)?;
    let z = g.l2_normalize_rows(z);
    let proto = g.l2_normalize_rows(pv.get(&format!("{name}.proto.w"))?);
    let logits = g.matmul_t(z, proto, false, true)?;
    Ok((z, logits))
}

/// Sample `fmap` rows at view-pixel points.
pub fn sample_points_graph(g: &mut Graph, b: &BundleVars, points: &[(f64, f64)]) -> Result<Var> {
    let m = point_map(b.fside, b.fside, b.stride, points)?;
    g.gather(b.fmap, Arc::new(m))
}

/// Offset (`[n, 2]`, pixels) and type-logit (`[n, K+1]`) heads over every `f_map` cell.
pub fn point_heads_graph(g: &mut Graph, pv: &ParamVars, fmap: Var, fside: usize) -> Result<(Var, Var)> {
    let reg = conv3(g, pv, "point.reg.conv", fmap, fside)?;
    let reg = g.gelu(reg);
    let reg = linear(g, pv, "point.reg.out", reg)?;
    let ty = conv3(g, pv, "point.type.conv", fmap, fside)?;
    let ty = g.gelu(ty);
    let ty = linear(g, pv, "point.type.out", ty)?;
    Ok((reg, ty))
}

/// Pixel centre of `f_map` cell `k` (row-major).
pub fn anchor(k: usize, fside: usize, stride: f64) -> (f64, f64) {
    let (i, j) = (k / fside, k % fside);
    (stride * (j as f64 + 0.5), stride * (i as f64 + 0.5))
}

/// Image-level and dense representation of one input.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// `[dim]`.
    pub f_cls: Tensor,
    /// `[4 * c_f, H / s_min, W / s_min]`.
    pub f_map: Tensor,
    pub stride: f64,
}

pub fn encode(params: &Params, cfg: &ModelConfig, image: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
    cfg.check_input(image.shape().get(1).copied().unwrap_or(0))?;
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let enc = encode_graph(&mut g, &pv, cfg, image)?;
    let cls = g.value(enc.cls).clone().reshape(&[cfg.dim])?;
    let levels = enc.levels.iter().map(|&v| g.value(v).clone()).collect();
    Ok((cls, levels))
}

pub fn reassemble(params: &Params, cfg: &ModelConfig, tokens: &Tensor, level: usize, input_side: usize) -> Result<Tensor> {
    if level >= cfg.levels {
        return Err(MuseError::arg(format!("level {level} out of range")));
    }
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let t = g.constant(tokens.clone());
    let out = reassemble_graph(&mut g, &pv, cfg, t, level, input_side)?;
    let side = input_side / cfg.strides[level];
    Ok(g.value(out).hwc_to_chw(side, side))
}

/// Decode `[c_d, h_l, w_l]` maps (finest first) into `f_map`.
pub fn decode(params: &Params, cfg: &ModelConfig, maps: &[Tensor]) -> Result<Tensor> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let sides: Vec<usize> = maps.iter().map(|m| m.shape()[1]).collect();
    let vars: Vec<Var> = maps.iter().map(|m| g.constant(m.chw_to_hwc())).collect();
    let out = decode_graph(&mut g, &pv, cfg, &vars, &sides)?;
    Ok(g.value(out).hwc_to_chw(sides[0], sides[0]))
}

pub fn forward_bundle(params: &Params, cfg: &ModelConfig, image: &Tensor) -> Result<FeatureBundle> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let b = forward_graph(&mut g, &pv, cfg, image)?;
    Ok(FeatureBundle {
        f_cls: g.value(b.cls).clone().reshape(&[cfg.dim])?,
        f_map: g.value(b.fmap).hwc_to_chw(b.fside, b.fside),
        stride: b.stride,
    })
}

fn head_values(params: &Params, name: &str, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let xv = g.constant(Tensor::new(vec![1, x.len()], x.to_vec())?);
    let (z, l) = proj_head_graph(&mut g, &pv, name, xv)?;
    Ok((g.value(z).data().to_vec(), g.value(l).data().to_vec()))
}

pub fn head_cls(params: &Params, f_cls: &[f64]) -> Result<Vec<f64>> {
    Ok(head_values(params, "head_cls", f_cls)?.1)
}

pub fn head_nu(params: &Params, f_c: &[f64]) -> Result<Vec<f64>> {
    Ok(head_values(params, "head_nu", f_c)?.1)
}

/// L2-normalized bottleneck of a projection head (`"head_cls"` or `"head_nu"`).
pub fn head_bottleneck(params: &Params, name: &str, x: &[f64]) -> Result<Vec<f64>> {
    Ok(head_values(params, name, x)?.0)
}

/// Offsets `[2, Hf, Wf]` and type logits `[K+1, Hf, Wf]` for a `[C, Hf, Wf]` map.
pub fn heads_point(params: &Params, f_map: &Tensor) -> Result<(Tensor, Tensor)> {
    let side = f_map.shape()[1];
    let mut g = Graph::new();
    let pv = ParamVars::bind(&mut g, params, false);
    let fm = g.constant(f_map.chw_to_hwc());
    let (r, t) = point_heads_graph(&mut g, &pv, fm, side)?;
    Ok((g.value(r).hwc_to_chw(side, side), g.value(t).hwc_to_chw(side, side)))
}

pub fn param_count(params: &Params) -> usize {
    params.num_scalars()
}
