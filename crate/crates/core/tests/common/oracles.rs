//! Independent reference evaluations used by the integration and
//! acceptance tests. Everything here is written with plain loops and
//! shares no code with the library routines it checks.
#![allow(dead_code, clippy::needless_range_loop)]

use std::collections::BTreeSet;

use muse_core::finetune::{Detection, LfovSample};
use muse_core::model::Params;
use muse_core::sampler::View;
use muse_core::synth::{NucleusRecord, RoiPatch};

/// Linear interpolation along one axis with centres at `k + 0.5`, clamped
/// to the first and last centre.
fn lerp_axis(values: &[f64], pos: f64) -> f64 {
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let t = (pos - 0.5).clamp(0.0, (n - 1) as f64);
    let k = (t.floor() as usize).min(n - 2);
    let f = t - k as f64;
    values[k] * (1.0 - f) + values[k + 1] * f
}

/// Separable `factor`x upsampling of a `[C, H, W]` map: first along x for
/// every row, then along y for every column. Dense pixel `(i, j)` sits at
/// `((j + 0.5) / factor, (i + 0.5) / factor)` in map cells.
pub fn dense_upsample(map: &[f64], c: usize, h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (hd, wd) = (h * factor, w * factor);
    let mut out = vec![0.0; c * hd * wd];
    for ch in 0..c {
        let mut rows = vec![vec![0.0; wd]; h];
        for i in 0..h {
            let src = &map[(ch * h + i) * w..(ch * h + i + 1) * w];
            for j in 0..wd {
                rows[i][j] = lerp_axis(src, (j as f64 + 0.5) / factor as f64);
            }
        }
        for j in 0..wd {
            let col: Vec<f64> = (0..h).map(|i| rows[i][j]).collect();
            for i in 0..hd {
                out[(ch * hd + i) * wd + j] = lerp_axis(&col, (i as f64 + 0.5) / factor as f64);
            }
        }
    }
    out
}

pub fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x * x * x)).tanh())
}

pub fn softmax(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| ((v - m) / tau).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `-sum p log q`.
pub fn ce(p: &[f64], q: &[f64]) -> f64 {
    -p.iter().zip(q).map(|(a, b)| a * b.ln()).sum::<f64>()
}

/// `log softmax(z)` evaluated as `z - logsumexp(z)`.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

fn dense(params: &Params, name: &str, x: &[f64]) -> Vec<f64> {
    let w = params.get(&format!("{name}.w")).unwrap();
    let b = params.get(&format!("{name}.b")).unwrap();
    let (i, o) = (w.shape()[0], w.shape()[1]);
    assert_eq!(i, x.len());
    (0..o)
        .map(|k| b.data()[k] + (0..i).map(|r| x[r] * w.data()[r * o + k]).sum::<f64>())
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    v.iter().map(|a| a / n).collect()
}

/// Projection-head logits: three dense layers with GELU between, then cosine
/// against every prototype.
pub fn head_logits(params: &Params, name: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = dense(params, &format!("{name}.fc1"), x).into_iter().map(gelu).collect();
    let h: Vec<f64> = dense(params, &format!("{name}.fc2"), &h).into_iter().map(gelu).collect();
    let z = unit(&dense(params, &format!("{name}.fc3"), &h));
    let proto = params.get(&format!("{name}.proto.w")).unwrap();
    let d = proto.shape()[1];
    proto
        .data()
        .chunks(d)
        .map(|p| unit(p).iter().zip(&z).map(|(a, b)| a * b).sum())
        .collect()
}

/// Minimum-cost assignment with the largest number of pairs within `radius`,
/// by enumerating every injective map from the smaller side into the larger.
/// Returns `(pairs, total distance)`.
pub fn brute_match(pred: &[(f64, f64)], gt: &[(f64, f64)], radius: f64) -> (usize, f64) {
    let dist = |a: (f64, f64), b: (f64, f64)| ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
    let (small, large) = if pred.len() <= gt.len() { (pred, gt) } else { (gt, pred) };
    let mut best = (0usize, 0.0f64);
    let mut used = vec![false; large.len()];
    #[allow(clippy::too_many_arguments)]
    fn rec(
        i: usize,
        small: &[(f64, f64)],
        large: &[(f64, f64)],
        used: &mut Vec<bool>,
        acc: (usize, f64),
        best: &mut (usize, f64),
        radius: f64,
        dist: &dyn Fn((f64, f64), (f64, f64)) -> f64,
    ) {
        if i == small.len() {
            if acc.0 > best.0 || (acc.0 == best.0 && acc.1 < best.1) {
                *best = acc;
            }
            return;
        }
        rec(i + 1, small, large, used, acc, best, radius, dist);
        for j in 0..large.len() {
            if used[j] {
                continue;
            }
            let d = dist(small[i], large[j]);
            if d <= radius {
                used[j] = true;
                rec(i + 1, small, large, used, (acc.0 + 1, acc.1 + d), best, radius, dist);
                used[j] = false;
            }
        }
    }
    rec(0, small, large, &mut used, (0, 0.0), &mut best, radius, &dist);
    best
}

/// Per-class F1 with brute-force maximum matching; detections use classes
/// `1..=n`, ground truth `0..n`.
pub fn brute_f1(pred: &[Detection], gt: &[NucleusRecord], radius: f64, n_classes: usize) -> (Vec<f64>, f64) {
    let per: Vec<f64> = (0..n_classes)
        .map(|c| {
            let p: Vec<(f64, f64)> = pred.iter().filter(|d| d.class_id == c + 1).map(|d| (d.x, d.y)).collect();
            let g: Vec<(f64, f64)> = gt.iter().filter(|n| n.class_id == c).map(|n| (n.x, n.y)).collect();
            if p.is_empty() && g.is_empty() {
                return 1.0;
            }
            let tp = brute_match(&p, &g, radius).0 as f64;
            let precision = if p.is_empty() { 0.0 } else { tp / p.len() as f64 };
            let recall = if g.is_empty() { 0.0 } else { tp / g.len() as f64 };
            if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            }
        })
        .collect();
    let avg = per.iter().sum::<f64>() / n_classes as f64;
    (per, avg)
}

/// Among all conflict-free subsets, the one whose membership vector (in
/// descending score order, ties by position) is lexicographically largest.
pub fn brute_suppress(cands: &[Detection], radius: f64) -> Vec<Detection> {
    let n = cands.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cands[b].score.partial_cmp(&cands[a].score).unwrap().then(a.cmp(&b)));
    let mut best: Option<Vec<bool>> = None;
    for mask in 0u32..(1 << n) {
        let chosen: Vec<usize> = (0..n).filter(|&i| mask & (1 << i) != 0).collect();
        let ok = chosen.iter().all(|&a| {
            chosen
                .iter()
                .all(|&b| a == b || ((cands[a].x - cands[b].x).powi(2) + (cands[a].y - cands[b].y).powi(2)).sqrt() > radius)
        });
        if !ok {
            continue;
        }
        let key: Vec<bool> = order.iter().map(|&i| mask & (1 << i) != 0).collect();
        if best.as_ref().is_none_or(|b| key > *b) {
            best = Some(key);
        }
    }
    let key = best.unwrap_or_default();
    order
        .iter()
        .zip(key)
        .filter(|(_, k)| *k)
        .map(|(&i, _)| cands[i].clone())
        .collect()
}

/// Exhaustive cosine-similarity kNN with `exp(sim / t)` votes (or plain
/// counts); neighbours ordered by similarity then train position.
pub fn knn_ref(train: &[Vec<f64>], labels: &[usize], test: &[f64], k: usize, t: f64, majority: bool) -> usize {
    let cos = |a: &[f64], b: &[f64]| {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        d / (na * nb).max(1e-12)
    };
    let mut sims: Vec<(f64, usize)> = train.iter().enumerate().map(|(i, r)| (cos(test, r), i)).collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let n_classes = labels.iter().max().unwrap() + 1;
    let mut votes = vec![0.0; n_classes];
    for &(s, i) in sims.iter().take(k) {
        votes[labels[i]] += if majority { 1.0 } else { (s / t).exp() };
    }
    let mut best = 0;
    for c in 1..n_classes {
        if votes[c] > votes[best] {
            best = c;
        }
    }
    best
}

/// Nucleus indices whose source position lies in the view's source rectangle.
pub fn survivors(roi: &RoiPatch, view: &View) -> BTreeSet<usize> {
    let (u, v, s) = (view.crop.u, view.crop.v, view.crop.side as f64);
    roi.nuclei
        .iter()
        .enumerate()
        .filter(|(_, n)| n.x >= u && n.x < u + s && n.y >= v && n.y < v + s)
        .map(|(i, _)| i)
        .collect()
}

/// Shared nuclei of two views as a set intersection of their survivors.
pub fn k_cap(roi: &RoiPatch, a: &View, b: &View) -> BTreeSet<usize> {
    survivors(roi, a).intersection(&survivors(roi, b)).copied().collect()
}

/// Source-frame position of a view pixel, undoing flips then scaling.
pub fn back_project(view: &View, x: f64, y: f64) -> (f64, f64) {
    let r = view.crop.r_o as f64;
    let s = view.crop.side as f64 / r;
    let x = if view.flip_h { r - x } else { x };
    let y = if view.flip_v { r - y } else { y };
    (view.crop.u + s * x, view.crop.v + s * y)
}

/// The fine-tuning objective for head outputs given as plain arrays.
/// `offsets[k] = (dx, dy)` and `logits[k]` for cell `k` of an `fside` grid.
#[allow(clippy::too_many_arguments)]
pub fn ft_objective(
    offsets: &[(f64, f64)],
    logits: &[Vec<f64>],
    fside: usize,
    stride: f64,
    sample: &LfovSample,
    radius: f64,
    theta: f64,
    bg_weight: f64,
    lambdas: (f64, f64, f64),
) -> (f64, f64, f64, f64) {
    let (x0, y0, s) = (sample.omega.0 as f64, sample.omega.1 as f64, sample.omega.2 as f64);
    let decoded: Vec<(f64, f64)> = (0..fside * fside)
        .map(|k| {
            let (i, j) = (k / fside, k % fside);
            (stride * (j as f64 + 0.5) + offsets[k].0, stride * (i as f64 + 0.5) + offsets[k].1)
        })
        .collect();
    let inside = |p: (f64, f64)| p.0 >= x0 && p.0 < x0 + s && p.1 >= y0 && p.1 < y0 + s;
    let omega: Vec<usize> = (0..decoded.len()).filter(|&k| inside(decoded[k])).collect();
    let outside: Vec<usize> = (0..decoded.len()).filter(|&k| !inside(decoded[k])).collect();
    let gt: Vec<(f64, f64)> = sample.nuclei.iter().map(|n| (n.x, n.y)).collect();

    // Best assignment of Ω proposals to ground truth, enumerated.
    let props: Vec<(f64, f64)> = omega.iter().map(|&k| decoded[k]).collect();
    let mut best: (usize, f64, Vec<(usize, usize)>) = (0, 0.0, vec![]);
    #[allow(clippy::too_many_arguments)]
    fn rec(
        i: usize,
        props: &[(f64, f64)],
        gt: &[(f64, f64)],
        used: &mut Vec<bool>,
        cur: &mut Vec<(usize, usize)>,
        cost: f64,
        radius: f64,
        best: &mut (usize, f64, Vec<(usize, usize)>),
    ) {
        if i == props.len() {
            if cur.len() > best.0 || (cur.len() == best.0 && cost < best.1) {
                *best = (cur.len(), cost, cur.clone());
            }
            return;
        }
        rec(i + 1, props, gt, used, cur, cost, radius, best);
        for g in 0..gt.len() {
            let d = ((props[i].0 - gt[g].0).powi(2) + (props[i].1 - gt[g].1).powi(2)).sqrt();
            if !used[g] && d <= radius {
                used[g] = true;
                cur.push((i, g));
                rec(i + 1, props, gt, used, cur, cost + d, radius, best);
                cur.pop();
                used[g] = false;
            }
        }
    }
    rec(0, &props, &gt, &mut vec![false; gt.len()], &mut vec![], 0.0, radius, &mut best);
    let matched = best.2;

    let l_reg = if matched.is_empty() {
        0.0
    } else {
        matched
            .iter()
            .map(|&(p, g)| (props[p].0 - gt[g].0).powi(2) + (props[p].1 - gt[g].1).powi(2))
            .sum::<f64>()
            / matched.len() as f64
    };
    // Unmatched Ω proposals count with weight `bg_weight`, matched ones with 1.
    let mut num = 0.0;
    let mut den = 0.0;
    for (p, &k) in omega.iter().enumerate() {
        let target = matched
            .iter()
            .find(|m| m.0 == p)
            .map_or(0, |m| sample.nuclei[m.1].class_id + 1);
        let w = if target == 0 { bg_weight } else { 1.0 };
        num += w * -log_softmax(&logits[k])[target];
        den += w;
    }
    let l_type = if omega.is_empty() { 0.0 } else { num / den };
    let mut cons = Vec::new();
    for &k in &outside {
        let p = softmax(&logits[k], 1.0);
        let (mut c, mut conf) = (0, p[0]);
        for (i, &v) in p.iter().enumerate() {
            if v > conf {
                c = i;
                conf = v;
            }
        }
        if conf >= theta {
            cons.push(-log_softmax(&logits[k])[c]);
        }
    }
    let l_cons = if cons.is_empty() { 0.0 } else { cons.iter().sum::<f64>() / cons.len() as f64 };
    (l_reg, l_type, l_cons, lambdas.0 * l_reg + lambdas.1 * l_type + lambdas.2 * l_cons)
}
