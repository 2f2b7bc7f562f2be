//! Value-level primitives shared by the model, the losses and the tests.

use super::tensor::Tensor;
use crate::error::{MuseError, Result};

/// Clamp applied to `q` before the logarithm in [`cross_entropy`].
pub const CE_LOG_EPS: f64 = 1e-12;

/// Tempered softmax `exp(z_k / tau) / sum_j exp(z_j / tau)`.
pub fn softmax_t(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(MuseError::arg(format!("softmax temperature must be > 0, got {tau}")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(MuseError::NonFinite("softmax logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let s: f64 = out.iter().sum();
    for v in &mut out {
        *v /= s;
    }
    Ok(out)
}

/// `-sum_k p_k ln max(q_k, eps)`.
pub fn cross_entropy(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(MuseError::arg(format!(
            "cross_entropy length mismatch {} vs {}",
            p.len(),
            q.len()
        )));
    }
    for (name, v) in [("p", p), ("q", q)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(MuseError::arg(format!("{name} sums to {s}, expected 1")));
        }
    }
    Ok(-p
        .iter()
        .zip(q)
        .map(|(&pk, &qk)| if pk == 0.0 { 0.0 } else { pk * qk.max(CE_LOG_EPS).ln() })
        .sum::<f64>())
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

/// Cell lookup for a point on a `h x w` grid whose cell `(i, j)` is centred at
/// `(stride * (j + 0.5), stride * (i + 0.5))`. Returns `(i0, i1, fy, j0, j1, fx)`.
/// Points between the border centres and the map edge clamp to the border.
#[inline]
pub(crate) fn cell_coords(h: usize, w: usize, x: f64, y: f64, stride: f64) -> (usize, usize, f64, usize, usize, f64) {
    let axis = |v: f64, n: usize| {
        let c = (v / stride - 0.5).clamp(0.0, (n - 1) as f64);
        let k0 = (c.floor() as usize).min(n - 1);
        let k1 = (k0 + 1).min(n - 1);
        (k0, k1, c - k0 as f64)
    };
    let (j0, j1, fx) = axis(x, w);
    let (i0, i1, fy) = axis(y, h);
    (i0, i1, fy, j0, j1, fx)
}

/// Flat indices and weights of the (up to) four cells blended at `(x, y)`.
pub fn bilinear_weights(h: usize, w: usize, x: f64, y: f64, stride: f64) -> Result<[(usize, f64); 4]> {
    check_query(h, w, x, y, stride)?;
    let (i0, i1, fy, j0, j1, fx) = cell_coords(h, w, x, y, stride);
    Ok([
        (i0 * w + j0, (1.0 - fy) * (1.0 - fx)),
        (i0 * w + j1, (1.0 - fy) * fx),
        (i1 * w + j0, fy * (1.0 - fx)),
        (i1 * w + j1, fy * fx),
    ])
}

fn check_query(h: usize, w: usize, x: f64, y: f64, stride: f64) -> Result<()> {
    if !(stride > 0.0) {
        return Err(MuseError::arg(format!("stride must be > 0, got {stride}")));
    }
    if h == 0 || w == 0 {
        return Err(MuseError::arg("empty feature map"));
    }
    let (xmax, ymax) = (w as f64 * stride, h as f64 * stride);
    if !(0.0..=xmax).contains(&x) || !(0.0..=ymax).contains(&y) {
        return Err(MuseError::arg(format!(
            "query ({x}, {y}) outside map extent {xmax} x {ymax}"
        )));
    }
    Ok(())
}

/// Sample every channel of a `[C, H, W]` map at view-pixel position `(x, y)`.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64, stride: f64) -> Result<Tensor> {
    if map.shape().len() != 3 {
        return Err(MuseError::arg(format!("expected [C,H,W] map, got {:?}", map.shape())));
    }
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    check_query(h, w, x, y, stride)?;
    let (i0, i1, fy, j0, j1, fx) = cell_coords(h, w, x, y, stride);
    let d = map.data();
    let out = (0..c)
        .map(|ch| {
            let base = ch * h * w;
            let v00 = d[base + i0 * w + j0];
            let v01 = d[base + i0 * w + j1];
            let v10 = d[base + i1 * w + j0];
            let v11 = d[base + i1 * w + j1];
            let top = v00 + fx * (v01 - v00);
            let bot = v10 + fx * (v11 - v10);
            top + fy * (bot - top)
        })
        .collect();
    Ok(Tensor::from_vec(out))
}

/// Source-pixel position of output pixel centre `k` when resizing `n_in -> n_out`.
#[inline]
pub(crate) fn resize_src(k: usize, n_in: usize, n_out: usize) -> f64 {
    (k as f64 + 0.5) * n_in as f64 / n_out as f64
}

/// Bilinear resize of a `[C, H, W]` image under the cell-centre convention.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if image.shape().len() != 3 {
        return Err(MuseError::arg(format!("expected [C,H,W] image, got {:?}", image.shape())));
    }
    if out_h == 0 || out_w == 0 {
        return Err(MuseError::arg(format!("output size must be positive, got {out_h}x{out_w}")));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let cols: Vec<_> = (0..out_w)
        .map(|j| {
            let (_, _, _, j0, j1, fx) = cell_coords(1, w, resize_src(j, w, out_w), 0.5, 1.0);
            (j0, j1, fx)
        })
        .collect();
    let d = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let base = ch * h * w;
        for i in 0..out_h {
            let (i0, i1, fy, _, _, _) = cell_coords(h, 1, 0.5, resize_src(i, h, out_h), 1.0);
            for &(j0, j1, fx) in &cols {
                let v00 = d[base + i0 * w + j0];
                let v01 = d[base + i0 * w + j1];
                let v10 = d[base + i1 * w + j0];
                let v11 = d[base + i1 * w + j1];
                let top = v00 + fx * (v01 - v00);
                let bot = v10 + fx * (v11 - v10);
                out.push(top + fy * (bot - top));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// `m * target + (1 - m) * source`.
pub fn ema_update(target: &Tensor, source: &Tensor, m: f64) -> Result<Tensor> {
    target.check_same_shape(source, "ema_update")?;
    if !(0.0..=1.0).contains(&m) {
        return Err(MuseError::arg(format!("EMA momentum must be in [0,1], got {m}")));
    }
    if m == 0.0 {
        return Ok(source.clone());
    }
    if m == 1.0 {
        return Ok(target.clone());
    }
    let data = target
        .data()
        .iter()
        .zip(source.data())
        .map(|(&t, &s)| m * t + (1.0 - m) * s)
        .collect();
    Tensor::new(target.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_sharp() {
        let p = softmax_t(&[0.0; 4], 1.0).unwrap();
        assert!(p.iter().all(|&v| v == 0.25));
        let p = softmax_t(&[5.0, 1.0], 0.01).unwrap();
        assert!(p[0] >= 0.999);
        let p = softmax_t(&[1.0, 2.0], 1.0).unwrap();
        // 1 / (1 + e)
        assert!((p[0] - 0.268_941_421_369_995_1).abs() < 1e-4);
        assert!((p[1] - 0.731_058_578_630_004_9).abs() < 1e-4);
        assert!(softmax_t(&[1.0], 0.0).is_err());
        assert!(softmax_t(&[1.0], -1.0).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let one_hot = [0.0, 1.0, 0.0];
        assert_eq!(cross_entropy(&one_hot, &one_hot).unwrap(), 0.0);
        let u = [0.25; 4];
        assert!((cross_entropy(&u, &u).unwrap() - 4f64.ln()).abs() < 1e-3);
        let p = [0.0, 0.0, 1.0, 0.0, 0.0];
        let q = [0.2; 5];
        assert!((cross_entropy(&p, &q).unwrap() - 5f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn cross_entropy_clamps_zero_q() {
        let v = cross_entropy(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - 0.5 * -(CE_LOG_EPS.ln())).abs() < 1e-9);
    }

    #[test]
    fn bilinear_midpoint_and_center() {
        let m = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&m, 1.0, 1.0, 1.0).unwrap().data()[0], 2.5);
        assert_eq!(bilinear_sample(&m, 0.5, 0.5, 1.0).unwrap().data()[0], 1.0);
        assert_eq!(bilinear_sample(&m, 1.5, 1.5, 1.0).unwrap().data()[0], 4.0);
        // border clamp
        assert_eq!(bilinear_sample(&m, 0.0, 0.0, 1.0).unwrap().data()[0], 1.0);
        assert!(bilinear_sample(&m, 0.5, 0.5, 0.0).is_err());
        assert!(bilinear_sample(&m, 2.5, 0.5, 1.0).is_err());
    }

    #[test]
    fn bilinear_weights_sum_to_one() {
        let w = bilinear_weights(3, 5, 7.3, 2.2, 2.0).unwrap();
        let s: f64 = w.iter().map(|p| p.1).sum();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Tensor::new(vec![2, 3, 2], (0..12).map(|v| v as f64 * 0.37).collect()).unwrap();
        assert_eq!(resize_bilinear(&img, 3, 2).unwrap(), img);
        let c = Tensor::full(&[3, 4, 5], 7.0);
        for (h, w) in [(1, 1), (9, 2), (13, 17)] {
            let r = resize_bilinear(&c, h, w).unwrap();
            assert!(r.data().iter().all(|&v| v == 7.0));
        }
        assert!(resize_bilinear(&img, 0, 3).is_err());
    }

    #[test]
    fn resize_upsample_matches_point_sampling() {
        let img = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = resize_bilinear(&img, 4, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let s = bilinear_sample(&img, j as f64 + 0.5, i as f64 + 0.5, 2.0).unwrap();
                assert!((up.at3(0, i, j) - s.data()[0]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ema_boundaries() {
        let t = Tensor::from_vec(vec![0.1, -3.0, 7.25]);
        let s = Tensor::from_vec(vec![2.0, 0.3, 1e-7]);
        assert_eq!(ema_update(&t, &s, 0.0).unwrap(), s);
        assert_eq!(ema_update(&t, &s, 1.0).unwrap(), t);
        let r = ema_update(&Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![2.0]), 0.5).unwrap();
        assert_eq!(r.data()[0], 1.0);
        assert!(ema_update(&t, &Tensor::from_vec(vec![1.0]), 0.5).is_err());
    }
}
