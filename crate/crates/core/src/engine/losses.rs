//! Image losses with adjoints, and evaluation metrics.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::Vec3;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const PSNR_CAP: f64 = 99.0;

/// A scalar loss and its gradient w.r.t. the prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Image,
}

fn check_pair(pred: &Image, target: &Image, mask: &[bool]) -> Result<()> {
    pred.check_shape(target, "loss target")?;
    if mask.len() != pred.pixel_count() {
        return Err(Error::arg(format!(
            "mask has {} entries for {} pixels",
            mask.len(),
            pred.pixel_count()
        )));
    }
    Ok(())
}

/// Mean of `(pred - target)²` over masked pixels and all channels.
pub fn loss_mse(pred: &Image, target: &Image, mask: &[bool]) -> Result<LossValue> {
    check_pair(pred, target, mask)?;
    let c = pred.channels;
    let mut grad = Image::new(pred.width, pred.height, c);
    let count = mask.iter().filter(|&&m| m).count() * c;
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let inv = 1.0 / count as f64;
    let mut value = 0.0;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for k in p * c..(p + 1) * c {
            let d = pred.data[k] - target.data[k];
            value += d * d;
            grad.data[k] = 2.0 * d * inv;
        }
    }
    Ok(LossValue { value: value * inv, grad })
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable windowed sum over every full window; output indexed by the
/// window's top-left corner, `(w - 10) x (h - 10)`.
fn filter(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter`].
fn filter_transpose(src: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = src[y * ow + x];
            if v != 0.0 {
                for i in 0..SSIM_WINDOW {
                    rows[(y + i) * ow + x] += k[i] * v;
                }
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = rows[y * ow + x];
            if v != 0.0 {
                for i in 0..SSIM_WINDOW {
                    out[y * w + x + i] += k[i] * v;
                }
            }
        }
    }
    out
}

/// Windows lying entirely inside the mask, indexed like [`filter`] output.
fn valid_windows(mask: &[bool], w: usize, h: usize) -> Vec<bool> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![false; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = mask[y * w + x..y * w + x + SSIM_WINDOW].iter().all(|&m| m);
        }
    }
    (0..ow * oh)
        .map(|i| {
            let (x, y) = (i % ow, i / ow);
            (0..SSIM_WINDOW).all(|d| rows[(y + d) * ow + x])
        })
        .collect()
}

/// Mean SSIM over channels and masked windows, optionally with its gradient
/// w.r.t. `pred`. Returns 1 when no window fits inside the mask.
fn ssim_impl(pred: &Image, target: &Image, mask: &[bool], want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_pair(pred, target, mask)?;
    let (w, h, c) = (pred.width, pred.height, pred.channels);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::arg(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}")));
    }
    let k = gaussian_kernel();
    let valid = valid_windows(mask, w, h);
    let count = valid.iter().filter(|&&v| v).count();
    let mut grad = want_grad.then(|| Image::new(w, h, c));
    if count == 0 {
        return Ok((1.0, grad));
    }
    let scale = 1.0 / (count * c) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..w * h).map(|p| pred.data[p * c + ch]).collect();
        let y: Vec<f64> = (0..w * h).map(|p| target.data[p * c + ch]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let (mx, my) = (filter(&x, w, h, &k), filter(&y, w, h, &k));
        let (sxx, syy, sxy) = (filter(&xx, w, h, &k), filter(&yy, w, h, &k), filter(&xy, w, h, &k));
        let n = mx.len();
        let (mut ga, mut gb, mut gc) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            if !valid[i] {
                continue;
            }
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                let bb = b1 * b2;
                ga[i] = 2.0 * uy * a2 / bb - 2.0 * a1 * uy / bb - 2.0 * s * ux / b1 + 2.0 * s * ux / b2;
                gb[i] = 2.0 * a1 / bb;
                gc[i] = -2.0 * s / b2;
            }
        }
        if let Some(g) = grad.as_mut() {
            let ta = filter_transpose(&ga, w, h, &k);
            let tb = filter_transpose(&gb, w, h, &k);
            let tc = filter_transpose(&gc, w, h, &k);
            for p in 0..w * h {
                g.data[p * c + ch] = (ta[p] + tb[p] * y[p] + tc[p] * x[p]) * scale;
            }
        }
    }
    Ok((total * scale, grad))
}

/// Structural similarity (11x11 Gaussian window, σ = 1.5) restricted to
/// windows fully inside `mask`.
pub fn ssim(pred: &Image, target: &Image, mask: &[bool]) -> Result<f64> {
    Ok(ssim_impl(pred, target, mask, false)?.0)
}

/// `1 - SSIM` and its gradient.
pub fn loss_ssim(pred: &Image, target: &Image, mask: &[bool]) -> Result<LossValue> {
    let (s, g) = ssim_impl(pred, target, mask, true)?;
    let mut grad = g.expect("requested");
    for v in &mut grad.data {
        *v = -*v;
    }
    Ok(LossValue { value: 1.0 - s, grad })
}

/// `w_mse·MSE + w_ssim·(1 - SSIM)` on images clamped to `[0, 1]`. The
/// gradient is zero where the prediction was clamped. SSIM is skipped when
/// its weight is zero.
pub fn image_loss(pred: &Image, target: &Image, mask: &[bool], w_mse: f64, w_ssim: f64) -> Result<LossValue> {
    let p = pred.map(|v| v.clamp(0.0, 1.0));
    let t = target.map(|v| v.clamp(0.0, 1.0));
    let mut out = loss_mse(&p, &t, mask)?;
    out.value *= w_mse;
    for g in &mut out.grad.data {
        *g *= w_mse;
    }
    if w_ssim != 0.0 {
        let s = loss_ssim(&p, &t, mask)?;
        out.value += w_ssim * s.value;
        for (g, sg) in out.grad.data.iter_mut().zip(&s.grad.data) {
            *g += w_ssim * sg;
        }
    }
    for (g, v) in out.grad.data.iter_mut().zip(&pred.data) {
        if !(0.0..=1.0).contains(v) {
            *g = 0.0;
        }
    }
    Ok(out)
}

fn masked_mse(pred: &Image, target: &Image, mask: &[bool], scale: &[f64]) -> Result<f64> {
    let c = pred.channels;
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for ch in 0..c {
            let d = scale[ch] * pred.data[p * c + ch] - target.data[p * c + ch];
            sum += d * d;
        }
        count += c;
    }
    if count == 0 {
        return Err(Error::arg("metric over an empty mask"));
    }
    Ok(sum / count as f64)
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse < 1e-10 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)` over the mask, capped at 99 dB.
pub fn metric_psnr(pred: &Image, target: &Image, mask: &[bool]) -> Result<f64> {
    check_pair(pred, target, mask)?;
    Ok(psnr_from_mse(masked_mse(pred, target, mask, &vec![1.0; pred.channels])?))
}

/// Per-channel least-squares scales `s_c = <p_c,t_c>/<p_c,p_c>` over the mask
/// (1 for an all-zero prediction channel).
pub fn channel_scales(pred: &Image, target: &Image, mask: &[bool]) -> Result<Vec<f64>> {
    check_pair(pred, target, mask)?;
    let c = pred.channels;
    let mut pt = vec![0.0; c];
    let mut pp = vec![0.0; c];
    for (p, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for ch in 0..c {
            let a = pred.data[p * c + ch];
            pt[ch] += a * target.data[p * c + ch];
            pp[ch] += a * a;
        }
    }
    Ok((0..c).map(|ch| if pp[ch] > 0.0 { pt[ch] / pp[ch] } else { 1.0 }).collect())
}

/// PSNR after per-channel scale alignment of `pred` to `target`.
pub fn metric_scale_aligned(pred: &Image, target: &Image, mask: &[bool]) -> Result<f64> {
    let s = channel_scales(pred, target, mask)?;
    Ok(psnr_from_mse(masked_mse(pred, target, mask, &s)?))
}

/// Mean angle in degrees between two normal maps over the mask.
pub fn metric_normal_degree(pred: &[Vec3], target: &[Vec3], mask: &[bool]) -> Result<f64> {
    if pred.len() != target.len() || mask.len() != pred.len() {
        return Err(Error::arg("normal maps and mask differ in size"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in (0..mask.len()).filter(|&p| mask[p]) {
        let (a, b) = (pred[p].norm(), target[p].norm());
        if a == 0.0 || b == 0.0 {
            return Err(Error::arg(format!("zero-length normal at masked pixel {p}")));
        }
        let c = (pred[p].dot(&target[p]) / (a * b)).clamp(-1.0, 1.0);
        sum += c.acos().to_degrees();
        count += 1;
    }
    if count == 0 {
        return Err(Error::arg("metric over an empty mask"));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h * c).map(|_| rng.random_range(0.05..0.95)).collect();
        Image::from_data(w, h, c, data).unwrap()
    }

    fn fd_check(f: impl Fn(&Image) -> f64, pred: &Image, grad: &Image, tol: f64) {
        let h = 1e-6;
        let floor = 1e-6 * grad.data.iter().fold(1.0f64, |m, g| m.max(g.abs()));
        let mut worst: f64 = 0.0;
        for k in (0..pred.data.len()).step_by(7) {
            let mut a = pred.clone();
            a.data[k] += h;
            let mut b = pred.clone();
            b.data[k] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let g = grad.data[k];
            worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(floor));
        }
        assert!(worst < tol, "max rel err {worst}");
    }

    #[test]
    fn mse_values() {
        let t = random_image(8, 8, 3, 1);
        let all = vec![true; 64];
        assert_eq!(loss_mse(&t, &t, &all).unwrap().value, 0.0);
        let p = t.map(|v| v + 0.1);
        assert!((loss_mse(&p, &t, &all).unwrap().value - 0.01).abs() < 1e-12);
        let none = vec![false; 64];
        let z = loss_mse(&p, &t, &none).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.grad.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn mse_adjoint() {
        let p = random_image(8, 8, 3, 2);
        let t = random_image(8, 8, 3, 3);
        let mask: Vec<bool> = (0..64).map(|i| i % 5 != 0).collect();
        let l = loss_mse(&p, &t, &mask).unwrap();
        fd_check(|q| loss_mse(q, &t, &mask).unwrap().value, &p, &l.grad, 1e-6);
    }

    #[test]
    fn ssim_identity_and_inversion() {
        let mut t = Image::new(32, 32, 1);
        for y in 0..32 {
            for x in 0..32 {
                t.data[y * 32 + x] = if (x / 4 + y / 4) % 2 == 0 { 0.95 } else { 0.05 };
            }
        }
        let all = vec![true; 1024];
        let l = loss_ssim(&t, &t, &all).unwrap();
        assert!(l.value.abs() < 1e-12);
        let inv = t.map(|v| 1.0 - v);
        assert!(ssim(&inv, &t, &all).unwrap() < 0.2);
        assert!(loss_ssim(&Image::new(8, 20, 1), &Image::new(8, 20, 1), &[true; 160]).is_err());
    }

    #[test]
    fn ssim_adjoint() {
        let p = random_image(32, 32, 3, 4);
        let t = random_image(32, 32, 3, 5);
        let mask: Vec<bool> = (0..1024).map(|i| !(i % 32 > 26 && i / 32 < 6)).collect();
        let l = loss_ssim(&p, &t, &mask).unwrap();
        fd_check(|q| loss_ssim(q, &t, &mask).unwrap().value, &p, &l.grad, 1e-4);
    }

    #[test]
    fn ssim_ignores_pixels_outside_full_windows() {
        let p = random_image(16, 16, 1, 6);
        let t = random_image(16, 16, 1, 7);
        let mask: Vec<bool> = (0..256).map(|i| i % 16 < 12).collect();
        let l = loss_ssim(&p, &t, &mask).unwrap();
        for y in 0..16 {
            for x in 12..16 {
                assert_eq!(l.grad.data[y * 16 + x], 0.0);
            }
        }
    }

    #[test]
    fn image_loss_clamps() {
        let t = random_image(12, 12, 3, 8);
        let mut p = t.clone();
        p.data[0] = 1.5;
        p.data[1] = -0.5;
        let l = image_loss(&p, &t, &[true; 144], 1.0, 0.2).unwrap();
        assert_eq!(l.grad.data[0], 0.0);
        assert_eq!(l.grad.data[1], 0.0);
        assert!(l.value > 0.0);
    }

    #[test]
    fn psnr_values() {
        let t = random_image(8, 8, 3, 9);
        let all = vec![true; 64];
        assert_eq!(metric_psnr(&t, &t, &all).unwrap(), PSNR_CAP);
        let p = t.map(|v| v + 0.1);
        assert!((metric_psnr(&p, &t, &all).unwrap() - 20.0).abs() < 1e-9);
        assert!(metric_psnr(&p, &t, &[false; 64]).is_err());
    }

    #[test]
    fn scale_alignment_removes_channel_gains() {
        let t = random_image(8, 8, 3, 10);
        let mut p = t.clone();
        for (k, v) in p.data.iter_mut().enumerate() {
            *v *= [0.5, 2.0, 1.3][k % 3];
        }
        let all = vec![true; 64];
        assert!(metric_psnr(&p, &t, &all).unwrap() < 20.0);
        assert_eq!(metric_scale_aligned(&p, &t, &all).unwrap(), PSNR_CAP);
    }

    #[test]
    fn normal_degree_values() {
        let a = vec![Vec3::z(); 4];
        let b = vec![Vec3::x(); 4];
        let m = vec![true; 4];
        assert_eq!(metric_normal_degree(&a, &a, &m).unwrap(), 0.0);
        assert!((metric_normal_degree(&a, &b, &m).unwrap() - 90.0).abs() < 1e-12);
        let mut z = a.clone();
        z[2] = Vec3::zeros();
        assert!(metric_normal_degree(&z, &a, &m).is_err());
        assert!(metric_normal_degree(&z, &a, &[true, true, false, true]).is_ok());
    }
}
