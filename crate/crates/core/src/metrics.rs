//! PSNR and MS-SSIM over 8-bit RGB frames.

use crate::error::{MdvcError, Result};
use crate::video::Frame;

/// Reported PSNR for identical inputs.
pub const PSNR_CAP: f64 = 99.0;

const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_dims(a: &Frame, b: &Frame) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(MdvcError::Shape(format!(
            "cannot compare {}x{} with {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    Ok(())
}

/// PSNR in dB over equally long 8-bit sample slices, capped at [`PSNR_CAP`].
pub fn psnr_samples(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(MdvcError::Shape(format!("sample counts {} and {} differ", a.len(), b.len())));
    }
    let sse: f64 = a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    if sse == 0.0 {
        return Ok(PSNR_CAP);
    }
    let mse = sse / a.len() as f64;
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// Mean squared error over all RGB samples on the 0..255 scale.
pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    check_dims(a, b)?;
    let sse: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum();
    Ok(sse / a.data.len().max(1) as f64)
}

/// PSNR over all RGB samples.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_dims(a, b)?;
    psnr_samples(&a.data, &b.data)
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h + 1 - WINDOW, w + 1 - WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for q in 0..ow {
            let row = &img[r * w + q..r * w + q + WINDOW];
            tmp[r * ow + q] = row.iter().zip(k).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for q in 0..ow {
            out[r * ow + q] = (0..WINDOW).map(|i| tmp[(r + i) * ow + q] * k[i]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean luminance term and mean contrast-structure term at one scale.
fn ssim_terms(x: &[f64], y: &[f64], h: usize, w: usize) -> (f64, f64) {
    let k = gaussian_window();
    let c1 = (K1 * 255.0).powi(2);
    let c2 = (K2 * 255.0).powi(2);
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let (mx, _, _) = filter_valid(x, h, w, &k);
    let (my, _, _) = filter_valid(y, h, w, &k);
    let (sxx, _, _) = filter_valid(&xx, h, w, &k);
    let (syy, _, _) = filter_valid(&yy, h, w, &k);
    let (sxy, _, _) = filter_valid(&xy, h, w, &k);
    let n = mx.len() as f64;
    let mut l_sum = 0.0;
    let mut cs_sum = 0.0;
    for i in 0..mx.len() {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        l_sum += (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        cs_sum += (2.0 * cov + c2) / (vx + vy + c2);
    }
    (l_sum / n, cs_sum / n)
}

fn downsample(img: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for q in 0..ow {
            out[r * ow + q] = (img[2 * r * w + 2 * q]
                + img[2 * r * w + 2 * q + 1]
                + img[(2 * r + 1) * w + 2 * q]
                + img[(2 * r + 1) * w + 2 * q + 1])
                / 4.0;
        }
    }
    (out, oh, ow)
}

/// Number of scales used for an `h x w` input: five when the smallest side is at
/// least 176, otherwise as many as keep the coarsest scale at least one window wide.
pub fn ms_ssim_scales(h: usize, w: usize) -> usize {
    let m = h.min(w);
    if m < WINDOW {
        return 0;
    }
    let mut scales = 1;
    let mut side = m;
    while scales < 5 && side / 2 >= WINDOW {
        side /= 2;
        scales += 1;
    }
    scales
}

/// Multi-scale SSIM of one `h x w` plane with values in `[0, 255]`.
pub fn ms_ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize) -> Result<f64> {
    let scales = ms_ssim_scales(h, w);
    if scales == 0 {
        return Err(MdvcError::Shape(format!("MS-SSIM needs at least {WINDOW}x{WINDOW} inputs, got {h}x{w}")));
    }
    let weights = &MS_SSIM_WEIGHTS[..scales];
    let total: f64 = weights.iter().sum();
    let (mut x, mut y, mut h, mut w) = (x.to_vec(), y.to_vec(), h, w);
    let mut score = 1.0;
    for (j, &wt) in weights.iter().enumerate() {
        let (l, cs) = ssim_terms(&x, &y, h, w);
        let wt = wt / total;
        if j + 1 == scales {
            score *= (l * cs).max(0.0).powf(wt);
        } else {
            score *= cs.max(0.0).powf(wt);
            let (dx, nh, nw) = downsample(&x, h, w);
            let (dy, _, _) = downsample(&y, h, w);
            x = dx;
            y = dy;
            h = nh;
            w = nw;
        }
    }
    Ok(score.clamp(0.0, 1.0))
}

/// MS-SSIM of each RGB channel, averaged.
pub fn ms_ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_dims(a, b)?;
    let plane = |f: &Frame, ch: usize| -> Vec<f64> { f.data.iter().skip(ch).step_by(3).map(|&v| v as f64).collect() };
    let mut sum = 0.0;
    for ch in 0..3 {
        sum += ms_ssim_plane(&plane(a, ch), &plane(b, ch), a.height, a.width)?;
    }
    Ok(sum / 3.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_conventions() {
        let a = Frame::filled(4, 4, [10, 20, 30]);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let black = Frame::filled(4, 4, [0, 0, 0]);
        let white = Frame::filled(4, 4, [255, 255, 255]);
        assert_eq!(psnr(&black, &white).unwrap(), 0.0);
    }

    #[test]
    fn single_channel_difference_of_sixteen() {
        let a = vec![100u8; 16];
        let mut b = a.clone();
        b[5] += 16;
        // MSE = 16^2 / 16 = 16.
        let expected = 10.0 * (65025.0f64 / 16.0).log10();
        assert!((psnr_samples(&a, &b).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 36.09).abs() < 0.01);
    }

    #[test]
    fn mismatched_dimensions_are_errors() {
        let a = Frame::filled(4, 4, [0, 0, 0]);
        let b = Frame::filled(4, 5, [0, 0, 0]);
        assert!(psnr(&a, &b).is_err());
        assert!(ms_ssim(&a, &b).is_err());
    }

    #[test]
    fn scale_counts() {
        assert_eq!(ms_ssim_scales(176, 200), 5);
        assert_eq!(ms_ssim_scales(64, 64), 3);
        assert_eq!(ms_ssim_scales(32, 32), 2);
        assert_eq!(ms_ssim_scales(11, 40), 1);
        assert_eq!(ms_ssim_scales(10, 40), 0);
    }
}
