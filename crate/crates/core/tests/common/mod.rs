#![allow(dead_code)]

use mdvc::coding::Predictor;
use mdvc::entropy_model::TemporalContext;
use mdvc::gmm::{Gmm, GmmParams};
use mdvc::latent::LatentGrid;
use mdvc::split::MaskPattern;
use mdvc::video::Frame;
use mdvc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Cheap mask- and context-aware predictor: a Gaussian at the mean of the
/// visible 4-neighbours, else the co-located `t-1` token, else zero.
pub struct NeighbourPredictor;

impl Predictor for NeighbourPredictor {
    fn predict(&self, cur: &LatentGrid, mask: &MaskPattern, ctx: &TemporalContext) -> Result<GmmParams> {
        let (h, w, c) = (cur.h, cur.w, cur.c);
        let mut gmms = Vec::with_capacity(h * w * c);
        for r in 0..h {
            for q in 0..w {
                let mut nbrs = Vec::new();
                for (dr, dq) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (rr, qq) = (r as i64 + dr, q as i64 + dq);
                    if rr >= 0 && qq >= 0 && (rr as usize) < h && (qq as usize) < w {
                        let i = rr as usize * w + qq as usize;
                        if !mask.0[i] {
                            nbrs.push(i);
                        }
                    }
                }
                for ch in 0..c {
                    let g = if !nbrs.is_empty() {
                        let m = nbrs.iter().map(|&i| cur.token(i)[ch] as f64).sum::<f64>() / nbrs.len() as f64;
                        Gmm {
                            mu: [m, m + 3.0, m - 3.0],
                            sigma: [2.0, 6.0, 6.0],
                            weight: [0.8, 0.1, 0.1],
                        }
                    } else if let Some(p) = &ctx.prev1 {
                        Gmm::single(p.token(r * w + q)[ch] as f64, 3.0)
                    } else {
                        Gmm::single(0.0, 12.0)
                    };
                    gmms.push(g);
                }
            }
        }
        Ok(GmmParams {
            positions: h * w,
            c,
            gmms,
        })
    }
}

/// Smooth random latent: a random walk along raster order with occasional jumps.
pub fn smooth_grid(h: usize, w: usize, c: usize, seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0i32; h * w * c];
    for ch in 0..c {
        let mut v: i32 = rng.random_range(-10..=10);
        for i in 0..h * w {
            v += rng.random_range(-2..=2);
            if rng.random_bool(0.02) {
                v = rng.random_range(-127..=127);
            }
            v = v.clamp(-127, 127);
            data[i * c + ch] = v;
        }
    }
    LatentGrid::new(h, w, c, 127, data).unwrap()
}

/// Direct (non-separable) reference: 11x11 Gaussian window, valid region,
/// 2x2 mean pyramid, per-channel MS-SSIM averaged over RGB.
pub fn reference_ms_ssim(a: &Frame, b: &Frame) -> f64 {
    let weights = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
    let mut win = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut sum = 0.0;
    for ch in 0..3 {
        let mut x: Vec<Vec<f64>> = (0..a.height).map(|r| (0..a.width).map(|q| a.get(r, q, ch) as f64).collect()).collect();
        let mut y: Vec<Vec<f64>> = (0..b.height).map(|r| (0..b.width).map(|q| b.get(r, q, ch) as f64).collect()).collect();
        let mut scales = 1;
        let mut side = a.height.min(a.width);
        while scales < 5 && side / 2 >= 11 {
            side /= 2;
            scales += 1;
        }
        let wsum: f64 = weights[..scales].iter().sum();
        let mut score = 1.0;
        for s in 0..scales {
            let (h, w) = (x.len(), x[0].len());
            let (mut l_acc, mut cs_acc, mut n) = (0.0, 0.0, 0.0);
            for r in 0..=h - 11 {
                for q in 0..=w - 11 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let k = win[i][j] / total;
                            let (u, v) = (x[r + i][q + j], y[r + i][q + j]);
                            mx += k * u;
                            my += k * v;
                            sxx += k * u * u;
                            syy += k * v * v;
                            sxy += k * u * v;
                        }
                    }
                    l_acc += (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
                    cs_acc += (2.0 * (sxy - mx * my) + c2) / (sxx - mx * mx + syy - my * my + c2);
                    n += 1.0;
                }
            }
            let (l, cs) = (l_acc / n, cs_acc / n);
            let e = weights[s] / wsum;
            if s + 1 == scales {
                score *= (l * cs).max(0.0).powf(e);
            } else {
                score *= cs.max(0.0).powf(e);
                let half = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
                    (0..m.len() / 2)
                        .map(|r| (0..m[0].len() / 2).map(|q| (m[2 * r][2 * q] + m[2 * r][2 * q + 1] + m[2 * r + 1][2 * q] + m[2 * r + 1][2 * q + 1]) / 4.0).collect())
                        .collect()
                };
                x = half(&x);
                y = half(&y);
            }
        }
        sum += score.clamp(0.0, 1.0);
    }
    sum / 3.0
}

/// Random frame and a copy with uniform noise of random amplitude.
pub fn random_pair(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Frame, Frame) {
    let a: Vec<u8> = (0..h * w * 3).map(|_| rng.random()).collect();
    let noise: f64 = rng.random_range(1.0..60.0);
    let b: Vec<u8> = a
        .iter()
        .map(|&v| (v as f64 + rng.random_range(-noise..noise)).round().clamp(0.0, 255.0) as u8)
        .collect();
    (Frame::new(w, h, a).unwrap(), Frame::new(w, h, b).unwrap())
}
