//! Per-channel Gaussian mixtures: parameter mapping from network outputs,
//! discretized masses over the token alphabet, coding tables, the argmax mode
//! and a fused bits-loss op for training.

use std::f64::consts::{FRAC_1_SQRT_2, LN_2, PI};

use mdvc_nn::{CustomOp, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{MdvcError, Result};
use crate::range_coder::Cdf;

pub const NUM_MIXTURES: usize = 3;
/// Network outputs per channel: means, raw scales and weight logits of each mixture.
pub const RAW_PER_CHANNEL: usize = 3 * NUM_MIXTURES;

/// Mapping from raw head outputs to mixture parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmHeadConfig {
    /// `mu = mu_scale * raw`.
    pub mu_scale: f64,
    /// `sigma = max(sigma_scale * softplus(raw), sigma_min)`.
    pub sigma_scale: f64,
    pub sigma_min: f64,
    /// Smallest probability charged per symbol when measuring bits.
    pub prob_floor: f64,
}

impl Default for GmmHeadConfig {
    fn default() -> Self {
        Self {
            mu_scale: 8.0,
            sigma_scale: 32.0,
            sigma_min: 0.01,
            prob_floor: 1.0 / 65536.0,
        }
    }
}

#[inline]
fn std_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

#[inline]
fn std_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `Phi(hi) - Phi(lo)` for standardized bounds, evaluated in whichever tail keeps precision.
#[inline]
pub fn std_interval(lo: f64, hi: f64) -> f64 {
    if lo > 0.0 {
        // Upper tail: Q(lo) - Q(hi) with Q(x) = Phi(-x).
        0.5 * (libm::erfc(lo * FRAC_1_SQRT_2) - libm::erfc(hi * FRAC_1_SQRT_2))
    } else {
        std_cdf(hi) - std_cdf(lo)
    }
}

/// Mass a Gaussian `N(mu, sigma^2)` places on `[v - 0.5, v + 0.5)`.
#[inline]
pub fn interval_mass(v: f64, mu: f64, sigma: f64) -> f64 {
    std_interval((v - 0.5 - mu) / sigma, (v + 0.5 - mu) / sigma).max(0.0)
}

/// One scalar mixture.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gmm {
    pub mu: [f64; NUM_MIXTURES],
    pub sigma: [f64; NUM_MIXTURES],
    pub weight: [f64; NUM_MIXTURES],
}

impl Gmm {
    /// Maps `[mu_raw x3, sigma_raw x3, logit x3]` to mixture parameters.
    pub fn from_raw(raw: &[f64], cfg: &GmmHeadConfig) -> Self {
        let mut g = Gmm {
            mu: [0.0; NUM_MIXTURES],
            sigma: [0.0; NUM_MIXTURES],
            weight: [0.0; NUM_MIXTURES],
        };
        let logits = &raw[2 * NUM_MIXTURES..3 * NUM_MIXTURES];
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for m in 0..NUM_MIXTURES {
            g.mu[m] = cfg.mu_scale * raw[m];
            g.sigma[m] = (cfg.sigma_scale * softplus(raw[NUM_MIXTURES + m])).max(cfg.sigma_min);
            g.weight[m] = (logits[m] - max).exp();
            sum += g.weight[m];
        }
        g.weight.iter_mut().for_each(|w| *w /= sum);
        g
    }

    pub fn single(mu: f64, sigma: f64) -> Self {
        Gmm {
            mu: [mu; NUM_MIXTURES],
            sigma: [sigma; NUM_MIXTURES],
            weight: [1.0 / NUM_MIXTURES as f64; NUM_MIXTURES],
        }
    }

    /// Mass on `[v - 0.5, v + 0.5)`.
    pub fn mass(&self, v: f64) -> f64 {
        (0..NUM_MIXTURES)
            .map(|m| self.weight[m] * interval_mass(v, self.mu[m], self.sigma[m]))
            .sum()
    }

    /// Masses of symbols `-bound..=bound` followed by one escape entry holding
    /// the mass outside `[-bound - 0.5, bound + 0.5)`. Sums to 1.
    pub fn symbol_masses(&self, bound: i32) -> Vec<f64> {
        let n = (2 * bound + 1) as usize;
        let mut out = vec![0.0; n + 1];
        for m in 0..NUM_MIXTURES {
            let (mu, s, w) = (self.mu[m], self.sigma[m], self.weight[m]);
            let z = |b: f64| (b - mu) / s;
            let mut inside = 0.0;
            for (k, o) in out.iter_mut().take(n).enumerate() {
                let v = k as f64 - bound as f64;
                let p = std_interval(z(v - 0.5), z(v + 0.5)).max(0.0);
                *o += w * p;
                inside += p;
            }
            out[n] += w * (1.0 - inside).max(0.0);
        }
        out
    }

    /// Coding table over the alphabet plus escape.
    pub fn cdf(&self, bound: i32) -> Cdf {
        Cdf::from_probabilities(&self.symbol_masses(bound))
    }

    /// Integer in `[-bound, bound]` with the largest discretized mass. Masses within
    /// a relative 1e-9 of the maximum tie; ties go to the value closest to a mean of
    /// the highest-weight mixture(s), then to the smaller value.
    pub fn mode(&self, bound: i32) -> i32 {
        let masses = self.symbol_masses(bound);
        let n = (2 * bound + 1) as usize;
        let best = masses[..n].iter().copied().fold(0.0, f64::max);
        let top_w = self.weight.iter().copied().fold(0.0, f64::max);
        let anchors: Vec<f64> = (0..NUM_MIXTURES)
            .filter(|&m| self.weight[m] >= top_w * (1.0 - 1e-12))
            .map(|m| self.mu[m])
            .collect();
        let dist = |v: f64| anchors.iter().map(|a| (v - a).abs()).fold(f64::INFINITY, f64::min);
        let mut choice: Option<(f64, i32)> = None;
        for (k, &p) in masses[..n].iter().enumerate() {
            if p < best * (1.0 - 1e-9) {
                continue;
            }
            let v = k as i32 - bound;
            let d = dist(v as f64);
            // Scanning upward means a strict improvement is needed to move to a larger value.
            if choice.is_none_or(|(bd, _)| d < bd) {
                choice = Some((d, v));
            }
        }
        choice.map_or(0, |(_, v)| v)
    }
}

/// Coding symbol index of a token value.
pub fn symbol_of(value: i32, bound: i32) -> Result<usize> {
    if value.abs() > bound {
        return Err(MdvcError::OutOfAlphabet { value, bound });
    }
    Ok((value + bound) as usize)
}

pub fn value_of(symbol: usize, bound: i32) -> Result<i32> {
    if symbol > (2 * bound) as usize {
        return Err(MdvcError::Corruption(format!("escape symbol {symbol} decoded")));
    }
    Ok(symbol as i32 - bound)
}

/// Mixture parameters for `positions * c` scalars, row-major by position then channel.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub positions: usize,
    pub c: usize,
    pub gmms: Vec<Gmm>,
}

impl GmmParams {
    /// Builds parameters from a `[positions, c * RAW_PER_CHANNEL]` head output.
    pub fn from_head(raw: &[f64], positions: usize, c: usize, cfg: &GmmHeadConfig) -> Self {
        let gmms = raw.chunks_exact(RAW_PER_CHANNEL).map(|r| Gmm::from_raw(r, cfg)).collect();
        Self { positions, c, gmms }
    }

    pub fn get(&self, position: usize, channel: usize) -> &Gmm {
        &self.gmms[position * self.c + channel]
    }
}

/// Statistics of one bits evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BitsStats {
    pub bits: f64,
    pub symbols: usize,
    pub floored: usize,
}

/// Per-element bits and the derivative of bits with respect to the target value,
/// each mixture mean, scale and weight.
struct ElementGrad {
    bits: f64,
    floored: bool,
    d_v: f64,
    d_mu: [f64; NUM_MIXTURES],
    d_sigma: [f64; NUM_MIXTURES],
    d_logit: [f64; NUM_MIXTURES],
}

fn element(g: &Gmm, v: f64, floor: f64) -> ElementGrad {
    let mut p = 0.0;
    let mut delta = [0.0; NUM_MIXTURES];
    let mut dp_dmu = [0.0; NUM_MIXTURES];
    let mut dp_dsigma = [0.0; NUM_MIXTURES];
    let mut dp_dv = 0.0;
    for m in 0..NUM_MIXTURES {
        let s = g.sigma[m];
        let zl = (v - 0.5 - g.mu[m]) / s;
        let zh = (v + 0.5 - g.mu[m]) / s;
        delta[m] = std_interval(zl, zh).max(0.0);
        p += g.weight[m] * delta[m];
        let (ph, pl) = (std_pdf(zh), std_pdf(zl));
        dp_dv += g.weight[m] * (ph - pl) / s;
        dp_dmu[m] = g.weight[m] * (pl - ph) / s;
        dp_dsigma[m] = g.weight[m] * (pl * zl - ph * zh) / s;
    }
    if p < floor {
        return ElementGrad {
            bits: -floor.log2(),
            floored: true,
            d_v: 0.0,
            d_mu: [0.0; NUM_MIXTURES],
            d_sigma: [0.0; NUM_MIXTURES],
            d_logit: [0.0; NUM_MIXTURES],
        };
    }
    let db_dp = -1.0 / (p * LN_2);
    let mut e = ElementGrad {
        bits: -p.log2(),
        floored: false,
        d_v: db_dp * dp_dv,
        d_mu: [0.0; NUM_MIXTURES],
        d_sigma: [0.0; NUM_MIXTURES],
        d_logit: [0.0; NUM_MIXTURES],
    };
    for m in 0..NUM_MIXTURES {
        e.d_mu[m] = db_dp * dp_dmu[m];
        e.d_sigma[m] = db_dp * dp_dsigma[m];
        e.d_logit[m] = db_dp * g.weight[m] * (delta[m] - p);
    }
    e
}

/// Bits of integer or relaxed targets under `gmm`, summed over the listed positions.
pub fn bits_at(gmm: &GmmParams, targets: &[f64], positions: &[usize], floor: f64) -> BitsStats {
    let mut st = BitsStats::default();
    for &p in positions {
        for ch in 0..gmm.c {
            let e = element(gmm.get(p, ch), targets[p * gmm.c + ch], floor);
            st.bits += e.bits;
            st.symbols += 1;
            st.floored += e.floored as usize;
        }
    }
    st
}

struct GmmBitsOp {
    positions: Vec<usize>,
    c: usize,
    cfg: GmmHeadConfig,
}

impl CustomOp for GmmBitsOp {
    fn name(&self) -> &str {
        "gmm_bits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (head, targets) = (inputs[0].data(), inputs[1].data());
        let mut d_head = vec![0.0; head.len()];
        let mut d_t = vec![0.0; targets.len()];
        let go = grad_out[0];
        for &p in &self.positions {
            for ch in 0..self.c {
                let off = (p * self.c + ch) * RAW_PER_CHANNEL;
                let raw = &head[off..off + RAW_PER_CHANNEL];
                let g = Gmm::from_raw(raw, &self.cfg);
                let e = element(&g, targets[p * self.c + ch], self.cfg.prob_floor);
                d_t[p * self.c + ch] += go * e.d_v;
                for m in 0..NUM_MIXTURES {
                    d_head[off + m] += go * e.d_mu[m] * self.cfg.mu_scale;
                    let sraw = raw[NUM_MIXTURES + m];
                    if self.cfg.sigma_scale * softplus(sraw) > self.cfg.sigma_min {
                        d_head[off + NUM_MIXTURES + m] += go * e.d_sigma[m] * self.cfg.sigma_scale * sigmoid(sraw);
                    }
                    d_head[off + 2 * NUM_MIXTURES + m] += go * e.d_logit[m];
                }
            }
        }
        vec![Some(d_head), Some(d_t)]
    }
}

/// Total bits of `targets` (`[positions, c]`) at the listed positions under the
/// mixtures predicted by `head` (`[positions, c * RAW_PER_CHANNEL]`), as a scalar node.
pub fn gmm_bits(
    g: &mut Graph,
    head: Var,
    targets: Var,
    positions: &[usize],
    c: usize,
    cfg: &GmmHeadConfig,
) -> Result<(Var, BitsStats)> {
    let n = g.value(targets).numel() / c.max(1);
    if g.value(head).numel() != n * c * RAW_PER_CHANNEL {
        return Err(MdvcError::Shape(format!(
            "gmm head has {} values for {n} tokens of {c} channels",
            g.value(head).numel()
        )));
    }
    let gmm = GmmParams::from_head(g.value(head).data(), n, c, cfg);
    let stats = bits_at(&gmm, g.value(targets).data(), positions, cfg.prob_floor);
    let op = GmmBitsOp {
        positions: positions.to_vec(),
        c,
        cfg: *cfg,
    };
    let out = g.custom(&[head, targets], Tensor::scalar(stats.bits), Box::new(op))?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_gmm(rng: &mut ChaCha8Rng) -> Gmm {
        let raw: Vec<f64> = (0..RAW_PER_CHANNEL).map(|_| rng.random_range(-3.0..3.0)).collect();
        Gmm::from_raw(&raw, &GmmHeadConfig::default())
    }

    #[test]
    fn raw_mapping_gives_valid_mixture() {
        let cfg = GmmHeadConfig::default();
        let g = Gmm::from_raw(&[0.0, 1.0, -1.0, -50.0, 0.0, 3.0, 1.0, 2.0, 3.0], &cfg);
        assert!(g.sigma.iter().all(|&s| s >= cfg.sigma_min));
        assert_eq!(g.sigma[0], cfg.sigma_min);
        assert!((g.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.mu[1], 8.0);
    }

    #[test]
    fn symbol_masses_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let g = random_gmm(&mut rng);
            let s: f64 = g.symbol_masses(127).iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "{s}");
        }
    }

    #[test]
    fn sharp_mixture_at_target_costs_nothing() {
        let g = Gmm::single(5.0, 0.01);
        let gp = GmmParams {
            positions: 1,
            c: 1,
            gmms: vec![g],
        };
        let st = bits_at(&gp, &[5.0], &[0], 1.0 / 65536.0);
        assert!(st.bits < 1e-9);
    }

    #[test]
    fn wide_mixture_costs_about_eight_bits() {
        // Oracle: a Gaussian much wider than the alphabet is close to uniform over 255 values.
        let g = Gmm::single(0.0, 1e4);
        let masses = g.symbol_masses(127);
        let inside: f64 = masses[..255].iter().sum();
        let per_symbol = -(masses[127] / inside).log2();
        assert!((per_symbol - 255f64.log2()).abs() < 1e-3);
    }

    #[test]
    fn empty_mask_costs_zero() {
        let gp = GmmParams {
            positions: 2,
            c: 1,
            gmms: vec![Gmm::single(0.0, 1.0); 2],
        };
        assert_eq!(bits_at(&gp, &[1.0, 2.0], &[], 1e-5).bits, 0.0);
    }

    #[test]
    fn floor_is_counted() {
        let gp = GmmParams {
            positions: 1,
            c: 1,
            gmms: vec![Gmm::single(0.0, 0.01)],
        };
        let st = bits_at(&gp, &[40.0], &[0], 1.0 / 65536.0);
        assert_eq!(st.floored, 1);
        assert_eq!(st.bits, 16.0);
    }

    #[test]
    fn mode_of_single_mixture_rounds_mean() {
        assert_eq!(Gmm::single(3.2, 0.3).mode(127), 3);
        assert_eq!(Gmm::single(-200.0, 1.0).mode(127), -127);
    }

    #[test]
    fn symmetric_pair_breaks_tie_low() {
        let g = Gmm {
            mu: [-2.0, 2.0, 2.0],
            sigma: [0.5; 3],
            weight: [0.5, 0.5, 0.0],
        };
        assert_eq!(g.mode(127), -2);
    }

    #[test]
    fn mode_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let g = random_gmm(&mut rng);
            let mut best = (f64::NEG_INFINITY, 0);
            for k in -127..=127 {
                let m = g.mass(k as f64);
                if m > best.0 {
                    best = (m, k);
                }
            }
            let mode = g.mode(127);
            assert!(g.mass(mode as f64) >= best.0 * (1.0 - 1e-9), "mode {mode} vs scan {}", best.1);
        }
    }

    #[test]
    fn bits_gradient_matches_finite_differences() {
        let cfg = GmmHeadConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let c = 2;
            let head: Vec<f64> = (0..3 * c * RAW_PER_CHANNEL).map(|_| rng.random_range(-1.0..1.0)).collect();
            let targets: Vec<f64> = (0..3 * c).map(|_| rng.random_range(-6.0..6.0)).collect();
            let positions = [0, 2];
            let eval = |h: &[f64], t: &[f64]| {
                let gp = GmmParams::from_head(h, 3, c, &cfg);
                bits_at(&gp, t, &positions, cfg.prob_floor).bits
            };
            let mut g = Graph::new();
            let hv = g.leaf(Tensor::new(vec![3, c * RAW_PER_CHANNEL], head.clone()).unwrap());
            let tv = g.leaf(Tensor::new(vec![3, c], targets.clone()).unwrap());
            let (bits, _) = gmm_bits(&mut g, hv, tv, &positions, c, &cfg).unwrap();
            let grads = g.backward(bits).unwrap();
            let step = 1e-6;
            for (var, base, is_head) in [(hv, &head, true), (tv, &targets, false)] {
                let an = grads.of(var).unwrap();
                for i in 0..base.len() {
                    let mut up = base.clone();
                    let mut dn = base.clone();
                    up[i] += step;
                    dn[i] -= step;
                    let num = if is_head {
                        (eval(&up, &targets) - eval(&dn, &targets)) / (2.0 * step)
                    } else {
                        (eval(&head, &up) - eval(&head, &dn)) / (2.0 * step)
                    };
                    assert!((an[i] - num).abs() < 1e-5 * (1.0 + num.abs()), "grad {i}: {} vs {num}", an[i]);
                }
            }
        }
    }

    proptest! {
        #[test]
        fn coding_table_is_valid(seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cdf = random_gmm(&mut rng).cdf(127);
            prop_assert_eq!(cdf.symbols(), 256);
            prop_assert!((0..256).all(|s| cdf.freq(s) >= 1));
            prop_assert_eq!(cdf.cum(255) + cdf.freq(255), 65536);
        }
    }
}
