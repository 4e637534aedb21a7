//! Per-frame analysis/synthesis transforms, scalar quantization and the
//! factorized rate proxy used while training the transforms alone.

use std::path::Path;

use mdvc_nn::{checkpoint, Conv2d, ConvTranspose2d, CustomOp, Graph, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdvcError, Result};
use crate::gmm::interval_mass;
use crate::latent::LatentGrid;
use crate::video::Frame;

/// Spatial downsampling of the analysis transform (two stride-2 layers).
pub const DOWNSAMPLE: usize = 4;

/// The six rate-distortion trade-offs, log-spaced over `[1e-4, 1]`.
pub fn lambda_grid() -> [f64; 6] {
    std::array::from_fn(|i| 10f64.powf(-4.0 + 4.0 * i as f64 / 5.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub hidden: usize,
    pub latent_channels: usize,
    pub kernel: usize,
    /// Alphabet bound: every latent value lies in `[-bound, bound]`.
    pub bound: i32,
    /// Fixed gain between the analysis output and the latent (`y = gain * E(x)`).
    pub latent_gain: f64,
    /// Index into [`lambda_grid`].
    pub quality: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            latent_channels: 8,
            kernel: 5,
            bound: 127,
            latent_gain: 8.0,
            quality: 5,
            lambda: 1.0,
            seed: 0,
        }
    }
}

impl CodecConfig {
    pub fn for_quality(quality: usize) -> Result<Self> {
        let grid = lambda_grid();
        let lambda = *grid
            .get(quality)
            .ok_or_else(|| MdvcError::Config(format!("quality index {quality} outside 0..=5")))?;
        Ok(Self {
            quality,
            lambda,
            ..Self::default()
        })
    }
}

pub struct FrameCodec {
    pub cfg: CodecConfig,
    pub store: ParamStore,
    enc1: Conv2d,
    enc2: Conv2d,
    dec1: ConvTranspose2d,
    dec2: ConvTranspose2d,
    prior_mu: ParamId,
    prior_scale: ParamId,
}

/// Quantization surrogate used while training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Adds `U(-0.5, 0.5)` noise.
    Noise,
    /// Rounds in the forward pass with an identity gradient.
    Ste,
}

/// Applies the training-time quantization surrogate to `x`.
pub fn quantize_train<R: Rng>(g: &mut Graph, x: Var, mode: QuantMode, rng: &mut R) -> Result<Var> {
    match mode {
        QuantMode::Ste => Ok(g.ste_round(x)?),
        QuantMode::Noise => {
            let shape = g.shape(x).to_vec();
            let n: usize = shape.iter().product();
            let noise = (0..n).map(|_| rng.random_range(-0.5..0.5)).collect();
            let u = g.input(Tensor::new(shape, noise)?);
            Ok(g.add(x, u)?)
        }
    }
}

/// Result of [`FrameCodec::encode_frame`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub latent: LatentGrid,
    /// Elements whose rounded value fell outside the alphabet and were clamped.
    pub clamped: usize,
}

impl FrameCodec {
    pub fn new(cfg: CodecConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let (k, p) = (cfg.kernel, cfg.kernel / 2);
        let c = cfg.latent_channels;
        let enc1 = Conv2d::new(&mut store, &mut rng, "codec.enc1", 3, cfg.hidden, k, 2, p)?;
        let enc2 = Conv2d::new(&mut store, &mut rng, "codec.enc2", cfg.hidden, c, k, 2, p)?;
        let dec1 = ConvTranspose2d::new(&mut store, &mut rng, "codec.dec1", c, cfg.hidden, k, 2, p, 1)?;
        let dec2 = ConvTranspose2d::new(&mut store, &mut rng, "codec.dec2", cfg.hidden, 3, k, 2, p, 1)?;
        let prior_mu = store.add("codec.prior.mu", Tensor::zeros(&[c]))?;
        // softplus(3.9) is about 4: a moderately wide initial prior.
        let prior_scale = store.add("codec.prior.scale", Tensor::full(&[c], 3.9))?;
        Ok(Self {
            cfg,
            store,
            enc1,
            enc2,
            dec1,
            dec2,
            prior_mu,
            prior_scale,
        })
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<(usize, usize, usize)> {
        if height % DOWNSAMPLE != 0 || width % DOWNSAMPLE != 0 || height == 0 || width == 0 {
            return Err(MdvcError::Indivisible {
                height,
                width,
                factor: DOWNSAMPLE,
            });
        }
        Ok((height / DOWNSAMPLE, width / DOWNSAMPLE, self.cfg.latent_channels))
    }

    /// `[B, 3, H, W]` pixels in `[0, 1]` to the unquantized latent `[B, c, H/4, W/4]`.
    pub fn analysis(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.enc1.forward(g, &self.store, x)?;
        let h = g.gelu(h)?;
        let y = self.enc2.forward(g, &self.store, h)?;
        Ok(g.scale(y, self.cfg.latent_gain)?)
    }

    /// Latent `[B, c, h, w]` to pixels `[B, 3, 4h, 4w]` in (nominally) `[0, 1]`.
    pub fn synthesis(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let y = g.scale(y, 1.0 / self.cfg.latent_gain)?;
        let h = self.dec1.forward(g, &self.store, y)?;
        let h = g.gelu(h)?;
        Ok(self.dec2.forward(g, &self.store, h)?)
    }

    pub(crate) fn frame_input(&self, g: &mut Graph, frames: &[&Frame]) -> Result<Var> {
        let (fh, fw) = (frames[0].height, frames[0].width);
        self.latent_shape(fh, fw)?;
        let mut data = Vec::with_capacity(frames.len() * 3 * fh * fw);
        for f in frames {
            if f.height != fh || f.width != fw {
                return Err(MdvcError::Shape("frames in one batch must share dimensions".into()));
            }
            data.extend(f.to_planar());
        }
        Ok(g.input(Tensor::new(vec![frames.len(), 3, fh, fw], data)?))
    }

    /// Unquantized latent of one frame, planar `[c, h, w]`.
    pub fn analyze(&self, frame: &Frame) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let x = self.frame_input(&mut g, &[frame])?;
        let y = self.analysis(&mut g, x)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Rounds (ties to even) and clamps an unquantized planar latent into a grid.
    pub fn quantize(&self, planar: &[f64], h: usize, w: usize) -> Encoded {
        let c = self.cfg.latent_channels;
        let a = self.cfg.bound;
        let n = h * w;
        let mut data = vec![0; n * c];
        let mut clamped = 0;
        for ch in 0..c {
            for i in 0..n {
                let r = planar[ch * n + i].round_ties_even();
                let v = if r > a as f64 {
                    clamped += 1;
                    a
                } else if r < -a as f64 {
                    clamped += 1;
                    -a
                } else {
                    r as i32
                };
                data[i * c + ch] = v;
            }
        }
        Encoded {
            latent: LatentGrid {
                h,
                w,
                c,
                bound: a,
                data,
            },
            clamped,
        }
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<Encoded> {
        let (h, w, _) = self.latent_shape(frame.height, frame.width)?;
        let planar = self.analyze(frame)?;
        Ok(self.quantize(&planar, h, w))
    }

    pub fn decode_frame(&self, latent: &LatentGrid) -> Result<Frame> {
        if latent.c != self.cfg.latent_channels {
            return Err(MdvcError::Shape(format!(
                "latent has {} channels, model expects {}",
                latent.c, self.cfg.latent_channels
            )));
        }
        let mut g = Graph::new();
        let y = g.input(Tensor::new(vec![1, latent.c, latent.h, latent.w], latent.to_planar())?);
        let x = self.synthesis(&mut g, y)?;
        Ok(Frame::from_planar(
            latent.w * DOWNSAMPLE,
            latent.h * DOWNSAMPLE,
            g.value(x).data(),
        ))
    }

    /// Total bits of `y` (`[B, c, h, w]`) under the per-channel factorized Gaussian prior.
    pub fn prior_bits(&self, g: &mut Graph, y: Var) -> Result<Var> {
        let mu = g.param(&self.store, self.prior_mu);
        let scale = g.param(&self.store, self.prior_scale);
        let shape = g.shape(y).to_vec();
        let (c, plane) = (shape[1], shape[2] * shape[3]);
        let mus = g.value(mu).data().to_vec();
        let sig: Vec<f64> = g.value(scale).data().iter().map(|&s| prior_sigma(s)).collect();
        let bits: f64 = g
            .value(y)
            .data()
            .chunks(plane)
            .enumerate()
            .map(|(i, chunk)| {
                let ch = i % c;
                chunk.iter().map(|&v| element_bits(v, mus[ch], sig[ch])).sum::<f64>()
            })
            .sum();
        Ok(g.custom(&[y, mu, scale], Tensor::scalar(bits), Box::new(PriorBitsOp { c, plane }))?)
    }

    /// Stage-I objective for a batch: `bpp + lambda * MSE` with MSE on the 0..255 scale.
    /// Returns the loss node and its (bpp, mse) parts.
    pub fn rd_loss<R: Rng>(&self, g: &mut Graph, frames: &[&Frame], rng: &mut R) -> Result<(Var, f64, f64)> {
        let x = self.frame_input(g, frames)?;
        let y = self.analysis(g, x)?;
        let noisy = quantize_train(g, y, QuantMode::Noise, rng)?;
        let bits = self.prior_bits(g, noisy)?;
        let rounded = quantize_train(g, y, QuantMode::Ste, rng)?;
        let xh = self.synthesis(g, rounded)?;
        let pixels = (frames.len() * frames[0].pixels()) as f64;
        let bpp = g.scale(bits, 1.0 / pixels)?;
        let d = g.sub(xh, x)?;
        let sq = g.mul(d, d)?;
        let mse01 = g.mean(sq)?;
        let mse = g.value(mse01).item() * 255.0 * 255.0;
        let dist = g.scale(mse01, self.cfg.lambda * 255.0 * 255.0)?;
        let loss = g.add(bpp, dist)?;
        let bpp_v = g.value(bpp).item();
        Ok((loss, bpp_v, mse))
    }

    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        checkpoint::save(&dir.join(format!("{stem}.ckpt")), &self.store)?;
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&self.cfg)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let cfg_path = dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| MdvcError::Checkpoint(format!("cannot read {}: {e}", cfg_path.display())))?;
        let cfg: CodecConfig =
            serde_json::from_str(&text).map_err(|e| MdvcError::Checkpoint(format!("{}: {e}", cfg_path.display())))?;
        let mut codec = Self::new(cfg)?;
        let ckpt = dir.join(format!("{stem}.ckpt"));
        checkpoint::load(&ckpt, &mut codec.store)
            .map_err(|e| MdvcError::Checkpoint(format!("{}: {e}", ckpt.display())))?;
        Ok(codec)
    }
}

fn prior_sigma(raw: f64) -> f64 {
    (raw.max(0.0) + (-raw.abs()).exp().ln_1p()).max(0.05)
}

const PRIOR_FLOOR: f64 = 1e-9;

fn element_bits(v: f64, mu: f64, sigma: f64) -> f64 {
    -interval_mass(v, mu, sigma).max(PRIOR_FLOOR).log2()
}

struct PriorBitsOp {
    c: usize,
    plane: usize,
}

impl CustomOp for PriorBitsOp {
    fn name(&self) -> &str {
        "prior_bits"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (y, mu, raw) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let go = grad_out[0];
        let mut dy = vec![0.0; y.len()];
        let mut dmu = vec![0.0; self.c];
        let mut draw = vec![0.0; self.c];
        let pdf = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        for (i, &v) in y.iter().enumerate() {
            let ch = (i / self.plane) % self.c;
            let s = prior_sigma(raw[ch]);
            let p = interval_mass(v, mu[ch], s);
            if p < PRIOR_FLOOR {
                continue;
            }
            let zl = (v - 0.5 - mu[ch]) / s;
            let zh = (v + 0.5 - mu[ch]) / s;
            let db_dp = -1.0 / (p * std::f64::consts::LN_2);
            let (ph, pl) = (pdf(zh), pdf(zl));
            dy[i] = go * db_dp * (ph - pl) / s;
            dmu[ch] += go * db_dp * (pl - ph) / s;
            if s > 0.05 {
                let sig = 1.0 / (1.0 + (-raw[ch]).exp());
                draw[ch] += go * db_dp * (pl * zl - ph * zh) / s * sig;
            }
        }
        vec![Some(dy), Some(dmu), Some(draw)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::{synthetic_video, SyntheticConfig};

    fn small() -> FrameCodec {
        FrameCodec::new(CodecConfig::default()).unwrap()
    }

    #[test]
    fn lambda_grid_is_log_spaced() {
        let g = lambda_grid();
        assert!((g[0] - 1e-4).abs() < 1e-18);
        assert!((g[5] - 1.0).abs() < 1e-12);
        for w in g.windows(2) {
            assert!((w[1] / w[0] - 10f64.powf(0.8)).abs() < 1e-9);
        }
    }

    #[test]
    fn latent_shape_follows_downsampling() {
        let c = small();
        assert_eq!(c.latent_shape(64, 64).unwrap(), (16, 16, 8));
        assert!(matches!(c.latent_shape(1080, 1920), Ok((270, 480, 8))));
        assert!(matches!(c.latent_shape(30, 64), Err(MdvcError::Indivisible { .. })));
    }

    #[test]
    fn reference_resolution_is_not_divisible_by_sixteen() {
        // 1080 / 16 = 67.5, so a 16x-downsampling transform cannot tile a 1920x1080 frame.
        assert_ne!(1080 % 16, 0);
        assert_eq!(1920 % 16, 0);
    }

    #[test]
    fn encode_and_decode_are_deterministic() {
        let c = small();
        let v = synthetic_video(&SyntheticConfig::default(), 1);
        let a = c.encode_frame(&v.frames[0]).unwrap();
        let b = c.encode_frame(&v.frames[0].clone()).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.latent.h, a.latent.w, a.latent.c), (16, 16, 8));
        assert_eq!(c.decode_frame(&a.latent).unwrap(), c.decode_frame(&b.latent).unwrap());
        let zero = c.decode_frame(&LatentGrid::zeros(4, 4, 8, 127)).unwrap();
        assert_eq!((zero.width, zero.height), (16, 16));
    }

    #[test]
    fn quantize_rounds_half_to_even_and_counts_clamps() {
        let c = small();
        let mut planar = vec![0.0; 8];
        planar[0] = 2.5;
        planar[1] = -0.5;
        planar[2] = 1.7;
        planar[3] = 300.0;
        planar[4] = -127.4;
        let e = c.quantize(&planar, 1, 1);
        assert_eq!(&e.latent.data[..5], &[2, 0, 2, 127, -127]);
        assert_eq!(e.clamped, 1);
    }

    #[test]
    fn training_quantizers() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(1.7));
        let s = quantize_train(&mut g, x, QuantMode::Ste, &mut rng).unwrap();
        assert_eq!(g.value(s).item(), 2.0);
        assert_eq!(g.backward(s).unwrap().of(x).unwrap(), &[1.0]);

        let n = 100_000;
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[n], 1.7));
        let y = quantize_train(&mut g, x, QuantMode::Noise, &mut rng).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v > 1.2 && v < 2.2));
        let mean = vals.iter().sum::<f64>() / n as f64;
        // Uniform noise on a unit interval has standard deviation 1/sqrt(12).
        let tol = 3.0 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 1.7).abs() < tol, "mean {mean}");
    }

    #[test]
    fn prior_bits_gradient_matches_finite_differences() {
        let c = small();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y0: Vec<f64> = (0..2 * 8 * 2 * 2).map(|_| rng.random_range(-6.0..6.0)).collect();
        let eval = |c: &FrameCodec, y: &[f64]| {
            let mut g = Graph::new();
            let yv = g.input(Tensor::new(vec![2, 8, 2, 2], y.to_vec()).unwrap());
            let b = c.prior_bits(&mut g, yv).unwrap();
            g.value(b).item()
        };
        let mut g = Graph::new();
        let yv = g.leaf(Tensor::new(vec![2, 8, 2, 2], y0.clone()).unwrap());
        let b = c.prior_bits(&mut g, yv).unwrap();
        let grads = g.backward(b).unwrap();
        let an = grads.of(yv).unwrap();
        for i in 0..y0.len() {
            let (mut up, mut dn) = (y0.clone(), y0.clone());
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let num = (eval(&c, &up) - eval(&c, &dn)) / 2e-6;
            assert!((an[i] - num).abs() < 1e-5 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small();
        for p in c.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v *= 1.5);
        }
        c.save(dir.path(), "codec").unwrap();
        let back = FrameCodec::load(dir.path(), "codec").unwrap();
        let v = synthetic_video(&SyntheticConfig::default(), 2);
        assert_eq!(c.encode_frame(&v.frames[0]).unwrap(), back.encode_frame(&v.frames[0]).unwrap());
    }
}
